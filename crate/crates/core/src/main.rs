fn main() {
    println!("laneflow cli placeholder");
}
