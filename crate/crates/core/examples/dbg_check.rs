use laneflow::array::RealArray;
use laneflow::bootstrap::{bootstrap_state_nodes, id_embedding_node, rasterize_lanes};
use laneflow::config::RunConfig;
use laneflow::gradcheck::{grad_check, DEFAULT_STEP};
use laneflow::lane::Lane;
use laneflow::lanehead::{build_basis, decode, default_row_positions, DecoderHeadIds};
use laneflow::losses::{focal_loss_node, liou_loss_node, LIoUConfig};
use laneflow::model::Model;
use laneflow::rng::SplitMix64;
use laneflow::train::build_targets;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or("full".into());
    let cfg = RunConfig {
        image_h: 32, image_w: 32, channels: 8, heads: 4, basis_k: 2, basis_n: 6,
        ..Default::default()
    };
    let library: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..6).map(|j| ((i * 3 + j) % 5) as f64 - 2.0).collect())
        .collect();
    let basis = build_basis(&library, 2, default_row_positions(6)).unwrap();
    let mut rng = SplitMix64::new(0x57A7E);
    let mut model = Model::new(cfg.clone(), basis, &mut rng).unwrap();
    let boost: f64 = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(1.0);
    let head_boost: f64 = std::env::args().nth(3).map(|v| v.parse().unwrap()).unwrap_or(1.0);
    let e_px: f64 = std::env::args().nth(4).map(|v| v.parse().unwrap()).unwrap_or(12.0);
    model.visit_mut(&mut |name, arr| {
        if name.starts_with("tca") || name.starts_with("bootstrap.phi") {
            for v in arr.data_mut() { *v *= boost; }
        }
        if name == "heads.coef_kernel" {
            for v in arr.data_mut() { *v *= head_boost; }
        }
        if name == "heads.prob_kernel" {
            let pb: f64 = std::env::var("PROB_BOOST").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
            for v in arr.data_mut() { *v *= pb; }
        }
        if name.starts_with("encoder") && name.ends_with("kernel") {
            let eb: f64 = std::env::var("ENC_BOOST").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
            for v in arr.data_mut() { *v *= eb; }
        }
    });
    let img_amp: f64 = std::env::var("IMG_AMP").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let features = RealArray::fill_with(vec![4, 4, 8], || rng.uniform(-img_amp, img_amp));
    let gt = vec![
        Lane::new(vec![(10.37, 13.0), (12.11, 19.0), (13.29, 25.0), (14.53, 31.0)], 1.0).unwrap(),
        Lane::new(vec![(22.41, 13.0), (21.17, 19.0), (20.63, 25.0), (19.89, 31.0)], 1.0).unwrap(),
    ];
    let targets = build_targets(&gt, &cfg);
    let ys: Vec<f64> = model.basis.row_positions.iter().map(|&r| r * 31.0).collect();
    let gt_xs: Vec<Vec<f64>> = gt.iter().map(|l| l.resample_at(&ys)).collect();
    let mask = rasterize_lanes(&gt, 32, 32);
    let params: Vec<(String, RealArray)> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("encoder"))
        .collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let (gh, gw) = cfg.feature_grid();
    let liou_cfg = LIoUConfig { extension_e: e_px };
    let focal_cfg = cfg.focal;
    let u = model.basis.u.clone();
    let x_mean = model.basis.x_mean.clone();
    let cell_w = cfg.cell_width();
    let cells = targets.cells.clone();
    let prob_target = targets.prob_target.clone();
    let mode2 = mode.clone();

    let report = grad_check(&params, DEFAULT_STEP, move |tape, ids| {
        let mut by_name = std::collections::HashMap::new();
        for (name, &id) in names.iter().zip(ids) { by_name.insert(name.clone(), id); }
        let g = |n: &str| *by_name.get(n).unwrap();
        let attn = |p: &str| laneflow::attention::AttentionWeightIds {
            wq: (0..4).map(|h| g(&format!("{p}.wq{h}"))).collect(),
            wk: (0..4).map(|h| g(&format!("{p}.wk{h}"))).collect(),
            wv: (0..4).map(|h| g(&format!("{p}.wv{h}"))).collect(),
            wo: g(&format!("{p}.wo")), biases: None,
        };
        let tca = laneflow::tca::TcaIds { self_attn: attn("tca.self"), phi: g("tca.phi"),
            adjacent: attn("tca.adjacent"), accumulative: attn("tca.accumulative") };
        let head_ids = DecoderHeadIds { prob_kernel: g("heads.prob_kernel"), prob_bias: g("heads.prob_bias"),
            coef_kernel: g("heads.coef_kernel"), coef_bias: g("heads.coef_bias") };
        let f2 = tape.leaf(features.clone());
        let e = id_embedding_node(tape, &mask, (gh, gw), g("bootstrap.id_embed.kernel"), g("bootstrap.id_embed.bias"))?;
        let boot = bootstrap_state_nodes(tape, f2, Some(e), tca.phi, g("bootstrap.phi_prime"))?;
        let step = laneflow::tca::build_step_with_branches(tape, f2, boot, 1, &tca, Default::default())?;
        if mode2 == "boot-msq" {
            let a = tape.mul(boot.k_prev, boot.k_prev)?;
            let b = tape.mul(boot.v_prev, boot.v_prev)?;
            let (sa, sb) = (tape.mean(a), tape.mean(b));
            return tape.add(sa, sb);
        }
        if mode2 == "step-msq" { let sq = tape.mul(step.fhat, step.fhat)?; return Ok(tape.mean(sq)); }
        let maps = decode(tape, step.fhat, &head_ids)?;
        if mode2 == "decode-msq" {
            let a = tape.mul(maps.prob, maps.prob)?;
            let b = tape.mul(maps.coef, maps.coef)?;
            let (sa, sb) = (tape.mean(a), tape.mean(b));
            return tape.add(sa, sb);
        }
        let focal = focal_loss_node(tape, maps.prob, &prob_target, &focal_cfg)?;
        if mode2 == "focal" { return Ok(focal); }
        let coef_flat = tape.reshape(maps.coef, vec![gh * gw, 2])?;
        let u_const = tape.leaf(u.clone());
        let mut terms = Vec::new();
        let mut min_gap = f64::INFINITY;
        for &(r, c) in &cells {
            let mut onehot = vec![0.0; gh * gw];
            onehot[r * gw + c] = 1.0;
            let sel = tape.leaf(RealArray::new(vec![1, gh * gw], onehot));
            let coeffs = tape.matmul(sel, coef_flat)?;
            let anchor = (c as f64 + 0.5) * cell_w;
            let proj = tape.matmul(coeffs, u_const)?;
            let offset: Vec<f64> = x_mean.iter().map(|m| m + anchor).collect();
            let xs = tape.affine_const(proj, vec![1.0; 6], offset)?;
            let gi = if c < gw / 2 { 0 } else { 1 };
            for (a, b) in tape.value(xs).data().iter().zip(&gt_xs[gi]) {
                min_gap = min_gap.min((a - b).abs());
            }
            terms.push(liou_loss_node(tape, xs, &gt_xs[gi], &liou_cfg)?);
        }
        if std::env::var("PRINT_GAP").is_ok() {
            eprintln!("min kink gap: {min_gap:e}");
            std::env::remove_var("PRINT_GAP");
        }
        let mut liou = terms[0];
        for &t in &terms[1..] { liou = tape.add(liou, t)?; }
        let liou = tape.scale(liou, 1.0 / terms.len() as f64);
        if mode2 == "liou" { return Ok(liou); }
        tape.add(focal, liou)
    }).unwrap();
    println!("{mode}: max_rel_err {:e} worst {:?}", report.max_rel_err, report.worst);
}
