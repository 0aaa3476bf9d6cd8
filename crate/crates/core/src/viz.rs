//! Overlay rendering: detected lanes drawn as 3-px colored polylines over a
//! frame, written as binary P6.

use crate::array::RealArray;
use crate::error::Result;
use crate::lane::Lane;
use crate::metrics::rasterize_lane;
use crate::ppm;
use std::path::Path;

const PALETTE: [[u8; 3]; 6] = [
    [66, 214, 94],
    [255, 99, 71],
    [65, 155, 255],
    [255, 215, 64],
    [208, 108, 255],
    [64, 224, 208],
];

fn to_rgb8(frame: &RealArray) -> (usize, usize, Vec<u8>) {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let rgb = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (h, w, rgb)
}

/// Draw lanes over the frame and write the result as P6. With no lanes the
/// written pixels are exactly the quantized input frame.
pub fn render_overlay(frame: &RealArray, lanes: &[Lane], path: &Path) -> Result<()> {
    let (h, w, mut rgb) = to_rgb8(frame);
    for (i, lane) in lanes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mask = rasterize_lane(lane, 3.0, h, w);
        for y in 0..h {
            for x in 0..w {
                if mask.contains(x, y) {
                    rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    ppm::write_ppm(path, w, h, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_lanes_writes_the_input_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let frame = RealArray::fill_with(vec![8, 6, 3], || 0.25);
        let path = dir.path().join("o.ppm");
        render_overlay(&frame, &[], &path).unwrap();
        let (w, h, rgb) = ppm::read_ppm(&path).unwrap();
        assert_eq!((w, h), (6, 8));
        let expect: Vec<u8> = frame
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        assert_eq!(rgb, expect);
    }

    #[test]
    fn vertical_lane_recolors_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let frame = RealArray::zeros(vec![16, 16, 3]);
        let lane = Lane::new((0..16).map(|y| (8.0, y as f64)).collect(), 1.0).unwrap();
        let path = dir.path().join("o.ppm");
        render_overlay(&frame, &[lane], &path).unwrap();
        let (_, _, rgb) = ppm::read_ppm(&path).unwrap();
        // columns within 1.5 px of x=8 are painted, others untouched
        for y in 0..16usize {
            for x in 0..16usize {
                let px = &rgb[(y * 16 + x) * 3..(y * 16 + x) * 3 + 3];
                if (x as f64 - 8.0).abs() <= 1.5 {
                    assert_eq!(px, &PALETTE[0]);
                } else {
                    assert_eq!(px, &[0, 0, 0]);
                }
            }
        }
    }

    #[test]
    fn written_file_reparses_with_original_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let frame = RealArray::fill_with(vec![10, 12, 3], || 0.5);
        let lane = Lane::new(vec![(2.0, 1.0), (9.0, 8.0)], 0.9).unwrap();
        let path = dir.path().join("o.ppm");
        render_overlay(&frame, &[lane], &path).unwrap();
        let (w, h, rgb) = ppm::read_ppm(&path).unwrap();
        assert_eq!((w, h), (12, 10));
        assert_eq!(rgb.len(), 12 * 10 * 3);
    }
}
