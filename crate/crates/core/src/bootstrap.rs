//! Video-start initialization.
//!
//! The first frame is detected image-style straight off the encoder. Its
//! lanes are rasterized into a 1-pixel mask, embedded by a small convolution,
//! and folded into the second frame's value tokens; that hand-built state
//! plays the previous-frame role when the aggregation network refines frame
//! two. From the third frame onward the ordinary recurrence carries the
//! state and no mask is consulted.

use crate::array::{Padding, RealArray};
use crate::attention::TokenMatrix;
use crate::error::{Error, Result};
use crate::lane::Lane;
use crate::lanehead::{detect_lanes, DecoderHeads, DetectionParams, LaneBasis};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tca::{tokens_of, StateNodes, TemporalState};

/// Binary H×W lane mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneMask {
    h: usize,
    w: usize,
    grid: Vec<u8>,
}

impl LaneMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        LaneMask {
            h,
            w,
            grid: vec![0; h * w],
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.grid[y * self.w + x] != 0
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.grid
    }
}

/// Trace a polyline's pixels with Bresenham segments between consecutive
/// points (rounded to pixel centers, clamped into the grid). Consecutive
/// duplicates are dropped; the trace is ordered along the polyline.
pub fn trace_polyline(points: &[(f64, f64)], h: usize, w: usize) -> Vec<(usize, usize)> {
    let clamp = |x: f64, hi: usize| -> i64 {
        (x.round() as i64).clamp(0, hi as i64 - 1)
    };
    let px: Vec<(i64, i64)> = points
        .iter()
        .map(|&(x, y)| (clamp(x, w), clamp(y, h)))
        .collect();
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut push = |x: i64, y: i64, out: &mut Vec<(usize, usize)>| {
        let p = (x as usize, y as usize);
        if out.last() != Some(&p) {
            out.push(p);
        }
    };
    if px.len() == 1 {
        push(px[0].0, px[0].1, &mut out);
        return out;
    }
    for seg in px.windows(2) {
        let (mut x0, mut y0) = seg[0];
        let (x1, y1) = seg[1];
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            push(x0, y0, &mut out);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
    out
}

/// Union of all lanes drawn at 1-pixel width. An empty lane list yields the
/// all-zero mask.
pub fn rasterize_lanes(lanes: &[Lane], h: usize, w: usize) -> LaneMask {
    let mut mask = LaneMask::zeros(h, w);
    for lane in lanes {
        for (x, y) in trace_polyline(lane.points(), h, w) {
            mask.grid[y * w + x] = 1;
        }
    }
    mask
}

/// The 3×3 single-channel convolution that embeds a lane mask into feature
/// space. Bias starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IDEmbedKernel {
    pub kernel: RealArray, // 3×3×1×C
    pub bias: RealArray,   // [C]
}

impl IDEmbedKernel {
    pub fn zeros(channels: usize) -> Self {
        IDEmbedKernel {
            kernel: RealArray::zeros(vec![3, 3, 1, channels]),
            bias: RealArray::zeros(vec![channels]),
        }
    }

    pub fn random(channels: usize, rng: &mut SplitMix64) -> Self {
        let s = 1.0 / 3.0;
        IDEmbedKernel {
            kernel: RealArray::fill_with(vec![3, 3, 1, channels], || rng.uniform(-s, s)),
            bias: RealArray::zeros(vec![channels]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &RealArray)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut RealArray)) {
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Area-average a binary mask down to the feature grid. The image extents
/// must be integer multiples of the grid extents.
pub fn downsample_mask(mask: &LaneMask, grid_h: usize, grid_w: usize) -> Result<RealArray> {
    let (h, w) = mask.size();
    if grid_h == 0 || grid_w == 0 || h % grid_h != 0 || w % grid_w != 0 {
        return Err(Error::BadShape {
            op: "downsample_mask",
            shape: vec![h, w],
            reason: format!("not divisible by feature grid {grid_h}×{grid_w}"),
        });
    }
    let (fy, fx) = (h / grid_h, w / grid_w);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = vec![0.0; grid_h * grid_w];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut acc = 0.0;
            for dy in 0..fy {
                let row = (gy * fy + dy) * w + gx * fx;
                for dx in 0..fx {
                    acc += mask.grid[row + dx] as f64;
                }
            }
            out[gy * grid_w + gx] = acc * inv;
        }
    }
    Ok(RealArray::new(vec![grid_h, grid_w, 1], out))
}

/// Embed a lane mask into feature space on the tape: area-average down to
/// the feature grid, then a same-padded 3×3 convolution to C channels.
pub fn id_embedding_node(
    tape: &mut Tape,
    mask: &LaneMask,
    grid: (usize, usize),
    kernel: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let small = downsample_mask(mask, grid.0, grid.1)?;
    let m = tape.leaf(small);
    let conv = tape.conv2d(m, kernel, 1, Padding::Same)?;
    tape.add_bias(conv, bias)
}

/// Value-level mask embedding.
pub fn id_embedding(mask: &LaneMask, k: &IDEmbedKernel, grid: (usize, usize)) -> Result<RealArray> {
    let mut tape = Tape::new();
    let kernel = tape.leaf(k.kernel.clone());
    let bias = tape.leaf(k.bias.clone());
    let e = id_embedding_node(&mut tape, mask, grid, kernel, bias)?;
    Ok(tape.value(e).clone())
}

/// Build the second frame's state on an existing tape from the frame's own
/// features and an optional mask embedding:
/// k = φ(tokens(f₂)), v = φ′(tokens(f₂ + E)), zero accumulative query.
///
/// Returned nodes are live, so during training the projections and the mask
/// kernel receive gradients through the second frame's loss.
pub fn bootstrap_state_nodes(
    tape: &mut Tape,
    f2: NodeId,
    embedding: Option<NodeId>,
    phi: NodeId,
    phi_prime: NodeId,
) -> Result<StateNodes> {
    let shape = tape.value(f2).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "bootstrap_state_nodes",
            shape,
            reason: "expected H×W×C features".into(),
        });
    }
    let (hw, c) = (shape[0] * shape[1], shape[2]);
    let f2_toks = tokens_of(tape, f2)?;
    let k = tape.matmul(f2_toks, phi)?;
    let v_in = match embedding {
        Some(e) => {
            let summed = tape.add(f2, e)?;
            tokens_of(tape, summed)?
        }
        None => f2_toks,
    };
    let v = tape.matmul(v_in, phi_prime)?;
    let q_acc = tape.leaf(RealArray::zeros(vec![hw, c]));
    Ok(StateNodes {
        k_prev: k,
        v_prev: v,
        q_acc,
    })
}

/// Value-level second-frame bootstrap returning a populated state
/// (frame_index = 1) ready to refine frame two.
pub fn bootstrap_second_frame(
    f2: &RealArray,
    embedding: Option<&RealArray>,
    phi: &RealArray,
    phi_prime: &RealArray,
) -> Result<TemporalState> {
    let mut tape = Tape::new();
    let f = tape.leaf(f2.clone());
    let e = embedding.map(|e| tape.leaf(e.clone()));
    let phi_id = tape.leaf(phi.clone());
    let phi_prime_id = tape.leaf(phi_prime.clone());
    let nodes = bootstrap_state_nodes(&mut tape, f, e, phi_id, phi_prime_id)?;
    TemporalState::new(
        TokenMatrix::new(tape.value(nodes.k_prev).clone())?,
        TokenMatrix::new(tape.value(nodes.v_prev).clone())?,
        TokenMatrix::new(tape.value(nodes.q_acc).clone())?,
        1,
    )
}

/// First-frame protocol: the lane head runs directly on the encoder
/// features; no aggregation, no temporal state yet.
pub fn first_frame_detect(
    f1: &RealArray,
    heads: &DecoderHeads,
    basis: &LaneBasis,
    params: &DetectionParams,
) -> Result<(Vec<Lane>, RealArray)> {
    let lanes = detect_lanes(f1, heads, basis, params)?;
    Ok((lanes, f1.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertical_lane_fills_one_column() {
        let h = 32;
        let lane = Lane::new(
            (0..h).map(|y| (10.0, y as f64)).collect(),
            1.0,
        )
        .unwrap();
        let mask = rasterize_lanes(&[lane], h, 32);
        assert_eq!(mask.count(), h);
        for y in 0..h {
            assert!(mask.get(10, y));
        }
    }

    #[test]
    fn empty_lane_list_is_zero_mask() {
        let mask = rasterize_lanes(&[], 16, 16);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn diagonal_matches_distance_field_oracle() {
        // integer-aligned diagonal: the 1-px trace equals the set of pixels
        // within 0.5 of the segment
        let lane = Lane::new(vec![(0.0, 0.0), (15.0, 15.0)], 1.0).unwrap();
        let mask = rasterize_lanes(&[lane.clone()], 16, 16);
        for y in 0..16usize {
            for x in 0..16usize {
                let d2 = crate::metrics::dist2_point_segment(
                    x as f64,
                    y as f64,
                    (0.0, 0.0),
                    (15.0, 15.0),
                );
                let inside = d2 <= 0.25;
                assert_eq!(mask.get(x, y), inside, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn retracing_own_pixels_is_idempotent() {
        let lane = Lane::new(
            vec![(2.0, 0.0), (9.0, 10.0), (14.0, 25.0), (8.0, 31.0)],
            1.0,
        )
        .unwrap();
        let mask = rasterize_lanes(&[lane.clone()], 32, 16);
        let traced = trace_polyline(lane.points(), 32, 16);
        let pts: Vec<(f64, f64)> = traced.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        // re-rasterize from the traced pixel chain
        let mut mask2 = LaneMask::zeros(32, 16);
        for (x, y) in trace_polyline(&pts, 32, 16) {
            mask2.grid[y * 16 + x] = 1;
        }
        assert_eq!(mask, mask2);
    }

    #[test]
    fn zero_mask_zero_bias_embeds_to_zero() {
        let mut rng = SplitMix64::new(121);
        let k = IDEmbedKernel::random(6, &mut rng);
        let mask = LaneMask::zeros(16, 24);
        let e = id_embedding(&mask, &k, (4, 6)).unwrap();
        assert_eq!(e.shape(), &[4, 6, 6]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_mask_with_averaging_kernel_is_constant_inside() {
        // all-ones mask, kernel that averages its 3×3 support: interior
        // cells all see the same value
        let mut mask = LaneMask::zeros(16, 16);
        for v in mask.grid.iter_mut() {
            *v = 1;
        }
        let mut k = IDEmbedKernel::zeros(2);
        for i in 0..9 {
            k.kernel.data_mut()[i * 2] = 1.0 / 9.0;
            k.kernel.data_mut()[i * 2 + 1] = 2.0;
        }
        let e = id_embedding(&mask, &k, (4, 4)).unwrap();
        for gy in 1..3 {
            for gx in 1..3 {
                let v0 = e.data()[(gy * 4 + gx) * 2];
                let v1 = e.data()[(gy * 4 + gx) * 2 + 1];
                assert!((v0 - 1.0).abs() < 1e-12);
                assert!((v1 - 18.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_mask_matches_sliding_window_oracle() {
        let mut rng = SplitMix64::new(122);
        let mut mask = LaneMask::zeros(8, 8);
        for v in mask.grid.iter_mut() {
            *v = (rng.next_f64() < 0.3) as u8;
        }
        let k = IDEmbedKernel::random(3, &mut rng);
        let e = id_embedding(&mask, &k, (4, 4)).unwrap();
        // oracle: downsample by 2×2 average, then direct sliding window
        let mut small = vec![0.0; 16];
        for gy in 0..4 {
            for gx in 0..4 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += mask.grid[(gy * 2 + dy) * 8 + gx * 2 + dx] as f64;
                    }
                }
                small[gy * 4 + gx] = acc / 4.0;
            }
        }
        for gy in 0..4i64 {
            for gx in 0..4i64 {
                for co in 0..3 {
                    let mut acc = k.bias.data()[co];
                    for di in -1..=1i64 {
                        for dj in -1..=1i64 {
                            let (iy, ix) = (gy + di, gx + dj);
                            if iy < 0 || ix < 0 || iy >= 4 || ix >= 4 {
                                continue;
                            }
                            let kv = k.kernel.data()
                                [(((di + 1) * 3 + (dj + 1)) as usize) * 3 + co];
                            acc += small[(iy * 4 + ix) as usize] * kv;
                        }
                    }
                    let got = e.data()[((gy * 4 + gx) as usize) * 3 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mask_grid_mismatch_is_an_error() {
        let mask = LaneMask::zeros(10, 10);
        let k = IDEmbedKernel::zeros(2);
        assert!(id_embedding(&mask, &k, (3, 3)).is_err());
    }

    #[test]
    fn bootstrap_state_identity_cases() {
        let mut rng = SplitMix64::new(123);
        let f2 = RealArray::fill_with(vec![2, 3, 4], || rng.uniform(-1.0, 1.0));
        let eye = {
            let mut m = RealArray::zeros(vec![4, 4]);
            for i in 0..4 {
                m.data_mut()[i * 4 + i] = 1.0;
            }
            m
        };
        let phi = RealArray::fill_with(vec![4, 4], || rng.uniform(-1.0, 1.0));
        // no embedding + identity φ′: values are exactly the frame tokens
        let state = bootstrap_second_frame(&f2, None, &phi, &eye).unwrap();
        assert_eq!(state.v_prev.as_array().data(), f2.data());
        assert_eq!(state.frame_index, 1);
        assert!(state.is_populated());
        // accumulative query starts at exactly zero
        assert!(state.q_acc.as_array().data().iter().all(|&v| v == 0.0));
        assert_eq!(state.q_acc.as_array().shape(), &[6, 4]);
    }

    #[test]
    fn bootstrap_matches_compositional_oracle() {
        let mut rng = SplitMix64::new(124);
        let f2 = RealArray::fill_with(vec![2, 2, 3], || rng.uniform(-1.0, 1.0));
        let e = RealArray::fill_with(vec![2, 2, 3], || rng.uniform(-1.0, 1.0));
        let phi = RealArray::fill_with(vec![3, 3], || rng.uniform(-1.0, 1.0));
        let phi_prime = RealArray::fill_with(vec![3, 3], || rng.uniform(-1.0, 1.0));
        let state = bootstrap_second_frame(&f2, Some(&e), &phi, &phi_prime).unwrap();
        // k = φ(tokens f2), v = φ'(tokens(f2+E)) by explicit loops
        for t in 0..4 {
            for j in 0..3 {
                let mut k_acc = 0.0;
                let mut v_acc = 0.0;
                for p in 0..3 {
                    k_acc += f2.data()[t * 3 + p] * phi.data()[p * 3 + j];
                    v_acc += (f2.data()[t * 3 + p] + e.data()[t * 3 + p])
                        * phi_prime.data()[p * 3 + j];
                }
                assert!((state.k_prev.as_array().data()[t * 3 + j] - k_acc).abs() < 1e-12);
                assert!((state.v_prev.as_array().data()[t * 3 + j] - v_acc).abs() < 1e-12);
            }
        }
        // state satisfies the carry invariants
        assert_eq!(state.byte_size(), 3 * 4 * 3 * 8);
    }
}
