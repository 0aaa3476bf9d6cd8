//! Lane decoding head.
//!
//! Refined features pass through two 3×3 convolutional heads: a one-channel
//! head squashed to a per-cell lane probability, and a K-channel head holding
//! coefficients over a low-rank lane shape basis. Every cell above the
//! probability threshold proposes a full lane: x = mean shape + basis
//! combination + the cell's column center. NMS on rasterized IoU keeps the
//! strongest non-overlapping proposals.
//!
//! The basis is data driven: the top-K right singular vectors of a library of
//! anchored lane x-offset vectors, computed by cyclic Jacobi on the Gram
//! matrix.

use crate::array::{Padding, RealArray};
use crate::error::{Error, Result};
use crate::lane::Lane;
use crate::metrics::{mask_iou, rasterize_lane, PixelMask};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};

/// Orthonormal K×N basis over lane x-offset vectors sampled at N fixed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneBasis {
    /// K×N; rows are orthonormal.
    pub u: RealArray,
    /// Singular values of the centered library, one per basis row.
    pub singular_values: Vec<f64>,
    /// N vertical sample positions, normalized to [0, 1].
    pub row_positions: Vec<f64>,
    /// Library mean offset, length N.
    pub x_mean: Vec<f64>,
}

/// Default sample rows: N points spanning the lower 60% of the image.
pub fn default_row_positions(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.4 + 0.6 * i as f64 / (n - 1) as f64)
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric n×n matrix.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-15 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let evals = (0..n).map(|i| a[i * n + i]).collect();
    (evals, v)
}

/// Build a K-row basis from a library of length-N x-offset vectors.
///
/// The library is centered by its mean (stored as `x_mean`); the basis rows
/// are the top-K right singular vectors of the centered matrix. When the
/// library rank is below K the remaining rows are an orthonormal completion
/// and a warning is logged.
pub fn build_basis(library: &[Vec<f64>], k: usize, row_positions: Vec<f64>) -> Result<LaneBasis> {
    let n = row_positions.len();
    if library.len() < k || k == 0 {
        return Err(Error::Contract {
            op: "build_basis",
            reason: format!("library size {} must be at least K = {k} > 0", library.len()),
        });
    }
    for v in library {
        if v.len() != n {
            return Err(Error::Contract {
                op: "build_basis",
                reason: format!("library vector length {} vs {} rows", v.len(), n),
            });
        }
    }
    let m = library.len();
    let mut x_mean = vec![0.0; n];
    for v in library {
        for (a, b) in x_mean.iter_mut().zip(v) {
            *a += b;
        }
    }
    for a in x_mean.iter_mut() {
        *a /= m as f64;
    }
    // Gram matrix of the centered library
    let mut gram = vec![0.0; n * n];
    for v in library {
        let c: Vec<f64> = v.iter().zip(&x_mean).map(|(a, b)| a - b).collect();
        for i in 0..n {
            if c[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                gram[i * n + j] += c[i] * c[j];
            }
        }
    }
    let (evals, vecs) = jacobi_eigen(gram, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap().then(a.cmp(&b)));

    let max_ev = evals[order[0]].max(0.0);
    let rank_tol = max_ev * 1e-12;
    let mut u = vec![0.0; k * n];
    let mut singular_values = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let ev = evals[idx].max(0.0);
        if ev <= rank_tol && max_ev > 0.0 {
            log::warn!(
                "build_basis: component {row} is below numerical rank; padding with orthonormal completion"
            );
        }
        singular_values.push(ev.sqrt());
        // canonical sign: largest-magnitude entry positive
        let mut best = 0;
        for i in 1..n {
            if vecs[i * n + idx].abs() > vecs[best * n + idx].abs() {
                best = i;
            }
        }
        let sign = if vecs[best * n + idx] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[row * n + i] = sign * vecs[i * n + idx];
        }
    }
    Ok(LaneBasis {
        u: RealArray::new(vec![k, n], u),
        singular_values,
        row_positions,
        x_mean,
    })
}

impl LaneBasis {
    pub fn k(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.u.shape()[1]
    }

    /// Max |U·Uᵀ - I| entry; the basis invariant keeps this below 1e-10.
    pub fn orthonormality_defect(&self) -> f64 {
        let (k, n) = (self.k(), self.n());
        let mut worst: f64 = 0.0;
        for a in 0..k {
            for b in 0..k {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += self.u.data()[a * n + i] * self.u.data()[b * n + i];
                }
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Coefficients of an absolute x-vector relative to an anchor column.
    pub fn project(&self, xs: &[f64], anchor: f64) -> Vec<f64> {
        let (k, n) = (self.k(), self.n());
        assert_eq!(xs.len(), n, "x vector length mismatch");
        let centered: Vec<f64> = xs
            .iter()
            .zip(&self.x_mean)
            .map(|(x, m)| x - m - anchor)
            .collect();
        let mut coeffs = vec![0.0; k];
        for (row, c) in coeffs.iter_mut().enumerate() {
            for i in 0..n {
                *c += self.u.data()[row * n + i] * centered[i];
            }
        }
        coeffs
    }

    /// Absolute x-vector from coefficients and an anchor column.
    pub fn reconstruct_xs(&self, coeffs: &[f64], anchor: f64) -> Vec<f64> {
        let (k, n) = (self.k(), self.n());
        assert_eq!(coeffs.len(), k, "coefficient length mismatch");
        let mut xs = vec![0.0; n];
        for (i, x) in xs.iter_mut().enumerate() {
            let mut acc = self.x_mean[i] + anchor;
            for (row, c) in coeffs.iter().enumerate() {
                acc += self.u.data()[row * n + i] * c;
            }
            *x = acc;
        }
        xs
    }

    /// Worst-case reconstruction residual of projecting then reconstructing.
    pub fn round_trip_error(&self, xs: &[f64], anchor: f64) -> f64 {
        let coeffs = self.project(xs, anchor);
        let back = self.reconstruct_xs(&coeffs, anchor);
        xs.iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-cell probability of a lane anchored at that cell, in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    p: RealArray,
}

impl ProbabilityMap {
    pub fn new(p: RealArray) -> Result<Self> {
        if p.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "ProbabilityMap",
                shape: p.shape().to_vec(),
                reason: "expected H'×W'".into(),
            });
        }
        if !p.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Contract {
                op: "ProbabilityMap",
                reason: "entries must lie in [0,1]".into(),
            });
        }
        Ok(ProbabilityMap { p })
    }

    pub fn as_array(&self) -> &RealArray {
        &self.p
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.p.shape()[0], self.p.shape()[1])
    }
}

/// Per-cell K-vector of basis coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    c: RealArray,
}

impl ParameterMap {
    pub fn new(c: RealArray) -> Result<Self> {
        if c.shape().len() != 3 {
            return Err(Error::BadShape {
                op: "ParameterMap",
                shape: c.shape().to_vec(),
                reason: "expected H'×W'×K".into(),
            });
        }
        Ok(ParameterMap { c })
    }

    pub fn as_array(&self) -> &RealArray {
        &self.c
    }

    pub fn coeffs_at(&self, row: usize, col: usize) -> &[f64] {
        let (w, k) = (self.c.shape()[1], self.c.shape()[2]);
        let base = (row * w + col) * k;
        &self.c.data()[base..base + k]
    }
}

/// Parameters of the two decoding heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHeads {
    pub prob_kernel: RealArray, // 3×3×C×1
    pub prob_bias: RealArray,   // [1]
    pub coef_kernel: RealArray, // 3×3×C×K
    pub coef_bias: RealArray,   // [K]
}

impl DecoderHeads {
    pub fn zeros(channels: usize, k: usize) -> Self {
        DecoderHeads {
            prob_kernel: RealArray::zeros(vec![3, 3, channels, 1]),
            prob_bias: RealArray::zeros(vec![1]),
            coef_kernel: RealArray::zeros(vec![3, 3, channels, k]),
            coef_bias: RealArray::zeros(vec![k]),
        }
    }

    pub fn random(channels: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let s = 1.0 / (9.0 * channels as f64).sqrt();
        let mut heads = DecoderHeads::zeros(channels, k);
        heads.prob_kernel = RealArray::fill_with(vec![3, 3, channels, 1], || rng.uniform(-s, s));
        heads.coef_kernel = RealArray::fill_with(vec![3, 3, channels, k], || rng.uniform(-s, s));
        // bias the probability head toward the negative class so the focal
        // term starts calm on mostly-empty grids
        heads.prob_bias.data_mut()[0] = -2.9444389791664403; // logit of 0.05
        heads
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &RealArray)) {
        f(format!("{prefix}.prob_kernel"), &self.prob_kernel);
        f(format!("{prefix}.prob_bias"), &self.prob_bias);
        f(format!("{prefix}.coef_kernel"), &self.coef_kernel);
        f(format!("{prefix}.coef_bias"), &self.coef_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut RealArray)) {
        f(format!("{prefix}.prob_kernel"), &mut self.prob_kernel);
        f(format!("{prefix}.prob_bias"), &mut self.prob_bias);
        f(format!("{prefix}.coef_kernel"), &mut self.coef_kernel);
        f(format!("{prefix}.coef_bias"), &mut self.coef_bias);
    }
}

/// Tape ids of the registered decoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoderHeadIds {
    pub prob_kernel: NodeId,
    pub prob_bias: NodeId,
    pub coef_kernel: NodeId,
    pub coef_bias: NodeId,
}

impl DecoderHeads {
    pub fn register(&self, tape: &mut Tape) -> DecoderHeadIds {
        DecoderHeadIds {
            prob_kernel: tape.leaf(self.prob_kernel.clone()),
            prob_bias: tape.leaf(self.prob_bias.clone()),
            coef_kernel: tape.leaf(self.coef_kernel.clone()),
            coef_bias: tape.leaf(self.coef_bias.clone()),
        }
    }
}

/// Tape nodes of the decoded maps: probabilities (H'×W') and coefficients
/// (H'×W'×K).
#[derive(Debug, Clone, Copy)]
pub struct DecodedMaps {
    pub prob: NodeId,
    pub coef: NodeId,
}

/// Run both decoding heads on refined features (H'×W'×C).
pub fn decode(tape: &mut Tape, fhat: NodeId, heads: &DecoderHeadIds) -> Result<DecodedMaps> {
    let shape = tape.value(fhat).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "decode",
            shape,
            reason: "expected H'×W'×C features".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let p_conv = tape.conv2d(fhat, heads.prob_kernel, 1, Padding::Same)?;
    let p_biased = tape.add_bias(p_conv, heads.prob_bias)?;
    let p_logit = tape.reshape(p_biased, vec![h, w])?;
    let prob = tape.sigmoid(p_logit);
    let c_conv = tape.conv2d(fhat, heads.coef_kernel, 1, Padding::Same)?;
    let coef = tape.add_bias(c_conv, heads.coef_bias)?;
    Ok(DecodedMaps { prob, coef })
}

/// Value-level decode for inference paths.
pub fn decode_value(fhat: &RealArray, heads: &DecoderHeads) -> Result<(ProbabilityMap, ParameterMap)> {
    let mut tape = Tape::new();
    let f = tape.leaf(fhat.clone());
    let ids = heads.register(&mut tape);
    let maps = decode(&mut tape, f, &ids)?;
    let p = ProbabilityMap::new(tape.value(maps.prob).clone())?;
    let c = ParameterMap::new(tape.value(maps.coef).clone())?;
    Ok((p, c))
}

/// One proposal: a cell whose probability cleared the threshold.
#[derive(Debug, Clone)]
pub struct LaneCandidate {
    pub score: f64,
    pub coeffs: Vec<f64>,
    /// Cell's horizontal center in image pixels.
    pub anchor_column: f64,
    pub cell: (usize, usize),
}

/// One candidate per cell with P ≥ threshold, scanned row-major.
pub fn candidates(
    p: &ProbabilityMap,
    c: &ParameterMap,
    image_w: usize,
    prob_threshold: f64,
) -> Vec<LaneCandidate> {
    let (gh, gw) = p.grid();
    let cell_w = image_w as f64 / gw as f64;
    let mut out = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            let score = p.as_array().data()[row * gw + col];
            if score >= prob_threshold {
                out.push(LaneCandidate {
                    score,
                    coeffs: c.coeffs_at(row, col).to_vec(),
                    anchor_column: (col as f64 + 0.5) * cell_w,
                    cell: (row, col),
                });
            }
        }
    }
    out
}

/// Reconstruct a candidate into an image-space lane, clamped into bounds.
pub fn reconstruct(cand: &LaneCandidate, basis: &LaneBasis, h: usize, w: usize) -> Lane {
    let xs = basis.reconstruct_xs(&cand.coeffs, cand.anchor_column);
    let points: Vec<(f64, f64)> = xs
        .iter()
        .zip(&basis.row_positions)
        .map(|(&x, &ry)| (x.clamp(0.0, (w - 1) as f64), ry * (h - 1) as f64))
        .collect();
    Lane::new(points, cand.score.clamp(0.0, 1.0)).expect("row positions are strictly increasing")
}

/// Candidate extraction and suppression settings for one detection pass.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DetectionParams {
    pub prob_threshold: f64,
    pub nms_iou: f64,
    /// Rasterization width used inside NMS (the metric lane width).
    pub nms_width: f64,
    pub image_h: usize,
    pub image_w: usize,
}

impl DetectionParams {
    pub fn new(image_h: usize, image_w: usize) -> Self {
        DetectionParams {
            prob_threshold: 0.5,
            nms_iou: 0.5,
            nms_width: 30.0,
            image_h,
            image_w,
        }
    }
}

/// Full decode → candidates → NMS pass over refined features.
pub fn detect_lanes(
    fhat: &RealArray,
    heads: &DecoderHeads,
    basis: &LaneBasis,
    params: &DetectionParams,
) -> Result<Vec<Lane>> {
    let (p, c) = decode_value(fhat, heads)?;
    let cands = candidates(&p, &c, params.image_w, params.prob_threshold);
    Ok(nms(
        &cands,
        basis,
        params.nms_iou,
        params.nms_width,
        params.image_h,
        params.image_w,
    ))
}

/// Greedy NMS: sort by score descending (ties keep scan order), keep a
/// candidate iff its rasterized IoU with every kept lane stays below the
/// threshold. Returns reconstructed lanes.
pub fn nms(
    cands: &[LaneCandidate],
    basis: &LaneBasis,
    iou_threshold: f64,
    width: f64,
    h: usize,
    w: usize,
) -> Vec<Lane> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .score
            .partial_cmp(&cands[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<(Lane, PixelMask)> = Vec::new();
    for idx in order {
        let lane = reconstruct(&cands[idx], basis, h, w);
        let mask = rasterize_lane(&lane, width, h, w);
        let overlaps = kept
            .iter()
            .any(|(_, km)| mask_iou(&mask, km) >= iou_threshold);
        if !overlaps {
            kept.push((lane, mask));
        }
    }
    kept.into_iter().map(|(l, _)| l).collect()
}
