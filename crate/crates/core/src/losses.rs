//! Training objective: focal loss on the probability map plus a lane-overlap
//! (LIoU) loss on lanes reconstructed from the coefficient map.
//!
//! LIoU treats each lane as a band of half-width e per sample row. For a
//! shared row the overlap extent is 2e − |Δx| (possibly negative) and the
//! union extent is 2e + |Δx|; the loss is 1 − Σoverlap/Σunion, in [0, 2].

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::lane::Lane;
use crate::metrics::{rasterize_lane, EvalConfig};
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LIoUConfig {
    /// Half-width of the lane band per row, in the lanes' coordinate unit.
    pub extension_e: f64,
}

impl Default for LIoUConfig {
    fn default() -> Self {
        // three feature-grid cells at the default 8-px cell width
        LIoUConfig { extension_e: 24.0 }
    }
}

fn validate_focal_inputs(p: &RealArray, target: &RealArray) -> Result<()> {
    if p.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            left: p.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    if !p.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Contract {
            op: "focal_loss",
            reason: "probabilities must lie in [0,1]".into(),
        });
    }
    if !target.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Contract {
            op: "focal_loss",
            reason: "targets must be binary".into(),
        });
    }
    Ok(())
}

/// Mean over cells of −α (1 − p_t)^γ log(p_t) with p_t = p where the target
/// is 1 and 1 − p elsewhere, floored at 1e-12 before the log.
pub fn focal_loss(p: &RealArray, target: &RealArray, cfg: &FocalConfig) -> Result<f64> {
    validate_focal_inputs(p, target)?;
    let mut sum = 0.0;
    for (&pv, &tv) in p.data().iter().zip(target.data()) {
        let pt = if tv == 1.0 { pv } else { 1.0 - pv };
        let pt = pt.max(PROB_FLOOR);
        sum += -cfg.alpha * (1.0 - pt).powf(cfg.gamma) * pt.ln();
    }
    Ok(sum / p.len() as f64)
}

/// Focal loss as a tape node over a probability node.
pub fn focal_loss_node(
    tape: &mut Tape,
    p: NodeId,
    target: &RealArray,
    cfg: &FocalConfig,
) -> Result<NodeId> {
    validate_focal_inputs(tape.value(p), target)?;
    // p_t = (2t-1) ⊙ p + (1-t)
    let scale: Vec<f64> = target.data().iter().map(|t| 2.0 * t - 1.0).collect();
    let offset: Vec<f64> = target.data().iter().map(|t| 1.0 - t).collect();
    let pt = tape.affine_const(p, scale, offset)?;
    let pt = tape.clamp_min(pt, PROB_FLOOR);
    let log_pt = tape.ln(pt);
    let n = tape.value(pt).len();
    let one_minus = tape.affine_const(pt, vec![-1.0; n], vec![1.0; n])?;
    let weight = tape.pow_const(one_minus, cfg.gamma);
    let term = tape.mul(weight, log_pt)?;
    let scaled = tape.scale(term, -cfg.alpha);
    Ok(tape.mean(scaled))
}

/// Outcome of a LIoU evaluation; `degenerate` marks the no-shared-rows case
/// where the loss is defined neutrally as 1.
#[derive(Debug, Clone, Copy)]
pub struct LIoUOutcome {
    pub loss: f64,
    pub degenerate: bool,
}

fn shared_rows(pred: &Lane, gt: &Lane) -> Option<Vec<(f64, f64)>> {
    if pred.len() != gt.len() {
        return None;
    }
    let mut pairs = Vec::with_capacity(pred.len());
    for (p, g) in pred.points().iter().zip(gt.points()) {
        if (p.1 - g.1).abs() > 1e-9 {
            return None;
        }
        pairs.push((p.0, g.0));
    }
    Some(pairs)
}

/// Band-overlap loss between two lanes sampled at the same rows.
pub fn liou_loss_checked(pred: &Lane, gt: &Lane, cfg: &LIoUConfig) -> LIoUOutcome {
    let pairs = match shared_rows(pred, gt) {
        Some(p) => p,
        None => {
            log::warn!("liou_loss: lanes share no valid rows, returning neutral loss 1");
            return LIoUOutcome {
                loss: 1.0,
                degenerate: true,
            };
        }
    };
    let e = cfg.extension_e;
    let mut overlap = 0.0;
    let mut union = 0.0;
    for (px, gx) in pairs {
        let d = (px - gx).abs();
        overlap += 2.0 * e - d;
        union += 2.0 * e + d;
    }
    LIoUOutcome {
        loss: 1.0 - overlap / union,
        degenerate: false,
    }
}

pub fn liou_loss(pred: &Lane, gt: &Lane, cfg: &LIoUConfig) -> f64 {
    liou_loss_checked(pred, gt, cfg).loss
}

/// LIoU as a tape node. `pred_xs` is a [1×N] (or [N]) node of predicted x
/// positions; `gt_xs` are the ground-truth x positions at the same rows.
pub fn liou_loss_node(
    tape: &mut Tape,
    pred_xs: NodeId,
    gt_xs: &[f64],
    cfg: &LIoUConfig,
) -> Result<NodeId> {
    let n = tape.value(pred_xs).len();
    if n != gt_xs.len() {
        return Err(Error::ShapeMismatch {
            op: "liou_loss",
            left: tape.value(pred_xs).shape().to_vec(),
            right: vec![gt_xs.len()],
        });
    }
    let diff = tape.affine_const(pred_xs, vec![1.0; n], gt_xs.iter().map(|g| -g).collect())?;
    let dist = tape.abs(diff);
    let total = tape.sum(dist);
    let band = 2.0 * cfg.extension_e * n as f64;
    let neg = tape.scale(total, -1.0);
    let overlap = tape.add_scalar(neg, band);
    let union = tape.add_scalar(total, band);
    let iou = tape.div(overlap, union)?;
    let neg_iou = tape.scale(iou, -1.0);
    Ok(tape.add_scalar(neg_iou, 1.0))
}

/// Greedy one-to-one pred↔gt assignment by descending rasterized IoU (the
/// same matcher the evaluation uses, with no acceptance threshold).
pub fn assign_lanes(preds: &[Lane], gts: &[Lane], eval_cfg: &EvalConfig) -> Vec<(usize, usize)> {
    let pred_masks: Vec<_> = preds
        .iter()
        .map(|l| rasterize_lane(l, eval_cfg.lane_width, eval_cfg.image_h, eval_cfg.image_w))
        .collect();
    let gt_masks: Vec<_> = gts
        .iter()
        .map(|l| rasterize_lane(l, eval_cfg.lane_width, eval_cfg.image_h, eval_cfg.image_w))
        .collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, pm) in pred_masks.iter().enumerate() {
        for (gi, gm) in gt_masks.iter().enumerate() {
            pairs.push((crate::metrics::mask_iou(pm, gm), pi, gi));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut out = Vec::new();
    for (_, pi, gi) in pairs {
        if pred_used[pi] || gt_used[gi] {
            continue;
        }
        pred_used[pi] = true;
        gt_used[gi] = true;
        out.push((pi, gi));
    }
    out
}

/// Value-level loss breakdown for reporting and tests.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    /// Mean LIoU loss over matched pairs; 0 when nothing was matched.
    pub liou: f64,
    pub matched_pairs: usize,
}

/// Focal term plus mean LIoU over greedily matched pred/gt lanes. Unmatched
/// ground truth influences training only through the focal target map.
pub fn total_loss(
    p: &RealArray,
    target: &RealArray,
    pred_lanes: &[Lane],
    gt_lanes: &[Lane],
    focal_cfg: &FocalConfig,
    liou_cfg: &LIoUConfig,
    eval_cfg: &EvalConfig,
) -> Result<LossBreakdown> {
    let focal = focal_loss(p, target, focal_cfg)?;
    let matches = assign_lanes(pred_lanes, gt_lanes, eval_cfg);
    let mut liou = 0.0;
    for &(pi, gi) in &matches {
        liou += liou_loss(&pred_lanes[pi], &gt_lanes[gi], liou_cfg);
    }
    let liou = if matches.is_empty() {
        0.0
    } else {
        liou / matches.len() as f64
    };
    Ok(LossBreakdown {
        total: focal + liou,
        focal,
        liou,
        matched_pairs: matches.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::rng::SplitMix64;

    #[test]
    fn gamma_zero_alpha_one_is_binary_cross_entropy() {
        let cfg = FocalConfig {
            alpha: 1.0,
            gamma: 0.0,
        };
        let p = RealArray::new(vec![1, 1], vec![0.5]);
        let t = RealArray::new(vec![1, 1], vec![1.0]);
        let loss = focal_loss(&p, &t, &cfg).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = SplitMix64::new(71);
        for _ in 0..100 {
            let pv = rng.uniform(1e-6, 1.0 - 1e-6);
            let tv = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
            let p = RealArray::new(vec![1, 1], vec![pv]);
            let t = RealArray::new(vec![1, 1], vec![tv]);
            let loss = focal_loss(&p, &t, &cfg).unwrap();
            let bce = -(tv * pv.ln() + (1.0 - tv) * (1.0 - pv).ln());
            assert!((loss - bce).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        let cfg = FocalConfig::default();
        let p = RealArray::new(vec![1, 2], vec![1.0 - 1e-9, 1e-9]);
        let t = RealArray::new(vec![1, 2], vec![1.0, 0.0]);
        let loss = focal_loss(&p, &t, &cfg).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn focal_matches_direct_evaluation() {
        let cfg = FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        };
        let p = RealArray::new(vec![1, 1], vec![0.9]);
        let t = RealArray::new(vec![1, 1], vec![1.0]);
        let loss = focal_loss(&p, &t, &cfg).unwrap();
        let direct = -0.25 * (0.1f64).powi(2) * (0.9f64).ln();
        assert!((loss - direct).abs() < 1e-15);
    }

    #[test]
    fn focal_rejects_out_of_range_probabilities() {
        let cfg = FocalConfig::default();
        let p = RealArray::new(vec![1, 1], vec![1.5]);
        let t = RealArray::new(vec![1, 1], vec![1.0]);
        assert!(focal_loss(&p, &t, &cfg).is_err());
    }

    #[test]
    fn focal_is_monotone_in_pt() {
        let cfg = FocalConfig::default();
        let t = RealArray::new(vec![1, 1], vec![1.0]);
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let p = RealArray::new(vec![1, 1], vec![i as f64 / 100.0]);
            let loss = focal_loss(&p, &t, &cfg).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn focal_node_matches_value_version_and_finite_differences() {
        let cfg = FocalConfig::default();
        let mut rng = SplitMix64::new(72);
        let logits = RealArray::fill_with(vec![3, 4], || rng.uniform(-2.0, 2.0));
        let target = RealArray::fill_with(vec![3, 4], || if rng.next_f64() < 0.3 { 1.0 } else { 0.0 });

        // value equivalence through a sigmoid
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let p = tape.sigmoid(z);
        let node = focal_loss_node(&mut tape, p, &target, &cfg).unwrap();
        let via_value = focal_loss(tape.value(p), &target, &cfg).unwrap();
        assert!((tape.value(node).data()[0] - via_value).abs() < 1e-12);

        // gradient w.r.t. logits
        let t2 = target.clone();
        let report = grad_check(&[("z".into(), logits)], DEFAULT_STEP, move |tape, ids| {
            let p = tape.sigmoid(ids[0]);
            focal_loss_node(tape, p, &t2, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    fn lane_at(xs: &[f64], ys: &[f64]) -> Lane {
        Lane::new(
            xs.iter().zip(ys).map(|(&x, &y)| (x, y)).collect(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn identical_lanes_have_zero_liou_loss() {
        let cfg = LIoUConfig { extension_e: 3.0 };
        let ys = [10.0, 20.0, 30.0];
        let a = lane_at(&[5.0, 6.0, 7.0], &ys);
        assert_eq!(liou_loss(&a, &a, &cfg), 0.0);
    }

    #[test]
    fn single_row_overlap_arithmetic() {
        // e=3, centers 5 and 7: overlap = min(8,10)-max(2,4) = 4,
        // union = max(8,10)-min(2,4) = 8, IoU 0.5, loss 0.5
        let cfg = LIoUConfig { extension_e: 3.0 };
        let a = lane_at(&[5.0], &[10.0]);
        let b = lane_at(&[7.0], &[10.0]);
        let loss = liou_loss(&a, &b, &cfg);
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn far_separated_lanes_exceed_loss_one() {
        let cfg = LIoUConfig { extension_e: 3.0 };
        let ys = [10.0, 20.0];
        let a = lane_at(&[0.0, 0.0], &ys);
        let b = lane_at(&[100.0, 100.0], &ys);
        let loss = liou_loss(&a, &b, &cfg);
        assert!(loss > 1.0 && loss <= 2.0);
    }

    #[test]
    fn liou_is_symmetric() {
        let cfg = LIoUConfig { extension_e: 5.0 };
        let ys = [5.0, 15.0, 25.0, 35.0];
        let mut rng = SplitMix64::new(73);
        for _ in 0..20 {
            let xs_a: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, 50.0)).collect();
            let xs_b: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, 50.0)).collect();
            let a = lane_at(&xs_a, &ys);
            let b = lane_at(&xs_b, &ys);
            assert!((liou_loss(&a, &b, &cfg) - liou_loss(&b, &a, &cfg)).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_rows_are_neutral_and_flagged() {
        let cfg = LIoUConfig { extension_e: 3.0 };
        let a = lane_at(&[5.0, 6.0], &[10.0, 20.0]);
        let b = lane_at(&[5.0, 6.0], &[11.0, 21.0]);
        let out = liou_loss_checked(&a, &b, &cfg);
        assert!(out.degenerate);
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn liou_node_matches_value_version_and_finite_differences() {
        let cfg = LIoUConfig { extension_e: 4.0 };
        let ys = [10.0, 20.0, 30.0, 40.0];
        let gt_xs = [12.0, 14.0, 17.0, 21.0];
        let pred_xs = RealArray::new(vec![1, 4], vec![10.0, 15.5, 19.0, 18.0]);

        let mut tape = Tape::new();
        let px = tape.leaf(pred_xs.clone());
        let node = liou_loss_node(&mut tape, px, &gt_xs, &cfg).unwrap();
        let pred_lane = lane_at(pred_xs.data(), &ys);
        let gt_lane = lane_at(&gt_xs, &ys);
        let expect = liou_loss(&pred_lane, &gt_lane, &cfg);
        assert!((tape.value(node).data()[0] - expect).abs() < 1e-12);

        let report = grad_check(&[("xs".into(), pred_xs)], DEFAULT_STEP, move |tape, ids| {
            liou_loss_node(tape, ids[0], &gt_xs, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn total_loss_is_sum_of_independent_terms() {
        let focal_cfg = FocalConfig::default();
        let liou_cfg = LIoUConfig { extension_e: 10.0 };
        let eval_cfg = EvalConfig::new(64, 64);
        let mut rng = SplitMix64::new(74);
        let p = RealArray::fill_with(vec![4, 4], || rng.next_f64());
        let target = RealArray::fill_with(vec![4, 4], || if rng.next_f64() < 0.3 { 1.0 } else { 0.0 });
        let ys = [30.0, 40.0, 50.0, 60.0];
        let preds = vec![
            lane_at(&[10.0, 11.0, 12.0, 13.0], &ys),
            lane_at(&[40.0, 41.0, 42.0, 43.0], &ys),
        ];
        let gts = vec![
            lane_at(&[12.0, 12.5, 13.0, 13.5], &ys),
            lane_at(&[45.0, 45.0, 45.0, 45.0], &ys),
        ];
        let breakdown =
            total_loss(&p, &target, &preds, &gts, &focal_cfg, &liou_cfg, &eval_cfg).unwrap();
        let focal_only = focal_loss(&p, &target, &focal_cfg).unwrap();
        // evaluate the terms independently and sum
        let pairs = assign_lanes(&preds, &gts, &eval_cfg);
        let mean_liou: f64 = pairs
            .iter()
            .map(|&(pi, gi)| liou_loss(&preds[pi], &gts[gi], &liou_cfg))
            .sum::<f64>()
            / pairs.len() as f64;
        assert_eq!(breakdown.total, breakdown.focal + breakdown.liou);
        assert_eq!(breakdown.focal, focal_only);
        assert!((breakdown.liou - mean_liou).abs() < 1e-15);
        assert_eq!(breakdown.matched_pairs, 2);
    }

    #[test]
    fn empty_scene_reduces_to_focal_term() {
        let focal_cfg = FocalConfig::default();
        let liou_cfg = LIoUConfig::default();
        let eval_cfg = EvalConfig::new(64, 64);
        let p = RealArray::fill_with(vec![4, 4], || 0.01);
        let target = RealArray::zeros(vec![4, 4]);
        let breakdown =
            total_loss(&p, &target, &[], &[], &focal_cfg, &liou_cfg, &eval_cfg).unwrap();
        assert_eq!(breakdown.liou, 0.0);
        assert_eq!(breakdown.matched_pairs, 0);
        assert_eq!(breakdown.total, breakdown.focal);
    }
}
