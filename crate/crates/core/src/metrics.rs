//! Detection metrics: lanes are widened to a fixed pixel width, compared by
//! rasterized IoU, matched greedily one-to-one, and summarized as F1 per IoU
//! threshold plus mean IoU over the true positives.

use crate::error::Result;
use crate::lane::Lane;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    /// Rasterized lane width in pixels.
    pub lane_width: f64,
    /// IoU thresholds at which F1 is reported.
    pub tau_list: Vec<f64>,
    pub image_h: usize,
    pub image_w: usize,
}

impl EvalConfig {
    pub fn new(image_h: usize, image_w: usize) -> Self {
        EvalConfig {
            lane_width: 30.0,
            tau_list: vec![0.5, 0.8],
            image_h,
            image_w,
        }
    }
}

/// Per-frame matching outcome at one threshold.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// IoU of each true-positive pair.
    pub matched_ious: Vec<f64>,
}

/// Bitset of covered pixels on the image grid.
#[derive(Debug, Clone)]
pub struct PixelMask {
    w: usize,
    h: usize,
    bits: Vec<u64>,
}

impl PixelMask {
    fn new(h: usize, w: usize) -> Self {
        PixelMask {
            w,
            h,
            bits: vec![0; (h * w + 63) / 64],
        }
    }

    #[inline]
    fn set(&mut self, x: usize, y: usize) {
        let i = y * self.w + x;
        self.bits[i / 64] |= 1u64 << (i % 64);
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let i = y * self.w + x;
        self.bits[i / 64] & (1u64 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &PixelMask) -> usize {
        assert_eq!(self.bits.len(), other.bits.len(), "mask grids differ");
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &PixelMask) -> usize {
        assert_eq!(self.bits.len(), other.bits.len(), "mask grids differ");
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

/// Squared distance from a point to a segment. Zero-length segments behave
/// as points, so a single-point lane rasterizes as a disc.
#[inline]
pub fn dist2_point_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let ex = px - (a.0 + t * dx);
    let ey = py - (a.1 + t * dy);
    ex * ex + ey * ey
}

/// Pixels (integer centers) within width/2 of the lane polyline.
///
/// Scans only a conservative neighborhood of each segment; the membership
/// predicate is d² ≤ (width/2)², identical to a full-image scan.
pub fn rasterize_lane(lane: &Lane, width: f64, h: usize, w: usize) -> PixelMask {
    let r = width / 2.0;
    let r2 = r * r;
    let mut mask = PixelMask::new(h, w);
    let pts = lane.points();
    let segs: Vec<((f64, f64), (f64, f64))> = if pts.len() == 1 {
        vec![(pts[0], pts[0])]
    } else {
        pts.windows(2).map(|p| (p[0], p[1])).collect()
    };
    // bucket segments by pixel row for the row-wise scan
    let mut row_segs: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (si, (a, b)) in segs.iter().enumerate() {
        let ylo = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let yhi = (a.1.max(b.1) + r).ceil().min((h - 1) as f64) as usize;
        if ylo <= yhi {
            for row in row_segs.iter_mut().take(yhi + 1).skip(ylo) {
                row.push(si);
            }
        }
    }
    for y in 0..h {
        if row_segs[y].is_empty() {
            continue;
        }
        let py = y as f64;
        for &si in &row_segs[y] {
            let (a, b) = segs[si];
            let xlo = (a.0.min(b.0) - r).floor().max(0.0) as usize;
            let xhi = (a.0.max(b.0) + r).ceil().min((w - 1) as f64) as usize;
            for x in xlo..=xhi {
                if mask.contains(x, y) {
                    continue;
                }
                if dist2_point_segment(x as f64, py, a, b) <= r2 {
                    mask.set(x, y);
                }
            }
        }
    }
    mask
}

/// IoU of two lanes rasterized at the configured width. Defined as 0 when
/// both rasterizations are empty.
pub fn lane_iou(a: &Lane, b: &Lane, cfg: &EvalConfig) -> f64 {
    let ma = rasterize_lane(a, cfg.lane_width, cfg.image_h, cfg.image_w);
    let mb = rasterize_lane(b, cfg.lane_width, cfg.image_h, cfg.image_w);
    mask_iou(&ma, &mb)
}

pub fn mask_iou(a: &PixelMask, b: &PixelMask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        return 0.0;
    }
    a.intersection_count(b) as f64 / union as f64
}

/// Greedy one-to-one matching by descending IoU. Ties break on lower
/// prediction index, then lower ground-truth index. Pairs at or above τ are
/// true positives; leftovers are false positives / negatives.
pub fn match_lanes(preds: &[Lane], gts: &[Lane], tau: f64, cfg: &EvalConfig) -> MatchResult {
    let pred_masks: Vec<PixelMask> = preds
        .iter()
        .map(|l| rasterize_lane(l, cfg.lane_width, cfg.image_h, cfg.image_w))
        .collect();
    let gt_masks: Vec<PixelMask> = gts
        .iter()
        .map(|l| rasterize_lane(l, cfg.lane_width, cfg.image_h, cfg.image_w))
        .collect();
    match_masks(&pred_masks, &gt_masks, tau)
}

/// Matching over pre-rasterized masks (lets callers reuse rasterizations).
pub fn match_masks(pred_masks: &[PixelMask], gt_masks: &[PixelMask], tau: f64) -> MatchResult {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, pm) in pred_masks.iter().enumerate() {
        for (gi, gm) in gt_masks.iter().enumerate() {
            let iou = mask_iou(pm, gm);
            if iou >= tau {
                pairs.push((iou, pi, gi));
            }
        }
    }
    // descending IoU, ascending pred index, ascending gt index
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred_masks.len()];
    let mut gt_used = vec![false; gt_masks.len()];
    let mut matched_ious = Vec::new();
    for (iou, pi, gi) in pairs {
        if pred_used[pi] || gt_used[gi] {
            continue;
        }
        pred_used[pi] = true;
        gt_used[gi] = true;
        matched_ious.push(iou);
    }
    let tp = matched_ious.len();
    MatchResult {
        tp,
        fp: pred_masks.len() - tp,
        fn_: gt_masks.len() - tp,
        matched_ious,
    }
}

/// Precision, recall and F1 from counts; any 0/0 is defined as 0.
pub fn f1(result: &MatchResult) -> (f64, f64, f64) {
    let tp = result.tp as f64;
    let precision = if result.tp + result.fp == 0 {
        0.0
    } else {
        tp / (tp + result.fp as f64)
    };
    let recall = if result.tp + result.fn_ == 0 {
        0.0
    } else {
        tp / (tp + result.fn_ as f64)
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Mean IoU over every true positive in the dataset (global average).
/// Defined as 0, with a warning, when there are no true positives.
pub fn miou(results: &[MatchResult]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in results {
        for iou in &r.matched_ious {
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("miou: no true positives in the result set, defining mIoU = 0");
        return 0.0;
    }
    sum / n as f64
}

pub fn results_valid(r: &MatchResult) -> Result<()> {
    if r.tp != r.matched_ious.len() {
        return Err(crate::error::Error::Numeric(format!(
            "match result inconsistent: tp {} vs {} ious",
            r.tp,
            r.matched_ious.len()
        )));
    }
    Ok(())
}
