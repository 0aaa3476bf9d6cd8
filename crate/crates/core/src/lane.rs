//! The lane polyline type shared by the decoder head, the losses, the
//! metrics and the scene generator.

use crate::error::{Error, Result};

/// A lane as N sampled (x, y) points in image coordinates with strictly
/// increasing y, plus a detection score in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    points: Vec<(f64, f64)>,
    pub score: f64,
}

impl Lane {
    pub fn new(points: Vec<(f64, f64)>, score: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract {
                op: "Lane::new",
                reason: "a lane needs at least one point".into(),
            });
        }
        for w in points.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(Error::Contract {
                    op: "Lane::new",
                    reason: format!("y must be strictly increasing, got {} then {}", w[0].1, w[1].1),
                });
            }
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Contract {
                op: "Lane::new",
                reason: format!("score {score} outside [0,1]"),
            });
        }
        Ok(Lane { points, score })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// x at the given y by linear interpolation between the two bracketing
    /// samples; clamped extrapolation from the end segments outside the span.
    pub fn x_at(&self, y: f64) -> f64 {
        let pts = &self.points;
        if pts.len() == 1 {
            return pts[0].0;
        }
        // find bracketing segment
        if y <= pts[0].1 {
            return interp(pts[0], pts[1], y);
        }
        if y >= pts[pts.len() - 1].1 {
            return interp(pts[pts.len() - 2], pts[pts.len() - 1], y);
        }
        let mut lo = 0;
        let mut hi = pts.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if pts[mid].1 <= y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        interp(pts[lo], pts[hi], y)
    }

    /// Resample x at each of the given strictly increasing y positions.
    pub fn resample_at(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.x_at(y)).collect()
    }

    /// Clamp every x into [0, w-1] and return a lane with the same ys.
    pub fn clamped_x(&self, w: usize) -> Lane {
        let hi = (w - 1) as f64;
        Lane {
            points: self
                .points
                .iter()
                .map(|&(x, y)| (x.clamp(0.0, hi), y))
                .collect(),
            score: self.score,
        }
    }
}

fn interp(a: (f64, f64), b: (f64, f64), y: f64) -> f64 {
    let t = (y - a.1) / (b.1 - a.1);
    a.0 + t * (b.0 - a.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_monotone_y() {
        assert!(Lane::new(vec![(0.0, 5.0), (1.0, 5.0)], 1.0).is_err());
        assert!(Lane::new(vec![(0.0, 5.0), (1.0, 4.0)], 1.0).is_err());
        assert!(Lane::new(vec![(0.0, 4.0), (1.0, 5.0)], 1.0).is_ok());
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let lane = Lane::new(vec![(0.0, 0.0), (10.0, 10.0)], 1.0).unwrap();
        assert_eq!(lane.x_at(5.0), 5.0);
        assert_eq!(lane.x_at(12.0), 12.0); // extrapolated
        let xs = lane.resample_at(&[0.0, 2.5, 10.0]);
        assert_eq!(xs, vec![0.0, 2.5, 10.0]);
    }
}
