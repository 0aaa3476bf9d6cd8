//! Central finite-difference verification of tape gradients.

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst relative error over every coordinate of every checked parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat coordinate) of the worst error.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare tape gradients of a scalar-valued graph against central
/// differences (f(p+h) - f(p-h)) / 2h, coordinate by coordinate.
///
/// `build` reconstructs the graph from leaves for the given parameter
/// values and returns the scalar root. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-12).
pub fn grad_check<F>(params: &[(String, RealArray)], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0, "step must be positive");

    let eval = |point: &[RealArray]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = point.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root).data()[0])
    };

    // Analytic gradients at the base point.
    let base: Vec<RealArray> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = base.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &ids)?;
    if !tape.value(root).data()[0].is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check (base point)",
            coord: 0,
        });
    }
    tape.backward(root)?;
    let analytic: Vec<RealArray> = ids.iter().map(|&id| tape.grad_array(id)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };

    let mut point = base.clone();
    for (pi, (name, _)) in params.iter().enumerate() {
        for ci in 0..base[pi].len() {
            let orig = base[pi].data()[ci];
            point[pi].data_mut()[ci] = orig + h;
            let f_plus = eval(&point)?;
            point[pi].data_mut()[ci] = orig - h;
            let f_minus = eval(&point)?;
            point[pi].data_mut()[ci] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    op: "grad_check (probe)",
                    coord: ci,
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), ci));
            }
        }
    }
    Ok(report)
}
