//! The `check` suite: finite-difference verification of every
//! differentiable operation, a full aggregation step with the training
//! objective on a 4×4×8 toy configuration, and quick structural invariants.

use crate::array::{Padding, RealArray};
use crate::attention::{self, AttentionWeights, TokenMatrix};
use crate::bootstrap::{bootstrap_state_nodes, id_embedding_node, rasterize_lanes};
use crate::config::RunConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use crate::lane::Lane;
use crate::lanehead::{build_basis, decode, default_row_positions, DecoderHeadIds};
use crate::losses::{focal_loss_node, liou_loss_node, FocalConfig, LIoUConfig};
use crate::model::{encode, Model};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tca::build_step_with_branches;
use crate::train::build_targets;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub total_seconds: f64,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    fn push(&mut self, name: &str, tolerance: f64, started: Instant, report: GradCheckReport) {
        self.entries.push(CheckEntry {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance,
            passed: report.max_rel_err < tolerance,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
}

const TOL: f64 = 1e-6;

fn rand_arr(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut SplitMix64) -> RealArray {
    RealArray::fill_with(shape, || rng.uniform(lo, hi))
}

fn check_op(
    out: &mut CheckReport,
    name: &str,
    params: Vec<(String, RealArray)>,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<()> {
    let t0 = Instant::now();
    let report = grad_check(&params, DEFAULT_STEP, build)?;
    out.push(name, TOL, t0, report);
    Ok(())
}

/// Run every gradient check. Completes in well under a minute on a desktop
/// CPU; each entry's worst relative error must stay below 1e-6.
pub fn run_gradient_checks() -> Result<CheckReport> {
    let started = Instant::now();
    let mut out = CheckReport::default();
    let mut rng = SplitMix64::new(0x57A7E);

    // elementwise and reduction ops, one expression each
    let a = rand_arr(vec![3, 4], -1.0, 1.0, &mut rng);
    let b = rand_arr(vec![3, 4], 0.5, 2.0, &mut rng);
    check_op(&mut out, "add", vec![("a".into(), a.clone()), ("b".into(), b.clone())], |t, ids| {
        let y = t.add(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;
    check_op(&mut out, "sub", vec![("a".into(), a.clone()), ("b".into(), b.clone())], |t, ids| {
        let y = t.sub(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        Ok(t.mean(sq))
    })?;
    check_op(&mut out, "mul", vec![("a".into(), a.clone()), ("b".into(), b.clone())], |t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        Ok(t.sum(y))
    })?;
    check_op(&mut out, "div", vec![("a".into(), a.clone()), ("b".into(), b.clone())], |t, ids| {
        let y = t.div(ids[0], ids[1])?;
        Ok(t.sum(y))
    })?;
    check_op(&mut out, "scale_add_scalar", vec![("a".into(), a.clone())], |t, ids| {
        let y = t.scale(ids[0], -1.7);
        let y = t.add_scalar(y, 0.3);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;
    let coeff_scale: Vec<f64> = (0..12).map(|i| 0.5 + 0.1 * i as f64).collect();
    let coeff_off: Vec<f64> = (0..12).map(|i| -0.2 * i as f64).collect();
    check_op(&mut out, "affine_const", vec![("a".into(), a.clone())], move |t, ids| {
        let y = t.affine_const(ids[0], coeff_scale.clone(), coeff_off.clone())?;
        let sq = t.mul(y, y)?;
        Ok(t.mean(sq))
    })?;
    let bias = rand_arr(vec![4], -0.5, 0.5, &mut rng);
    check_op(
        &mut out,
        "add_bias",
        vec![("x".into(), a.clone()), ("b".into(), bias)],
        |t, ids| {
            let y = t.add_bias(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;
    check_op(&mut out, "sigmoid", vec![("x".into(), a.clone())], |t, ids| {
        let y = t.sigmoid(ids[0]);
        Ok(t.sum(y))
    })?;
    check_op(&mut out, "silu", vec![("x".into(), a.clone())], |t, ids| {
        let y = t.silu(ids[0]);
        Ok(t.sum(y))
    })?;
    // abs and clamp checked away from their kinks
    let off_kink = RealArray::new(
        vec![6],
        vec![-1.3, -0.4, 0.2, 0.9, -2.1, 1.4],
    );
    check_op(&mut out, "abs", vec![("x".into(), off_kink.clone())], |t, ids| {
        let y = t.abs(ids[0]);
        Ok(t.sum(y))
    })?;
    check_op(&mut out, "clamp_min", vec![("x".into(), off_kink)], |t, ids| {
        let y = t.clamp_min(ids[0], 0.0);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;
    check_op(&mut out, "ln_pow", vec![("x".into(), b.clone())], |t, ids| {
        let l = t.ln(ids[0]);
        let p = t.pow_const(ids[0], 1.7);
        let y = t.mul(l, p)?;
        Ok(t.mean(y))
    })?;
    check_op(&mut out, "reshape_concat", vec![("a".into(), a.clone()), ("b".into(), b.clone())], |t, ids| {
        let r = t.reshape(ids[0], vec![3, 4])?;
        let y = t.concat_cols(&[r, ids[1]])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;

    // linear algebra
    let m1 = rand_arr(vec![3, 5], -1.0, 1.0, &mut rng);
    let m2 = rand_arr(vec![5, 2], -1.0, 1.0, &mut rng);
    check_op(
        &mut out,
        "matmul",
        vec![("a".into(), m1.clone()), ("b".into(), m2)],
        |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;
    let m3 = rand_arr(vec![4, 5], -1.0, 1.0, &mut rng);
    check_op(
        &mut out,
        "matmul_transposed",
        vec![("a".into(), m1), ("b".into(), m3)],
        |t, ids| {
            let y = t.matmul_nt(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;
    let sm = rand_arr(vec![4, 6], -2.0, 2.0, &mut rng);
    let smw = rand_arr(vec![6, 3], -1.0, 1.0, &mut rng);
    check_op(
        &mut out,
        "softmax_rows",
        vec![("x".into(), sm), ("w".into(), smw)],
        |t, ids| {
            let s = t.softmax_rows(ids[0])?;
            let y = t.matmul(s, ids[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;
    let img = rand_arr(vec![6, 7, 2], -1.0, 1.0, &mut rng);
    let ker = rand_arr(vec![3, 3, 2, 3], -0.6, 0.6, &mut rng);
    check_op(
        &mut out,
        "conv2d_same_s1",
        vec![("x".into(), img.clone()), ("k".into(), ker.clone())],
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, Padding::Same)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;
    check_op(
        &mut out,
        "conv2d_same_s2",
        vec![("x".into(), img.clone()), ("k".into(), ker.clone())],
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 2, Padding::Same)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;
    check_op(
        &mut out,
        "conv2d_valid",
        vec![("x".into(), img), ("k".into(), ker)],
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, Padding::Valid)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?;

    // attention
    let attn = AttentionWeights::random(4, 2, &mut rng);
    let tokens = rand_arr(vec![5, 4], -1.0, 1.0, &mut rng);
    let mut attn_params = vec![("x".to_string(), tokens)];
    attn.visit("attn", &mut |n, v| attn_params.push((n, v.clone())));
    check_op(&mut out, "self_attention", attn_params, |t, ids| {
        let mut it = ids[1..].iter().copied();
        let w = crate::attention::AttentionWeightIds {
            wq: (0..2).map(|_| it.next().unwrap()).collect(),
            wk: (0..2).map(|_| it.next().unwrap()).collect(),
            wv: (0..2).map(|_| it.next().unwrap()).collect(),
            wo: it.next().unwrap(),
            biases: None,
        };
        let y = attention::self_attention(t, ids[0], &w)?;
        let sq = t.mul(y, y)?;
        Ok(t.mean(sq))
    })?;

    // losses
    let logits = rand_arr(vec![4, 5], -2.0, 2.0, &mut rng);
    let target = RealArray::fill_with(vec![4, 5], || if rng.next_f64() < 0.3 { 1.0 } else { 0.0 });
    let focal_cfg = FocalConfig::default();
    check_op(&mut out, "focal_loss", vec![("z".into(), logits)], move |t, ids| {
        let p = t.sigmoid(ids[0]);
        focal_loss_node(t, p, &target, &focal_cfg)
    })?;
    let pred_xs = rand_arr(vec![1, 8], 10.0, 50.0, &mut rng);
    let gt_xs: Vec<f64> = (0..8).map(|i| 20.0 + 1.5 * i as f64).collect();
    let liou_cfg = LIoUConfig { extension_e: 6.0 };
    check_op(&mut out, "liou_loss", vec![("xs".into(), pred_xs)], move |t, ids| {
        liou_loss_node(t, ids[0], &gt_xs, &liou_cfg)
    })?;

    // full model pieces
    let enc = crate::model::Encoder::random(8, &mut rng);
    let toy_img = rand_arr(vec![16, 16, 3], 0.0, 1.0, &mut rng);
    let mut enc_params = vec![("img".to_string(), toy_img)];
    enc.visit("enc", &mut |n, v| enc_params.push((n, v.clone())));
    check_op(&mut out, "encoder_16x16", enc_params, |t, ids| {
        let e = crate::model::EncoderIds {
            k1: ids[1],
            b1: ids[2],
            k2: ids[3],
            b2: ids[4],
            k3: ids[5],
            b3: ids[6],
        };
        let f = encode(t, ids[0], &e)?;
        let sq = t.mul(f, f)?;
        Ok(t.mean(sq))
    })?;

    let full = full_step_check()?;
    let t0 = Instant::now();
    out.push("tca_step_4x4x8_objective", TOL, t0, full);

    out.total_seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Test hook exposing the full-step check's detailed report.
pub fn debug_full_step() -> Result<GradCheckReport> {
    full_step_check()
}

/// Gradient check of the complete second-frame computation on a 4×4×8
/// feature grid: mask embedding, bootstrap, all three branches, decoding and
/// the focal + lane-overlap objective, w.r.t. every non-encoder parameter.
/// (The encoder has its own entry above.)
///
/// Weight magnitudes are scaled up from the cold-start init so every checked
/// coordinate carries a gradient well above the finite-difference noise
/// floor; the check verifies correctness at a point, and a well-conditioned
/// point makes the 1e-6 bound meaningful.
fn full_step_check() -> Result<GradCheckReport> {
    // fixed seed: the conditioning of this point was verified explicitly
    let rng = &mut SplitMix64::new(0x57A7E);
    let cfg = RunConfig {
        image_h: 32,
        image_w: 32,
        channels: 8,
        heads: 4,
        basis_k: 2,
        basis_n: 6,
        ..Default::default()
    };
    let library: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..6).map(|j| ((i * 3 + j) % 5) as f64 - 2.0).collect())
        .collect();
    let basis = build_basis(&library, 2, default_row_positions(6))?;
    let mut model = Model::new(cfg.clone(), basis, rng)?;
    model.visit_mut(&mut |name, arr| {
        let boost = if name.starts_with("tca") || name.starts_with("bootstrap.phi") {
            3.0
        } else if name == "heads.coef_kernel" {
            4.0
        } else if name == "heads.prob_kernel" {
            2.0
        } else {
            1.0
        };
        if boost != 1.0 {
            for v in arr.data_mut() {
                *v *= boost;
            }
        }
    });
    let features = rand_arr(vec![4, 4, 8], -1.0, 1.0, rng);
    let gt = vec![
        Lane::new(
            vec![(10.37, 13.0), (12.11, 19.0), (13.29, 25.0), (14.53, 31.0)],
            1.0,
        )?,
        Lane::new(
            vec![(22.41, 13.0), (21.17, 19.0), (20.63, 25.0), (19.89, 31.0)],
            1.0,
        )?,
    ];
    let targets = build_targets(&gt, &cfg);
    let ys: Vec<f64> = model
        .basis
        .row_positions
        .iter()
        .map(|&r| r * 31.0)
        .collect();
    let gt_xs: Vec<Vec<f64>> = gt.iter().map(|l| l.resample_at(&ys)).collect();
    let mask = rasterize_lanes(&gt, 32, 32);

    let params: Vec<(String, RealArray)> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("encoder"))
        .collect();
    let gh_gw = cfg.feature_grid();
    let liou_cfg = LIoUConfig { extension_e: 2.0 };
    let focal_cfg = cfg.focal;
    let u = model.basis.u.clone();
    let x_mean = model.basis.x_mean.clone();
    let cell_w = cfg.cell_width();

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    grad_check(&params, DEFAULT_STEP, move |tape, ids| {
        // rebuild typed ids from the flat leaf list via a throwaway mapping
        let mut by_name = std::collections::HashMap::new();
        for (name, &id) in names.iter().zip(ids) {
            by_name.insert(name.clone(), id);
        }
        let g = |n: &str| *by_name.get(n).unwrap();
        let heads = 4;
        let attn = |prefix: &str| crate::attention::AttentionWeightIds {
            wq: (0..heads).map(|h| g(&format!("{prefix}.wq{h}"))).collect(),
            wk: (0..heads).map(|h| g(&format!("{prefix}.wk{h}"))).collect(),
            wv: (0..heads).map(|h| g(&format!("{prefix}.wv{h}"))).collect(),
            wo: g(&format!("{prefix}.wo")),
            biases: None,
        };
        let tca = crate::tca::TcaIds {
            self_attn: attn("tca.self"),
            phi: g("tca.phi"),
            adjacent: attn("tca.adjacent"),
            accumulative: attn("tca.accumulative"),
        };
        let head_ids = DecoderHeadIds {
            prob_kernel: g("heads.prob_kernel"),
            prob_bias: g("heads.prob_bias"),
            coef_kernel: g("heads.coef_kernel"),
            coef_bias: g("heads.coef_bias"),
        };

        let f2 = tape.leaf(features.clone());
        let e = id_embedding_node(
            tape,
            &mask,
            gh_gw,
            g("bootstrap.id_embed.kernel"),
            g("bootstrap.id_embed.bias"),
        )?;
        let boot = bootstrap_state_nodes(tape, f2, Some(e), tca.phi, g("bootstrap.phi_prime"))?;
        let step = build_step_with_branches(
            tape,
            f2,
            boot,
            1,
            &tca,
            crate::config::BranchToggle::default(),
        )?;
        let maps = decode(tape, step.fhat, &head_ids)?;
        let focal = focal_loss_node(tape, maps.prob, &targets.prob_target, &focal_cfg)?;
        // lane-overlap over every positive cell, fixed assignment by column
        let coef_flat = tape.reshape(maps.coef, vec![gh_gw.0 * gh_gw.1, 2])?;
        let u_const = tape.leaf(u.clone());
        let mut terms = Vec::new();
        for &(r, c) in &targets.cells {
            let mut onehot = vec![0.0; gh_gw.0 * gh_gw.1];
            onehot[r * gh_gw.1 + c] = 1.0;
            let sel = tape.leaf(RealArray::new(vec![1, gh_gw.0 * gh_gw.1], onehot));
            let coeffs = tape.matmul(sel, coef_flat)?;
            let anchor = (c as f64 + 0.5) * cell_w;
            let proj = tape.matmul(coeffs, u_const)?;
            let offset: Vec<f64> = x_mean.iter().map(|m| m + anchor).collect();
            let xs = tape.affine_const(proj, vec![1.0; 6], offset)?;
            let gi = if c < gh_gw.1 / 2 { 0 } else { 1 };
            terms.push(liou_loss_node(tape, xs, &gt_xs[gi], &liou_cfg)?);
        }
        let mut liou = terms[0];
        for &t in &terms[1..] {
            liou = tape.add(liou, t)?;
        }
        let liou = tape.scale(liou, 1.0 / terms.len() as f64);
        tape.add(focal, liou)
    })
}

/// Quick structural invariants: attention row normalization, joint
/// permutation invariance and the zero-query uniform average, a handful of
/// trials each.
pub fn run_invariant_checks(trials: usize) -> Result<CheckReport> {
    let started = Instant::now();
    let mut out = CheckReport::default();
    let mut rng = SplitMix64::new(0x1CEB00DA);
    let mut worst_row = 0.0f64;
    let mut worst_perm = 0.0f64;
    let mut worst_zeroq = 0.0f64;
    for _ in 0..trials {
        let c = 4 * (1 + rng.below(3));
        let w = AttentionWeights::random(c, 4, &mut rng);
        let tq = 2 + rng.below(5);
        let tk = 2 + rng.below(5);
        let q = TokenMatrix::new(rand_arr(vec![tq, c], -2.0, 2.0, &mut rng))?;
        let k = TokenMatrix::new(rand_arr(vec![tk, c], -2.0, 2.0, &mut rng))?;
        let v = TokenMatrix::new(rand_arr(vec![tk, c], -2.0, 2.0, &mut rng))?;
        worst_row = worst_row.max(attention_row_defect(&q, &k, &w)?);
        worst_perm = worst_perm.max(permutation_defect(&q, &k, &v, &w, &mut rng)?);
        worst_zeroq = worst_zeroq.max(zero_query_defect(&k, &v, c)?);
    }
    let t0 = started;
    out.entries.push(CheckEntry {
        name: "attention_row_normalization".into(),
        max_rel_err: worst_row,
        tolerance: 1e-12,
        passed: worst_row < 1e-12,
        seconds: t0.elapsed().as_secs_f64(),
    });
    out.entries.push(CheckEntry {
        name: "kv_joint_permutation_invariance".into(),
        max_rel_err: worst_perm,
        tolerance: 1e-12,
        passed: worst_perm < 1e-12,
        seconds: t0.elapsed().as_secs_f64(),
    });
    out.entries.push(CheckEntry {
        name: "zero_query_uniform_average".into(),
        max_rel_err: worst_zeroq,
        tolerance: 1e-12,
        passed: worst_zeroq < 1e-12,
        seconds: t0.elapsed().as_secs_f64(),
    });
    out.total_seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Row-sum defect of the attention weights, probed through an all-ones value
/// path with identity output projection.
fn attention_row_defect(q: &TokenMatrix, k: &TokenMatrix, w: &AttentionWeights) -> Result<f64> {
    // identity value path: replace value/output projections
    let c = q.channels();
    let mut probe = w.clone();
    probe.wv = AttentionWeights::identity(c).wv;
    probe.wo = AttentionWeights::identity(c).wo;
    // single head keeps the value path identity
    probe.wq = vec![w.wq[0].clone()];
    probe.wk = vec![w.wk[0].clone()];
    let head_c = probe.wq[0].shape()[1];
    // pad q/k projections up to full width so shapes agree
    if head_c != c {
        let mut wq = RealArray::zeros(vec![c, c]);
        let mut wk = RealArray::zeros(vec![c, c]);
        for i in 0..c {
            for j in 0..head_c {
                wq.data_mut()[i * c + j] = probe.wq[0].data()[i * head_c + j];
                wk.data_mut()[i * c + j] = probe.wk[0].data()[i * head_c + j];
            }
        }
        probe.wq = vec![wq];
        probe.wk = vec![wk];
    }
    let ones = TokenMatrix::new(RealArray::new(
        vec![k.tokens(), c],
        vec![1.0; k.tokens() * c],
    ))?;
    let out = attention::mha_value(q, k, &ones, &probe)?;
    let mut worst = 0.0f64;
    for v in out.as_array().data() {
        worst = worst.max((v - 1.0).abs());
    }
    Ok(worst)
}

fn permutation_defect(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    w: &AttentionWeights,
    rng: &mut SplitMix64,
) -> Result<f64> {
    let tk = k.tokens();
    let c = k.channels();
    let mut perm: Vec<usize> = (0..tk).collect();
    rng.shuffle(&mut perm);
    let permute = |m: &TokenMatrix| -> Result<TokenMatrix> {
        let mut data = vec![0.0; tk * c];
        for (dst, &src) in perm.iter().enumerate() {
            data[dst * c..dst * c + c]
                .copy_from_slice(&m.as_array().data()[src * c..src * c + c]);
        }
        TokenMatrix::new(RealArray::new(vec![tk, c], data))
    };
    let base = attention::mha_value(q, k, v, w)?;
    let shuffled = attention::mha_value(q, &permute(k)?, &permute(v)?, w)?;
    let mut worst = 0.0f64;
    for (a, b) in base.as_array().data().iter().zip(shuffled.as_array().data()) {
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

fn zero_query_defect(k: &TokenMatrix, v: &TokenMatrix, c: usize) -> Result<f64> {
    let w = AttentionWeights::identity(c);
    let q = TokenMatrix::zeros(3, c);
    let out = attention::mha_value(&q, k, v, &w)?;
    let tk = v.tokens();
    let mut worst = 0.0f64;
    for j in 0..c {
        let mean: f64 = (0..tk).map(|t| v.as_array().data()[t * c + j]).sum::<f64>() / tk as f64;
        for i in 0..3 {
            worst = worst.max((out.as_array().data()[i * c + j] - mean).abs());
        }
    }
    Ok(worst)
}
