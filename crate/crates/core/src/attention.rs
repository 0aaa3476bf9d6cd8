//! Multi-head scaled dot-product attention. One shared kernel serves all
//! three aggregation branches: self-attention on the current frame and the
//! two cross-attention paths against the previous frame's key/value pair.

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};

/// A T×C matrix of feature tokens (T = HW when flattened from a feature map).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    array: RealArray,
}

impl TokenMatrix {
    pub fn new(array: RealArray) -> Result<Self> {
        if array.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "TokenMatrix",
                shape: array.shape().to_vec(),
                reason: "tokens must be T×C".into(),
            });
        }
        Ok(TokenMatrix { array })
    }

    pub fn zeros(tokens: usize, channels: usize) -> Self {
        TokenMatrix {
            array: RealArray::zeros(vec![tokens, channels]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.array.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.array.shape()[1]
    }

    pub fn as_array(&self) -> &RealArray {
        &self.array
    }

    pub fn into_array(self) -> RealArray {
        self.array
    }

    pub fn byte_size(&self) -> usize {
        self.array.len() * std::mem::size_of::<f64>()
    }
}

/// Optional projection biases: per-head q/k/v biases plus an output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBiases {
    pub bq: Vec<RealArray>,
    pub bk: Vec<RealArray>,
    pub bv: Vec<RealArray>,
    pub bo: RealArray,
}

/// Parameters of one attention block: per-head C×d projections for query,
/// key and value, and a C×C output projection applied after concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Vec<RealArray>,
    pub wk: Vec<RealArray>,
    pub wv: Vec<RealArray>,
    pub wo: RealArray,
    pub biases: Option<AttentionBiases>,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn channels(&self) -> usize {
        self.wo.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.wq[0].shape()[1]
    }

    pub fn zeros(channels: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && channels % heads == 0,
            "channels {channels} must divide into {heads} heads"
        );
        let d = channels / heads;
        let mk = || (0..heads).map(|_| RealArray::zeros(vec![channels, d])).collect();
        AttentionWeights {
            wq: mk(),
            wk: mk(),
            wv: mk(),
            wo: RealArray::zeros(vec![channels, channels]),
            biases: None,
        }
    }

    /// Single head, all projections identity. Useful for analytic tests.
    pub fn identity(channels: usize) -> Self {
        let eye = |n: usize| {
            let mut a = RealArray::zeros(vec![n, n]);
            for i in 0..n {
                a.data_mut()[i * n + i] = 1.0;
            }
            a
        };
        AttentionWeights {
            wq: vec![eye(channels)],
            wk: vec![eye(channels)],
            wv: vec![eye(channels)],
            wo: eye(channels),
            biases: None,
        }
    }

    /// Scaled uniform init in [-s, s] with s = 1/sqrt(C).
    pub fn random(channels: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        assert!(heads > 0 && channels % heads == 0);
        let d = channels / heads;
        let s = 1.0 / (channels as f64).sqrt();
        let mut mk = |rows: usize, cols: usize| {
            RealArray::fill_with(vec![rows, cols], || rng.uniform(-s, s))
        };
        let wq = (0..heads).map(|_| mk(channels, d)).collect();
        let wk = (0..heads).map(|_| mk(channels, d)).collect();
        let wv = (0..heads).map(|_| mk(channels, d)).collect();
        let wo = mk(channels, channels);
        AttentionWeights {
            wq,
            wk,
            wv,
            wo,
            biases: None,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &RealArray)) {
        for (h, w) in self.wq.iter().enumerate() {
            f(format!("{prefix}.wq{h}"), w);
        }
        for (h, w) in self.wk.iter().enumerate() {
            f(format!("{prefix}.wk{h}"), w);
        }
        for (h, w) in self.wv.iter().enumerate() {
            f(format!("{prefix}.wv{h}"), w);
        }
        f(format!("{prefix}.wo"), &self.wo);
        if let Some(b) = &self.biases {
            for (h, w) in b.bq.iter().enumerate() {
                f(format!("{prefix}.bq{h}"), w);
            }
            for (h, w) in b.bk.iter().enumerate() {
                f(format!("{prefix}.bk{h}"), w);
            }
            for (h, w) in b.bv.iter().enumerate() {
                f(format!("{prefix}.bv{h}"), w);
            }
            f(format!("{prefix}.bo"), &b.bo);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut RealArray)) {
        for (h, w) in self.wq.iter_mut().enumerate() {
            f(format!("{prefix}.wq{h}"), w);
        }
        for (h, w) in self.wk.iter_mut().enumerate() {
            f(format!("{prefix}.wk{h}"), w);
        }
        for (h, w) in self.wv.iter_mut().enumerate() {
            f(format!("{prefix}.wv{h}"), w);
        }
        f(format!("{prefix}.wo"), &mut self.wo);
        if let Some(b) = &mut self.biases {
            for (h, w) in b.bq.iter_mut().enumerate() {
                f(format!("{prefix}.bq{h}"), w);
            }
            for (h, w) in b.bk.iter_mut().enumerate() {
                f(format!("{prefix}.bk{h}"), w);
            }
            for (h, w) in b.bv.iter_mut().enumerate() {
                f(format!("{prefix}.bv{h}"), w);
            }
            f(format!("{prefix}.bo"), &mut b.bo);
        }
    }
}

/// Tape ids of one attention block's registered parameters.
#[derive(Debug, Clone)]
pub struct AttentionWeightIds {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: NodeId,
    pub biases: Option<(Vec<NodeId>, Vec<NodeId>, Vec<NodeId>, NodeId)>,
}

impl AttentionWeights {
    pub fn register(&self, tape: &mut Tape) -> AttentionWeightIds {
        let reg = |tape: &mut Tape, ws: &[RealArray]| -> Vec<NodeId> {
            ws.iter().map(|w| tape.leaf(w.clone())).collect()
        };
        let wq = reg(tape, &self.wq);
        let wk = reg(tape, &self.wk);
        let wv = reg(tape, &self.wv);
        let wo = tape.leaf(self.wo.clone());
        let biases = self.biases.as_ref().map(|b| {
            (
                reg(tape, &b.bq),
                reg(tape, &b.bk),
                reg(tape, &b.bv),
                tape.leaf(b.bo.clone()),
            )
        });
        AttentionWeightIds {
            wq,
            wk,
            wv,
            wo,
            biases,
        }
    }
}

/// Multi-head attention on the tape.
///
/// Per head: A = softmax(Q Kᵀ / sqrt(d)), head output A·V; the per-head
/// outputs are concatenated along channels and passed through the output
/// projection.
pub fn mha(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    w: &AttentionWeightIds,
) -> Result<NodeId> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if ks.len() != 2 || vs.len() != 2 || qs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::ShapeMismatch {
            op: "mha (key/value token counts)",
            left: ks,
            right: vs,
        });
    }
    let c = tape.value(w.wo).shape()[0];
    if qs[1] != c || ks[1] != c || vs[1] != c {
        return Err(Error::ShapeMismatch {
            op: "mha (channels vs weights)",
            left: qs,
            right: tape.value(w.wo).shape().to_vec(),
        });
    }

    let heads = w.wq.len();
    let d = tape.value(w.wq[0]).shape()[1];
    let scale = 1.0 / (d as f64).sqrt();

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut qh = tape.matmul(q, w.wq[h])?;
        let mut kh = tape.matmul(k, w.wk[h])?;
        let mut vh = tape.matmul(v, w.wv[h])?;
        if let Some((bq, bk, bv, _)) = &w.biases {
            qh = tape.add_bias(qh, bq[h])?;
            kh = tape.add_bias(kh, bk[h])?;
            vh = tape.add_bias(vh, bv[h])?;
        }
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled)?;
        let out = tape.matmul(attn, vh)?;
        outputs.push(out);
    }
    let concat = tape.concat_cols(&outputs)?;
    let mut projected = tape.matmul(concat, w.wo)?;
    if let Some((_, _, _, bo)) = &w.biases {
        projected = tape.add_bias(projected, *bo)?;
    }
    Ok(projected)
}

/// Self-attention with a residual connection: x + mha(x, x, x).
pub fn self_attention(tape: &mut Tape, x: NodeId, w: &AttentionWeightIds) -> Result<NodeId> {
    let y = mha(tape, x, x, x, w)?;
    tape.add(x, y)
}

/// Value-level wrapper: runs [`mha`] on a throwaway tape.
pub fn mha_value(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<TokenMatrix> {
    let mut tape = Tape::new();
    let qi = tape.leaf(q.as_array().clone());
    let ki = tape.leaf(k.as_array().clone());
    let vi = tape.leaf(v.as_array().clone());
    let ids = w.register(&mut tape);
    let out = mha(&mut tape, qi, ki, vi, &ids)?;
    TokenMatrix::new(tape.value(out).clone())
}

/// Value-level wrapper for [`self_attention`].
pub fn self_attention_value(x: &TokenMatrix, w: &AttentionWeights) -> Result<TokenMatrix> {
    let mut tape = Tape::new();
    let xi = tape.leaf(x.as_array().clone());
    let ids = w.register(&mut tape);
    let out = self_attention(&mut tape, xi, &ids)?;
    TokenMatrix::new(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};

    fn random_tokens(t: usize, c: usize, seed: u64) -> TokenMatrix {
        let mut rng = SplitMix64::new(seed);
        TokenMatrix::new(RealArray::fill_with(vec![t, c], || rng.uniform(-1.0, 1.0))).unwrap()
    }

    /// Independent scalar-loop attention evaluation: explicit per-head loops,
    /// own softmax, no shared kernels.
    fn mha_oracle(
        q: &TokenMatrix,
        k: &TokenMatrix,
        v: &TokenMatrix,
        w: &AttentionWeights,
    ) -> Vec<f64> {
        let (tq, c) = (q.tokens(), q.channels());
        let tk = k.tokens();
        let heads = w.heads();
        let d = w.head_dim();
        let project = |x: &TokenMatrix, m: &RealArray, t: usize| -> Vec<f64> {
            let mut out = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..d {
                    let mut acc = 0.0;
                    for p in 0..c {
                        acc += x.as_array().data()[i * c + p] * m.data()[p * d + j];
                    }
                    out[i * d + j] = acc;
                }
            }
            out
        };
        let mut concat = vec![0.0; tq * c];
        for h in 0..heads {
            let qh = project(q, &w.wq[h], tq);
            let kh = project(k, &w.wk[h], tk);
            let vh = project(v, &w.wv[h], tk);
            for i in 0..tq {
                let mut scores = vec![0.0; tk];
                for j in 0..tk {
                    let mut dot = 0.0;
                    for p in 0..d {
                        dot += qh[i * d + p] * kh[j * d + p];
                    }
                    scores[j] = dot / (d as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for p in 0..d {
                    let mut acc = 0.0;
                    for j in 0..tk {
                        acc += exps[j] / sum * vh[j * d + p];
                    }
                    concat[i * c + h * d + p] = acc;
                }
            }
        }
        let mut out = vec![0.0; tq * c];
        for i in 0..tq {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..c {
                    acc += concat[i * c + p] * w.wo.data()[p * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    #[test]
    fn singleton_kv_returns_projected_value() {
        let mut rng = SplitMix64::new(21);
        let w = AttentionWeights::random(8, 4, &mut rng);
        let q = random_tokens(3, 8, 22);
        let k = random_tokens(1, 8, 23);
        let v = random_tokens(1, 8, 24);
        let out = mha_value(&q, &k, &v, &w).unwrap();
        // softmax over a single key is 1, so every query token sees the same
        // projected value token
        let expect = mha_oracle(&q, &k, &v, &w);
        for i in 0..3 {
            for j in 0..8 {
                assert!((out.as_array().data()[i * 8 + j] - expect[j]).abs() < 1e-12);
            }
        }
        // rows identical across query tokens
        for i in 1..3 {
            for j in 0..8 {
                let a = out.as_array().data()[j];
                let b = out.as_array().data()[i * 8 + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_averages_value_tokens() {
        let c = 5;
        let w = AttentionWeights::identity(c);
        let q = TokenMatrix::zeros(4, c);
        let v = random_tokens(6, c, 25);
        let k = random_tokens(6, c, 26);
        let out = mha_value(&q, &k, &v, &w).unwrap();
        for j in 0..c {
            let mean: f64 =
                (0..6).map(|t| v.as_array().data()[t * c + j]).sum::<f64>() / 6.0;
            for i in 0..4 {
                assert!((out.as_array().data()[i * c + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = SplitMix64::new(27);
        let w = AttentionWeights::random(8, 2, &mut rng);
        let q = random_tokens(4, 8, 28);
        let k = random_tokens(4, 8, 29);
        let v = random_tokens(4, 8, 30);
        let out = mha_value(&q, &k, &v, &w).unwrap();
        let expect = mha_oracle(&q, &k, &v, &w);
        for (a, b) in out.as_array().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn kv_joint_permutation_invariance() {
        let mut rng = SplitMix64::new(31);
        let w = AttentionWeights::random(8, 4, &mut rng);
        let q = random_tokens(5, 8, 32);
        let k = random_tokens(6, 8, 33);
        let v = random_tokens(6, 8, 34);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |m: &TokenMatrix| {
            let c = m.channels();
            let mut data = vec![0.0; m.tokens() * c];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * c..dst * c + c]
                    .copy_from_slice(&m.as_array().data()[src * c..src * c + c]);
            }
            TokenMatrix::new(RealArray::new(vec![m.tokens(), c], data)).unwrap()
        };
        let base = mha_value(&q, &k, &v, &w).unwrap();
        let shuffled = mha_value(&q, &permute(&k), &permute(&v), &w).unwrap();
        for (a, b) in base.as_array().data().iter().zip(shuffled.as_array().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn query_permutation_equivariance() {
        let mut rng = SplitMix64::new(35);
        let w = AttentionWeights::random(8, 2, &mut rng);
        let q = random_tokens(4, 8, 36);
        let k = random_tokens(5, 8, 37);
        let v = random_tokens(5, 8, 38);
        let perm = [2usize, 0, 3, 1];
        let base = mha_value(&q, &k, &v, &w).unwrap();
        let qp = {
            let mut data = vec![0.0; 4 * 8];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * 8..dst * 8 + 8]
                    .copy_from_slice(&q.as_array().data()[src * 8..src * 8 + 8]);
            }
            TokenMatrix::new(RealArray::new(vec![4, 8], data)).unwrap()
        };
        let permuted = mha_value(&qp, &k, &v, &w).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = base.as_array().data()[src * 8 + j];
                let b = permuted.as_array().data()[dst * 8 + j];
                assert_eq!(a, b, "row permutation must be exact");
            }
        }
    }

    #[test]
    fn convex_envelope_with_identity_value_path() {
        let c = 4;
        let w = AttentionWeights::identity(c);
        let q = random_tokens(5, c, 39);
        let k = random_tokens(7, c, 40);
        let v = random_tokens(7, c, 41);
        let out = mha_value(&q, &k, &v, &w).unwrap();
        for j in 0..c {
            let col: Vec<f64> = (0..7).map(|t| v.as_array().data()[t * c + j]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                let o = out.as_array().data()[i * c + j];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_zero_weights_is_identity() {
        let x = random_tokens(6, 8, 42);
        let w = AttentionWeights::zeros(8, 4);
        let y = self_attention_value(&x, &w).unwrap();
        assert_eq!(y.as_array(), x.as_array());
        assert_eq!(y.tokens(), 6);
        assert_eq!(y.channels(), 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(43);
        let w = AttentionWeights::random(4, 2, &mut rng);
        let x = random_tokens(3, 4, 44);
        let mut params = vec![("x".to_string(), x.as_array().clone())];
        w.visit("attn", &mut |name, arr| params.push((name, arr.clone())));
        let report = grad_check(&params, DEFAULT_STEP, |tape, ids| {
            let x = ids[0];
            // rebuild weight ids from the leaf list in visit order
            let mut it = ids[1..].iter().copied();
            let wq: Vec<NodeId> = (0..2).map(|_| it.next().unwrap()).collect();
            let wk: Vec<NodeId> = (0..2).map(|_| it.next().unwrap()).collect();
            let wv: Vec<NodeId> = (0..2).map(|_| it.next().unwrap()).collect();
            let wo = it.next().unwrap();
            let ids = AttentionWeightIds {
                wq,
                wk,
                wv,
                wo,
                biases: None,
            };
            let y = self_attention(tape, x, &ids)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn attention_rows_sum_to_one_via_uniform_value_probe() {
        // With identity value path and all-ones v tokens, each output token is
        // the attention-weight row sum, which must be exactly 1.
        let c = 3;
        let w = AttentionWeights::identity(c);
        let q = random_tokens(4, c, 45);
        let k = random_tokens(5, c, 46);
        let ones = TokenMatrix::new(RealArray::new(vec![5, c], vec![1.0; 15])).unwrap();
        let out = mha_value(&q, &k, &ones, &w).unwrap();
        for v in out.as_array().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
