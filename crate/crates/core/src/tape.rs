//! Wengert tape: reverse-mode automatic differentiation.
//!
//! Operations are recorded in forward order into an arena of value buffers,
//! then replayed in reverse to accumulate gradients via the chain rule.
//! Construction order is topological by construction, so the reverse sweep
//! needs no explicit sort. Gradients accumulate additively across fan-out.
//!
//! A tape covers one frame's computation graph; recurrent state crossing a
//! frame boundary re-enters the next tape as a constant leaf.

use crate::array::{self, Padding, RealArray};
use crate::error::{Error, Result};

/// Index of a node in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId, c: f64 },
    /// y = scale ⊙ x + offset with constant coefficient arrays.
    AffineConst { a: NodeId, scale: Vec<f64>, offset: Vec<f64> },
    /// x: [.., C] plus a length-C bias broadcast over leading dims.
    AddBias { x: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    /// c = a · bᵀ with a: [m,k], b: [n,k].
    MatmulNT { a: NodeId, b: NodeId },
    SoftmaxRows { x: NodeId },
    Conv2d { x: NodeId, k: NodeId, stride: usize, padding: Padding },
    Sigmoid { x: NodeId },
    Silu { x: NodeId },
    Abs { x: NodeId },
    Ln { x: NodeId },
    PowConst { x: NodeId, e: f64 },
    ClampMin { x: NodeId, lo: f64 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Reshape { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
}

struct Node {
    value: RealArray,
    op: Op,
}

/// Recording tape. One per frame graph; dropped after use.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: RealArray, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        id
    }

    /// Register a leaf (input or parameter). The tape owns a copy.
    pub fn leaf(&mut self, value: RealArray) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &RealArray {
        &self.nodes[id.0].value
    }

    /// Gradient of a node, or None if backward never reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as an array; an untouched leaf reads as all-zero.
    pub fn grad_array(&self, id: NodeId) -> RealArray {
        let shape = self.nodes[id.0].value.shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => RealArray::new(shape, g.clone()),
            None => RealArray::zeros(shape),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn require_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let v = RealArray::new(self.shape(a).to_vec(), data);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let v = RealArray::new(self.shape(a).to_vec(), data);
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let v = RealArray::new(self.shape(a).to_vec(), data);
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("div", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        let v = RealArray::new(self.shape(a).to_vec(), data);
        Ok(self.push(v, Op::Div { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let v = RealArray::new(self.shape(a).to_vec(), data);
        self.push(v, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let v = RealArray::new(self.shape(a).to_vec(), data);
        self.push(v, Op::AddScalar { a, c })
    }

    /// y = scale ⊙ x + offset, with scale/offset held constant.
    pub fn affine_const(&mut self, a: NodeId, scale: Vec<f64>, offset: Vec<f64>) -> Result<NodeId> {
        let n = self.value(a).len();
        if scale.len() != n || offset.len() != n {
            return Err(Error::Contract {
                op: "affine_const",
                reason: format!("coefficient length {} vs value {}", scale.len(), n),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(scale.iter().zip(&offset))
            .map(|(x, (s, o))| s * x + o)
            .collect();
        let v = RealArray::new(self.shape(a).to_vec(), data);
        Ok(self.push(v, Op::AffineConst { a, scale, offset }))
    }

    /// Broadcast-add a length-C bias over the trailing dimension.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let v = RealArray::new(self.shape(x).to_vec(), data);
        Ok(self.push(v, Op::AddBias { x, b }))
    }

    // ── Linear algebra / structured ──────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = array::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    /// a · bᵀ for a: [m,k], b: [n,k]; avoids materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        array::matmul_nt_into(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let v = RealArray::new(vec![m, n], out);
        Ok(self.push(v, Op::MatmulNT { a, b }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = array::softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::SoftmaxRows { x }))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let v = array::conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(v, Op::Conv2d { x, k, stride, padding }))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| array::sigmoid(v)).collect();
        let v = RealArray::new(self.shape(x).to_vec(), data);
        self.push(v, Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * array::sigmoid(v))
            .collect();
        let v = RealArray::new(self.shape(x).to_vec(), data);
        self.push(v, Op::Silu { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.abs()).collect();
        let v = RealArray::new(self.shape(x).to_vec(), data);
        self.push(v, Op::Abs { x })
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let v = RealArray::new(self.shape(x).to_vec(), data);
        self.push(v, Op::Ln { x })
    }

    pub fn pow_const(&mut self, x: NodeId, e: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.powf(e)).collect();
        let v = RealArray::new(self.shape(x).to_vec(), data);
        self.push(v, Op::PowConst { x, e })
    }

    pub fn clamp_min(&mut self, x: NodeId, lo: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.max(lo)).collect();
        let v = RealArray::new(self.shape(x).to_vec(), data);
        self.push(v, Op::ClampMin { x, lo })
    }

    // ── Reductions / reshaping ───────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(RealArray::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().sum();
        self.push(RealArray::scalar(s / n as f64), Op::Mean { x })
    }

    /// Metadata-only reshape; layout is row-major on both sides.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + col..r * total + col + w]
                    .copy_from_slice(&src[r * w..r * w + w]);
            }
            col += w;
        }
        let v = RealArray::new(vec![rows, total], data);
        Ok(self.push(v, Op::ConcatCols { parts: parts.to_vec() }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, contribution: &[f64]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from a scalar root. Gradients for every reachable node
    /// are left on the tape and read with [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                reason: format!("root must be scalar, got shape {:?}", self.shape(root)),
            });
        }
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    // keep the gradient available for the caller
                    self.grads[i] = Some(g);
                    continue;
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let da = zip_map(&g, self.value(b).data(), |gi, bv| gi * bv);
                    let db = zip_map(&g, self.value(a).data(), |gi, av| gi * av);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Div { a, b } => {
                    let bv = self.value(b).data();
                    let av = self.value(a).data();
                    let da: Vec<f64> = g.iter().zip(bv).map(|(gi, b)| gi / b).collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (a, b))| -gi * a / (b * b))
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(a, &da);
                }
                Op::AddScalar { a, .. } => self.accumulate(a, &g),
                Op::AffineConst { a, ref scale, .. } => {
                    let da = zip_map(&g, scale, |gi, s| gi * s);
                    self.accumulate(a, &da);
                }
                Op::AddBias { x, b } => {
                    let c = *self.shape(b).first().unwrap();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accumulate(x, &g);
                    self.accumulate(b, &db);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let mut da = vec![0.0; m * k];
                    array::matmul_nt_into(&mut da, &g, self.value(b).data(), m, n, k);
                    let mut db = vec![0.0; k * n];
                    array::matmul_tn_into(&mut db, self.value(a).data(), &g, m, k, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatmulNT { a, b } => {
                    // c[i][j] = sum_p a[i][p] b[j][p];  a: m×k, b: n×k, g: m×n
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    let mut da = vec![0.0; m * k];
                    array::matmul_nn_into(&mut da, &g, self.value(b).data(), m, n, k);
                    let mut db = vec![0.0; n * k];
                    array::matmul_tn_into(&mut db, &g, self.value(a).data(), m, n, k);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::SoftmaxRows { x } => {
                    let n = self.shape(i_node(i))[1];
                    let y = self.nodes[i].value.data();
                    let mut dx = vec![0.0; g.len()];
                    for (r, dxr) in dx.chunks_mut(n).enumerate() {
                        let yr = &y[r * n..r * n + n];
                        let gr = &g[r * n..r * n + n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Conv2d { x, k, stride, padding } => {
                    let (h, w, cin) = dims3(self.shape(x));
                    let ks = self.shape(k).to_vec();
                    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
                    let (oh, ow, _) = dims3(self.nodes[i].value.shape());
                    let (ph, pw) = (padding.amount(kh), padding.amount(kw));
                    let mut dx = vec![0.0; h * w * cin];
                    array::conv2d_backward_input(
                        &mut dx, &g, self.value(k).data(), h, w, cin, kh, kw, cout, stride, ph,
                        pw, oh, ow,
                    );
                    let mut dk = vec![0.0; kh * kw * cin * cout];
                    array::conv2d_backward_kernel(
                        &mut dk, &g, self.value(x).data(), h, w, cin, kh, kw, cout, stride, ph,
                        pw, oh, ow,
                    );
                    self.accumulate(x, &dx);
                    self.accumulate(k, &dk);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[i].value.data();
                    let dx = zip_map(&g, y, |gi, yv| gi * yv * (1.0 - yv));
                    self.accumulate(x, &dx);
                }
                Op::Silu { x } => {
                    let xv = self.value(x).data();
                    let dx = zip_map(&g, xv, |gi, v| {
                        let s = array::sigmoid(v);
                        gi * (s + v * s * (1.0 - s))
                    });
                    self.accumulate(x, &dx);
                }
                Op::Abs { x } => {
                    let xv = self.value(x).data();
                    let dx = zip_map(&g, xv, |gi, v| {
                        if v > 0.0 {
                            gi
                        } else if v < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(x, &dx);
                }
                Op::Ln { x } => {
                    let xv = self.value(x).data();
                    let dx = zip_map(&g, xv, |gi, v| gi / v);
                    self.accumulate(x, &dx);
                }
                Op::PowConst { x, e } => {
                    let xv = self.value(x).data();
                    let dx = zip_map(&g, xv, |gi, v| {
                        if e == 0.0 {
                            0.0
                        } else {
                            gi * e * v.powf(e - 1.0)
                        }
                    });
                    self.accumulate(x, &dx);
                }
                Op::ClampMin { x, lo } => {
                    let xv = self.value(x).data();
                    let dx = zip_map(&g, xv, |gi, v| if v >= lo { gi } else { 0.0 });
                    self.accumulate(x, &dx);
                }
                Op::Sum { x } => {
                    let dx = vec![g[0]; self.value(x).len()];
                    self.accumulate(x, &dx);
                }
                Op::Mean { x } => {
                    let n = self.value(x).len();
                    let dx = vec![g[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => self.accumulate(x, &g),
                Op::ConcatCols { ref parts } => {
                    let rows = self.nodes[i].value.shape()[0];
                    let total = self.nodes[i].value.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..r * w + w]
                                .copy_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        self.accumulate(p, &dp);
                        col += w;
                    }
                }
            }
        }
        Ok(())
    }
}

fn i_node(i: usize) -> NodeId {
    NodeId(i)
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(RealArray::new(vec![3], vec![1.0, -2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(RealArray::scalar(5.0));
        let z = t.add(x, x).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(RealArray::zeros(vec![2, 2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn untouched_leaf_reads_zero() {
        let mut t = Tape::new();
        let x = t.leaf(RealArray::scalar(1.0));
        let y = t.leaf(RealArray::new(vec![2], vec![3.0, 4.0]));
        let z = t.scale(x, 2.0);
        t.backward(z).unwrap();
        assert!(t.grad(y).is_none());
        assert_eq!(t.grad_array(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_chain_values_match_raw_kernels() {
        let a = RealArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = RealArray::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mut t = Tape::new();
        let na = t.leaf(a.clone());
        let nb = t.leaf(b.clone());
        let nc = t.matmul(na, nb).unwrap();
        assert_eq!(t.value(nc), &array::matmul(&a, &b).unwrap());
    }
}
