//! Dense row-major arrays of 64-bit reals and the compute kernels used by
//! both the forward pass and the backward pass.
//!
//! Everything downstream (attention, the aggregation network, the decoder
//! heads) is built from the handful of kernels here. All kernels are
//! deterministic: parallel variants assign each output cell to exactly one
//! worker and keep the per-cell accumulation order fixed, so thread count
//! never changes a single bit of the result.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense array with row-major layout. An H×W×C feature map and its HW×C
/// token-matrix view share the same underlying data order, so the reshape
/// between them is metadata-only.
#[derive(Debug, Clone, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&e| e > 0), "extents must be positive");
        RealArray { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        RealArray::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        RealArray::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<RealArray> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                reason: format!("element count differs from {:?}", self.shape),
            });
        }
        Ok(RealArray::new(shape, self.data.clone()))
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// For a 2-D array, the column count.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_with(shape: Vec<usize>, mut f: impl FnMut() -> f64) -> Self {
        let n: usize = shape.iter().product();
        RealArray::new(shape, (0..n).map(|_| f()).collect())
    }
}

// Work below this many multiply-adds stays single threaded; the split only
// affects scheduling, never values.
const PAR_THRESHOLD: usize = 1 << 16;

/// c[i][j] = sum_p a[i][p] * b[p][j]
pub fn matmul(a: &RealArray, b: &RealArray) -> Result<RealArray> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_nn_into(&mut out, &a.data, &b.data, m, k, n);
    Ok(RealArray::new(vec![m, n], out))
}

pub(crate) fn matmul_nn_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, c_row: &mut [f64]| {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..p * n + n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// c[i][j] = sum_p a[i][p] * b[j][p]   (b used transposed)
pub(crate) fn matmul_nt_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, c_row: &mut [f64]| {
        let a_row = &a[i * k..i * k + k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..j * k + k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cj += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// c[p][j] = sum_i a[i][p] * b[i][j]   (a used transposed; a is m×k, b is m×n)
pub(crate) fn matmul_tn_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let body = |p: usize, c_row: &mut [f64]| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[i * n..i * n + n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in c.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &RealArray) -> Result<RealArray> {
    if x.shape.len() != 2 {
        return Err(Error::BadShape {
            op: "softmax_rows",
            shape: x.shape.clone(),
            reason: "expected a matrix".into(),
        });
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; m * n];
    softmax_rows_into(&mut out, &x.data, m, n);
    Ok(RealArray::new(vec![m, n], out))
}

pub(crate) fn softmax_rows_into(out: &mut [f64], x: &[f64], m: usize, n: usize) {
    let body = |i: usize, row: &mut [f64]| {
        let xr = &x[i * n..i * n + n];
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in row.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in row.iter_mut() {
            *o *= inv;
        }
    };
    if m * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// Padding rule for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Zero-pad by (k-1)/2 so stride-1 output matches the input grid.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    pub fn amount(&self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// Output spatial extent: floor((in + 2p - k)/stride) + 1.
pub fn conv_out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// Cross-correlation of an H×W×Cin input with a kh×kw×Cin×Cout kernel.
pub fn conv2d(
    x: &RealArray,
    kernel: &RealArray,
    stride: usize,
    padding: Padding,
) -> Result<RealArray> {
    let (h, w, cin) = match *x.shape() {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: x.shape.clone(),
                reason: "input must be H×W×C".into(),
            })
        }
    };
    let (kh, kw, kcin, cout) = match *kernel.shape() {
        [kh, kw, kcin, cout] => (kh, kw, kcin, cout),
        _ => {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: kernel.shape.clone(),
                reason: "kernel must be kh×kw×Cin×Cout".into(),
            })
        }
    };
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape.clone(),
            right: kernel.shape.clone(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: kernel.shape.clone(),
            reason: "kernel extents must be odd".into(),
        });
    }
    if stride == 0 {
        return Err(Error::Contract {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    let (ph, pw) = (padding.amount(kh), padding.amount(kw));
    let oh = conv_out_extent(h, kh, ph, stride);
    let ow = conv_out_extent(w, kw, pw, stride);
    let (oh, ow) = match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                left: x.shape.clone(),
                right: kernel.shape.clone(),
            })
        }
    };

    let mut out = vec![0.0; oh * ow * cout];
    conv2d_into(
        &mut out, &x.data, &kernel.data, h, w, cin, kh, kw, cout, stride, ph, pw, oh, ow,
    );
    Ok(RealArray::new(vec![oh, ow, cout], out))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_into(
    out: &mut [f64],
    x: &[f64],
    kernel: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) {
    let row_body = |oy: usize, out_row: &mut [f64]| {
        for ox in 0..ow {
            let acc = &mut out_row[ox * cout..ox * cout + cout];
            for di in 0..kh {
                let iy = (oy * stride + di) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for dj in 0..kw {
                    let ix = (ox * stride + dj) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let px = &x[(iy * w + ix) * cin..(iy * w + ix) * cin + cin];
                    let kbase = (di * kw + dj) * cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * cout..kbase + ci * cout + cout];
                        for (a, kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    };
    if oh * ow * cout * kh * kw * cin >= PAR_THRESHOLD {
        out.par_chunks_mut(ow * cout)
            .enumerate()
            .for_each(|(oy, row)| row_body(oy, row));
    } else {
        for (oy, row) in out.chunks_mut(ow * cout).enumerate() {
            row_body(oy, row);
        }
    }
}

/// Gradient of conv2d w.r.t. the input (gather form, parallel over input rows).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input(
    dx: &mut [f64],
    dy: &[f64],
    kernel: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) {
    let row_body = |iy: usize, dx_row: &mut [f64]| {
        for ix in 0..w {
            let acc = &mut dx_row[ix * cin..ix * cin + cin];
            for di in 0..kh {
                // need oy*stride + di - ph == iy
                let num = iy as isize + ph as isize - di as isize;
                if num < 0 || num % stride as isize != 0 {
                    continue;
                }
                let oy = (num / stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                for dj in 0..kw {
                    let num = ix as isize + pw as isize - dj as isize;
                    if num < 0 || num % stride as isize != 0 {
                        continue;
                    }
                    let ox = (num / stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let dyp = &dy[(oy * ow + ox) * cout..(oy * ow + ox) * cout + cout];
                    let kbase = (di * kw + dj) * cin * cout;
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let krow = &kernel[kbase + ci * cout..kbase + ci * cout + cout];
                        let mut s = 0.0;
                        for (g, kv) in dyp.iter().zip(krow) {
                            s += g * kv;
                        }
                        *a += s;
                    }
                }
            }
        }
    };
    if h * w * cin * kh * kw * cout >= PAR_THRESHOLD {
        dx.par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(iy, row)| row_body(iy, row));
    } else {
        for (iy, row) in dx.chunks_mut(w * cin).enumerate() {
            row_body(iy, row);
        }
    }
}

/// Gradient of conv2d w.r.t. the kernel. Serial scatter over output cells;
/// accumulation order is fixed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_kernel(
    dk: &mut [f64],
    dy: &[f64],
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) {
    for oy in 0..oh {
        for ox in 0..ow {
            let dyp = &dy[(oy * ow + ox) * cout..(oy * ow + ox) * cout + cout];
            for di in 0..kh {
                let iy = (oy * stride + di) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for dj in 0..kw {
                    let ix = (ox * stride + dj) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let px = &x[(iy * w + ix) * cin..(iy * w + ix) * cin + cin];
                    let kbase = (di * kw + dj) * cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &mut dk[kbase + ci * cout..kbase + ci * cout + cout];
                        for (kd, g) in krow.iter_mut().zip(dyp) {
                            *kd += xv * g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_array(shape: Vec<usize>, rng: &mut SplitMix64) -> RealArray {
        RealArray::fill_with(shape, || rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn matmul_identity() {
        let eye = RealArray::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let mut rng = SplitMix64::new(1);
        let x = random_array(vec![3, 5], &mut rng);
        let y = matmul(&eye, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_hand_case() {
        let a = RealArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = RealArray::new(vec![2, 1], vec![0.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(2);
        let a = random_array(vec![5, 7], &mut rng);
        let b = random_array(vec![7, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        // independent naive triple loop
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..7 {
                    acc += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                let got = c.data()[i * 3 + j];
                assert!(
                    (got - acc).abs() <= 1e-15 * acc.abs().max(1.0),
                    "({i},{j}): {got} vs {acc}"
                );
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = RealArray::zeros(vec![2, 3]);
        let b = RealArray::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_match_explicit_transpose() {
        let mut rng = SplitMix64::new(3);
        let a = random_array(vec![6, 4], &mut rng);
        let b = random_array(vec![5, 4], &mut rng);
        // a · bᵀ
        let mut c = vec![0.0; 6 * 5];
        matmul_nt_into(&mut c, a.data(), b.data(), 6, 4, 5);
        let bt = {
            let mut t = vec![0.0; 4 * 5];
            for i in 0..5 {
                for j in 0..4 {
                    t[j * 5 + i] = b.data()[i * 4 + j];
                }
            }
            RealArray::new(vec![4, 5], t)
        };
        let expect = matmul(&a, &bt).unwrap();
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        // aᵀ · b2 where a is m×k
        let b2 = random_array(vec![6, 3], &mut rng);
        let mut c2 = vec![0.0; 4 * 3];
        matmul_tn_into(&mut c2, a.data(), b2.data(), 6, 4, 3);
        let at = {
            let mut t = vec![0.0; 4 * 6];
            for i in 0..6 {
                for j in 0..4 {
                    t[j * 6 + i] = a.data()[i * 4 + j];
                }
            }
            RealArray::new(vec![4, 6], t)
        };
        let expect2 = matmul(&at, &b2).unwrap();
        for (x, y) in c2.iter().zip(expect2.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = RealArray::zeros(vec![1, 3]);
        let y = softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = SplitMix64::new(4);
        let x = random_array(vec![2, 5], &mut rng);
        let shifted = RealArray::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v + 123.456).collect(),
        );
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let x = RealArray::new(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let y = softmax_rows(&x).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in y.data().iter().enumerate() {
            let direct = ((i + 1) as f64).exp() / denom;
            assert!((v - direct).abs() < 1e-15, "{v} vs {direct}");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SplitMix64::new(5);
        let x = random_array(vec![4, 6, 1], &mut rng);
        let k = RealArray::new(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel() {
        let mut rng = SplitMix64::new(6);
        let x = random_array(vec![5, 5, 2], &mut rng);
        let k = RealArray::zeros(vec![3, 3, 2, 3]);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut rng = SplitMix64::new(7);
        let x = random_array(vec![8, 8, 2], &mut rng);
        let k = random_array(vec![3, 3, 2, 4], &mut rng);
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let y = conv2d(&x, &k, stride, padding).unwrap();
            let p = padding.amount(3);
            let oh = (8 + 2 * p - 3) / stride + 1;
            let ow = oh;
            assert_eq!(y.shape(), &[oh, ow, 4]);
            // independent sliding-window accumulation, different loop order
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..4 {
                        let mut acc = 0.0;
                        for di in 0..3 {
                            for dj in 0..3 {
                                let iy = (oy * stride + di) as isize - p as isize;
                                let ix = (ox * stride + dj) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= 8 || ix >= 8 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    let xv = x.data()[((iy as usize) * 8 + ix as usize) * 2 + ci];
                                    let kv = k.data()[((di * 3 + dj) * 2 + ci) * 4 + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        let got = y.data()[(oy * ow + ox) * 4 + co];
                        assert!(
                            (got - acc).abs() <= 1e-15 * acc.abs().max(1.0),
                            "stride {stride}: ({oy},{ox},{co}) {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = RealArray::zeros(vec![2, 2, 1]);
        let k = RealArray::zeros(vec![5, 5, 1, 1]);
        assert!(conv2d(&x, &k, 1, Padding::Valid).is_err());
    }

    #[test]
    fn ops_are_deterministic_across_calls() {
        let mut rng = SplitMix64::new(8);
        // large enough to take the parallel path
        let a = random_array(vec![96, 64], &mut rng);
        let b = random_array(vec![64, 96], &mut rng);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1, c2);
        let s1 = softmax_rows(&c1).unwrap();
        let s2 = softmax_rows(&c1).unwrap();
        assert_eq!(s1, s2);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let x = RealArray::fill_with(vec![rows, cols], || rng.uniform(-30.0, 30.0));
            let y = softmax_rows(&x).unwrap();
            for r in 0..rows {
                let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
                proptest::prop_assert!(y.data()[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
            }
        }
    }
}
