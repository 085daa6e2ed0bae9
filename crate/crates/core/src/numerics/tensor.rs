//! Dense row-major fp64 tensors and the eager (tape-free) kernels.

use crate::error::{Error, Result};

/// Variance floor used by every layer normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// 2-D constructor; panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "from_vec: {rows}x{cols} != {}", data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Product of all leading dimensions (1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec(c, r, out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), c, data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        Self::from_vec(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Raw little-endian bytes of the data buffer; used for bitwise comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, with `op` selected by the strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // a is stored as m×k (or k×m when transposed); likewise b.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and the strides address only
    // elements inside the respective buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (m, ka) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (kb, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    if ka != kb || a.shape.len() > 2 || b.shape.len() > 2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, ka, n, &a.data, ta, &b.data, tb, &mut out, 0.0);
    Ok(Tensor::from_vec(m, n, out))
}

/// Row-wise softmax of `logits / temperature`, stabilized by row-max subtraction.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row, 1.0 / temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) * scale).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row normalization over the trailing dimension followed by `gain * x + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let (mean, rstd) = row_moments(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Depthwise convolution over the row (point) axis with zero padding.
///
/// `kernel` is `k × d` (one filter column per channel), `bias` has `d` entries.
/// Output row `n` is `sum_t kernel[t, c] * x[n + t - k/2, c] + bias[c]`.
pub fn conv1d_depthwise(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let k = kernel.rows();
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv kernel size must be odd, got {k}")));
    }
    let d = x.cols();
    if kernel.cols() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "conv1d_depthwise",
            lhs: x.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    let n = x.rows();
    let mut out = vec![0.0; n * d];
    conv1d_forward(&x.data, &kernel.data, &bias.data, n, d, k, &mut out);
    Ok(Tensor::from_vec(n, d, out))
}

pub(crate) fn conv1d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    n: usize,
    d: usize,
    k: usize,
    out: &mut [f64],
) {
    let half = k / 2;
    for row in 0..n {
        let o = &mut out[row * d..(row + 1) * d];
        o.copy_from_slice(bias);
        for t in 0..k {
            let src = row as isize + t as isize - half as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let xs = &x[src as usize * d..(src as usize + 1) * d];
            let ks = &kernel[t * d..(t + 1) * d];
            for c in 0..d {
                o[c] += ks[c] * xs[c];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Positive feature map `elu(u) + 1` used by linear attention.
pub fn elu_plus_one(u: f64) -> f64 {
    if u > 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

pub fn elu_plus_one_grad(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else {
        u.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_transposed_operands_agree_with_explicit_transpose() {
        let a = Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let b = Tensor::from_vec(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let direct = matmul(&a, &b.transpose()).unwrap();
        let strided = matmul_t(&a, false, &b, true).unwrap();
        assert_eq!(direct, strided);
        let at = matmul_t(&a.transpose(), true, &b.transpose(), false).unwrap();
        assert_eq!(direct, at);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![2f64.ln(), 0.0]]), 1.0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]), 1.0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let t = Tensor::from_rows(&[vec![f64::NAN, 0.0]]);
        assert!(matches!(softmax_rows(&t, 1.0), Err(Error::Numeric(_))));
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]);
        assert!(matches!(softmax_rows(&t, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let out = layer_norm(&Tensor::from_rows(&[vec![3.0, 3.0]]), &g, &b).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        let out = layer_norm(&Tensor::from_rows(&[vec![1.0, -1.0]]), &g, &b).unwrap();
        let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((out.data()[0] - s).abs() < 1e-15);
        assert!((out.data()[1] + s).abs() < 1e-15);
    }

    #[test]
    fn conv_cases() {
        let x = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let delta = Tensor::from_vec(3, 1, vec![0.0, 1.0, 0.0]);
        let zero = Tensor::zeros(&[1]);
        assert_eq!(conv1d_depthwise(&x, &delta, &zero).unwrap(), x);
        let avg = Tensor::from_vec(3, 1, vec![1.0 / 3.0; 3]);
        let y = conv1d_depthwise(&x, &avg, &zero).unwrap();
        let want = [1.0, 2.0, 5.0 / 3.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let even = Tensor::zeros(&[2, 1]);
        assert!(matches!(conv1d_depthwise(&x, &even, &zero), Err(Error::Config(_))));
    }
}
