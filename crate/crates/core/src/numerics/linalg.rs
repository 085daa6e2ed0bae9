//! Cholesky factorization with jitter escalation and triangular solves.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest diagonal jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-3;
/// First jitter tried when the caller asked for none and factorization failed.
pub const BASE_JITTER: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Cholesky {
    /// Lower-triangular factor `L` with `L Lᵀ = A + jitter I`.
    pub factor: Tensor,
    /// Jitter that was actually added to the diagonal.
    pub jitter: f64,
}

/// Factorizes `a + jitter I`, multiplying the jitter by 10 on failure until it
/// would exceed [`MAX_JITTER`].
pub fn cholesky(a: &Tensor, jitter: f64) -> Result<Cholesky> {
    let n = a.rows();
    if a.cols() != n || a.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "cholesky",
            lhs: a.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    if jitter < 0.0 {
        return Err(Error::Contract(format!("negative jitter {jitter}")));
    }
    let mut j = jitter;
    loop {
        match factor_once(a, j) {
            Ok(l) => return Ok(Cholesky { factor: l, jitter: j }),
            Err((row, pivot)) => {
                let next = if j == 0.0 { BASE_JITTER } else { j * 10.0 };
                if next > MAX_JITTER * (1.0 + 1e-9) {
                    return Err(Error::NotSpd { row, pivot, jitter: j });
                }
                j = next;
            }
        }
    }
}

fn factor_once(a: &Tensor, jitter: f64) -> std::result::Result<Tensor, (usize, f64)> {
    let n = a.rows();
    let ad = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = ad[i * n + j];
            if i == j {
                s += jitter;
            }
            let (li, lj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            s -= li.iter().zip(lj).map(|(x, y)| x * y).sum::<f64>();
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err((i, s));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Tensor::from_vec(n, n, l))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let ld = l.data();
    let mut x = b.to_vec();
    for i in 0..n {
        let s: f64 = (0..i).map(|j| ld[i * n + j] * x[j]).sum();
        x[i] = (x[i] - s) / ld[i * n + i];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let ld = l.data();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| ld[j * n + i] * x[j]).sum();
        x[i] = (x[i] - s) / ld[i * n + i];
    }
    x
}

/// Solves `(L Lᵀ) x = b`.
pub fn cholesky_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// `log |L Lᵀ|`.
pub fn cholesky_log_det(l: &Tensor) -> f64 {
    let n = l.rows();
    2.0 * (0..n).map(|i| l.get(i, i).ln()).sum::<f64>()
}
