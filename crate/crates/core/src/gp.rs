//! Exact Gaussian-process regression with an RBF kernel.
//!
//! Predictions use Cholesky solves of `K + σ²I`. Hyperparameters are chosen
//! by maximizing the log marginal likelihood over a grid of lengthscales and
//! noise levels, with the signal variance matched to the target variance.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_log_det, cholesky_solve, solve_lower, Tensor};
use crate::priors::{cross_kernel, kernel_matrix, Kernel};

#[derive(Clone, Debug, PartialEq)]
pub struct GPHyper {
    /// One shared lengthscale, or one per input dimension (ARD).
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GPHyper {
    pub fn shared(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        Self {
            lengthscales: vec![lengthscale],
            signal_variance,
            noise_variance,
        }
    }

    pub fn kernel(&self) -> Kernel {
        Kernel::Rbf {
            lengthscales: self.lengthscales.clone(),
            signal_variance: self.signal_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if self.lengthscales.is_empty()
            || !self.lengthscales.iter().all(|&l| ok(l))
            || !ok(self.signal_variance)
            || !ok(self.noise_variance)
        {
            return Err(Error::Config(format!("GP hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GPPosterior {
    pub mean: Vec<f64>,
    /// Predictive variance of a noisy observation.
    pub variance: Vec<f64>,
    /// `M × N` weights: `mean = beta · y`.
    pub beta: Tensor,
}

fn noisy_gram(hyper: &GPHyper, x: &Tensor) -> Result<Tensor> {
    let mut k = kernel_matrix(x, &hyper.kernel())?;
    for i in 0..k.rows() {
        let v = k.get(i, i) + hyper.noise_variance;
        k.set(i, i, v);
    }
    Ok(k)
}

fn factor(k: &Tensor) -> Result<Tensor> {
    cholesky(k, 0.0).map(|c| c.factor).map_err(|e| match e {
        Error::NotSpd { row, pivot, jitter } => Error::Numeric(format!(
            "GP covariance not positive definite at row {row} (pivot {pivot:e}) after jitter {jitter:e}"
        )),
        other => other,
    })
}

/// Posterior predictive under a zero prior mean.
pub fn gp_predict(hyper: &GPHyper, x_train: &Tensor, y_train: &[f64], x_test: &Tensor) -> Result<GPPosterior> {
    hyper.validate()?;
    if x_train.rows() == 0 || x_train.is_empty() {
        return Err(Error::Contract("GP needs at least one training point".into()));
    }
    if y_train.len() != x_train.rows() {
        return Err(Error::Dimension {
            op: "gp_predict",
            lhs: x_train.shape().to_vec(),
            rhs: vec![y_train.len()],
        });
    }
    let (n, m) = (x_train.rows(), x_test.rows());
    let l = factor(&noisy_gram(hyper, x_train)?)?;
    let ks = cross_kernel(x_test, x_train, &hyper.kernel())?;
    let mut beta = vec![0.0; m * n];
    let mut mean = Vec::with_capacity(m);
    let mut variance = Vec::with_capacity(m);
    let kernel = hyper.kernel();
    for j in 0..m {
        let kj = ks.row(j);
        let b = cholesky_solve(&l, kj);
        mean.push(b.iter().zip(y_train).map(|(a, y)| a * y).sum());
        let kss = kernel.eval(x_test.row(j), x_test.row(j));
        let quad: f64 = b.iter().zip(kj).map(|(a, k)| a * k).sum();
        let v = kss - quad + hyper.noise_variance;
        variance.push(if v < 0.0 { 0.0 } else { v });
        beta[j * n..(j + 1) * n].copy_from_slice(&b);
    }
    Ok(GPPosterior {
        mean,
        variance,
        beta: Tensor::from_vec(m, n, beta),
    })
}

/// [`gp_predict`] after subtracting the training-target mean, which is added
/// back to the predictive mean.
pub fn gp_predict_centered(hyper: &GPHyper, x_train: &Tensor, y_train: &[f64], x_test: &Tensor) -> Result<GPPosterior> {
    let mu = y_train.iter().sum::<f64>() / y_train.len().max(1) as f64;
    let centered: Vec<f64> = y_train.iter().map(|y| y - mu).collect();
    let mut post = gp_predict(hyper, x_train, &centered, x_test)?;
    post.mean.iter_mut().for_each(|m| *m += mu);
    Ok(post)
}

/// `-½ yᵀ(K+σ²I)⁻¹y - ½ log|K+σ²I| - (n/2) log 2π`.
pub fn log_marginal_likelihood(hyper: &GPHyper, x: &Tensor, y: &[f64]) -> Result<f64> {
    hyper.validate()?;
    let l = factor(&noisy_gram(hyper, x)?)?;
    let z = solve_lower(&l, y);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let n = y.len() as f64;
    Ok(-0.5 * quad - 0.5 * cholesky_log_det(&l) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Gradient of the log marginal likelihood with respect to each log-lengthscale:
/// `½ tr((ααᵀ - K⁻¹) ∂K/∂log ℓ)`.
pub fn lml_grad_log_lengthscale(hyper: &GPHyper, x: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    hyper.validate()?;
    let n = x.rows();
    let kf = kernel_matrix(x, &hyper.kernel())?;
    let l = factor(&noisy_gram(hyper, x)?)?;
    let alpha = cholesky_solve(&l, y);
    let mut kinv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        for i in 0..n {
            kinv[i * n + j] = col[i];
        }
    }
    let ls = &hyper.lengthscales;
    let groups: Vec<Vec<usize>> = if ls.len() == 1 {
        vec![(0..x.cols()).collect()]
    } else {
        (0..x.cols()).map(|k| vec![k]).collect()
    };
    Ok(groups
        .iter()
        .enumerate()
        .map(|(g, dims)| {
            let l2 = ls[g] * ls[g];
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d2: f64 = dims.iter().map(|&k| (x.get(i, k) - x.get(j, k)).powi(2)).sum();
                    let dk = kf.get(i, j) * d2 / l2;
                    acc += (alpha[i] * alpha[j] - kinv[i * n + j]) * dk;
                }
            }
            0.5 * acc
        })
        .collect())
}

/// Grid of candidate lengthscales and noise variances.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGrid {
    pub lengthscales: Vec<f64>,
    pub noise_variances: Vec<f64>,
    /// Multipliers applied to the matched signal variance. The sample
    /// variance of a smooth draw underestimates its prior variance.
    pub signal_scales: Vec<f64>,
    /// Per-dimension lengthscales (Cartesian product over dimensions).
    pub ard: bool,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl Default for HyperGrid {
    /// 9 lengthscales on `[0.05, 2]`, noise variances `1e-6 … 1e-1` and
    /// signal multipliers `1 … 64`.
    fn default() -> Self {
        Self {
            lengthscales: log_space(0.05, 2.0, 9),
            noise_variances: log_space(1e-6, 1e-1, 6),
            signal_scales: log_space(1.0, 64.0, 4),
            ard: false,
        }
    }
}

const MAX_GRID: usize = 100_000;

impl HyperGrid {
    /// Candidate hyperparameters for data `(x, y)`; the signal variance is
    /// the target variance minus the candidate noise (floored at 1% of it),
    /// times each signal multiplier.
    pub fn candidates(&self, x: &Tensor, y: &[f64]) -> Result<Vec<GPHyper>> {
        if self.lengthscales.is_empty() || self.noise_variances.is_empty() || self.signal_scales.is_empty() {
            return Err(Error::Config("empty hyperparameter grid".into()));
        }
        let n = y.len().max(1) as f64;
        let mu = y.iter().sum::<f64>() / n;
        let var_y = (y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).max(1e-12);
        let dims = if self.ard { x.cols() } else { 1 };
        let total = self.lengthscales.len().pow(dims as u32) * self.noise_variances.len() * self.signal_scales.len();
        if total > MAX_GRID {
            return Err(Error::Config(format!("grid of {total} candidates is too large")));
        }
        let mut ls_sets: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..dims {
            ls_sets = ls_sets
                .into_iter()
                .flat_map(|prefix| {
                    self.lengthscales.iter().map(move |&l| {
                        let mut p = prefix.clone();
                        p.push(l);
                        p
                    })
                })
                .collect();
        }
        let mut out = Vec::with_capacity(total);
        for ls in &ls_sets {
            for &noise in &self.noise_variances {
                let base = (var_y - noise).max(0.01 * var_y);
                for &scale in &self.signal_scales {
                    out.push(GPHyper {
                        lengthscales: ls.clone(),
                        signal_variance: base * scale,
                        noise_variance: noise,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// `a` is preferred over `b` at equal likelihood: larger lengthscales, then
/// larger noise, then smaller signal variance.
fn smoother(a: &GPHyper, b: &GPHyper) -> bool {
    let la: f64 = a.lengthscales.iter().map(|l| l.ln()).sum();
    let lb: f64 = b.lengthscales.iter().map(|l| l.ln()).sum();
    if la != lb {
        return la > lb;
    }
    if a.noise_variance != b.noise_variance {
        return a.noise_variance > b.noise_variance;
    }
    a.signal_variance < b.signal_variance
}

/// Grid point with the highest log marginal likelihood.
pub fn gp_fit(x: &Tensor, y: &[f64], grid: &[GPHyper]) -> Result<GPHyper> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut best: Option<(f64, &GPHyper)> = None;
    for h in grid {
        let lml = log_marginal_likelihood(h, x, y).unwrap_or(f64::NEG_INFINITY);
        best = match best {
            None => Some((lml, h)),
            Some((bl, bh)) if lml > bl || (lml == bl && smoother(h, bh)) => Some((lml, h)),
            keep => keep,
        };
    }
    Ok(best.expect("nonempty").1.clone())
}

/// Fits on the centered targets of `(x, y)` using `grid`.
pub fn gp_fit_centered(x: &Tensor, y: &[f64], grid: &HyperGrid) -> Result<GPHyper> {
    let mu = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let c: Vec<f64> = y.iter().map(|v| v - mu).collect();
    gp_fit(x, &c, &grid.candidates(x, &c)?)
}

/// CSV of fitted hyperparameters: `lengthscales,signal_variance,noise_variance`
/// with lengthscales joined by `;`.
pub fn hyper_csv(hypers: &[GPHyper]) -> String {
    let mut s = String::from("lengthscales,signal_variance,noise_variance\n");
    for h in hypers {
        let ls: Vec<String> = h.lengthscales.iter().map(|l| format!("{l}")).collect();
        let _ = writeln!(s, "{},{},{}", ls.join(";"), h.signal_variance, h.noise_variance);
    }
    s
}

/// Brute-force joint-Gaussian conditioning by Gauss–Jordan inversion of the
/// full training block. Independent of the Cholesky path; used as an oracle.
pub mod oracle {
    use super::*;

    fn invert(a: &[f64], n: usize) -> Vec<f64> {
        let mut m = a.to_vec();
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs()))
                .expect("rows");
            for k in 0..n {
                m.swap(c * n + k, p * n + k);
                inv.swap(c * n + k, p * n + k);
            }
            let d = m[c * n + c];
            for k in 0..n {
                m[c * n + k] /= d;
                inv[c * n + k] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r * n + c];
                    if f != 0.0 {
                        for k in 0..n {
                            m[r * n + k] -= f * m[c * n + k];
                            inv[r * n + k] -= f * inv[c * n + k];
                        }
                    }
                }
            }
        }
        inv
    }

    /// Predictive mean and variance from the joint `(n+m)` covariance.
    pub fn conditioning(hyper: &GPHyper, x_train: &Tensor, y: &[f64], x_test: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (n, m, d) = (x_train.rows(), x_test.rows(), x_train.cols());
        let mut all = x_train.data().to_vec();
        all.extend_from_slice(x_test.data());
        let kern = hyper.kernel();
        let t = n + m;
        let mut s = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                s[i * t + j] = kern.eval(&all[i * d..(i + 1) * d], &all[j * d..(j + 1) * d]);
            }
            s[i * t + i] += hyper.noise_variance;
        }
        let s11: Vec<f64> = (0..n * n).map(|k| s[(k / n) * t + k % n]).collect();
        let inv = invert(&s11, n);
        let mut mean = Vec::with_capacity(m);
        let mut var = Vec::with_capacity(m);
        for a in 0..m {
            let row = n + a;
            let s21: Vec<f64> = (0..n).map(|j| s[row * t + j]).collect();
            let w: Vec<f64> = (0..n).map(|j| (0..n).map(|i| s21[i] * inv[i * n + j]).sum()).collect();
            mean.push(w.iter().zip(y).map(|(a, b)| a * b).sum());
            var.push(s[row * t + row] - w.iter().zip(&s21).map(|(a, b)| a * b).sum::<f64>());
        }
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::priors::{sample_dataset, PriorConfig};
    use proptest::prelude::*;

    fn rand_x(r: &mut SeededRng, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(n, d, (0..n * d).map(|_| r.uniform()).collect())
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let mut r = SeededRng::new(1);
        let x = rand_x(&mut r, 6, 1);
        let y: Vec<f64> = (0..6).map(|_| r.normal()).collect();
        let h = GPHyper::shared(0.1, 1.0, 1e-10);
        let p = gp_predict(&h, &x, &y, &x).unwrap();
        for (m, t) in p.mean.iter().zip(&y) {
            assert!((m - t).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_relevance_returns_prior_mean() {
        let x = Tensor::from_vec(3, 1, vec![0.0, 0.5, 1.0]);
        let h = GPHyper::shared(1e-4, 1.0, 0.1);
        let p = gp_predict(&h, &x, &[1.0, 2.0, 3.0], &Tensor::from_vec(1, 1, vec![0.25])).unwrap();
        assert!(p.mean[0].abs() < 1e-12);
        assert!((p.variance[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let h = GPHyper::shared(1.0, 1.0, 0.1);
        assert!(gp_predict(&h, &Tensor::zeros(&[0, 1]), &[], &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn lml_iid_case() {
        let x = Tensor::from_vec(3, 1, vec![0.0, 0.5, 1.0]);
        let y = [0.3, -1.2, 0.7];
        // Signal variance 1e-300 makes K ≈ 0.
        let h = GPHyper::shared(0.3, 1e-300, 1.0);
        let want: f64 = y.iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((log_marginal_likelihood(&h, &x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut r = SeededRng::new(3);
        for ard in [false, true] {
            let x = rand_x(&mut r, 12, 2);
            let y: Vec<f64> = (0..12).map(|_| r.normal()).collect();
            let ls = if ard { vec![0.4, 0.7] } else { vec![0.5] };
            let h = GPHyper {
                lengthscales: ls.clone(),
                signal_variance: 1.3,
                noise_variance: 0.05,
            };
            let g = lml_grad_log_lengthscale(&h, &x, &y).unwrap();
            for k in 0..ls.len() {
                let eps = 1e-5;
                let at = |delta: f64| {
                    let mut hh = h.clone();
                    hh.lengthscales[k] = (ls[k].ln() + delta).exp();
                    log_marginal_likelihood(&hh, &x, &y).unwrap()
                };
                let fd = (at(eps) - at(-eps)) / (2.0 * eps);
                assert!((fd - g[k]).abs() / fd.abs().max(1e-8) < 1e-4, "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn fit_edge_cases() {
        let x = Tensor::from_vec(3, 1, vec![0.0, 0.5, 1.0]);
        let one = vec![GPHyper::shared(0.3, 1.0, 0.1)];
        assert_eq!(gp_fit(&x, &[1.0, 2.0, 3.0], &one).unwrap(), one[0]);
        assert!(gp_fit(&x, &[1.0, 2.0, 3.0], &[]).is_err());
    }

    #[test]
    fn noisy_constant_data_picks_largest_noise() {
        let mut r = SeededRng::new(4);
        let x = rand_x(&mut r, 40, 1);
        let y: Vec<f64> = (0..40).map(|_| 0.1f64.sqrt() * r.normal()).collect();
        let grid = HyperGrid::default();
        let h = gp_fit_centered(&x, &y, &grid).unwrap();
        assert_eq!(h.noise_variance, *grid.noise_variances.last().unwrap());
    }

    #[test]
    fn recovers_prior_lengthscale() {
        let grid = HyperGrid::default();
        let cfg = PriorConfig {
            noise_variance: 1e-4,
            ..PriorConfig::synthetic_1d()
        };
        let mut hits = 0;
        for s in 0..20 {
            let d = sample_dataset(&cfg, 500 + s).unwrap();
            let h = gp_fit_centered(&d.x, &d.y, &grid).unwrap();
            let idx = grid.lengthscales.iter().position(|&l| l == h.lengthscales[0]).unwrap();
            let target = grid
                .lengthscales
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1.ln() - 0.6f64.ln()).abs().total_cmp(&(b.1.ln() - 0.6f64.ln()).abs()))
                .unwrap()
                .0;
            hits += usize::from(idx.abs_diff(target) <= 1);
        }
        assert!(hits >= 16, "{hits}/20");
    }

    #[test]
    fn ard_grid_size() {
        let g = HyperGrid {
            lengthscales: vec![0.1, 1.0, 3.0],
            noise_variances: vec![1e-3, 1e-2],
            signal_scales: vec![1.0],
            ard: true,
        };
        let x = Tensor::zeros(&[4, 2]);
        let c = g.candidates(&x, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.len(), 18);
        assert!(c.iter().all(|h| h.lengthscales.len() == 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_brute_force_conditioning(seed in 0u64..100_000, n in 1usize..20, m in 1usize..10, d in 1usize..4) {
            let mut r = SeededRng::new(seed);
            let x = rand_x(&mut r, n, d);
            let xs = rand_x(&mut r, m, d);
            let y: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let h = GPHyper::shared(r.uniform_range(0.1, 1.0), r.uniform_range(0.5, 2.0), r.uniform_range(0.01, 0.5));
            let p = gp_predict(&h, &x, &y, &xs).unwrap();
            let (mean, var) = oracle::conditioning(&h, &x, &y, &xs);
            for j in 0..m {
                prop_assert!((p.mean[j] - mean[j]).abs() < 1e-8);
                prop_assert!((p.variance[j] - var[j]).abs() < 1e-8);
                prop_assert!(p.variance[j] <= h.signal_variance + h.noise_variance + 1e-12);
            }
        }

        #[test]
        fn linear_in_targets(seed in 0u64..100_000, n in 1usize..15) {
            let mut r = SeededRng::new(seed);
            let x = rand_x(&mut r, n, 2);
            let xs = rand_x(&mut r, 3, 2);
            let y1: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let y2: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let y12: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
            let h = GPHyper::shared(0.4, 1.0, 0.1);
            let (p1, p2, p12) = (
                gp_predict(&h, &x, &y1, &xs).unwrap(),
                gp_predict(&h, &x, &y2, &xs).unwrap(),
                gp_predict(&h, &x, &y12, &xs).unwrap(),
            );
            prop_assert_eq!(p1.beta.to_le_bytes(), p2.beta.to_le_bytes());
            for j in 0..3 {
                prop_assert!((p12.mean[j] - p1.mean[j] - p2.mean[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn duplicate_point_never_increases_variance(seed in 0u64..100_000, n in 1usize..12) {
            let mut r = SeededRng::new(seed);
            let x = rand_x(&mut r, n, 1);
            let xs = rand_x(&mut r, 4, 1);
            let y: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let dup = r.below(n);
            let mut rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
            rows.push(x.row(dup).to_vec());
            let mut y2 = y.clone();
            y2.push(y[dup]);
            let h = GPHyper::shared(0.3, 1.0, 0.05);
            let a = gp_predict(&h, &x, &y, &xs).unwrap();
            let b = gp_predict(&h, &Tensor::from_rows(&rows), &y2, &xs).unwrap();
            for j in 0..4 {
                prop_assert!(b.variance[j] <= a.variance[j] + 1e-12);
            }
        }

        #[test]
        fn lml_permutation_invariant(seed in 0u64..100_000, n in 2usize..12) {
            let mut r = SeededRng::new(seed);
            let x = rand_x(&mut r, n, 2);
            let y: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let perm: Vec<usize> = (0..n).rev().collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let h = GPHyper::shared(0.5, 1.0, 0.1);
            let a = log_marginal_likelihood(&h, &x, &y).unwrap();
            let b = log_marginal_likelihood(&h, &x.select_rows(&perm), &yp).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
