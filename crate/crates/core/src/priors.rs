//! Synthetic regression datasets drawn from Gaussian-process priors.
//!
//! A [`KernelSpec`] describes a (possibly randomized) covariance family. Each
//! dataset first resolves it to a concrete [`Kernel`], then draws inputs on the
//! unit cube, a latent function `f ~ MVN(0, K)` and i.i.d. Gaussian noise.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{cholesky, sample_mvn, SeededRng, Tensor};

/// A concrete covariance function.
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// `σ² exp(-Σ_k (a_k - b_k)² / (2 ℓ_k²))`. A single lengthscale is shared
    /// by all dimensions; otherwise one per dimension.
    Rbf {
        lengthscales: Vec<f64>,
        signal_variance: f64,
    },
    /// Sum of two isotropic RBFs, each carrying half of the signal variance.
    SumOfTwoRbf {
        lengthscale_1: f64,
        lengthscale_2: f64,
        signal_variance: f64,
    },
    /// `σ² (slope² a·b + offset) · exp(-2 sin²(π|a-b|/period) / ℓ_p²)`.
    LinearPeriodic {
        slope: f64,
        offset: f64,
        period: f64,
        periodic_lengthscale: f64,
        signal_variance: f64,
    },
}

impl Kernel {
    pub fn rbf(lengthscale: f64, signal_variance: f64) -> Self {
        Kernel::Rbf {
            lengthscales: vec![lengthscale],
            signal_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive and finite")));
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match self {
            Kernel::Rbf {
                lengthscales,
                signal_variance,
            } => {
                if lengthscales.is_empty() || !lengthscales.iter().all(|&l| ok(l)) {
                    return bad("lengthscale");
                }
                if !ok(*signal_variance) {
                    return bad("signal_variance");
                }
            }
            Kernel::SumOfTwoRbf {
                lengthscale_1,
                lengthscale_2,
                signal_variance,
            } => {
                if !ok(*lengthscale_1) || !ok(*lengthscale_2) {
                    return bad("lengthscale");
                }
                if !ok(*signal_variance) {
                    return bad("signal_variance");
                }
            }
            Kernel::LinearPeriodic {
                slope,
                offset,
                period,
                periodic_lengthscale,
                signal_variance,
            } => {
                if !ok(*period) {
                    return bad("period");
                }
                if !ok(*periodic_lengthscale) {
                    return bad("periodic lengthscale");
                }
                if !ok(*signal_variance) {
                    return bad("signal_variance");
                }
                if !slope.is_finite() || !(*offset >= 0.0) {
                    return Err(Error::Config("slope must be finite and offset >= 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Kernel value between two points of equal dimension.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Kernel::Rbf {
                lengthscales,
                signal_variance,
            } => {
                let r2: f64 = a
                    .iter()
                    .zip(b)
                    .enumerate()
                    .map(|(k, (x, y))| {
                        let l = if lengthscales.len() == 1 {
                            lengthscales[0]
                        } else {
                            lengthscales[k]
                        };
                        ((x - y) / l).powi(2)
                    })
                    .sum();
                signal_variance * (-0.5 * r2).exp()
            }
            Kernel::SumOfTwoRbf {
                lengthscale_1,
                lengthscale_2,
                signal_variance,
            } => {
                let d2 = sq_dist(a, b);
                0.5 * signal_variance
                    * ((-0.5 * d2 / lengthscale_1.powi(2)).exp()
                        + (-0.5 * d2 / lengthscale_2.powi(2)).exp())
            }
            Kernel::LinearPeriodic {
                slope,
                offset,
                period,
                periodic_lengthscale,
                signal_variance,
            } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let dist = sq_dist(a, b).sqrt();
                let s = (std::f64::consts::PI * dist / period).sin();
                let periodic = (-2.0 * s * s / periodic_lengthscale.powi(2)).exp();
                signal_variance * (slope * slope * dot + offset) * periodic
            }
        }
    }

    /// Whether `k(x, x)` is the same for every `x`.
    pub fn is_stationary(&self) -> bool {
        !matches!(self, Kernel::LinearPeriodic { .. })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Gram matrix `K[i][j] = k(x_i, x_j)`.
pub fn kernel_matrix(x: &Tensor, kernel: &Kernel) -> Result<Tensor> {
    cross_kernel(x, x, kernel)
}

/// Cross-covariance `K[i][j] = k(a_i, b_j)`.
pub fn cross_kernel(a: &Tensor, b: &Tensor, kernel: &Kernel) -> Result<Tensor> {
    kernel.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "cross_kernel",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if let Kernel::Rbf { lengthscales, .. } = kernel {
        if lengthscales.len() != 1 && lengthscales.len() != a.cols() {
            return Err(Error::Config(format!(
                "{} lengthscales for input dimension {}",
                lengthscales.len(),
                a.cols()
            )));
        }
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = kernel.eval(a.row(i), b.row(j));
        }
    }
    Ok(Tensor::from_vec(n, m, out))
}

/// A covariance family from which one [`Kernel`] is drawn per dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    RbfFixed {
        lengthscale: f64,
        signal_variance: f64,
    },
    RbfSampled {
        lengthscale_range: (f64, f64),
        signal_variance: f64,
    },
    SumOfTwoRbf {
        lengthscale_1_range: (f64, f64),
        lengthscale_2_range: (f64, f64),
        signal_variance: f64,
    },
    LinearPeriodic {
        slope: f64,
        offset: f64,
        period: f64,
        periodic_lengthscale: f64,
        signal_variance: f64,
    },
    /// Uniform choice among the members, once per dataset.
    Choice(Vec<KernelSpec>),
}

impl KernelSpec {
    pub fn linear_periodic_default(signal_variance: f64) -> Self {
        KernelSpec::LinearPeriodic {
            slope: 1.0,
            offset: 0.1,
            period: 0.2,
            periodic_lengthscale: 0.5,
            signal_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        match self {
            KernelSpec::RbfFixed {
                lengthscale,
                signal_variance,
            } => Kernel::rbf(*lengthscale, *signal_variance).validate(),
            KernelSpec::RbfSampled {
                lengthscale_range,
                signal_variance,
            } => {
                if !range_ok(*lengthscale_range) {
                    return Err(Error::Config("invalid lengthscale range".into()));
                }
                Kernel::rbf(lengthscale_range.0, *signal_variance).validate()
            }
            KernelSpec::SumOfTwoRbf {
                lengthscale_1_range,
                lengthscale_2_range,
                signal_variance,
            } => {
                if !range_ok(*lengthscale_1_range) || !range_ok(*lengthscale_2_range) {
                    return Err(Error::Config("invalid lengthscale range".into()));
                }
                Kernel::rbf(1.0, *signal_variance).validate()
            }
            KernelSpec::LinearPeriodic {
                slope,
                offset,
                period,
                periodic_lengthscale,
                signal_variance,
            } => Kernel::LinearPeriodic {
                slope: *slope,
                offset: *offset,
                period: *period,
                periodic_lengthscale: *periodic_lengthscale,
                signal_variance: *signal_variance,
            }
            .validate(),
            KernelSpec::Choice(members) => {
                if members.is_empty() {
                    return Err(Error::Config("empty kernel choice".into()));
                }
                members.iter().try_for_each(KernelSpec::validate)
            }
        }
    }

    /// Draws a concrete kernel.
    pub fn resolve(&self, rng: &mut SeededRng) -> Kernel {
        match self {
            KernelSpec::RbfFixed {
                lengthscale,
                signal_variance,
            } => Kernel::rbf(*lengthscale, *signal_variance),
            KernelSpec::RbfSampled {
                lengthscale_range: (lo, hi),
                signal_variance,
            } => Kernel::rbf(rng.uniform_range(*lo, *hi), *signal_variance),
            KernelSpec::SumOfTwoRbf {
                lengthscale_1_range: (a, b),
                lengthscale_2_range: (c, d),
                signal_variance,
            } => Kernel::SumOfTwoRbf {
                lengthscale_1: rng.uniform_range(*a, *b),
                lengthscale_2: rng.uniform_range(*c, *d),
                signal_variance: *signal_variance,
            },
            KernelSpec::LinearPeriodic {
                slope,
                offset,
                period,
                periodic_lengthscale,
                signal_variance,
            } => Kernel::LinearPeriodic {
                slope: *slope,
                offset: *offset,
                period: *period,
                periodic_lengthscale: *periodic_lengthscale,
                signal_variance: *signal_variance,
            },
            KernelSpec::Choice(members) => members[rng.below(members.len())].resolve(rng),
        }
    }

    /// Marginal prior variance of `f` (averaged over members for a choice).
    pub fn signal_variance(&self) -> f64 {
        match self {
            KernelSpec::RbfFixed {
                signal_variance, ..
            }
            | KernelSpec::RbfSampled {
                signal_variance, ..
            }
            | KernelSpec::SumOfTwoRbf {
                signal_variance, ..
            }
            | KernelSpec::LinearPeriodic {
                signal_variance, ..
            } => *signal_variance,
            KernelSpec::Choice(m) => {
                m.iter().map(KernelSpec::signal_variance).sum::<f64>() / m.len() as f64
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputShift {
    Fixed(f64),
    /// Drawn once per dataset.
    Uniform(f64, f64),
}

impl OutputShift {
    /// Center of the shift distribution.
    pub fn center(&self) -> f64 {
        match *self {
            OutputShift::Fixed(s) => s,
            OutputShift::Uniform(lo, hi) => 0.5 * (lo + hi),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputNormalization {
    /// Inputs stay on the unit cube.
    Uniform01,
    /// Per-dataset, per-column standardization over all points.
    ZScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub input_dim: usize,
    pub points_per_dataset: usize,
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    pub output_shift: OutputShift,
    pub input_normalization: InputNormalization,
}

impl PriorConfig {
    /// 1D synthetic prior.
    pub fn synthetic_1d() -> Self {
        Self {
            input_dim: 1,
            points_per_dataset: 100,
            kernel: KernelSpec::RbfFixed {
                lengthscale: 0.6,
                signal_variance: 0.01,
            },
            noise_variance: 1e-2,
            output_shift: OutputShift::Fixed(1.0),
            input_normalization: InputNormalization::Uniform01,
        }
    }

    /// 2D synthetic prior.
    pub fn synthetic_2d() -> Self {
        Self {
            input_dim: 2,
            ..Self::synthetic_1d()
        }
    }

    /// 5D synthetic prior.
    pub fn synthetic_5d() -> Self {
        Self {
            input_dim: 5,
            points_per_dataset: 400,
            kernel: KernelSpec::RbfFixed {
                lengthscale: 0.6,
                signal_variance: 0.001,
            },
            noise_variance: 1e-4,
            output_shift: OutputShift::Fixed(1.0),
            input_normalization: InputNormalization::Uniform01,
        }
    }

    /// 10D synthetic prior.
    pub fn synthetic_10d() -> Self {
        Self {
            input_dim: 10,
            points_per_dataset: 500,
            kernel: KernelSpec::RbfFixed {
                lengthscale: 0.6,
                signal_variance: 0.01,
            },
            noise_variance: 1e-4,
            output_shift: OutputShift::Fixed(1.0),
            input_normalization: InputNormalization::Uniform01,
        }
    }

    /// High-dimensional power-flow-like prior (z-scored inputs, per-dataset shift).
    pub fn power_like(input_dim: usize) -> Self {
        Self {
            input_dim,
            points_per_dataset: 500,
            kernel: KernelSpec::RbfFixed {
                lengthscale: 215.0,
                signal_variance: 1e-4,
            },
            noise_variance: 1e-4,
            output_shift: OutputShift::Uniform(0.9, 1.1),
            input_normalization: InputNormalization::ZScore,
        }
    }

    /// Preset by input dimension (1, 2, 5, 10 or 64).
    pub fn preset(dim: usize) -> Result<Self> {
        match dim {
            1 => Ok(Self::synthetic_1d()),
            2 => Ok(Self::synthetic_2d()),
            5 => Ok(Self::synthetic_5d()),
            10 => Ok(Self::synthetic_10d()),
            64 => Ok(Self::power_like(64)),
            _ => Err(Error::Config(format!("no prior preset for dimension {dim}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.points_per_dataset < 2 {
            return Err(Error::Config("points_per_dataset must be >= 2".into()));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::Config("noise_variance must be >= 0".into()));
        }
        if let OutputShift::Uniform(lo, hi) = self.output_shift {
            if !(hi >= lo) {
                return Err(Error::Config("output shift range is inverted".into()));
            }
        }
        self.kernel.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `N × d` inputs.
    pub x: Tensor,
    /// `N` targets.
    pub y: Vec<f64>,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    /// CSV with header `x0,..,x{d-1},y`.
    pub fn to_csv(&self) -> String {
        let d = self.input_dim();
        let mut s = String::new();
        for k in 0..d {
            let _ = write!(s, "x{k},");
        }
        s.push_str("y\n");
        for i in 0..self.len() {
            for v in self.x.row(i) {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{}", self.y[i]);
        }
        s
    }

    /// Parses the format written by [`SyntheticDataset::to_csv`].
    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.last() != Some(&"y") || cols.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                msg: "header must end in y".into(),
            });
        }
        let d = cols.len() - 1;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if vals.len() != d + 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", d + 1, vals.len()),
                });
            }
            xs.extend_from_slice(&vals[..d]);
            ys.push(vals[d]);
        }
        Ok(Self {
            x: Tensor::from_vec(ys.len(), d, xs),
            y: ys,
            seed,
        })
    }
}

pub(crate) fn zscore_columns(x: &mut Tensor) {
    let (n, d) = (x.rows(), x.cols());
    for k in 0..d {
        let mean = (0..n).map(|i| x.get(i, k)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, k) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            let v = (x.get(i, k) - mean) / sd;
            x.set(i, k, v);
        }
    }
}

/// Draws `y = f(X) + ε + shift` at the given inputs with a concrete kernel.
pub fn sample_targets(
    x: &Tensor,
    kernel: &Kernel,
    noise_variance: f64,
    shift: f64,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    // Factor the unit-diagonal-scaled matrix so jitter is relative to the signal.
    let k = kernel_matrix(x, kernel)?;
    let n = k.rows();
    let scale = (0..n).map(|i| k.get(i, i)).sum::<f64>() / n as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let chol = cholesky(&k.map(|v| v / scale), 0.0).map_err(|e| Error::Generation {
        seed: rng.seed(),
        msg: e.to_string(),
    })?;
    let f = sample_mvn(&chol.factor.map(|v| v * scale.sqrt()), rng);
    let sd = noise_variance.sqrt();
    let y: Vec<f64> = f
        .data()
        .iter()
        .map(|fi| fi + sd * rng.normal() + shift)
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Generation {
            seed: rng.seed(),
            msg: "non-finite target".into(),
        });
    }
    Ok(y)
}

/// One dataset from the prior. Pure in `(cfg, seed)`.
pub fn sample_dataset(cfg: &PriorConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let (n, d) = (cfg.points_per_dataset, cfg.input_dim);
    let mut x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.uniform()).collect());
    if cfg.input_normalization == InputNormalization::ZScore {
        zscore_columns(&mut x);
    }
    let kernel = cfg.kernel.resolve(&mut rng);
    let shift = match cfg.output_shift {
        OutputShift::Fixed(s) => s,
        OutputShift::Uniform(lo, hi) => rng.uniform_range(lo, hi),
    };
    let y = sample_targets(&x, &kernel, cfg.noise_variance, shift, &mut rng)?;
    Ok(SyntheticDataset { x, y, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobustnessPrior {
    Smooth,
    Wiggly,
    Mixed,
    All,
}

impl std::str::FromStr for RobustnessPrior {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "wiggly" => Ok(Self::Wiggly),
            "mixed" => Ok(Self::Mixed),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown robustness prior '{s}'"))),
        }
    }
}

impl RobustnessPrior {
    pub fn kernel_spec(self, signal_variance: f64) -> KernelSpec {
        match self {
            Self::Smooth => KernelSpec::RbfFixed {
                lengthscale: 0.25,
                signal_variance,
            },
            Self::Wiggly => KernelSpec::RbfFixed {
                lengthscale: 0.03,
                signal_variance,
            },
            Self::Mixed => KernelSpec::SumOfTwoRbf {
                lengthscale_1_range: (0.1, 0.5),
                lengthscale_2_range: (0.01, 0.04),
                signal_variance,
            },
            Self::All => KernelSpec::Choice(vec![
                Self::Smooth.kernel_spec(signal_variance),
                Self::Wiggly.kernel_spec(signal_variance),
                Self::Mixed.kernel_spec(signal_variance),
            ]),
        }
    }

    /// 1D prior config using this kernel family.
    pub fn config(self) -> PriorConfig {
        let base = PriorConfig::synthetic_1d();
        PriorConfig {
            kernel: self.kernel_spec(base.kernel.signal_variance()),
            ..base
        }
    }
}

pub fn sample_robustness_prior(which: RobustnessPrior, seed: u64) -> Result<SyntheticDataset> {
    sample_dataset(&which.config(), seed)
}

/// 1D config with the linear-periodic kernel.
pub fn linear_periodic_config() -> PriorConfig {
    let base = PriorConfig::synthetic_1d();
    PriorConfig {
        kernel: KernelSpec::linear_periodic_default(base.kernel.signal_variance()),
        ..base
    }
}

/// Dataset from a linear-periodic prior. `cfg.kernel` must be linear-periodic.
pub fn sample_linear_periodic_dataset(cfg: &PriorConfig, seed: u64) -> Result<SyntheticDataset> {
    if cfg.input_dim != 1 {
        return Err(Error::Config("linear-periodic prior is 1D only".into()));
    }
    if !matches!(cfg.kernel, KernelSpec::LinearPeriodic { .. }) {
        return Err(Error::Config("kernel must be linear_periodic".into()));
    }
    sample_dataset(cfg, seed)
}
