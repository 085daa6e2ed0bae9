//! Error metrics, context-size sweeps, predictive-band coverage, post-hoc
//! context filters, the Rosenbrock task and step-time comparisons.
//!
//! Every test dataset is split the same way: the first `n_context` points
//! form the context and the last `n_test` points are scored, so sweeps over
//! context size share one fixed test set.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbones::{build_model, ModelSpec, PFNModel};
use crate::bardist::{BarDistribution, BucketSpec};
use crate::error::{Error, Result};
use crate::gp::{gp_fit_centered, gp_predict, gp_predict_centered, GPHyper, HyperGrid};
use crate::numerics::{SeededRng, Tensor};
use crate::priors::{sample_dataset, PriorConfig, SyntheticDataset};
use crate::training::{train_step, AdamW, DataSource, Split};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

/// Anything that maps a context and query inputs to predictive summaries.
pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor) -> Result<Vec<Prediction>>;
}

/// A trained PFN; point prediction is the bar-distribution mean.
pub struct PfnPredictor<'a> {
    pub model: &'a PFNModel,
    pub label: String,
}

impl<'a> PfnPredictor<'a> {
    pub fn new(model: &'a PFNModel) -> Self {
        let s = model.spec();
        Self {
            model,
            label: format!("{}+{}", s.backbone, s.attention.kind),
        }
    }
}

impl Predictor for PfnPredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor) -> Result<Vec<Prediction>> {
        let logits = self.model.forward(ctx_x, ctx_y, query_x)?;
        (0..logits.rows())
            .map(|i| {
                let d = BarDistribution::new(logits.row(i).to_vec(), self.model.buckets())?;
                Ok(Prediction {
                    mean: d.mean(),
                    std: d.std(),
                })
            })
            .collect()
    }
}

/// How the GP baseline gets its hyperparameters and mean.
#[derive(Clone, Debug, PartialEq)]
pub enum GpMode {
    /// Known hyperparameters and a known constant prior mean.
    Known { hyper: GPHyper, prior_mean: f64 },
    /// Grid-fitted per context, mean centered on the context targets.
    Fit(HyperGrid),
}

pub struct GpPredictor {
    pub mode: GpMode,
}

impl GpPredictor {
    /// The exact GP for a fixed-RBF prior with a fixed output shift.
    pub fn for_prior(cfg: &PriorConfig) -> Result<Self> {
        use crate::priors::{KernelSpec, OutputShift};
        match (&cfg.kernel, &cfg.output_shift) {
            (KernelSpec::RbfFixed { lengthscale, signal_variance }, OutputShift::Fixed(m)) => Ok(Self {
                mode: GpMode::Known {
                    hyper: GPHyper::shared(*lengthscale, *signal_variance, cfg.noise_variance.max(1e-10)),
                    prior_mean: *m,
                },
            }),
            _ => Err(Error::Config("exact GP needs a fixed-RBF prior with a fixed shift".into())),
        }
    }
}

impl Predictor for GpPredictor {
    fn name(&self) -> String {
        match self.mode {
            GpMode::Known { .. } => "gp-exact".into(),
            GpMode::Fit(_) => "gp-fit".into(),
        }
    }

    fn predict(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor) -> Result<Vec<Prediction>> {
        let post = match &self.mode {
            GpMode::Known { hyper, prior_mean } => {
                let y: Vec<f64> = ctx_y.iter().map(|v| v - prior_mean).collect();
                let mut p = gp_predict(hyper, ctx_x, &y, query_x)?;
                p.mean.iter_mut().for_each(|m| *m += prior_mean);
                p
            }
            GpMode::Fit(grid) => {
                let hyper = gp_fit_centered(ctx_x, ctx_y, grid)?;
                gp_predict_centered(&hyper, ctx_x, ctx_y, query_x)?
            }
        };
        Ok(post
            .mean
            .iter()
            .zip(&post.variance)
            .map(|(&mean, &v)| Prediction { mean, std: v.sqrt() })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub max_err: f64,
    pub n_test: usize,
    pub wall_seconds: f64,
}

impl Metrics {
    pub fn from_errors(pred: &[f64], truth: &[f64], wall_seconds: f64) -> Self {
        let (mut se, mut ae, mut mx) = (0.0, 0.0, 0.0f64);
        for (p, t) in pred.iter().zip(truth) {
            let e = (p - t).abs();
            se += e * e;
            ae += e;
            mx = mx.max(e);
        }
        let n = pred.len().min(truth.len());
        let d = n.max(1) as f64;
        Self {
            mse: se / d,
            mae: ae / d,
            max_err: mx,
            n_test: n,
            wall_seconds,
        }
    }
}

fn check_split(ds: &SyntheticDataset, n_context: usize, n_test: usize) -> Result<()> {
    if n_context == 0 || n_test == 0 || ds.len() < n_context + n_test {
        return Err(Error::Contract(format!(
            "dataset of {} points cannot supply {} context + {} test points",
            ds.len(),
            n_context,
            n_test
        )));
    }
    Ok(())
}

/// Context (first `n_context` points) and test split (last `n_test`).
pub fn eval_split(ds: &SyntheticDataset, n_context: usize, n_test: usize) -> Result<Split> {
    check_split(ds, n_context, n_test)?;
    let n = ds.len();
    Ok(Split {
        ctx_x: ds.x.slice_rows(0, n_context),
        ctx_y: ds.y[..n_context].to_vec(),
        query_x: ds.x.slice_rows(n - n_test, n_test),
        query_y: ds.y[n - n_test..].to_vec(),
        seed: ds.seed,
    })
}

/// Predictions and targets for every test point of the suite, with the
/// time spent inside `predict`.
pub fn collect_predictions(
    pred: &dyn Predictor,
    suite: &[SyntheticDataset],
    n_context: usize,
    n_test: usize,
) -> Result<(Vec<Prediction>, Vec<f64>, f64)> {
    let mut out = Vec::new();
    let mut truth = Vec::new();
    let mut secs = 0.0;
    for ds in suite {
        let s = eval_split(ds, n_context, n_test)?;
        let t = Instant::now();
        let p = pred.predict(&s.ctx_x, &s.ctx_y, &s.query_x)?;
        secs += t.elapsed().as_secs_f64();
        out.extend(p);
        truth.extend(s.query_y);
    }
    Ok((out, truth, secs))
}

pub fn evaluate(pred: &dyn Predictor, suite: &[SyntheticDataset], n_context: usize, n_test: usize) -> Result<Metrics> {
    let (p, t, secs) = collect_predictions(pred, suite, n_context, n_test)?;
    let means: Vec<f64> = p.iter().map(|q| q.mean).collect();
    Ok(Metrics::from_errors(&means, &t, secs))
}

/// [`evaluate`] at each context size on the same test points.
pub fn sweep_context(
    pred: &dyn Predictor,
    suite: &[SyntheticDataset],
    sizes: &[usize],
    n_test: usize,
) -> Result<Vec<(usize, Metrics)>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("context sizes must be strictly ascending".into()));
    }
    sizes.iter().map(|&n| Ok((n, evaluate(pred, suite, n, n_test)?))).collect()
}

/// Band half-widths in units of σ.
pub const COVERAGE_BANDS: [f64; 3] = [0.1, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    pub model: String,
    /// Fraction of targets within `mean ± k·σ` for each of [`COVERAGE_BANDS`].
    pub fractions: [f64; 3],
    pub n: usize,
}

pub fn coverage_of(model: &str, preds: &[Prediction], truth: &[f64]) -> CoverageReport {
    let mut hits = [0usize; 3];
    for (p, &t) in preds.iter().zip(truth) {
        let z = (t - p.mean).abs();
        for (h, k) in hits.iter_mut().zip(COVERAGE_BANDS) {
            *h += usize::from(z <= k * p.std);
        }
    }
    let n = preds.len().min(truth.len());
    CoverageReport {
        model: model.to_string(),
        fractions: hits.map(|h| h as f64 / n.max(1) as f64),
        n,
    }
}

pub fn coverage(pred: &dyn Predictor, suite: &[SyntheticDataset], n_context: usize, n_test: usize) -> Result<CoverageReport> {
    let (p, t, _) = collect_predictions(pred, suite, n_context, n_test)?;
    Ok(coverage_of(&pred.name(), &p, &t))
}

/// Inference-time context selection per query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PostHocFilter {
    /// The `k` nearest context points (ties to the lower index).
    Knn { k: usize },
    /// Points whose factor `exp(-γ‖x - x*‖)` is strictly above the median factor.
    Exponential { gamma: f64 },
}

impl PostHocFilter {
    pub fn validate(&self, n_context: usize) -> Result<()> {
        match *self {
            Self::Knn { k } if k == 0 || k > n_context => {
                Err(Error::Config(format!("knn k={k} must lie in 1..={n_context}")))
            }
            Self::Exponential { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(Error::Config(format!("exponential gamma must be positive, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    /// Kept context indices, in their original order.
    pub fn select(&self, ctx_x: &Tensor, x_star: &[f64]) -> Result<Vec<usize>> {
        let n = ctx_x.rows();
        self.validate(n)?;
        let dist: Vec<f64> = (0..n)
            .map(|i| {
                ctx_x.row(i).iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .collect();
        let mut by_dist: Vec<usize> = (0..n).collect();
        by_dist.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let mut keep = match *self {
            Self::Knn { k } => by_dist[..k].to_vec(),
            Self::Exponential { gamma } => {
                let f: Vec<f64> = dist.iter().map(|d| (-gamma * d).exp()).collect();
                let mut sorted = f.clone();
                sorted.sort_by(f64::total_cmp);
                let median = if n % 2 == 1 {
                    sorted[n / 2]
                } else {
                    0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
                };
                let kept: Vec<usize> = (0..n).filter(|&i| f[i] > median).collect();
                if kept.is_empty() {
                    vec![by_dist[0]]
                } else {
                    kept
                }
            }
        };
        keep.sort_unstable();
        Ok(keep)
    }
}

/// The filtered context for one query point.
pub fn apply_posthoc_filter(
    ctx_x: &Tensor,
    ctx_y: &[f64],
    x_star: &[f64],
    filter: &PostHocFilter,
) -> Result<(Tensor, Vec<f64>)> {
    let keep = filter.select(ctx_x, x_star)?;
    Ok((ctx_x.select_rows(&keep), keep.iter().map(|&i| ctx_y[i]).collect()))
}

/// Wraps a predictor so that each query sees only its filtered context.
pub struct Filtered<'a> {
    pub inner: &'a dyn Predictor,
    pub filter: PostHocFilter,
}

impl Predictor for Filtered<'_> {
    fn name(&self) -> String {
        match self.filter {
            PostHocFilter::Knn { k } => format!("{}/knn{k}", self.inner.name()),
            PostHocFilter::Exponential { gamma } => format!("{}/exp{gamma}", self.inner.name()),
        }
    }

    fn predict(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(query_x.rows());
        for j in 0..query_x.rows() {
            let xq = query_x.slice_rows(j, 1);
            let (cx, cy) = apply_posthoc_filter(ctx_x, ctx_y, xq.row(0), &self.filter)?;
            out.extend(self.inner.predict(&cx, &cy, &xq)?);
        }
        Ok(out)
    }
}

/// `Σ 100(x_{i+1} - x_i²)² + (1 - x_i)²`.
pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| {
            let (q, l) = (w[1] - w[0] * w[0], 1.0 - w[0]);
            100.0 * q * q + l * l
        })
        .sum()
}

/// `n` points drawn on `[-1, 1]^dim`, rescaled to the unit cube, with
/// z-scored Rosenbrock targets.
pub fn generate_rosenbrock_dataset_dim(dim: usize, n: usize, seed: u64) -> Result<SyntheticDataset> {
    if dim < 2 || n < 2 {
        return Err(Error::Config(format!("rosenbrock needs dim >= 2 and n >= 2, got {dim}, {n}")));
    }
    let mut rng = SeededRng::new(seed);
    let raw: Vec<f64> = (0..n * dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut y: Vec<f64> = raw.chunks(dim).map(rosenbrock).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    y.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    let x = Tensor::from_vec(n, dim, raw.iter().map(|v| (v + 1.0) / 2.0).collect());
    Ok(SyntheticDataset { x, y, seed })
}

/// Five-dimensional Rosenbrock dataset.
pub fn generate_rosenbrock_dataset(n: usize, seed: u64) -> Result<SyntheticDataset> {
    generate_rosenbrock_dataset_dim(5, n, seed)
}

/// Held-out datasets from any data source, seeded `base_seed + i`.
pub fn data_suite(data: &DataSource, count: usize, base_seed: u64) -> Result<Vec<SyntheticDataset>> {
    (0..count).map(|i| data.sample(base_seed.wrapping_add(i as u64))).collect()
}

/// Held-out datasets from a prior, seeded `base_seed + i`.
pub fn prior_suite(cfg: &PriorConfig, count: usize, base_seed: u64) -> Result<Vec<SyntheticDataset>> {
    (0..count).map(|i| sample_dataset(cfg, base_seed + i as u64)).collect()
}

/// Median seconds per training step for each spec on synthetic inputs of a
/// fixed shape, after `warmup` untimed steps.
pub fn throughput_compare(
    specs: &[ModelSpec],
    n_context: usize,
    n_query: usize,
    batch: usize,
    warmup: usize,
    timed: usize,
) -> Result<Vec<f64>> {
    if specs.is_empty() || timed == 0 || batch == 0 {
        return Err(Error::Config("throughput comparison needs specs, batch and timed steps".into()));
    }
    let d = specs[0].input_dim;
    if specs.iter().any(|s| s.input_dim != d) {
        return Err(Error::Config("specs must share an input dimension".into()));
    }
    let mut rng = SeededRng::new(0);
    let mut rand = |r: usize, c: usize| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.uniform()).collect());
    let batch_splits: Vec<Split> = (0..batch)
        .map(|i| Split {
            ctx_x: rand(n_context, d),
            ctx_y: rand(n_context, 1).into_data(),
            query_x: rand(n_query, d),
            query_y: rand(n_query, 1).into_data(),
            seed: i as u64,
        })
        .collect();
    specs
        .iter()
        .map(|spec| {
            let buckets = BucketSpec::uniform(0.0, 1.0, spec.bucket_count)?;
            let mut model = build_model(spec, buckets, &mut SeededRng::new(1))?;
            let mut opt = AdamW::new(model.params(), 0.0);
            let mut times = Vec::with_capacity(timed);
            for i in 0..warmup + timed {
                let t = Instant::now();
                train_step(&mut model, &mut opt, &batch_splits, 1e-4, 1.0)?;
                if i >= warmup {
                    times.push(t.elapsed().as_secs_f64());
                }
            }
            times.sort_by(f64::total_cmp);
            Ok(times[times.len() / 2])
        })
        .collect()
}

/// Least-squares line `y = a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let b = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (my - b * mx, b, r2)
}

pub fn metrics_csv(rows: &[(String, usize, Metrics)]) -> String {
    let mut s = String::from("model,n_context,n_test,mse,mae,max_err,wall_seconds\n");
    for (name, n, m) in rows {
        let _ = writeln!(s, "{name},{n},{},{:?},{:?},{:?},{:.6}", m.n_test, m.mse, m.mae, m.max_err, m.wall_seconds);
    }
    s
}

/// Metrics CSV without timing, for byte-for-byte comparisons.
pub fn metrics_csv_deterministic(rows: &[(String, usize, Metrics)]) -> String {
    let mut s = String::from("model,n_context,n_test,mse,mae,max_err\n");
    for (name, n, m) in rows {
        let _ = writeln!(s, "{name},{n},{},{:?},{:?},{:?}", m.n_test, m.mse, m.mae, m.max_err);
    }
    s
}

pub fn context_sweep_csv(model: &str, rows: &[(usize, Metrics)]) -> String {
    let mut s = String::from("model,n_context,mse,mae,max_err\n");
    for (n, m) in rows {
        let _ = writeln!(s, "{model},{n},{:?},{:?},{:?}", m.mse, m.mae, m.max_err);
    }
    s
}

pub fn coverage_csv(reports: &[CoverageReport]) -> String {
    let mut s = String::from("model,n,within_0.1sigma,within_1sigma,within_2sigma\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{:?},{:?},{:?}", r.model, r.n, r.fractions[0], r.fractions[1], r.fractions[2]);
    }
    s
}

pub fn timing_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("model,seconds_per_step\n");
    for (name, t) in rows {
        let _ = writeln!(s, "{name},{t:.6}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use proptest::prelude::*;

    struct Oracle;
    impl Predictor for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }
        fn predict(&self, _: &Tensor, _: &[f64], q: &Tensor) -> Result<Vec<Prediction>> {
            Ok((0..q.rows()).map(|i| Prediction { mean: truth_fn(q.row(i)), std: 1.0 }).collect())
        }
    }

    fn truth_fn(x: &[f64]) -> f64 {
        x.iter().sum::<f64>().sin()
    }

    fn function_suite(n: usize, d: usize) -> Vec<SyntheticDataset> {
        let mut r = SeededRng::new(2);
        (0..4)
            .map(|s| {
                let x = Tensor::from_vec(n, d, (0..n * d).map(|_| r.uniform()).collect());
                let y = (0..n).map(|i| truth_fn(x.row(i))).collect();
                SyntheticDataset { x, y, seed: s }
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let m = evaluate(&Oracle, &function_suite(30, 2), 10, 5).unwrap();
        assert_eq!((m.mse, m.mae, m.max_err, m.n_test), (0.0, 0.0, 0.0, 20));
        assert!(evaluate(&Oracle, &function_suite(30, 2), 26, 5).is_err());
    }

    proptest! {
        #[test]
        fn metrics_match_two_pass(errs in proptest::collection::vec(-5.0f64..5.0, 1..200)) {
            let truth = vec![0.0; errs.len()];
            let m = Metrics::from_errors(&errs, &truth, 0.0);
            let n = errs.len() as f64;
            let mse: f64 = errs.iter().map(|e| e * e).sum::<f64>() / n;
            let mae: f64 = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
            let mx = errs.iter().map(|e| e.abs()).fold(0.0, f64::max);
            prop_assert!((m.mse - mse).abs() < 1e-12 && (m.mae - mae).abs() < 1e-12 && m.max_err == mx);
            prop_assert!(m.max_err >= m.mae);
        }

        #[test]
        fn coverage_is_monotone(seed in 0u64..10_000) {
            let mut r = SeededRng::new(seed);
            let preds: Vec<Prediction> = (0..50).map(|_| Prediction { mean: r.normal(), std: r.uniform() }).collect();
            let truth: Vec<f64> = (0..50).map(|_| r.normal()).collect();
            let c = coverage_of("m", &preds, &truth);
            prop_assert!(c.fractions[0] <= c.fractions[1] && c.fractions[1] <= c.fractions[2]);
            prop_assert!(c.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
        }
    }

    #[test]
    fn gaussian_coverage_oracle() {
        let mut r = SeededRng::new(11);
        let preds: Vec<Prediction> = (0..4000).map(|_| Prediction { mean: 0.0, std: 2.0 }).collect();
        let truth: Vec<f64> = (0..4000).map(|_| 2.0 * r.normal()).collect();
        let c = coverage_of("g", &preds, &truth);
        assert!((c.fractions[1] - 0.6827).abs() < 0.05);
        assert!((c.fractions[2] - 0.9545).abs() < 0.05);
    }

    #[test]
    fn gp_coverage_and_sweep() {
        let cfg = PriorConfig::synthetic_1d();
        let suite = prior_suite(&cfg, 16, 1000).unwrap();
        let gp = GpPredictor::for_prior(&cfg).unwrap();
        let sweep = sweep_context(&gp, &suite, &[1, 10, 40], 20).unwrap();
        assert!(sweep[2].1.mse < sweep[0].1.mse);
        assert!(sweep_context(&gp, &suite, &[10, 5], 20).is_err());
        let c = coverage(&gp, &suite, 40, 20).unwrap();
        assert!(c.fractions[2] > 0.9, "{:?}", c.fractions);
        let fit = GpPredictor { mode: GpMode::Fit(HyperGrid::default()) };
        assert!(evaluate(&fit, &suite[..4], 40, 20).unwrap().mse.is_finite());
    }

    #[test]
    fn gp_at_one_context_point_is_near_prior_far_away() {
        let cfg = PriorConfig::synthetic_1d();
        let gp = GpPredictor::for_prior(&cfg).unwrap();
        let p = gp
            .predict(&Tensor::from_vec(1, 1, vec![0.0]), &[1.3], &Tensor::from_vec(1, 1, vec![5.0]))
            .unwrap();
        assert!((p[0].mean - 1.0).abs() < 1e-9);
        assert!((p[0].std.powi(2) - 0.02).abs() < 1e-9);
    }

    #[test]
    fn knn_selection() {
        let x = Tensor::from_vec(5, 1, vec![0.0, 0.4, 0.1, 0.9, 0.1]);
        let f = PostHocFilter::Knn { k: 1 };
        assert_eq!(f.select(&x, &[0.12]).unwrap(), vec![2]);
        assert_eq!(PostHocFilter::Knn { k: 3 }.select(&x, &[0.0]).unwrap(), vec![0, 2, 4]);
        assert_eq!(PostHocFilter::Knn { k: 5 }.select(&x, &[0.5]).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(PostHocFilter::Knn { k: 6 }.select(&x, &[0.5]).is_err());
        assert!(PostHocFilter::Exponential { gamma: 0.0 }.validate(3).is_err());
        let e = PostHocFilter::Exponential { gamma: 2.0 }.select(&x, &[0.0]).unwrap();
        assert_eq!(e, vec![0]);
        let x4 = Tensor::from_vec(4, 1, vec![0.9, 0.0, 0.5, 0.1]);
        assert_eq!(PostHocFilter::Exponential { gamma: 2.0 }.select(&x4, &[0.0]).unwrap(), vec![1, 3]);
        let same = Tensor::from_vec(3, 1, vec![0.2; 3]);
        assert_eq!(PostHocFilter::Exponential { gamma: 1.0 }.select(&same, &[0.0]).unwrap(), vec![0]);
    }

    #[test]
    fn knn_full_context_is_identity() {
        let spec = ModelSpec::transformer(1, 8, 1, 2, 16, 10);
        let model = build_model(&spec, BucketSpec::uniform(-1.0, 3.0, 10).unwrap(), &mut SeededRng::new(3)).unwrap();
        let pfn = PfnPredictor::new(&model);
        let suite = function_suite(30, 1);
        let s = eval_split(&suite[0], 20, 5).unwrap();
        let a = pfn.predict(&s.ctx_x, &s.ctx_y, &s.query_x).unwrap();
        let f = Filtered { inner: &pfn, filter: PostHocFilter::Knn { k: 20 } };
        let b = f.predict(&s.ctx_x, &s.ctx_y, &s.query_x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.mean.to_bits(), q.mean.to_bits());
        }
    }

    #[test]
    fn rosenbrock_values() {
        assert_eq!(rosenbrock(&[1.0; 5]), 0.0);
        assert_eq!(rosenbrock(&[0.0; 5]), 4.0);
        // Independent form: expand the square by hand.
        let mut r = SeededRng::new(5);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..5).map(|_| r.uniform_range(-1.0, 1.0)).collect();
            let mut v = 0.0;
            for i in 0..4 {
                let a = x[i + 1] - x[i] * x[i];
                v += 100.0 * a * a + (1.0 - x[i]) * (1.0 - x[i]);
            }
            assert_eq!(rosenbrock(&x), v);
        }
        let d = generate_rosenbrock_dataset(200, 1).unwrap();
        assert_eq!(d.x.shape(), &[200, 5]);
        assert!(d.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = d.y.iter().sum::<f64>() / 200.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn throughput_and_fit() {
        let base = ModelSpec::transformer(1, 8, 1, 2, 16, 10);
        let t = throughput_compare(&[base.clone(), base.with_attention(AttentionKind::KernelRbf)], 16, 4, 1, 1, 3).unwrap();
        assert!(t.iter().all(|&v| v > 0.0));
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
