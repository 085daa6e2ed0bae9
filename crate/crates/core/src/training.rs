//! Meta-training: fresh prior datasets every step, random context/query
//! cutoffs, bar-distribution NLL, AdamW with decoupled weight decay and a
//! warmup-then-cosine learning rate.
//!
//! Seeds are derived from the run seed by domain: training datasets, the
//! validation suite, bucket-edge samples, parameter init and cutoffs never
//! share a stream.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbones::{build_model, Backbone, ModelSpec, PFNModel};
use crate::bardist::{BarDistribution, BucketSpec};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, SeededRng, Tape, Tensor};
use crate::powerflow::{PowerFlowPrior, RadialNetwork};
use crate::priors::{linear_periodic_config, sample_dataset, PriorConfig, RobustnessPrior, SyntheticDataset};

const TAG_TRAIN: u64 = 0;
const TAG_VAL: u64 = 1;
const TAG_BUCKETS: u64 = 2;
const STREAM_INIT: u64 = 3;
const TAG_CUTOFF: u64 = 4;

/// Where training datasets come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Prior(PriorConfig),
    PowerFlow(PowerFlowPrior),
}

impl DataSource {
    pub fn input_dim(&self) -> usize {
        match self {
            Self::Prior(p) => p.input_dim,
            Self::PowerFlow(p) => p.input_dim(),
        }
    }

    pub fn points_per_dataset(&self) -> usize {
        match self {
            Self::Prior(p) => p.points_per_dataset,
            Self::PowerFlow(p) => p.points_per_dataset,
        }
    }

    pub fn set_points_per_dataset(&mut self, n: usize) {
        match self {
            Self::Prior(p) => p.points_per_dataset = n,
            Self::PowerFlow(p) => p.points_per_dataset = n,
        }
    }

    pub fn sample(&self, seed: u64) -> Result<SyntheticDataset> {
        match self {
            Self::Prior(p) => sample_dataset(p, seed),
            Self::PowerFlow(p) => p.sample(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Prior(p) => p.validate(),
            Self::PowerFlow(p) => {
                if p.points_per_dataset < 2 {
                    return Err(Error::Config("points_per_dataset must be >= 2".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelSpec,
    pub val_datasets: usize,
    /// Prior targets drawn to place the bucket edges.
    pub bucket_samples: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Name of the data preset, kept for the text form.
    pub prior_name: String,
}

fn default_buckets(dim: usize) -> usize {
    if dim <= 2 {
        100
    } else {
        500
    }
}

fn preset_model(dim: usize, backbone: Backbone) -> ModelSpec {
    let mut m = match (backbone, dim) {
        (Backbone::Cnn, 1 | 2) => ModelSpec::cnn_1d(),
        (Backbone::Cnn, _) => ModelSpec::cnn_5d(),
        (Backbone::Transformer, 1 | 2) => ModelSpec::transformer_1d(),
        (Backbone::Transformer, 5) => ModelSpec::transformer_5d(),
        (Backbone::Transformer, 10) => ModelSpec::transformer_10d(),
        (Backbone::Transformer, _) => ModelSpec::transformer_64d(),
    };
    m.input_dim = dim;
    m.bucket_count = default_buckets(dim);
    m
}

/// Data presets accepted by the `prior` key.
pub const PRIOR_NAMES: [&str; 11] = [
    "1d", "2d", "5d", "10d", "64d", "smooth", "wiggly", "mixed", "all", "linear_periodic", "powerflow",
];

/// Data source for a preset name from [`PRIOR_NAMES`].
pub fn preset_data(name: &str) -> Result<DataSource> {
    Ok(match name {
        "1d" => DataSource::Prior(PriorConfig::synthetic_1d()),
        "2d" => DataSource::Prior(PriorConfig::synthetic_2d()),
        "5d" => DataSource::Prior(PriorConfig::synthetic_5d()),
        "10d" => DataSource::Prior(PriorConfig::synthetic_10d()),
        "64d" => DataSource::Prior(PriorConfig::power_like(64)),
        "linear_periodic" => DataSource::Prior(linear_periodic_config()),
        "powerflow" => DataSource::PowerFlow(PowerFlowPrior::desk(5.0, 500)),
        other => match other.parse::<RobustnessPrior>() {
            Ok(r) => DataSource::Prior(r.config()),
            Err(_) => {
                return Err(Error::Config(format!(
                    "unknown prior '{other}' (expected one of {})",
                    PRIOR_NAMES.join(", ")
                )))
            }
        },
    })
}

impl TrainConfig {
    /// Optimization settings per input dimension (1, 2, 5, 10 or 64).
    pub fn preset(dim: usize) -> Result<Self> {
        let (epochs, batch, warmup) = match dim {
            1 | 2 => (100, 16, 25),
            5 => (200, 32, 50),
            10 => (200, 16, 50),
            64 => (200, 32, 50),
            _ => return Err(Error::Config(format!("no training preset for dimension {dim}"))),
        };
        let name = format!("{dim}d");
        Ok(Self {
            epochs,
            steps_per_epoch: 500,
            batch_size: batch,
            lr: 1e-3,
            warmup_epochs: warmup,
            weight_decay: 0.0,
            seed: 0,
            data: preset_data(&name)?,
            model: preset_model(dim, Backbone::Transformer),
            val_datasets: 64,
            bucket_samples: 100_000,
            clip_norm: 1.0,
            prior_name: name,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.val_datasets == 0 {
            return Err(Error::Config("epochs, steps_per_epoch, batch_size and val_datasets must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("lr, weight_decay and clip_norm must be finite and non-negative".into()));
        }
        if self.bucket_samples < 10 * self.model.bucket_count {
            return Err(Error::Config(format!(
                "bucket_samples ({}) must be at least 10 x bucket_count ({})",
                self.bucket_samples, self.model.bucket_count
            )));
        }
        if self.model.input_dim != self.data.input_dim() {
            return Err(Error::Config(format!(
                "model input_dim {} does not match data dimension {}",
                self.model.input_dim,
                self.data.input_dim()
            )));
        }
        self.data.validate()?;
        self.model.validate()
    }

    pub const KEYS: [&'static str; 17] = [
        "epochs",
        "steps_per_epoch",
        "batch_size",
        "lr",
        "warmup_epochs",
        "weight_decay",
        "seed",
        "val_datasets",
        "bucket_samples",
        "clip_norm",
        "prior",
        "points_per_dataset",
        "noise_variance",
        "lengthscale",
        "delta_pct",
        "feeder_buses",
        "target_bus",
    ];

    /// Builds a config from `key = value` text. `prior` selects the data
    /// preset (default `1d`); model keys override the matching preset model.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = Self::KEYS.iter().chain(ModelSpec::KEYS.iter()).copied().collect();
        kv.reject_unknown(&known)?;
        let prior_name = kv.get_or("prior", "1d".to_string())?;
        let mut data = preset_data(&prior_name)?;
        if let DataSource::PowerFlow(pf) = &mut data {
            if let Some(k) = kv.get::<usize>("feeder_buses")? {
                pf.network = if k == 33 {
                    RadialNetwork::ieee33()
                } else {
                    RadialNetwork::ieee33_truncated(k)?
                };
                pf.target_bus = k - 1;
            }
            if let Some(b) = kv.get::<usize>("target_bus")? {
                if b < 2 {
                    return Err(Error::Config("target_bus is 1-based and must not be the slack".into()));
                }
                pf.target_bus = b - 1;
            }
            if let Some(d) = kv.get("delta_pct")? {
                pf.delta_pct = d;
            }
        } else {
            for k in ["feeder_buses", "target_bus", "delta_pct"] {
                if kv.raw(k).is_some() {
                    return Err(Error::Config(format!("'{k}' only applies to prior = powerflow")));
                }
            }
        }
        if let DataSource::Prior(p) = &mut data {
            if let Some(v) = kv.get("noise_variance")? {
                p.noise_variance = v;
            }
            if let Some(l) = kv.get::<f64>("lengthscale")? {
                p.kernel = match &p.kernel {
                    crate::priors::KernelSpec::RbfFixed { signal_variance, .. } => crate::priors::KernelSpec::RbfFixed {
                        lengthscale: l,
                        signal_variance: *signal_variance,
                    },
                    _ => return Err(Error::Config("lengthscale override needs a fixed-RBF prior".into())),
                };
            }
        }
        if let Some(n) = kv.get("points_per_dataset")? {
            data.set_points_per_dataset(n);
        }
        let dim = data.input_dim();
        let preset_dim = match dim {
            1 | 2 | 5 | 10 | 64 => dim,
            _ => 64,
        };
        let mut cfg = Self::preset(preset_dim)?;
        cfg.prior_name = prior_name;
        let backbone = kv.get_or("backbone", Backbone::Transformer)?;
        let mut model = preset_model(dim, backbone).apply(kv)?;
        model.input_dim = dim;
        cfg.model = model;
        cfg.data = data;
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($f))? {
                    cfg.$f = v;
                }
            )*};
        }
        set!(epochs, steps_per_epoch, batch_size, lr, warmup_epochs, weight_decay, seed, val_datasets, bucket_samples, clip_norm);
        if kv.raw("epochs").is_some() && kv.raw("warmup_epochs").is_none() && cfg.warmup_epochs >= cfg.epochs {
            cfg.warmup_epochs = cfg.epochs / 4;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    /// `key = value` form readable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "prior = {}\npoints_per_dataset = {}\nepochs = {}\nsteps_per_epoch = {}\nbatch_size = {}\nlr = {:?}\n\
             warmup_epochs = {}\nweight_decay = {:?}\nseed = {}\nval_datasets = {}\nbucket_samples = {}\nclip_norm = {:?}\n",
            self.prior_name,
            self.data.points_per_dataset(),
            self.epochs,
            self.steps_per_epoch,
            self.batch_size,
            self.lr,
            self.warmup_epochs,
            self.weight_decay,
            self.seed,
            self.val_datasets,
            self.bucket_samples,
            self.clip_norm
        );
        match &self.data {
            DataSource::Prior(p) => {
                let _ = writeln!(s, "noise_variance = {:?}", p.noise_variance);
                if let crate::priors::KernelSpec::RbfFixed { lengthscale, .. } = p.kernel {
                    let _ = writeln!(s, "lengthscale = {lengthscale:?}");
                }
            }
            DataSource::PowerFlow(p) => {
                let _ = writeln!(
                    s,
                    "delta_pct = {:?}\nfeeder_buses = {}\ntarget_bus = {}",
                    p.delta_pct,
                    p.network.bus_count(),
                    p.target_bus + 1
                );
            }
        }
        s.push_str(&self.model.to_text());
        s
    }
}

/// One dataset split into a context prefix and query suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub ctx_x: Tensor,
    pub ctx_y: Vec<f64>,
    pub query_x: Tensor,
    pub query_y: Vec<f64>,
    pub seed: u64,
}

impl Split {
    /// First `cutoff` points form the context.
    pub fn at(ds: &SyntheticDataset, cutoff: usize) -> Result<Self> {
        let n = ds.len();
        if n < 2 || cutoff == 0 || cutoff >= n {
            return Err(Error::Contract(format!("cutoff {cutoff} invalid for {n} points")));
        }
        Ok(Self {
            ctx_x: ds.x.slice_rows(0, cutoff),
            ctx_y: ds.y[..cutoff].to_vec(),
            query_x: ds.x.slice_rows(cutoff, n - cutoff),
            query_y: ds.y[cutoff..].to_vec(),
            seed: ds.seed,
        })
    }

    pub fn query_count(&self) -> usize {
        self.query_y.len()
    }
}

/// Cutoff drawn uniformly from `1..N`.
pub fn split_context_query(ds: &SyntheticDataset, rng: &mut SeededRng) -> Result<Split> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 points to split, got {n}")));
    }
    Split::at(ds, 1 + rng.below(n - 1))
}

/// Linear warmup from 0, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, lr: f64) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `p ← p(1 - lr·wd) - lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if g.len() != m.len() {
                return Err(Error::Contract(format!("gradient {k} has {} entries, expected {}", g.len(), m.len())));
            }
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w = *w * decay - lr * upd;
            }
        }
        Ok(())
    }
}

/// Scales `grads` to global norm `max_norm` when above it. Returns the
/// pre-clip norm and whether clipping fired.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
        (norm, true)
    } else {
        (norm, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Loss and per-parameter gradients of the query-weighted mean NLL.
pub fn batch_loss_and_grads(model: &PFNModel, batch: &[Split]) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let total: usize = batch.iter().map(Split::query_count).sum();
    let mut tape = Tape::new();
    let ps = model.register(&mut tape);
    let mut acc = None;
    for s in batch {
        let l = model.loss_tape(&mut tape, &ps, &s.ctx_x, &s.ctx_y, &s.query_x, &s.query_y)?;
        let l = tape.scale(l, s.query_count() as f64 / total as f64);
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let loss_var = acc.expect("nonempty batch");
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let g = tape.backward(loss_var)?;
    let grads = ps
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.slice(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((loss, grads))
}

/// One optimizer update on a batch of splits.
pub fn train_step(model: &mut PFNModel, opt: &mut AdamW, batch: &[Split], lr: f64, clip_norm: f64) -> Result<StepStats> {
    let non_finite = || Error::NonFiniteLoss {
        step: opt.steps() as usize,
        seeds: batch.iter().map(|s| s.seed).collect(),
    };
    let (loss, mut grads) = match batch_loss_and_grads(model, batch) {
        Err(Error::Numeric(_)) => return Err(non_finite()),
        r => r?,
    };
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(non_finite());
    }
    let (grad_norm, clipped) = clip_global_norm(&mut grads, clip_norm);
    opt.step(model.params_mut(), &grads, lr)?;
    Ok(StepStats { loss, grad_norm, clipped })
}

/// Fixed held-out datasets split at `N/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSuite {
    pub splits: Vec<Split>,
}

impl ValidationSuite {
    pub fn generate(data: &DataSource, count: usize, seed: u64) -> Result<Self> {
        let splits = (0..count)
            .map(|i| {
                let ds = data.sample(derive_seed(seed, TAG_VAL, i as u64))?;
                Split::at(&ds, ds.len() / 2)
            })
            .collect::<Result<_>>()?;
        Ok(Self { splits })
    }
}

/// Bar-distribution NLL of each query in `split`.
pub fn query_nlls(model: &PFNModel, split: &Split) -> Result<Vec<f64>> {
    let logits = model.forward(&split.ctx_x, &split.ctx_y, &split.query_x)?;
    split
        .query_y
        .iter()
        .enumerate()
        .map(|(i, &y)| Ok(BarDistribution::new(logits.row(i).to_vec(), model.buckets())?.nll(y)))
        .collect()
}

/// Mean NLL over every query point of the suite.
pub fn validate(model: &PFNModel, suite: &ValidationSuite) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in &suite.splits {
        let nll = query_nlls(model, s)?;
        sum += nll.iter().sum::<f64>();
        count += nll.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Bucket edges at the quantiles of `samples` prior targets.
pub fn prior_buckets(data: &DataSource, buckets: usize, samples: usize, seed: u64) -> Result<BucketSpec> {
    let mut ys = Vec::with_capacity(samples);
    let mut i = 0u64;
    while ys.len() < samples {
        let ds = data.sample(derive_seed(seed, TAG_BUCKETS, i))?;
        let take = (samples - ys.len()).min(ds.len());
        ys.extend_from_slice(&ds.y[..take]);
        i += 1;
    }
    BucketSpec::from_quantiles(&ys, buckets)
}

/// Freshly initialized model with prior-derived buckets.
pub fn init_model(cfg: &TrainConfig) -> Result<PFNModel> {
    let buckets = prior_buckets(&cfg.data, cfg.model.bucket_count, cfg.bucket_samples, cfg.seed)?;
    build_model(&cfg.model, buckets, &mut SeededRng::with_stream(cfg.seed, STREAM_INIT))
}

/// The training batch for optimizer step `step`.
pub fn training_batch(cfg: &TrainConfig, step: usize) -> Result<Vec<Split>> {
    (0..cfg.batch_size)
        .map(|b| {
            let idx = (step * cfg.batch_size + b) as u64;
            let seed = derive_seed(cfg.seed, TAG_TRAIN, idx);
            let ds = cfg.data.sample(seed)?;
            split_context_query(&ds, &mut SeededRng::new(derive_seed(cfg.seed, TAG_CUTOFF, idx)))
        })
        .collect()
}

/// Deterministic per-validation row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub cumulative_train_points: usize,
    /// Mean training loss since the previous row; `None` before training.
    pub train_nll: Option<f64>,
    pub val_nll: f64,
    pub lr: f64,
    /// Steps whose gradient was clipped since the previous row.
    pub clipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub step: usize,
    pub wall_seconds: f64,
    pub throughput_points_per_sec: f64,
}

/// Validation history. Timing lives in a separate table so that the main
/// CSV is a pure function of the config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub timing: Vec<TimingRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,cumulative_train_points,train_nll,val_nll,lr,clipped_steps\n");
        for r in &self.rows {
            let train = r.train_nll.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{}",
                r.step, r.cumulative_train_points, train, r.val_nll, r.lr, r.clipped_steps
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_seconds,throughput_points_per_sec\n");
        for t in &self.timing {
            let _ = writeln!(s, "{},{:.6},{:.3}", t.step, t.wall_seconds, t.throughput_points_per_sec);
        }
        s
    }

    pub fn best(&self) -> Option<&LogRow> {
        self.rows.iter().min_by(|a, b| a.val_nll.total_cmp(&b.val_nll))
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

pub struct TrainOutcome {
    /// Checkpoint with the lowest validation NLL.
    pub best: PFNModel,
    pub best_val_nll: f64,
    /// Parameters after the final step.
    pub last: PFNModel,
    pub log: TrainLog,
}

/// Full training loop with validation before training and after each epoch.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(cfg, &mut |_| {})
}

/// [`train`] with a callback per log row.
pub fn train_with_progress(cfg: &TrainConfig, progress: &mut dyn FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(cfg)?;
    let suite = ValidationSuite::generate(&cfg.data, cfg.val_datasets, cfg.seed)?;
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let (total, warmup) = (cfg.total_steps(), cfg.warmup_steps());
    let points = cfg.batch_size * cfg.data.points_per_dataset();
    let mut log = TrainLog::default();
    let v0 = validate(&model, &suite)?;
    let row0 = LogRow {
        step: 0,
        cumulative_train_points: 0,
        train_nll: None,
        val_nll: v0,
        lr: lr_schedule(0, total, warmup, cfg.lr),
        clipped_steps: 0,
    };
    progress(&row0);
    log.rows.push(row0);
    log.timing.push(TimingRow {
        step: 0,
        wall_seconds: 0.0,
        throughput_points_per_sec: 0.0,
    });
    let mut best = (v0, model.clone());
    let start = Instant::now();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let (mut loss_sum, mut clipped) = (0.0, 0);
        let epoch_start = Instant::now();
        for _ in 0..cfg.steps_per_epoch {
            let batch = training_batch(cfg, step)?;
            let lr = lr_schedule(step, total, warmup, cfg.lr);
            let st = train_step(&mut model, &mut opt, &batch, lr, cfg.clip_norm)?;
            loss_sum += st.loss;
            clipped += usize::from(st.clipped);
            step += 1;
        }
        let epoch_secs = epoch_start.elapsed().as_secs_f64();
        let val = validate(&model, &suite)?;
        let row = LogRow {
            step,
            cumulative_train_points: step * points,
            train_nll: Some(loss_sum / cfg.steps_per_epoch as f64),
            val_nll: val,
            lr: lr_schedule(step, total, warmup, cfg.lr),
            clipped_steps: clipped,
        };
        progress(&row);
        log.rows.push(row);
        log.timing.push(TimingRow {
            step,
            wall_seconds: start.elapsed().as_secs_f64(),
            throughput_points_per_sec: (cfg.steps_per_epoch * points) as f64 / epoch_secs.max(1e-9),
        });
        if val < best.0 {
            best = (val, model.clone());
        }
    }
    Ok(TrainOutcome {
        best: best.1,
        best_val_nll: best.0,
        last: model,
        log,
    })
}
