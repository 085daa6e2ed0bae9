//! `pfn`: generate prior and power-flow data, train PFNs, evaluate them
//! against exact GPs, inspect attention locality, run ablations and time
//! attention variants.
//!
//! Every run writes into `<out>/<subcommand>-<seed>-<utc>` with a
//! `manifest.txt` that `pfn replay` can re-execute.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pfn_core::attention::{far_mass, AttentionKind};
use pfn_core::config::KeyValues;
use pfn_core::evaluation::{
    context_sweep_csv, coverage, coverage_csv, data_suite, eval_split, evaluate, linear_fit,
    metrics_csv_deterministic, sweep_context, throughput_compare, timing_csv, Filtered, GpMode,
    GpPredictor, PfnPredictor, PostHocFilter, Predictor,
};
use pfn_core::gp::{gp_fit_centered, hyper_csv, HyperGrid};
use pfn_core::numerics::{derive_seed, Tensor};
use pfn_core::powerflow::{generate_pf_dataset, RadialNetwork};
use pfn_core::training::{preset_data, train_with_progress, DataSource, TrainConfig};
use pfn_core::{ModelSpec, PFNModel};

use manifest::{input_entry, Manifest, RunDir, TOOL};

/// Seed domain for held-out evaluation suites.
const TAG_EVAL: u64 = 7;

#[derive(Parser)]
#[command(name = "pfn", version, about = "Prior-data fitted networks with decoupled-value attention")]
struct Cli {
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic datasets from a prior.
    GenPrior(GenPrior),
    /// Generate load-perturbation voltage datasets on a radial feeder.
    GenPowerflow(GenPowerflow),
    /// Train a PFN.
    Train(Train),
    /// Evaluate a checkpoint on held-out prior datasets.
    Evaluate(Evaluate),
    /// Exact or grid-fitted GP baseline on held-out prior datasets.
    GpBaseline(GpBaseline),
    /// Attention-locality diagnostics for a checkpoint.
    DiagnoseLocality(DiagnoseLocality),
    /// Train one model per value of a config key.
    Ablate(Ablate),
    /// Seconds per training step for attention variants.
    Timing(Timing),
    /// Re-execute the run recorded in a manifest.
    Replay(Replay),
}

#[derive(Args, Clone)]
struct GenPrior {
    /// Prior preset.
    #[arg(long, default_value = "1d")]
    prior: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Points per dataset (default: the preset's).
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct GenPowerflow {
    /// Network file (default: bundled 33-bus feeder).
    #[arg(long)]
    network: Option<PathBuf>,
    /// Keep only the first k buses.
    #[arg(long, default_value_t = 12)]
    buses: usize,
    /// Load perturbation in percent.
    #[arg(long, default_value_t = 5.0)]
    delta: f64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 500)]
    points: usize,
    /// 1-based target bus (default: last bus).
    #[arg(long)]
    target_bus: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct Train {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    attention: Option<AttentionKind>,
    #[arg(long)]
    prior: Option<String>,
}

#[derive(Args, Clone)]
struct SuiteArgs {
    /// Data preset for the held-out suite.
    #[arg(long, default_value = "1d")]
    prior: String,
    #[arg(long, default_value_t = 64)]
    datasets: usize,
    /// Points per dataset (default: the preset's).
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, default_value_t = 80)]
    context: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    suite: SuiteArgs,
    /// Comma-separated ascending context sizes for a sweep.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,
    /// Restrict each query to its k nearest context points.
    #[arg(long)]
    knn: Option<usize>,
    /// Keep context points above the median of exp(-gamma * distance).
    #[arg(long)]
    exp_gamma: Option<f64>,
}

#[derive(Args, Clone)]
struct GpBaseline {
    #[command(flatten)]
    suite: SuiteArgs,
    /// `exact` (prior hyperparameters) or `fit` (grid search per context).
    #[arg(long, default_value = "exact")]
    mode: String,
    /// Per-dimension lengthscales in fit mode.
    #[arg(long)]
    ard: bool,
}

#[derive(Args, Clone)]
struct DiagnoseLocality {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    suite: SuiteArgs,
    /// 1-based layer.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Distance beyond which attention mass counts as far.
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Context sizes for the far-mass trend.
    #[arg(long, value_delimiter = ',', default_values_t = vec![20, 40, 80])]
    sizes: Vec<usize>,
}

#[derive(Args, Clone)]
struct Ablate {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Config key to vary (`bucket_size` is an alias of `bucket_count`).
    #[arg(long)]
    sweep: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct Timing {
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 128, 256])]
    context: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    queries: usize,
    #[arg(long, value_delimiter = ',', default_values_t = AttentionKind::ALL.to_vec())]
    attention: Vec<AttentionKind>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Args, Clone)]
struct Replay {
    #[arg(long)]
    manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.out, cli.command) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(out: &Path, cmd: Command) -> Result<PathBuf> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = strip_out(&argv).into_iter().skip(1).collect();
    match cmd {
        Command::GenPrior(c) => gen_prior(out, &c, args),
        Command::GenPowerflow(c) => gen_powerflow(out, &c, args),
        Command::Train(c) => {
            let (text, overrides, inputs) = train_config_text(&c)?;
            train(out, &text, overrides, inputs)
        }
        Command::Evaluate(c) => evaluate_cmd(out, &c, args),
        Command::GpBaseline(c) => gp_baseline(out, &c, args),
        Command::DiagnoseLocality(c) => diagnose(out, &c, args),
        Command::Ablate(c) => ablate(out, &c, args),
        Command::Timing(c) => timing(out, &c, args),
        Command::Replay(c) => replay(out, &c.manifest),
    }
}

/// Arguments without the global `--out` flag.
fn strip_out(args: &[String]) -> Vec<String> {
    let mut v = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            v.push(a.clone());
        }
    }
    v
}

fn manifest(sub: &str, seed: u64, args: Vec<String>, config: String) -> Manifest {
    Manifest {
        tool: TOOL.to_string(),
        subcommand: sub.to_string(),
        seed,
        args,
        config,
        ..Manifest::default()
    }
}

fn data_for(prior: &str, points: Option<usize>) -> Result<DataSource> {
    let mut d = preset_data(prior)?;
    if let Some(n) = points {
        d.set_points_per_dataset(n);
    }
    Ok(d)
}

fn gen_prior(out: &Path, c: &GenPrior, args: Vec<String>) -> Result<PathBuf> {
    let data = data_for(&c.prior, c.points)?;
    let mut run = RunDir::create(out, manifest("gen-prior", c.seed, args, String::new()))?;
    for i in 0..c.count {
        let ds = data.sample(derive_seed(c.seed, 0, i as u64))?;
        run.write(&format!("dataset_{i:04}.csv"), ds.to_csv())?;
    }
    run.finish()
}

fn gen_powerflow(out: &Path, c: &GenPowerflow, args: Vec<String>) -> Result<PathBuf> {
    let mut m = manifest("gen-powerflow", c.seed, args, String::new());
    let full = match &c.network {
        Some(p) => {
            m.inputs.push(input_entry(p)?);
            RadialNetwork::load_file(p)?
        }
        None => RadialNetwork::ieee33(),
    };
    let net = if c.buses == full.bus_count() { full } else { full.truncate(c.buses)? };
    let target = match c.target_bus {
        Some(b) if b >= 2 => b - 1,
        Some(b) => bail!("--target-bus {b} is the slack or invalid (1-based)"),
        None => net.bus_count() - 1,
    };
    let mut run = RunDir::create(out, m)?;
    run.write("network.csv", net.to_text())?;
    for i in 0..c.count {
        let ds = generate_pf_dataset(&net, c.delta, c.points, target, derive_seed(c.seed, 0, i as u64))?;
        run.write(&format!("dataset_{i:04}.csv"), ds.to_csv())?;
    }
    run.finish()
}

/// Resolved config text plus the override lines and input hashes.
fn train_config_text(c: &Train) -> Result<(String, Vec<String>, Vec<(String, String)>)> {
    let mut inputs = Vec::new();
    let mut kv = match &c.config {
        Some(p) => {
            inputs.push(input_entry(p)?);
            KeyValues::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => KeyValues::default(),
    };
    let mut overrides = Vec::new();
    let mut set = |k: &str, v: String, kv: &mut KeyValues| {
        overrides.push(format!("{k} = {v}"));
        kv.set(k, v);
    };
    for s in &c.sets {
        let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
        set(k.trim(), v.trim().to_string(), &mut kv);
    }
    if let Some(v) = &c.prior {
        set("prior", v.clone(), &mut kv);
    }
    if let Some(v) = c.seed {
        set("seed", v.to_string(), &mut kv);
    }
    if let Some(v) = c.epochs {
        set("epochs", v.to_string(), &mut kv);
    }
    if let Some(v) = c.steps_per_epoch {
        set("steps_per_epoch", v.to_string(), &mut kv);
    }
    if let Some(v) = c.batch_size {
        set("batch_size", v.to_string(), &mut kv);
    }
    if let Some(v) = c.lr {
        set("lr", format!("{v:?}"), &mut kv);
    }
    if let Some(v) = c.attention {
        set("attention", v.to_string(), &mut kv);
    }
    let cfg = TrainConfig::from_key_values(&kv)?;
    Ok((cfg.to_text(), overrides, inputs))
}

fn train(out: &Path, config_text: &str, overrides: Vec<String>, inputs: Vec<(String, String)>) -> Result<PathBuf> {
    let cfg = TrainConfig::from_text(config_text)?;
    let mut m = manifest("train", cfg.seed, Vec::new(), config_text.to_string());
    m.overrides = overrides;
    m.inputs = inputs;
    let mut run = RunDir::create(out, m)?;
    run.write("config.txt", config_text)?;
    let outcome = train_with_progress(&cfg, &mut |r| {
        let train = r.train_nll.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        eprintln!("step {:>8}  train_nll {train:>8}  val_nll {:.4}  lr {:.2e}", r.step, r.val_nll, r.lr);
    })?;
    run.write("train_log.csv", outcome.log.to_csv())?;
    run.write_volatile("timing.csv", outcome.log.timing_csv())?;
    run.write("model.ckpt", outcome.best.to_bytes())?;
    run.finish()
}

fn suite_for(s: &SuiteArgs) -> Result<Vec<pfn_core::SyntheticDataset>> {
    let data = data_for(&s.prior, s.points)?;
    Ok(data_suite(&data, s.datasets, derive_seed(s.seed, TAG_EVAL, 0))?)
}

fn load_checkpoint(p: &Path, m: &mut Manifest) -> Result<PFNModel> {
    m.inputs.push(input_entry(p)?);
    PFNModel::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn evaluate_cmd(out: &Path, c: &Evaluate, args: Vec<String>) -> Result<PathBuf> {
    let mut m = manifest("evaluate", c.suite.seed, args, String::new());
    let model = load_checkpoint(&c.checkpoint, &mut m)?;
    m.config = model.spec().to_text();
    let suite = suite_for(&c.suite)?;
    let pfn = PfnPredictor::new(&model);
    let filter = match (c.knn, c.exp_gamma) {
        (Some(_), Some(_)) => bail!("--knn and --exp-gamma are exclusive"),
        (Some(k), None) => Some(PostHocFilter::Knn { k }),
        (None, Some(gamma)) => Some(PostHocFilter::Exponential { gamma }),
        (None, None) => None,
    };
    let filtered = filter.map(|f| Filtered { inner: &pfn, filter: f });
    let pred: &dyn Predictor = match &filtered {
        Some(f) => f,
        None => &pfn,
    };
    let mut run = RunDir::create(out, m)?;
    let metrics = evaluate(pred, &suite, c.suite.context, c.suite.n_test)?;
    let rows = vec![(pred.name(), c.suite.context, metrics)];
    run.write("metrics.csv", metrics_csv_deterministic(&rows))?;
    run.write_volatile("timing.csv", timing_csv(&[(pred.name(), metrics.wall_seconds)]))?;
    let cov = coverage(pred, &suite, c.suite.context, c.suite.n_test)?;
    run.write("coverage.csv", coverage_csv(&[cov]))?;
    if !c.sweep.is_empty() {
        let sweep = sweep_context(pred, &suite, &c.sweep, c.suite.n_test)?;
        run.write("context_sweep.csv", context_sweep_csv(&pred.name(), &sweep))?;
    }
    eprintln!("{}: mse {:.4e}  mae {:.4e}", pred.name(), metrics.mse, metrics.mae);
    run.finish()
}

fn gp_baseline(out: &Path, c: &GpBaseline, args: Vec<String>) -> Result<PathBuf> {
    let data = data_for(&c.suite.prior, c.suite.points)?;
    let gp = match c.mode.as_str() {
        "exact" => match &data {
            DataSource::Prior(p) => GpPredictor::for_prior(p)?,
            DataSource::PowerFlow(_) => bail!("exact mode needs a GP prior; use --mode fit"),
        },
        "fit" => GpPredictor {
            mode: GpMode::Fit(HyperGrid {
                ard: c.ard,
                ..HyperGrid::default()
            }),
        },
        other => bail!("unknown GP mode '{other}' (expected exact or fit)"),
    };
    let mut run = RunDir::create(out, manifest("gp-baseline", c.suite.seed, args, String::new()))?;
    let suite = suite_for(&c.suite)?;
    let metrics = evaluate(&gp, &suite, c.suite.context, c.suite.n_test)?;
    run.write("metrics.csv", metrics_csv_deterministic(&[(gp.name(), c.suite.context, metrics)]))?;
    run.write_volatile("timing.csv", timing_csv(&[(gp.name(), metrics.wall_seconds)]))?;
    let hypers = match &gp.mode {
        GpMode::Known { hyper, .. } => vec![hyper.clone()],
        GpMode::Fit(grid) => suite
            .iter()
            .map(|ds| {
                let s = eval_split(ds, c.suite.context, c.suite.n_test)?;
                gp_fit_centered(&s.ctx_x, &s.ctx_y, grid)
            })
            .collect::<pfn_core::Result<_>>()?,
    };
    run.write("hypers.csv", hyper_csv(&hypers))?;
    run.write("coverage.csv", coverage_csv(&[coverage(&gp, &suite, c.suite.context, c.suite.n_test)?]))?;
    eprintln!("{}: mse {:.4e}", gp.name(), metrics.mse);
    run.finish()
}

/// Head-averaged attention weights of one layer.
fn mean_heads(heads: &[Tensor]) -> Tensor {
    let mut acc = heads[0].clone();
    for h in &heads[1..] {
        acc.data_mut().iter_mut().zip(h.data()).for_each(|(a, b)| *a += b);
    }
    acc.map(|v| v / heads.len() as f64)
}

fn diagnose(out: &Path, c: &DiagnoseLocality, args: Vec<String>) -> Result<PathBuf> {
    let mut m = manifest("diagnose-locality", c.suite.seed, args, String::new());
    let model = load_checkpoint(&c.checkpoint, &mut m)?;
    if c.layer == 0 || c.layer > model.spec().layers {
        bail!("--layer {} out of range 1..={}", c.layer, model.spec().layers);
    }
    let layer = c.layer - 1;
    let suite = suite_for(&c.suite)?;
    let mut run = RunDir::create(out, m)?;
    let mut summary = String::from("dataset,spearman_distance_log_weight\n");
    for (i, ds) in suite.iter().enumerate() {
        let s = eval_split(ds, c.suite.context, c.suite.n_test)?;
        let prof = model.locality_profile(&s.ctx_x, &s.ctx_y, &s.query_x, layer)?;
        if i == 0 {
            run.write("locality_profile.csv", prof.to_csv())?;
        }
        let _ = writeln!(summary, "{i},{:?}", prof.spearman_distance_log_weight());
    }
    run.write("locality_summary.csv", summary)?;
    let mut fm = String::from("n_context,epsilon,far_mass\n");
    for &n in &c.sizes {
        let (mut tot, mut cnt) = (0.0, 0usize);
        for ds in &suite {
            let s = eval_split(ds, n, c.suite.n_test)?;
            let (_, w) = model.forward_with_weights(&s.ctx_x, &s.ctx_y, &s.query_x)?;
            let f = far_mass(&mean_heads(&w[layer]), &s.ctx_x, &s.query_x, c.epsilon)?;
            tot += f.iter().sum::<f64>();
            cnt += f.len();
        }
        let _ = writeln!(fm, "{n},{:?},{:?}", c.epsilon, tot / cnt as f64);
    }
    run.write("far_mass.csv", fm)?;
    run.finish()
}

fn ablate(out: &Path, c: &Ablate, args: Vec<String>) -> Result<PathBuf> {
    let key = if c.sweep == "bucket_size" { "bucket_count" } else { c.sweep.as_str() };
    let base = Train {
        config: c.config.clone(),
        sets: c.sets.clone(),
        seed: c.seed,
        epochs: None,
        steps_per_epoch: None,
        batch_size: None,
        lr: None,
        attention: None,
        prior: None,
    };
    let (text, overrides, inputs) = train_config_text(&base)?;
    let seed = TrainConfig::from_text(&text)?.seed;
    let mut m = manifest("ablate", seed, args, text.clone());
    m.overrides = overrides;
    m.inputs = inputs;
    let mut run = RunDir::create(out, m)?;
    let mut table = format!("{key},best_val_nll,final_val_nll\n");
    for v in &c.values {
        let mut kv = KeyValues::parse(&text)?;
        kv.set(key, v);
        let cfg = TrainConfig::from_key_values(&kv)?;
        eprintln!("{key} = {v}");
        let outcome = train_with_progress(&cfg, &mut |r| eprintln!("  step {:>8}  val_nll {:.4}", r.step, r.val_nll))?;
        let last = outcome.log.last().map(|r| r.val_nll).unwrap_or(f64::NAN);
        let _ = writeln!(table, "{v},{:?},{:?}", outcome.best_val_nll, last);
        run.write(&format!("train_log_{key}_{v}.csv"), outcome.log.to_csv())?;
    }
    run.write("ablation.csv", table)?;
    run.finish()
}

fn timing(out: &Path, c: &Timing, args: Vec<String>) -> Result<PathBuf> {
    let mut run = RunDir::create(out, manifest("timing", 0, args, String::new()))?;
    let mut rows = Vec::new();
    let mut csv = String::from("attention,n_context,seconds_per_step\n");
    for &kind in &c.attention {
        let spec = ModelSpec::transformer(c.dim, c.width, c.layers, c.heads, 2 * c.width, 100).with_attention(kind);
        let mut times = Vec::new();
        for &n in &c.context {
            let t = throughput_compare(std::slice::from_ref(&spec), n, c.queries, c.batch, c.warmup, c.steps)?[0];
            let _ = writeln!(csv, "{kind},{n},{t:.6}");
            times.push(t);
        }
        let xs: Vec<f64> = c.context.iter().map(|&n| n as f64).collect();
        if xs.len() >= 2 {
            let (_, slope, r2) = linear_fit(&xs, &times);
            eprintln!("{kind}: slope {slope:.3e} s/point, R^2 {r2:.3}");
        }
        rows.push((kind.to_string(), times[times.len() - 1]));
    }
    run.write_volatile("timing.csv", csv)?;
    run.write_volatile("timing_summary.csv", timing_csv(&rows))?;
    run.finish()
}

fn replay(out: &Path, path: &Path) -> Result<PathBuf> {
    let m = Manifest::parse(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
    for (hash, input) in &m.inputs {
        let (now, _) = input_entry(Path::new(input))?;
        if &now != hash {
            bail!("input {input} changed since the recorded run");
        }
    }
    if m.subcommand == "train" {
        return train(out, &m.config, m.overrides.clone(), m.inputs.clone());
    }
    let mut argv = vec!["pfn".to_string(), m.subcommand.clone()];
    argv.extend(m.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).context("manifest arguments no longer parse")?;
    let args = m.args.clone();
    match cli.command {
        Command::GenPrior(c) => gen_prior(out, &c, args),
        Command::GenPowerflow(c) => gen_powerflow(out, &c, args),
        Command::Evaluate(c) => evaluate_cmd(out, &c, args),
        Command::GpBaseline(c) => gp_baseline(out, &c, args),
        Command::DiagnoseLocality(c) => diagnose(out, &c, args),
        Command::Ablate(c) => ablate(out, &c, args),
        Command::Timing(c) => timing(out, &c, args),
        Command::Train(_) | Command::Replay(_) => bail!("cannot replay '{}'", m.subcommand),
    }
}
