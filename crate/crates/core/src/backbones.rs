//! Transformer and CNN PFN models.
//!
//! A model encodes inputs with `φ_x` and targets with `φ_y`, runs a stack of
//! attention blocks in which queries attend only to context points, and maps
//! the final query states to bucket logits with a head `g`.
//!
//! Decoupled attention kinds keep two streams: the fixed input embeddings
//! (source of every query and key) and a value stream that starts at `φ_y(y)`
//! for context points and at zero for queries. Coupled kinds keep a single
//! joint stream `φ_x(x) + φ_y(y)`, with a learned placeholder in place of
//! `φ_y(y)` for queries. In the last layer only query rows are computed.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian.
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `PFNCKPT\0` |
//! | version | `u32`, currently 1 |
//! | spec | `u64` byte length, then UTF-8 `key = value` text ([`ModelSpec::to_text`]) |
//! | buckets | `u64` byte length, then UTF-8 text ([`BucketSpec::to_text`]) |
//! | parameter count | `u64` |
//! | each parameter | `u32` name length, UTF-8 name, `u32` rank, `u64` per dim, then `f64` values |

use std::path::Path;
use std::str::FromStr;

use crate::attention::{attend, AttentionKind, AttentionSpec, AttentionVars, LocalityProfile};
use crate::bardist::BucketSpec;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::{gradcheck, SeededRng, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($name), " '{}'"), s))),
                }
            }
        }
    };
}

str_enum!(Backbone { Transformer => "transformer", Cnn => "cnn" });
str_enum!(EncoderKind { Linear => "linear", Mlp2 => "mlp2", Broadcast => "broadcast" });
str_enum!(HeadKind { Linear => "linear", Mlp => "mlp", Broadcast => "broadcast" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub input_dim: usize,
    pub width: usize,
    pub layers: usize,
    /// Hidden width of the feed-forward sublayer; 0 disables it.
    pub ffn_dim: usize,
    /// Depthwise convolution size (CNN only).
    pub kernel_size: usize,
    pub attention: AttentionSpec,
    pub phi_x: EncoderKind,
    pub phi_y: EncoderKind,
    pub head: HeadKind,
    pub bucket_count: usize,
}

impl ModelSpec {
    pub fn transformer(
        input_dim: usize,
        width: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        bucket_count: usize,
    ) -> Self {
        Self {
            backbone: Backbone::Transformer,
            input_dim,
            width,
            layers,
            ffn_dim,
            kernel_size: 5,
            attention: AttentionSpec::new(AttentionKind::Dva, width, heads),
            phi_x: EncoderKind::Linear,
            phi_y: EncoderKind::Linear,
            head: HeadKind::Linear,
            bucket_count,
        }
    }

    pub fn cnn(input_dim: usize, width: usize, layers: usize, kernel_size: usize, bucket_count: usize) -> Self {
        Self {
            backbone: Backbone::Cnn,
            ffn_dim: 0,
            kernel_size,
            ..Self::transformer(input_dim, width, layers, 4, 0, bucket_count)
        }
    }

    /// 1D Transformer: width 128, 1 layer, 4 heads, FFN 512, 100 buckets.
    pub fn transformer_1d() -> Self {
        Self::transformer(1, 128, 1, 4, 512, 100)
    }

    pub fn transformer_5d() -> Self {
        Self::transformer(5, 64, 2, 8, 1024, 500)
    }

    pub fn transformer_10d() -> Self {
        Self::transformer(10, 32, 2, 8, 1024, 500)
    }

    pub fn transformer_64d() -> Self {
        Self::transformer(64, 64, 4, 8, 1024, 500)
    }

    /// 1D CNN: width 32, 1 layer, kernel 5.
    pub fn cnn_1d() -> Self {
        Self::cnn(1, 32, 1, 5, 100)
    }

    /// 5D CNN: width 32, 4 layers, kernel 5.
    pub fn cnn_5d() -> Self {
        Self::cnn(5, 32, 4, 5, 500)
    }

    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        self.attention.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.width == 0 || self.layers == 0 || self.bucket_count == 0 {
            return cfg("input_dim, width, layers and bucket_count must be positive".into());
        }
        self.attention.validate()?;
        if self.width % self.attention.heads != 0 {
            return cfg(format!("width {} not divisible by {} heads", self.width, self.attention.heads));
        }
        if self.phi_x == EncoderKind::Broadcast && self.input_dim > self.width {
            return cfg("broadcast encoder needs input_dim <= width".into());
        }
        if self.backbone == Backbone::Cnn && self.kernel_size % 2 == 0 {
            return cfg(format!("kernel size {} must be odd", self.kernel_size));
        }
        Ok(())
    }

    /// `key = value` form, also used in checkpoint headers.
    pub fn to_text(&self) -> String {
        let a = &self.attention;
        format!(
            "backbone = {}\ninput_dim = {}\nwidth = {}\nlayers = {}\nheads = {}\nffn_dim = {}\n\
             kernel_size = {}\nattention = {}\nd_k = {}\ngamma_init = {:?}\ntie_qk = {}\n\
             phi_x = {}\nphi_y = {}\nhead = {}\nbucket_count = {}\n",
            self.backbone,
            self.input_dim,
            self.width,
            self.layers,
            a.heads,
            self.ffn_dim,
            self.kernel_size,
            a.kind,
            a.d_k,
            a.gamma_init,
            a.tie_qk,
            self.phi_x,
            self.phi_y,
            self.head,
            self.bucket_count
        )
    }

    pub const KEYS: [&'static str; 15] = [
        "backbone",
        "input_dim",
        "width",
        "layers",
        "heads",
        "ffn_dim",
        "kernel_size",
        "attention",
        "d_k",
        "gamma_init",
        "tie_qk",
        "phi_x",
        "phi_y",
        "head",
        "bucket_count",
    ];

    /// Applies any model keys present in `kv` on top of `self`.
    pub fn apply(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("backbone")? {
            self.backbone = v;
        }
        if let Some(v) = kv.get("input_dim")? {
            self.input_dim = v;
        }
        let width_set = kv.get::<usize>("width")?;
        if let Some(v) = width_set {
            self.width = v;
            self.attention.d_k = v;
        }
        if let Some(v) = kv.get("layers")? {
            self.layers = v;
        }
        if let Some(v) = kv.get("heads")? {
            self.attention.heads = v;
        }
        if let Some(v) = kv.get("ffn_dim")? {
            self.ffn_dim = v;
        }
        if let Some(v) = kv.get("kernel_size")? {
            self.kernel_size = v;
        }
        if let Some(v) = kv.get("attention")? {
            self.attention.kind = v;
        }
        if let Some(v) = kv.get("d_k")? {
            self.attention.d_k = v;
        }
        if let Some(v) = kv.get("gamma_init")? {
            self.attention.gamma_init = v;
        }
        if let Some(v) = kv.get("tie_qk")? {
            self.attention.tie_qk = v;
        }
        if let Some(v) = kv.get("phi_x")? {
            self.phi_x = v;
        }
        if let Some(v) = kv.get("phi_y")? {
            self.phi_y = v;
        }
        if let Some(v) = kv.get("head")? {
            self.head = v;
        }
        if let Some(v) = kv.get("bucket_count")? {
            self.bucket_count = v;
        }
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&Self::KEYS)?;
        let spec = Self::transformer_1d().apply(&kv)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier(usize, usize),
    /// `U(-a, a)`.
    Uniform(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Clone, Debug, PartialEq)]
enum EncIdx {
    Linear { w: usize, b: usize },
    Mlp2 { w1: usize, b1: usize, w2: usize, b2: usize },
    Broadcast,
}

#[derive(Clone, Debug, PartialEq)]
struct FfnIdx {
    ln: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    conv: Option<(usize, usize)>,
    ln: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    log_gamma: Option<usize>,
    ffn: Option<FfnIdx>,
}

#[derive(Clone, Debug, PartialEq)]
enum HeadIdx {
    Linear { w: usize, b: usize },
    Mlp { w1: usize, b1: usize, w2: usize, b2: usize },
    Broadcast,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    phi_x: EncIdx,
    phi_y: EncIdx,
    placeholder: Option<usize>,
    layers: Vec<LayerIdx>,
    final_ln: (usize, usize),
    head: HeadIdx,
}

#[derive(Default)]
struct Builder {
    entries: Vec<Entry>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.entries.push(Entry { name, rows, cols, init });
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), fan_in, fan_out, Init::Xavier(fan_in, fan_out));
        let b = self.add(format!("{prefix}.b"), 1, fan_out, Init::Zeros);
        (w, b)
    }

    /// Encoder layer: random bias so that a scalar input does not collapse
    /// under the following layer norm.
    fn encoder_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), fan_in, fan_out, Init::Xavier(fan_in, fan_out));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let b = self.add(format!("{prefix}.b"), 1, fan_out, Init::Uniform(bound));
        (w, b)
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.gain"), 1, width, Init::Ones);
        let b = self.add(format!("{prefix}.bias"), 1, width, Init::Zeros);
        (g, b)
    }

    fn encoder(&mut self, prefix: &str, kind: EncoderKind, input: usize, width: usize) -> EncIdx {
        match kind {
            EncoderKind::Linear => {
                let (w, b) = self.encoder_linear(prefix, input, width);
                EncIdx::Linear { w, b }
            }
            EncoderKind::Mlp2 => {
                let (w1, b1) = self.encoder_linear(&format!("{prefix}.0"), input, width);
                let (w2, b2) = self.linear(&format!("{prefix}.1"), width, width);
                EncIdx::Mlp2 { w1, b1, w2, b2 }
            }
            EncoderKind::Broadcast => EncIdx::Broadcast,
        }
    }
}

fn layout(spec: &ModelSpec) -> (Layout, Vec<Entry>) {
    let w = spec.width;
    let a = &spec.attention;
    let mut b = Builder::default();
    let phi_x = b.encoder("phi_x", spec.phi_x, spec.input_dim, w);
    let phi_y = b.encoder("phi_y", spec.phi_y, 1, w);
    let placeholder = (!a.kind.is_decoupled()).then(|| b.add("query_y_placeholder".into(), 1, w, Init::Zeros));
    let mut layers = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        let p = format!("layer{l}");
        let conv = (spec.backbone == Backbone::Cnn).then(|| {
            let k = spec.kernel_size;
            let kern = b.add(format!("{p}.conv.kernel"), k, w, Init::Xavier(k, k));
            let bias = b.add(format!("{p}.conv.bias"), 1, w, Init::Zeros);
            (kern, bias)
        });
        let ln = b.layer_norm(&format!("{p}.ln1"), w);
        let wq = b.add(format!("{p}.attn.wq"), w, a.d_k, Init::Xavier(w, a.d_k));
        let wk = if a.tie_qk {
            wq
        } else {
            b.add(format!("{p}.attn.wk"), w, a.d_k, Init::Xavier(w, a.d_k))
        };
        let wv = b.add(format!("{p}.attn.wv"), w, w, Init::Xavier(w, w));
        let wo = b.add(format!("{p}.attn.wo"), w, w, Init::Xavier(w, w));
        let log_gamma = (a.kind == AttentionKind::KernelRbf)
            .then(|| b.add(format!("{p}.attn.log_gamma"), 1, 1, Init::Const(a.gamma_init.ln())));
        let ffn = (spec.ffn_dim > 0).then(|| {
            let ln = b.layer_norm(&format!("{p}.ln2"), w);
            let (w1, b1) = b.linear(&format!("{p}.ffn.0"), w, spec.ffn_dim);
            let (w2, b2) = b.linear(&format!("{p}.ffn.1"), spec.ffn_dim, w);
            FfnIdx { ln, w1, b1, w2, b2 }
        });
        layers.push(LayerIdx {
            conv,
            ln,
            wq,
            wk,
            wv,
            wo,
            log_gamma,
            ffn,
        });
    }
    let final_ln = b.layer_norm("final_ln", w);
    let head = match spec.head {
        HeadKind::Linear => {
            let (w_, b_) = b.linear("head", w, spec.bucket_count);
            HeadIdx::Linear { w: w_, b: b_ }
        }
        HeadKind::Mlp => {
            let (w1, b1) = b.linear("head.0", w, w);
            let (w2, b2) = b.linear("head.1", w, spec.bucket_count);
            HeadIdx::Mlp { w1, b1, w2, b2 }
        }
        HeadKind::Broadcast => HeadIdx::Broadcast,
    };
    (
        Layout {
            phi_x,
            phi_y,
            placeholder,
            layers,
            final_ln,
            head,
        },
        b.entries,
    )
}

/// Fixed `rows × cols` matrix routing input `k` to every channel `j` with
/// `j % rows == k`.
pub fn broadcast_matrix(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for j in 0..cols {
        t.set(j % rows, j, 1.0);
    }
    t
}

/// Trainable PFN with its frozen bucket edges.
#[derive(Clone, Debug)]
pub struct PFNModel {
    spec: ModelSpec,
    buckets: BucketSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Xavier-initialized model (biases zero, layer-norm gains one).
pub fn build_model(spec: &ModelSpec, buckets: BucketSpec, rng: &mut SeededRng) -> Result<PFNModel> {
    spec.validate()?;
    if buckets.num_buckets() != spec.bucket_count {
        return Err(Error::Config(format!(
            "spec has {} buckets but edges define {}",
            spec.bucket_count,
            buckets.num_buckets()
        )));
    }
    let (layout, entries) = layout(spec);
    let params = entries
        .iter()
        .map(|e| match e.init {
            Init::Xavier(fi, fo) => {
                let a = (6.0 / (fi + fo) as f64).sqrt();
                Tensor::from_vec(e.rows, e.cols, (0..e.rows * e.cols).map(|_| rng.uniform_range(-a, a)).collect())
            }
            Init::Uniform(a) => {
                Tensor::from_vec(e.rows, e.cols, (0..e.rows * e.cols).map(|_| rng.uniform_range(-a, a)).collect())
            }
            Init::Zeros => Tensor::zeros(&[e.rows, e.cols]),
            Init::Ones => Tensor::filled(&[e.rows, e.cols], 1.0),
            Init::Const(c) => Tensor::filled(&[e.rows, e.cols], c),
        })
        .collect();
    Ok(PFNModel {
        spec: spec.clone(),
        buckets,
        names: entries.into_iter().map(|e| e.name).collect(),
        params,
        layout,
    })
}

/// Context and query streams entering one block.
struct Streams {
    /// `(N_ctx + M) × width`, or `M × width` once only queries remain.
    h: Var,
    /// Input embeddings of context then query points (decoupled kinds).
    ex_ctx: Var,
    ex_query: Var,
    ex_all: Option<Var>,
    n_ctx: usize,
    n_query: usize,
}

impl PFNModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn buckets(&self) -> &BucketSpec {
        &self.buckets
    }

    /// Center and scale applied to context targets before the target
    /// encoder: the median bucket edge and the interquartile edge range
    /// divided by 1.349 (one unit for a Gaussian).
    pub fn target_scaling(&self) -> (f64, f64) {
        let e = self.buckets.edges();
        let b = e.len() - 1;
        let iqr = (e[3 * b / 4] - e[b / 4]) / 1.349;
        let scale = if iqr > 0.0 { iqr } else { (e[b] - e[0]) / 4.0 };
        (e[b / 2], scale)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn register_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn check_inputs(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor) -> Result<()> {
        let d = self.spec.input_dim;
        if ctx_x.rows() == 0 || ctx_y.is_empty() {
            return Err(Error::Contract("empty context".into()));
        }
        if query_x.rows() == 0 {
            return Err(Error::Contract("no query points".into()));
        }
        if ctx_x.shape().len() != 2 || ctx_x.cols() != d || query_x.shape().len() != 2 || query_x.cols() != d {
            return Err(Error::Contract(format!(
                "inputs must have {d} columns, got context {:?} and queries {:?}",
                ctx_x.shape(),
                query_x.shape()
            )));
        }
        if ctx_y.len() != ctx_x.rows() {
            return Err(Error::Contract(format!(
                "{} context targets for {} context inputs",
                ctx_y.len(),
                ctx_x.rows()
            )));
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, ps: &[Var], idx: &EncIdx, x: Var) -> Result<Var> {
        match *idx {
            EncIdx::Linear { w, b } => {
                let h = tape.matmul(x, ps[w])?;
                tape.add_bias(h, ps[b])
            }
            EncIdx::Mlp2 { w1, b1, w2, b2 } => {
                let h = tape.matmul(x, ps[w1])?;
                let h = tape.add_bias(h, ps[b1])?;
                let h = tape.gelu(h);
                let h = tape.matmul(h, ps[w2])?;
                tape.add_bias(h, ps[b2])
            }
            EncIdx::Broadcast => {
                let rows = tape.value(x).cols();
                let t = tape.constant(broadcast_matrix(rows, self.spec.width));
                tape.matmul(x, t)
            }
        }
    }

    /// One block. With `last` set, only query rows are produced.
    fn block(
        &self,
        tape: &mut Tape,
        ps: &[Var],
        l: usize,
        s: &Streams,
        last: bool,
        capture: bool,
    ) -> Result<(Var, Vec<Tensor>)> {
        let li = &self.layout.layers[l];
        let (nc, m) = (s.n_ctx, s.n_query);
        let mut h = s.h;
        if let Some((k, b)) = li.conv {
            // The context is convolved as one sequence; each query is convolved
            // alone so predictions do not depend on other queries.
            let hc = tape.slice_rows(h, 0, nc)?;
            let hq = tape.slice_rows(h, nc, m)?;
            let hc = tape.conv1d_depthwise(hc, ps[k], ps[b])?;
            let center = tape.slice_rows(ps[k], self.spec.kernel_size / 2, 1)?;
            let hq = tape.conv1d_depthwise(hq, center, ps[b])?;
            let conv = tape.concat_rows(&[hc, hq])?;
            h = tape.add(h, conv)?;
        }
        let a = tape.layer_norm(h, ps[li.ln.0], ps[li.ln.1])?;
        let a_ctx = tape.slice_rows(a, 0, nc)?;
        let kind = self.spec.attention.kind;
        let (queries, keys) = if kind.is_decoupled() {
            let q = if last { s.ex_query } else { s.ex_all.expect("ex_all") };
            (q, s.ex_ctx)
        } else {
            let q = if last { tape.slice_rows(a, nc, m)? } else { a };
            (q, a_ctx)
        };
        let vars = AttentionVars {
            w_q: ps[li.wq],
            w_k: ps[li.wk],
            w_v: ps[li.wv],
            log_gamma: li.log_gamma.map(|i| ps[i]),
        };
        let (att, mut weights) = attend(tape, &self.spec.attention, &vars, queries, keys, a_ctx, capture)?;
        if !last {
            weights = weights.iter().map(|w| w.slice_rows(nc, m)).collect();
        }
        let att = tape.matmul(att, ps[li.wo])?;
        let base = if last { tape.slice_rows(h, nc, m)? } else { h };
        let mut out = tape.add(base, att)?;
        if let Some(f) = &li.ffn {
            let a2 = tape.layer_norm(out, ps[f.ln.0], ps[f.ln.1])?;
            let u = tape.matmul(a2, ps[f.w1])?;
            let u = tape.add_bias(u, ps[f.b1])?;
            let u = tape.gelu(u);
            let o = tape.matmul(u, ps[f.w2])?;
            let o = tape.add_bias(o, ps[f.b2])?;
            out = tape.add(out, o)?;
        }
        Ok((out, weights))
    }

    /// Builds the forward pass on `tape` using parameter handles `ps`
    /// (from [`PFNModel::register`]). Returns `M × B` logits and, when
    /// `capture` is set, per-layer per-head `M × N_ctx` attention weights.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ps: &[Var],
        ctx_x: &Tensor,
        ctx_y: &[f64],
        query_x: &Tensor,
        capture: bool,
    ) -> Result<(Var, Vec<Vec<Tensor>>)> {
        self.check_inputs(ctx_x, ctx_y, query_x)?;
        let (nc, m, w) = (ctx_x.rows(), query_x.rows(), self.spec.width);
        let xc = tape.constant(ctx_x.clone());
        let xq = tape.constant(query_x.clone());
        let (center, scale) = self.target_scaling();
        let yc = tape.constant(Tensor::from_vec(nc, 1, ctx_y.iter().map(|y| (y - center) / scale).collect()));
        let ex_ctx = self.encode(tape, ps, &self.layout.phi_x, xc)?;
        let ex_query = self.encode(tape, ps, &self.layout.phi_x, xq)?;
        let ey_ctx = self.encode(tape, ps, &self.layout.phi_y, yc)?;
        let decoupled = self.spec.attention.kind.is_decoupled();
        let h = if decoupled {
            let zq = tape.constant(Tensor::zeros(&[m, w]));
            tape.concat_rows(&[ey_ctx, zq])?
        } else {
            let zc = tape.add(ex_ctx, ey_ctx)?;
            let ph = self.layout.placeholder.expect("placeholder");
            let zq = tape.add_bias(ex_query, ps[ph])?;
            tape.concat_rows(&[zc, zq])?
        };
        let ex_all = if decoupled && self.spec.layers > 1 {
            Some(tape.concat_rows(&[ex_ctx, ex_query])?)
        } else {
            None
        };
        let mut s = Streams {
            h,
            ex_ctx,
            ex_query,
            ex_all,
            n_ctx: nc,
            n_query: m,
        };
        let mut all_weights = Vec::new();
        for l in 0..self.spec.layers {
            let last = l + 1 == self.spec.layers;
            let (h, weights) = self.block(tape, ps, l, &s, last, capture)?;
            s.h = h;
            all_weights.push(weights);
        }
        let (g, b) = self.layout.final_ln;
        let hf = tape.layer_norm(s.h, ps[g], ps[b])?;
        let logits = match self.layout.head {
            HeadIdx::Linear { w, b } => {
                let o = tape.matmul(hf, ps[w])?;
                tape.add_bias(o, ps[b])?
            }
            HeadIdx::Mlp { w1, b1, w2, b2 } => {
                let o = tape.matmul(hf, ps[w1])?;
                let o = tape.add_bias(o, ps[b1])?;
                let o = tape.gelu(o);
                let o = tape.matmul(o, ps[w2])?;
                tape.add_bias(o, ps[b2])?
            }
            HeadIdx::Broadcast => {
                let g = tape.constant(broadcast_matrix(w, self.spec.bucket_count));
                tape.matmul(hf, g)?
            }
        };
        Ok((logits, all_weights))
    }

    /// `M × B` bucket logits for the queries given a context.
    pub fn forward(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ps = self.register_constants(&mut tape);
        let (logits, _) = self.forward_tape(&mut tape, &ps, ctx_x, ctx_y, query_x, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits plus per-layer per-head attention weights.
    pub fn forward_with_weights(
        &self,
        ctx_x: &Tensor,
        ctx_y: &[f64],
        query_x: &Tensor,
    ) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let ps = self.register_constants(&mut tape);
        let (logits, w) = self.forward_tape(&mut tape, &ps, ctx_x, ctx_y, query_x, true)?;
        Ok((tape.value(logits).clone(), w))
    }

    /// Mean bar-distribution NLL of query targets on the tape.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        ps: &[Var],
        ctx_x: &Tensor,
        ctx_y: &[f64],
        query_x: &Tensor,
        query_y: &[f64],
    ) -> Result<Var> {
        let (logits, _) = self.forward_tape(tape, ps, ctx_x, ctx_y, query_x, false)?;
        let targets: Vec<usize> = query_y.iter().map(|&y| self.buckets.bucket_of(y)).collect();
        tape.bar_nll(logits, &targets, &self.buckets.log_widths())
    }

    /// Applies one block eagerly to `h` (`(n_ctx + M) × width`). For decoupled
    /// kinds `ex` holds the input embeddings of the same rows.
    pub fn block_eager(&self, layer: usize, h: &Tensor, ex: Option<&Tensor>, n_ctx: usize, last: bool) -> Result<Tensor> {
        if layer >= self.spec.layers {
            return Err(Error::Contract(format!("layer {layer} out of range")));
        }
        let m = h.rows() - n_ctx;
        let mut tape = Tape::new();
        let ps = self.register_constants(&mut tape);
        let hv = tape.constant(h.clone());
        let (ex_ctx, ex_query, ex_all) = match ex {
            Some(e) => {
                let all = tape.constant(e.clone());
                (tape.slice_rows(all, 0, n_ctx)?, tape.slice_rows(all, n_ctx, m)?, Some(all))
            }
            None => (hv, hv, None),
        };
        let s = Streams {
            h: hv,
            ex_ctx,
            ex_query,
            ex_all,
            n_ctx,
            n_query: m,
        };
        let (out, _) = self.block(&mut tape, &ps, layer, &s, last, false)?;
        Ok(tape.value(out).clone())
    }

    /// Relative finite-difference error of the full-model loss gradient with
    /// respect to every parameter.
    pub fn gradient_check(&self, ctx_x: &Tensor, ctx_y: &[f64], query_x: &Tensor, query_y: &[f64]) -> Result<f64> {
        let build = |tape: &mut Tape, vars: &[Var]| self.loss_tape(tape, vars, ctx_x, ctx_y, query_x, query_y);
        gradcheck::check_gradient(&build, &self.params, gradcheck::FD_STEP)
    }

    /// Serializes to the documented checkpoint layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for text in [self.spec.to_text(), self.buckets.to_text()] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.params) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let spec_text = r.string_u64()?;
        let bucket_text = r.string_u64()?;
        let spec = ModelSpec::from_text(&spec_text)?;
        let buckets = BucketSpec::from_text(&bucket_text)?;
        let mut model = build_model(&spec, buckets, &mut SeededRng::new(0))?;
        let count = r.u64()? as usize;
        if count != model.params.len() {
            return Err(r.err(&format!("expected {} parameters, found {count}", model.params.len())));
        }
        for i in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("name is not UTF-8"))?;
            if name != model.names[i] {
                return Err(r.err(&format!("expected parameter '{}', found '{name}'", model.names[i])));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            if shape != model.params[i].shape() {
                return Err(r.err(&format!("shape mismatch for '{name}'")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            model.params[i] = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Query/context attention weights of one layer with Euclidean input distances.
    pub fn locality_profile(
        &self,
        ctx_x: &Tensor,
        ctx_y: &[f64],
        query_x: &Tensor,
        layer: usize,
    ) -> Result<LocalityProfile> {
        if layer >= self.spec.layers {
            return Err(Error::Contract(format!(
                "layer {layer} out of range for {} layers",
                self.spec.layers
            )));
        }
        let (_, weights) = self.forward_with_weights(ctx_x, ctx_y, query_x)?;
        LocalityProfile::from_weights(layer, &weights[layer], ctx_x, query_x)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            line: self.pos,
            msg: format!("checkpoint byte {}: {msg}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string_u64(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("header is not UTF-8"))
    }
}

/// Closed-form parameter count from the spec alone.
pub fn expected_param_count(spec: &ModelSpec) -> usize {
    let w = spec.width;
    let enc = |kind: EncoderKind, input: usize| match kind {
        EncoderKind::Linear => input * w + w,
        EncoderKind::Mlp2 => input * w + w + w * w + w,
        EncoderKind::Broadcast => 0,
    };
    let a = &spec.attention;
    let mut layer = 2 * w + w * a.d_k * if a.tie_qk { 1 } else { 2 } + 2 * w * w;
    if a.kind == AttentionKind::KernelRbf {
        layer += 1;
    }
    if spec.backbone == Backbone::Cnn {
        layer += spec.kernel_size * w + w;
    }
    if spec.ffn_dim > 0 {
        layer += 2 * w + 2 * w * spec.ffn_dim + spec.ffn_dim + w;
    }
    let head = match spec.head {
        HeadKind::Linear => w * spec.bucket_count + spec.bucket_count,
        HeadKind::Mlp => w * w + w + w * spec.bucket_count + spec.bucket_count,
        HeadKind::Broadcast => 0,
    };
    let placeholder = if a.kind.is_decoupled() { 0 } else { w };
    enc(spec.phi_x, spec.input_dim) + enc(spec.phi_y, 1) + placeholder + spec.layers * layer + 2 * w + head
}
