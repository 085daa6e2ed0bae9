//! Attention rules and locality diagnostics.
//!
//! All rules share one calling convention: queries attend over a context whose
//! keys and values may come from different streams. Decoupled rules (DVA,
//! RBF-kernel, linear DVA) take keys and queries from input embeddings and
//! values from target embeddings; coupled rules (VA, linear VA) use the joint
//! embedding for all three.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{elu_plus_one, xavier_uniform, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Va,
    Dva,
    KernelRbf,
    LinearVa,
    LinearDva,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Va,
        AttentionKind::Dva,
        AttentionKind::KernelRbf,
        AttentionKind::LinearVa,
        AttentionKind::LinearDva,
    ];

    /// Keys/queries from inputs only, values from targets only.
    pub fn is_decoupled(self) -> bool {
        matches!(self, Self::Dva | Self::KernelRbf | Self::LinearDva)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Self::LinearVa | Self::LinearDva)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Va => "va",
            Self::Dva => "dva",
            Self::KernelRbf => "kernel_rbf",
            Self::LinearVa => "linear_va",
            Self::LinearDva => "linear_dva",
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown attention kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    /// Total query/key width across heads.
    pub d_k: usize,
    pub heads: usize,
    /// Initial RBF bandwidth γ (kernel attention only).
    pub gamma_init: f64,
    /// Share one projection for queries and keys.
    pub tie_qk: bool,
}

impl AttentionSpec {
    pub fn new(kind: AttentionKind, d_k: usize, heads: usize) -> Self {
        Self {
            kind,
            d_k,
            heads,
            gamma_init: 1.0,
            tie_qk: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 {
            return Err(Error::Config("d_k and heads must be positive".into()));
        }
        if self.d_k % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_k {} not divisible by {} heads",
                self.d_k, self.heads
            )));
        }
        if self.kind == AttentionKind::KernelRbf && !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(Error::Config("gamma_init must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_k / self.heads
    }

    /// Softmax temperature `sqrt(d_k per head)`.
    pub fn temperature(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }
}

/// Projection weights for one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    /// `None` when tied to `w_q`.
    pub w_k: Option<Tensor>,
    pub w_v: Tensor,
    pub log_gamma: f64,
}

impl AttentionParams {
    /// Xavier-initialized projections `d_model → d_k` and `d_model → d_v`.
    pub fn init(spec: &AttentionSpec, d_model: usize, d_v: usize, rng: &mut SeededRng) -> Self {
        let w_q = xavier_uniform(d_model, spec.d_k, rng);
        let w_k = (!spec.tie_qk).then(|| xavier_uniform(d_model, spec.d_k, rng));
        let w_v = xavier_uniform(d_model, d_v, rng);
        Self {
            w_q,
            w_k,
            w_v,
            log_gamma: spec.gamma_init.ln(),
        }
    }

    pub fn w_k(&self) -> &Tensor {
        self.w_k.as_ref().unwrap_or(&self.w_q)
    }
}

/// Tape handles for [`AttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub log_gamma: Option<Var>,
}

/// Multi-head attention on the tape.
///
/// `queries` is `M × d`, `keys` and `values` are `N × d`. Returns the `M × d_v`
/// head-concatenated output and, when `capture` is set, the `M × N` weight
/// matrix of each head.
pub fn attend(
    tape: &mut Tape,
    spec: &AttentionSpec,
    vars: &AttentionVars,
    queries: Var,
    keys: Var,
    values: Var,
    capture: bool,
) -> Result<(Var, Vec<Tensor>)> {
    let n = tape.value(keys).rows();
    if n == 0 || tape.value(keys).is_empty() {
        return Err(Error::Contract("attention over an empty context".into()));
    }
    if tape.value(values).rows() != n {
        return Err(Error::Dimension {
            op: "attend",
            lhs: tape.value(keys).shape().to_vec(),
            rhs: tape.value(values).shape().to_vec(),
        });
    }
    let q = tape.matmul(queries, vars.w_q)?;
    let k = tape.matmul(keys, vars.w_k)?;
    let v = tape.matmul(values, vars.w_v)?;
    let heads = spec.heads;
    let dh = spec.head_dim();
    let dv = tape.value(v).cols();
    if dv % heads != 0 || tape.value(q).cols() != spec.d_k {
        return Err(Error::Config(format!(
            "value width {dv} / d_k {} incompatible with {heads} heads",
            tape.value(q).cols()
        )));
    }
    let dvh = dv / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut captured = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dvh, dvh)?,
            )
        };
        let out = match spec.kind {
            AttentionKind::Va | AttentionKind::Dva => {
                let logits = tape.matmul_t(qh, false, kh, true)?;
                let w = tape.softmax_rows(logits, 1.0 / spec.temperature())?;
                if capture {
                    captured.push(tape.value(w).clone());
                }
                tape.matmul(w, vh)?
            }
            AttentionKind::KernelRbf => {
                let lg = vars
                    .log_gamma
                    .ok_or_else(|| Error::Config("kernel attention needs log_gamma".into()))?;
                let logits = tape.neg_sq_dist(qh, kh, lg)?;
                let w = tape.softmax_rows(logits, 1.0)?;
                if capture {
                    captured.push(tape.value(w).clone());
                }
                tape.matmul(w, vh)?
            }
            AttentionKind::LinearVa | AttentionKind::LinearDva => {
                let fq = tape.elu_plus_one(qh);
                let fk = tape.elu_plus_one(kh);
                let kv = tape.matmul_t(fk, true, vh, false)?;
                let num = tape.matmul(fq, kv)?;
                let ks = tape.col_sum(fk);
                let den = tape.matmul_t(fq, false, ks, true)?;
                if capture {
                    captured.push(linear_weights(tape.value(fq), tape.value(fk))?);
                }
                tape.div_rows(num, den)?
            }
        };
        outs.push(out);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, captured))
}

/// Row-normalized `φ(Q) φ(K)ᵀ`: the implicit weights of linear attention.
fn linear_weights(fq: &Tensor, fk: &Tensor) -> Result<Tensor> {
    let mut w = crate::numerics::matmul_t(fq, false, fk, true)?;
    let n = w.cols();
    for row in w.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s.abs() < 1e-12 {
            return Err(Error::Numeric("linear attention normalizer below 1e-12".into()));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(w)
}

/// Output of an eager attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `M × d_v`.
    pub h: Tensor,
    /// Per-head `M × N` weights.
    pub weights: Vec<Tensor>,
}

impl AttentionOutput {
    /// Head-averaged weights.
    pub fn mean_weights(&self) -> Tensor {
        let mut out = self.weights[0].clone();
        for w in &self.weights[1..] {
            for (o, v) in out.data_mut().iter_mut().zip(w.data()) {
                *o += v;
            }
        }
        let h = self.weights.len() as f64;
        out.map(|v| v / h)
    }
}

/// Evaluates one attention rule outside of training.
pub fn eager_attend(
    spec: &AttentionSpec,
    params: &AttentionParams,
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
) -> Result<AttentionOutput> {
    spec.validate()?;
    if keys.rows() == 0 || keys.is_empty() {
        return Err(Error::Contract("attention over an empty context".into()));
    }
    let mut tape = Tape::new();
    let w_q = tape.constant(params.w_q.clone());
    let w_k = if params.w_k.is_some() {
        tape.constant(params.w_k().clone())
    } else {
        w_q
    };
    let w_v = tape.constant(params.w_v.clone());
    let log_gamma = Some(tape.constant(Tensor::scalar(params.log_gamma)));
    let vars = AttentionVars {
        w_q,
        w_k,
        w_v,
        log_gamma,
    };
    let (q, k, v) = (
        tape.constant(queries.clone()),
        tape.constant(keys.clone()),
        tape.constant(values.clone()),
    );
    let (h, weights) = attend(&mut tape, spec, &vars, q, k, v, true)?;
    Ok(AttentionOutput {
        h: tape.value(h).clone(),
        weights,
    })
}

fn with_kind(spec: &AttentionSpec, kind: AttentionKind) -> AttentionSpec {
    AttentionSpec { kind, ..spec.clone() }
}

/// Decoupled-value attention: `softmax(Q Kᵀ/τ) V` with `Q, K` from input
/// embeddings and `V` from target embeddings.
pub fn dva_forward(
    ctx_x_emb: &Tensor,
    ctx_y_emb: &Tensor,
    query_x_emb: &Tensor,
    spec: &AttentionSpec,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    eager_attend(&with_kind(spec, AttentionKind::Dva), params, query_x_emb, ctx_x_emb, ctx_y_emb)
}

/// Vanilla attention over joint embeddings.
pub fn va_forward(
    ctx_joint_emb: &Tensor,
    query_emb: &Tensor,
    spec: &AttentionSpec,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    eager_attend(&with_kind(spec, AttentionKind::Va), params, query_emb, ctx_joint_emb, ctx_joint_emb)
}

/// RBF-kernel attention: weights `∝ exp(-γ ||q - k||²)`, values as in DVA.
pub fn kernel_attention_forward(
    ctx_x_emb: &Tensor,
    ctx_y_emb: &Tensor,
    query_x_emb: &Tensor,
    spec: &AttentionSpec,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    eager_attend(
        &with_kind(spec, AttentionKind::KernelRbf),
        params,
        query_x_emb,
        ctx_x_emb,
        ctx_y_emb,
    )
}

/// Linear attention with the `elu + 1` feature map. For [`AttentionKind::LinearVa`]
/// pass the joint embedding as both `ctx_keys` and `ctx_values`.
pub fn linear_attention_forward(
    kind: AttentionKind,
    ctx_keys: &Tensor,
    ctx_values: &Tensor,
    queries: &Tensor,
    spec: &AttentionSpec,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    if !kind.is_linear() {
        return Err(Error::Config(format!("{kind} is not a linear attention rule")));
    }
    eager_attend(&with_kind(spec, kind), params, queries, ctx_keys, ctx_values)
}

/// Quadratic-form evaluation of linear attention, `normalize(φ(Q)φ(K)ᵀ) V`,
/// single head.
pub fn linear_attention_quadratic(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let w = linear_weights(&q.map(elu_plus_one), &k.map(elu_plus_one))?;
    crate::numerics::matmul(&w, v)
}

fn quad_form(a: &Tensor, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += x[i] * a.get(i, j) * y[j];
        }
    }
    s
}

/// Logits through the Mahalanobis decomposition under linear encoders.
///
/// With `φ_x(x) = x W_x`, `A = (W_x W_q)(W_x W_k)ᵀ` must be symmetric; the
/// result is `(||x*||²_A + ||x_i||²_A - ||x* - x_i||²_A) / (2τ)` for each context
/// row `x_i`.
pub fn mahalanobis_logit_oracle(
    w_x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    x_star: &[f64],
    x_ctx: &Tensor,
    tau: f64,
) -> Result<Vec<f64>> {
    let pq = crate::numerics::matmul(w_x, w_q)?;
    let pk = crate::numerics::matmul(w_x, w_k)?;
    let a = crate::numerics::matmul_t(&pq, false, &pk, true)?;
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if a.max_abs_diff(&a.transpose()) > 1e-12 * scale {
        return Err(Error::Contract("metric A is not symmetric".into()));
    }
    if x_star.len() != x_ctx.cols() || x_star.len() != a.rows() {
        return Err(Error::Dimension {
            op: "mahalanobis_logit_oracle",
            lhs: vec![x_star.len()],
            rhs: x_ctx.shape().to_vec(),
        });
    }
    let ns = quad_form(&a, x_star, x_star);
    Ok((0..x_ctx.rows())
        .map(|i| {
            let xi = x_ctx.row(i);
            let diff: Vec<f64> = x_star.iter().zip(xi).map(|(s, c)| s - c).collect();
            (ns + quad_form(&a, xi, xi) - quad_form(&a, &diff, &diff)) / (2.0 * tau)
        })
        .collect())
}

/// Dot-product logits `<x* W_x W_q, x_i W_x W_k> / τ`.
pub fn dot_product_logits(
    w_x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    x_star: &[f64],
    x_ctx: &Tensor,
    tau: f64,
) -> Result<Vec<f64>> {
    let xs = Tensor::from_vec(1, x_star.len(), x_star.to_vec());
    let q = crate::numerics::matmul(&crate::numerics::matmul(&xs, w_x)?, w_q)?;
    let k = crate::numerics::matmul(&crate::numerics::matmul(x_ctx, w_x)?, w_k)?;
    let l = crate::numerics::matmul_t(&q, false, &k, true)?;
    Ok(l.data().iter().map(|v| v / tau).collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Attention mass each query puts on context points farther than `epsilon`.
pub fn far_mass(weights: &Tensor, x_ctx: &Tensor, x_query: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract("epsilon must be positive".into()));
    }
    if weights.rows() != x_query.rows() || weights.cols() != x_ctx.rows() {
        return Err(Error::Dimension {
            op: "far_mass",
            lhs: weights.shape().to_vec(),
            rhs: vec![x_query.rows(), x_ctx.rows()],
        });
    }
    Ok((0..x_query.rows())
        .map(|q| {
            (0..x_ctx.rows())
                .filter(|&i| euclid(x_ctx.row(i), x_query.row(q)) > epsilon)
                .map(|i| weights.get(q, i))
                .sum()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityPoint {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub context: usize,
    pub distance: f64,
    pub weight: f64,
}

/// Distance/weight pairs for every query/context pair of one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalityProfile {
    pub points: Vec<LocalityPoint>,
}

impl LocalityProfile {
    pub fn from_weights(
        layer: usize,
        head_weights: &[Tensor],
        x_ctx: &Tensor,
        x_query: &Tensor,
    ) -> Result<Self> {
        let mut points = Vec::new();
        for (head, w) in head_weights.iter().enumerate() {
            if w.rows() != x_query.rows() || w.cols() != x_ctx.rows() {
                return Err(Error::Dimension {
                    op: "locality_profile",
                    lhs: w.shape().to_vec(),
                    rhs: vec![x_query.rows(), x_ctx.rows()],
                });
            }
            for q in 0..w.rows() {
                for c in 0..w.cols() {
                    points.push(LocalityPoint {
                        layer,
                        head,
                        query: q,
                        context: c,
                        distance: euclid(x_query.row(q), x_ctx.row(c)),
                        weight: w.get(q, c),
                    });
                }
            }
        }
        Ok(Self { points })
    }

    pub fn heads(&self) -> usize {
        self.points.iter().map(|p| p.head + 1).max().unwrap_or(0)
    }

    /// `(distance, head-averaged weight)` per query/context pair.
    pub fn averaged(&self) -> Vec<(f64, f64)> {
        let h = self.heads();
        if h == 0 {
            return Vec::new();
        }
        let per_head = self.points.len() / h;
        (0..per_head)
            .map(|i| {
                let w: f64 = (0..h).map(|k| self.points[k * per_head + i].weight).sum();
                (self.points[i].distance, w / h as f64)
            })
            .collect()
    }

    /// Spearman correlation between distance and (log) head-averaged weight.
    /// Log is monotone, so ranks of weights are used directly.
    pub fn spearman_distance_log_weight(&self) -> f64 {
        let (d, w): (Vec<f64>, Vec<f64>) = self.averaged().into_iter().unzip();
        spearman(&d, &w)
    }

    /// CSV with header `layer,head,distance,weight`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,distance,weight\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.layer, p.head, p.distance, p.weight);
        }
        s
    }
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman: length mismatch");
    if a.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(a), &ranks(b))
}
