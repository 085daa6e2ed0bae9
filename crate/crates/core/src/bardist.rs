//! Bucketized ("bar") predictive distributions.
//!
//! The real line is cut into `B` buckets with fixed edges. A model predicts
//! one logit per bucket; within a bucket the density is uniform. Targets
//! outside the support are scored against the nearest edge bucket.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Minimum separation enforced between coinciding quantile edges.
pub const EDGE_PERTURBATION: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct BucketSpec {
    edges: Vec<f64>,
}

impl BucketSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("bucket spec needs at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("bucket edges must be finite and strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    /// Equal-width buckets on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("need at least one bucket".into()));
        }
        let w = (hi - lo) / buckets as f64;
        Self::new((0..=buckets).map(|i| lo + w * i as f64).collect())
    }

    /// Edges at the empirical `i/B` quantiles of `samples`.
    pub fn from_quantiles(samples: &[f64], buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("need at least one bucket".into()));
        }
        if samples.len() < 10 * buckets {
            return Err(Error::Config(format!(
                "{} samples are too few for {} buckets (need {})",
                samples.len(),
                buckets,
                10 * buckets
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite prior sample".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let mut edges: Vec<f64> = (0..=buckets)
            .map(|i| {
                let pos = i as f64 / buckets as f64 * (m - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(m - 1);
                let t = pos - lo as f64;
                sorted[lo] * (1.0 - t) + sorted[hi] * t
            })
            .collect();
        for i in 1..edges.len() {
            if edges[i] <= edges[i - 1] {
                edges[i] = edges[i - 1] + EDGE_PERTURBATION.max(edges[i - 1].abs() * f64::EPSILON * 4.0);
            }
        }
        Self::new(edges)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn num_buckets(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn lower(&self) -> f64 {
        self.edges[0]
    }

    pub fn upper(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn width(&self, b: usize) -> f64 {
        self.edges[b + 1] - self.edges[b]
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn log_widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| (w[1] - w[0]).ln()).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Bucket containing `y`, clamped to the edge buckets outside the support.
    /// Interior edges belong to the bucket on their right.
    pub fn bucket_of(&self, y: f64) -> usize {
        let b = self.num_buckets();
        if y.is_nan() || y < self.edges[1] {
            return 0;
        }
        if y >= self.edges[b - 1] {
            return b - 1;
        }
        self.edges.partition_point(|&e| e <= y) - 1
    }

    /// Text form: `buckets <B>` then one edge per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("buckets {}\n", self.num_buckets());
        for e in &self.edges {
            let _ = writeln!(s, "{e:?}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing bucket header".into(),
        })?;
        let b: usize = header
            .strip_prefix("buckets ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or(Error::Parse {
                line: 1,
                msg: format!("bad bucket header '{header}'"),
            })?;
        let edges: Vec<f64> = lines
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if edges.len() != b + 1 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header says {b} buckets but {} edges follow", edges.len()),
            });
        }
        Self::new(edges)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Logits over the buckets of a [`BucketSpec`].
#[derive(Clone, Debug)]
pub struct BarDistribution<'a> {
    logits: Vec<f64>,
    spec: &'a BucketSpec,
}

impl<'a> BarDistribution<'a> {
    pub fn new(logits: Vec<f64>, spec: &'a BucketSpec) -> Result<Self> {
        if logits.len() != spec.num_buckets() {
            return Err(Error::Dimension {
                op: "bar_distribution",
                lhs: vec![logits.len()],
                rhs: vec![spec.num_buckets()],
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(Self { logits, spec })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn spec(&self) -> &BucketSpec {
        self.spec
    }

    pub fn probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Density `p_b / w_b` of each bucket.
    pub fn densities(&self) -> Vec<f64> {
        self.probs()
            .iter()
            .zip(self.spec.widths())
            .map(|(p, w)| p / w)
            .collect()
    }

    /// `-log(p_b / w_b)` for the (clamped) bucket of `y`.
    pub fn nll(&self, y: f64) -> f64 {
        let b = self.spec.bucket_of(y);
        log_sum_exp(&self.logits) - self.logits[b] + self.spec.width(b).ln()
    }

    pub fn mean(&self) -> f64 {
        self.probs()
            .iter()
            .zip(self.spec.midpoints())
            .map(|(p, m)| p * m)
            .sum()
    }

    /// Variance under within-bucket-uniform densities.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .probs()
            .iter()
            .zip(self.spec.midpoints().iter().zip(self.spec.widths()))
            .map(|(p, (m, w))| p * (m * m + w * w / 12.0))
            .sum();
        (second - mean * mean).max(0.0)
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// `P(Y <= y)`.
    pub fn cdf(&self, y: f64) -> f64 {
        if y <= self.spec.lower() {
            return 0.0;
        }
        if y >= self.spec.upper() {
            return 1.0;
        }
        let probs = self.probs();
        let b = self.spec.bucket_of(y);
        let below: f64 = probs[..b].iter().sum();
        let frac = (y - self.spec.edges()[b]) / self.spec.width(b);
        (below + probs[b] * frac).clamp(0.0, 1.0)
    }

    /// `P(lo <= Y <= hi)`.
    pub fn interval_probability(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        self.cdf(hi) - self.cdf(lo)
    }

    /// Piecewise-linear inverse CDF.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Contract(format!("quantile level {q} outside (0, 1)")));
        }
        let probs = self.probs();
        let edges = self.spec.edges();
        let mut acc = 0.0;
        for (b, &p) in probs.iter().enumerate() {
            if acc + p >= q && p > 0.0 {
                let frac = ((q - acc) / p).clamp(0.0, 1.0);
                return Ok(edges[b] + frac * self.spec.width(b));
            }
            acc += p;
        }
        Ok(self.spec.upper())
    }
}
