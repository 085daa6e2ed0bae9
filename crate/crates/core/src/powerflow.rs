//! Radial distribution power flow by backward/forward sweep, and load
//! perturbation datasets built on it.
//!
//! Buses are 1-based in network files and 0-based in this API; bus 0 is the
//! slack. Everything is per unit with constant-power loads.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::priors::{zscore_columns, SyntheticDataset};

/// The standard published IEEE 33-bus feeder (12.66 kV, 10 MVA base).
pub const IEEE33: &str = include_str!("../data/ieee33.csv");

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn impedance(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

/// A tree-shaped feeder rooted at bus 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialNetwork {
    slack_v: f64,
    lines: Vec<Line>,
    /// Nominal `(P, Q)` for every bus; entry 0 is the slack and is zero.
    loads: Vec<(f64, f64)>,
    /// Line feeding each bus (`usize::MAX` for the slack).
    feeder: Vec<usize>,
    /// Buses in breadth-first order from the slack.
    order: Vec<usize>,
}

impl RadialNetwork {
    /// Builds and validates a network. `lines[i]` delivers `loads[i]` to its
    /// `to` bus; the slack carries no load.
    pub fn new(slack_v: f64, lines: Vec<Line>, loads: Vec<(f64, f64)>) -> Result<Self> {
        let n = loads.len();
        if !(slack_v.is_finite() && slack_v > 0.0) {
            return Err(Error::Config(format!("slack voltage must be positive, got {slack_v}")));
        }
        if n < 2 {
            return Err(Error::Topology("network needs at least two buses".into()));
        }
        if lines.len() != n - 1 {
            return Err(Error::Topology(format!("{} buses need {} lines, found {}", n, n - 1, lines.len())));
        }
        let mut adj = vec![Vec::new(); n];
        for (i, l) in lines.iter().enumerate() {
            if l.from >= n || l.to >= n || l.from == l.to {
                return Err(Error::Topology(format!("line {} joins invalid buses {}-{}", i + 1, l.from + 1, l.to + 1)));
            }
            if !(l.r >= 0.0 && l.r.is_finite() && l.x.is_finite()) || l.impedance().norm() == 0.0 {
                return Err(Error::Topology(format!("line {} has invalid impedance {}+j{}", i + 1, l.r, l.x)));
            }
            adj[l.from].push(i);
            adj[l.to].push(i);
        }
        let mut feeder = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        let mut order = vec![0];
        seen[0] = true;
        let mut head = 0;
        while head < order.len() {
            let b = order[head];
            head += 1;
            for &li in &adj[b] {
                if li == feeder[b] {
                    continue;
                }
                let l = lines[li];
                let other = if l.from == b { l.to } else { l.from };
                if seen[other] {
                    return Err(Error::Topology(format!("cycle through bus {}", other + 1)));
                }
                seen[other] = true;
                feeder[other] = li;
                order.push(other);
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!("bus {} is not connected to the slack", b + 1)));
        }
        if loads.iter().any(|(p, q)| !p.is_finite() || !q.is_finite()) {
            return Err(Error::Config("loads must be finite".into()));
        }
        let mut loads = loads;
        loads[0] = (0.0, 0.0);
        Ok(Self {
            slack_v,
            lines,
            loads,
            feeder,
            order,
        })
    }

    /// The bundled 33-bus feeder.
    pub fn ieee33() -> Self {
        Self::parse(IEEE33).expect("bundled feeder is valid")
    }

    /// The first `k` buses of the bundled feeder; `ieee33_truncated(12)` is
    /// the default desk-scale feeder.
    pub fn ieee33_truncated(k: usize) -> Result<Self> {
        Self::ieee33().truncate(k)
    }

    pub fn bus_count(&self) -> usize {
        self.loads.len()
    }

    pub fn slack_v(&self) -> f64 {
        self.slack_v
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Input dimension of a flattened scenario, `2(n-1)`.
    pub fn scenario_dim(&self) -> usize {
        2 * (self.bus_count() - 1)
    }

    pub fn nominal(&self) -> LoadScenario {
        LoadScenario {
            p: self.loads[1..].iter().map(|l| l.0).collect(),
            q: self.loads[1..].iter().map(|l| l.1).collect(),
        }
    }

    /// Sub-network on buses `0..k`. Errors if they are not connected.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k < 2 || k > self.bus_count() {
            return Err(Error::Config(format!("cannot truncate {} buses to {k}", self.bus_count())));
        }
        let lines = self.lines.iter().copied().filter(|l| l.from < k && l.to < k).collect();
        Self::new(self.slack_v, lines, self.loads[..k].to_vec())
    }

    /// Parses `slack_v,<v>`, a column header, then
    /// `from,to,r_pu,x_pu,P_pu,Q_pu` rows. The load belongs to `to`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut slack = None;
        let mut header = false;
        let mut rows: Vec<(usize, [f64; 4], usize, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let ln = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let perr = |msg: String| Error::Parse { line: ln, msg };
            if slack.is_none() {
                if fields.len() != 2 || fields[0] != "slack_v" {
                    return Err(perr("expected 'slack_v,<value>' header".into()));
                }
                slack = Some(fields[1].parse::<f64>().map_err(|e| perr(format!("slack_v: {e}")))?);
                continue;
            }
            if !header {
                if fields != ["from", "to", "r_pu", "x_pu", "P_pu", "Q_pu"] {
                    return Err(perr("expected 'from,to,r_pu,x_pu,P_pu,Q_pu' header".into()));
                }
                header = true;
                continue;
            }
            if fields.len() != 6 {
                return Err(perr(format!("expected 6 fields, found {}", fields.len())));
            }
            let bus = |s: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(b) if b >= 1 => Ok(b - 1),
                    _ => Err(perr(format!("invalid bus number '{s}'"))),
                }
            };
            let (from, to) = (bus(fields[0])?, bus(fields[1])?);
            let mut vals = [0.0; 4];
            for (v, s) in vals.iter_mut().zip(&fields[2..]) {
                *v = s.parse::<f64>().map_err(|e| perr(format!("'{s}': {e}")))?;
            }
            if vals[0] < 0.0 {
                return Err(perr(format!("negative resistance {}", vals[0])));
            }
            rows.push((ln, vals, from, to));
        }
        let slack = slack.ok_or_else(|| Error::Parse { line: 0, msg: "empty network file".into() })?;
        let n = rows.iter().map(|r| r.2.max(r.3) + 1).max().unwrap_or(1);
        let mut loads = vec![(0.0, 0.0); n];
        let mut assigned = vec![false; n];
        let mut lines = Vec::with_capacity(rows.len());
        for (ln, v, from, to) in rows {
            if to == 0 || assigned[to] {
                return Err(Error::Topology(format!("line {ln}: bus {} is fed twice", to + 1)));
            }
            assigned[to] = true;
            loads[to] = (v[2], v[3]);
            lines.push(Line { from, to, r: v[0], x: v[1] });
        }
        Self::new(slack, lines, loads)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Inverse of [`RadialNetwork::parse`]; values use round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = format!("slack_v,{:?}\nfrom,to,r_pu,x_pu,P_pu,Q_pu\n", self.slack_v);
        for l in &self.lines {
            let (p, q) = self.loads[l.to];
            let _ = writeln!(s, "{},{},{:?},{:?},{:?},{:?}", l.from + 1, l.to + 1, l.r, l.x, p, q);
        }
        s
    }

    fn check_scenario(&self, s: &LoadScenario) -> Result<()> {
        let m = self.bus_count() - 1;
        if s.p.len() != m || s.q.len() != m {
            return Err(Error::Dimension {
                op: "power flow scenario",
                lhs: vec![m, m],
                rhs: vec![s.p.len(), s.q.len()],
            });
        }
        if !s.p.iter().chain(&s.q).all(|v| v.is_finite()) {
            return Err(Error::Config("scenario loads must be finite".into()));
        }
        Ok(())
    }

    /// Largest `|V_i conj(I_i) - S_i|` over non-slack buses, where the bus
    /// current comes from the line currents implied by the voltages.
    fn mismatch(&self, v: &[Complex64], s: &[Complex64], line_i: &mut [Complex64]) -> f64 {
        for (li, l) in self.lines.iter().enumerate() {
            line_i[li] = (v[l.from] - v[l.to]) / l.impedance();
        }
        let mut net = vec![Complex64::new(0.0, 0.0); v.len()];
        for (li, l) in self.lines.iter().enumerate() {
            net[l.to] += line_i[li];
            net[l.from] -= line_i[li];
        }
        (1..v.len())
            .map(|b| (v[b] * net[b].conj() - s[b]).norm())
            .fold(0.0, f64::max)
    }
}

/// Per-bus loads for the non-slack buses, in bus order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadScenario {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl LoadScenario {
    pub fn zeros(network: &RadialNetwork) -> Self {
        let m = network.bus_count() - 1;
        Self {
            p: vec![0.0; m],
            q: vec![0.0; m],
        }
    }

    /// `[P..., Q...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.p.iter().chain(&self.q).copied().collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            p: self.p.iter().map(|v| v * factor).collect(),
            q: self.q.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PFSolution {
    pub voltages: Vec<Complex64>,
    pub mismatch: f64,
    pub iterations: usize,
    /// Mismatch after each iteration.
    pub trace: Vec<f64>,
}

impl PFSolution {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm()).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.arg()).collect()
    }
}

/// Backward/forward sweep until the power mismatch is below `tol`.
pub fn solve(network: &RadialNetwork, scenario: &LoadScenario, tol: f64, max_iter: usize) -> Result<PFSolution> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Config(format!("need tol > 0 and max_iter > 0, got {tol}, {max_iter}")));
    }
    network.check_scenario(scenario)?;
    let n = network.bus_count();
    let mut s = vec![Complex64::new(0.0, 0.0); n];
    for b in 1..n {
        s[b] = Complex64::new(scenario.p[b - 1], scenario.q[b - 1]);
    }
    let slack = Complex64::new(network.slack_v, 0.0);
    let mut v = vec![slack; n];
    let mut branch = vec![Complex64::new(0.0, 0.0); n];
    let mut line_i = vec![Complex64::new(0.0, 0.0); network.lines.len()];
    let mut trace = Vec::new();
    for iter in 1..=max_iter {
        for b in 0..n {
            branch[b] = (s[b] / v[b]).conj();
        }
        for &b in network.order.iter().skip(1).rev() {
            let l = network.lines[network.feeder[b]];
            let parent = if l.to == b { l.from } else { l.to };
            let j = branch[b];
            branch[parent] += j;
        }
        for &b in network.order.iter().skip(1) {
            let l = network.lines[network.feeder[b]];
            let parent = if l.to == b { l.from } else { l.to };
            v[b] = v[parent] - l.impedance() * branch[b];
        }
        let mm = network.mismatch(&v, &s, &mut line_i);
        trace.push(mm);
        if !mm.is_finite() {
            break;
        }
        if mm < tol {
            return Ok(PFSolution {
                voltages: v,
                mismatch: mm,
                iterations: iter,
                trace,
            });
        }
    }
    Err(Error::Divergence {
        iterations: trace.len(),
        trace,
    })
}

/// Largest injection residual from the dense bus admittance matrix:
/// `max_i |V_i conj((Y V)_i) + S_i|` over non-slack buses.
pub fn ybus_residual(network: &RadialNetwork, scenario: &LoadScenario, voltages: &[Complex64]) -> f64 {
    let n = network.bus_count();
    let zero = Complex64::new(0.0, 0.0);
    let mut y = vec![zero; n * n];
    for l in &network.lines {
        let g = l.impedance().inv();
        y[l.from * n + l.from] += g;
        y[l.to * n + l.to] += g;
        y[l.from * n + l.to] -= g;
        y[l.to * n + l.from] -= g;
    }
    (1..n)
        .map(|i| {
            let inj: Complex64 = (0..n).map(|k| y[i * n + k] * voltages[k]).sum();
            let s = Complex64::new(scenario.p[i - 1], scenario.q[i - 1]);
            (voltages[i] * inj.conj() + s).norm()
        })
        .fold(0.0, f64::max)
}

/// Draws each load uniformly in `nominal · (1 ± delta_pct/100)`.
pub fn perturb_loads(network: &RadialNetwork, delta_pct: f64, rng: &mut SeededRng) -> LoadScenario {
    let nom = network.nominal();
    let d = delta_pct / 100.0;
    let mut f = |v: f64| v * (1.0 + d * rng.uniform_range(-1.0, 1.0));
    LoadScenario {
        p: nom.p.iter().map(|&v| f(v)).collect(),
        q: nom.q.iter().map(|&v| f(v)).collect(),
    }
}

/// Raw `(scenario, |V_target|)` samples before input standardization.
pub fn generate_pf_samples(
    network: &RadialNetwork,
    delta_pct: f64,
    n: usize,
    target_bus: usize,
    seed: u64,
) -> Result<(Vec<LoadScenario>, Vec<f64>)> {
    if !(delta_pct > 0.0 && delta_pct < 100.0) {
        return Err(Error::Config(format!("delta_pct must be in (0, 100), got {delta_pct}")));
    }
    if target_bus == 0 || target_bus >= network.bus_count() {
        return Err(Error::Config(format!(
            "target bus index {target_bus} must be a non-slack bus in 1..{}",
            network.bus_count()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut scenarios = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let sc = perturb_loads(network, delta_pct, &mut rng);
        let sol = solve(network, &sc, DEFAULT_TOL, DEFAULT_MAX_ITER).map_err(|e| Error::Generation {
            seed,
            msg: format!("sample {i}: {e}"),
        })?;
        targets.push(sol.voltages[target_bus].norm());
        scenarios.push(sc);
    }
    Ok((scenarios, targets))
}

/// Dataset with flattened `[P, Q]` inputs, standardized per column, and
/// `|V|` at `target_bus` (0-based) as the target.
pub fn generate_pf_dataset(
    network: &RadialNetwork,
    delta_pct: f64,
    n: usize,
    target_bus: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let (scenarios, y) = generate_pf_samples(network, delta_pct, n, target_bus, seed)?;
    let d = network.scenario_dim();
    let data: Vec<f64> = scenarios.iter().flat_map(LoadScenario::flatten).collect();
    let mut x = Tensor::from_vec(n, d, data);
    if n > 0 {
        zscore_columns(&mut x);
    }
    Ok(SyntheticDataset { x, y, seed })
}

/// Training prior whose datasets are load-perturbation samples of one feeder.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowPrior {
    pub network: RadialNetwork,
    pub delta_pct: f64,
    pub points_per_dataset: usize,
    pub target_bus: usize,
}

impl PowerFlowPrior {
    /// The 12-bus desk feeder, target at its last bus.
    pub fn desk(delta_pct: f64, points_per_dataset: usize) -> Self {
        let network = RadialNetwork::ieee33_truncated(12).expect("bundled feeder truncates");
        Self {
            target_bus: network.bus_count() - 1,
            network,
            delta_pct,
            points_per_dataset,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.network.scenario_dim()
    }

    pub fn sample(&self, seed: u64) -> Result<SyntheticDataset> {
        generate_pf_dataset(&self.network, self.delta_pct, self.points_per_dataset, self.target_bus, seed)
    }
}
