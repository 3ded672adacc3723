//! Non-causal finite-horizon throughput maximization and training-data generation.
//!
//! With the harvest matrix `E` and gain matrix `G` known for all `N` slots the
//! problem
//!
//! ```text
//! max  sum_n ln(1 + sum_k p[n][k] g[n][k])
//! s.t. 0 <= p[n][k] <= min(B[n][k], P_max),  B evolving by the battery step
//! ```
//!
//! is convex once battery overflow is written with explicit waste variables
//! `w[n][k] >= 0`. The feasible set then factorizes into one polytope per node,
//! and we run projected-gradient ascent with an Armijo search along the
//! projected direction. Projection onto each node polytope is done with
//! Hildreth's method (Dykstra's algorithm specialized to halfspaces).

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{battery_step, Environment, NodeStreams, SystemConfig};
use crate::error::{Error, Result};

/// Harvests, gains and initial batteries of one offline problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineInstance {
    /// `N x K` harvested energy, row = slot.
    pub harvest: Vec<Vec<f64>>,
    /// `N x K` power gains, row = slot.
    pub gains: Vec<Vec<f64>>,
    pub initial_battery: Vec<f64>,
    pub battery_capacity: f64,
    pub max_transmit: f64,
}

impl OfflineInstance {
    pub fn new(
        harvest: Vec<Vec<f64>>,
        gains: Vec<Vec<f64>>,
        initial_battery: Vec<f64>,
        system: &SystemConfig,
    ) -> Result<Self> {
        let inst = Self {
            harvest,
            gains,
            initial_battery,
            battery_capacity: system.battery_capacity,
            max_transmit: system.max_transmit,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Draws an `N`-slot instance from the environment; every battery starts at `B_1`.
    pub fn sample(env: &Environment, horizon: usize, streams: &mut NodeStreams) -> Result<Self> {
        let (harvest, gains) = env.sample_trace(horizon, streams);
        let initial = vec![env.system.initial_battery; env.num_nodes()];
        Self::new(harvest, gains, initial, &env.system)
    }

    pub fn horizon(&self) -> usize {
        self.harvest.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.initial_battery.len()
    }

    fn validate(&self) -> Result<()> {
        let (n, k) = (self.horizon(), self.num_nodes());
        if n == 0 || k == 0 {
            return Err(Error::Shape(
                "offline instance needs N >= 1 and K >= 1".into(),
            ));
        }
        if self.gains.len() != n
            || self
                .harvest
                .iter()
                .chain(&self.gains)
                .any(|row| row.len() != k)
        {
            return Err(Error::Shape(format!(
                "harvest and gain matrices must both be {n} x {k}"
            )));
        }
        let all = self
            .harvest
            .iter()
            .chain(&self.gains)
            .flatten()
            .chain(&self.initial_battery);
        if all.clone().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid(
                "instance entries must be finite and non-negative",
            ));
        }
        if !(self.max_transmit > 0.0 && self.max_transmit <= self.battery_capacity) {
            return Err(Error::invalid("require 0 < P_max <= B_max"));
        }
        if self
            .initial_battery
            .iter()
            .any(|b| *b > self.battery_capacity)
        {
            return Err(Error::invalid("initial battery above capacity"));
        }
        Ok(())
    }
}

/// `a_p . p + a_w . w <= rhs` over one node's `N` powers and `N` wastes.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub coeff_p: Vec<f64>,
    pub coeff_w: Vec<f64>,
    pub rhs: f64,
}

impl Halfspace {
    fn eval(&self, p: &[f64], w: &[f64]) -> f64 {
        dot(&self.coeff_p, p) + dot(&self.coeff_w, w)
    }
}

/// Linear constraints of one node: causality, capacity and the box
/// `0 <= p <= P_max`, `w >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRegion {
    pub halfspaces: Vec<Halfspace>,
    pub max_transmit: f64,
}

/// Per-node polytopes of the offline problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleRegion {
    pub nodes: Vec<NodeRegion>,
}

/// Builds, for every node `k` and slot `t`:
///
/// * causality `p_t <= B_t`: `sum_{j<=t} p_j + sum_{j<t} w_j <= B_1 + sum_{j<t} e_j`
/// * capacity `B_{t+1} <= B_max`: `-sum_{j<=t}(p_j + w_j) <= B_max - B_1 - sum_{j<=t} e_j`
/// * final non-negativity `B_{N+1} >= 0`.
pub fn build_feasible_region(inst: &OfflineInstance) -> Result<FeasibleRegion> {
    inst.validate()?;
    let n = inst.horizon();
    let nodes = (0..inst.num_nodes())
        .map(|k| {
            let mut halfspaces = Vec::with_capacity(2 * n + 1);
            let mut harvested_before = 0.0;
            for t in 0..n {
                let mut coeff_p = vec![0.0; n];
                let mut coeff_w = vec![0.0; n];
                coeff_p[..=t].iter_mut().for_each(|c| *c = 1.0);
                coeff_w[..t].iter_mut().for_each(|c| *c = 1.0);
                halfspaces.push(Halfspace {
                    coeff_p,
                    coeff_w,
                    rhs: inst.initial_battery[k] + harvested_before,
                });
                harvested_before += inst.harvest[t][k];
                let mut coeff_p = vec![0.0; n];
                let mut coeff_w = vec![0.0; n];
                coeff_p[..=t].iter_mut().for_each(|c| *c = -1.0);
                coeff_w[..=t].iter_mut().for_each(|c| *c = -1.0);
                halfspaces.push(Halfspace {
                    coeff_p,
                    coeff_w,
                    rhs: inst.battery_capacity - inst.initial_battery[k] - harvested_before,
                });
            }
            halfspaces.push(Halfspace {
                coeff_p: vec![1.0; n],
                coeff_w: vec![1.0; n],
                rhs: inst.initial_battery[k] + harvested_before,
            });
            NodeRegion {
                halfspaces,
                max_transmit: inst.max_transmit,
            }
        })
        .collect();
    Ok(FeasibleRegion { nodes })
}

impl NodeRegion {
    /// Largest constraint violation at `(p, w)`, box included.
    pub fn max_violation(&self, p: &[f64], w: &[f64]) -> f64 {
        let box_violation = p
            .iter()
            .map(|&x| (-x).max(x - self.max_transmit))
            .chain(w.iter().map(|&x| -x))
            .fold(0.0f64, f64::max);
        self.halfspaces
            .iter()
            .map(|h| h.eval(p, w) - h.rhs)
            .fold(box_violation, f64::max)
    }

    /// Euclidean projection of `(p, w)` onto the node polytope, in place.
    ///
    /// Hildreth's dual coordinate ascent: one multiplier per halfspace and per
    /// box face, swept cyclically until no multiplier moves by more than `tol`.
    /// `duals` carries the multipliers between calls as a warm start.
    fn project(
        &self,
        p: &mut [f64],
        w: &mut [f64],
        duals: &mut Duals,
        tol: f64,
        max_sweeps: usize,
    ) -> usize {
        let n = p.len();
        if duals.halfspace.len() != self.halfspaces.len() {
            *duals = Duals::for_region(self, n);
        }
        for i in 0..n {
            p[i] += duals.lo_p[i] - duals.hi_p[i];
            w[i] += duals.lo_w[i];
        }
        for (h, &l) in self.halfspaces.iter().zip(&duals.halfspace) {
            if l != 0.0 {
                axpy(-l, &h.coeff_p, p);
                axpy(-l, &h.coeff_w, w);
            }
        }
        for sweep in 1..=max_sweeps {
            let mut moved: f64 = 0.0;
            for i in 0..n {
                // p_i >= 0
                let a: f64 = (-duals.lo_p[i]).max(-p[i]);
                duals.lo_p[i] += a;
                p[i] += a;
                // p_i <= P_max
                let b: f64 = (-duals.hi_p[i]).max(p[i] - self.max_transmit);
                duals.hi_p[i] += b;
                p[i] -= b;
                // w_i >= 0
                let c: f64 = (-duals.lo_w[i]).max(-w[i]);
                duals.lo_w[i] += c;
                w[i] += c;
                moved = moved.max(a.abs()).max(b.abs()).max(c.abs());
            }
            for (j, c) in duals.prefix.iter().enumerate() {
                let lhs =
                    c.sign * (p[..c.p_len].iter().sum::<f64>() + w[..c.w_len].iter().sum::<f64>());
                let r = (lhs - self.halfspaces[j].rhs) / c.norm_sq;
                let d: f64 = (-duals.halfspace[j]).max(r);
                if d != 0.0 {
                    duals.halfspace[j] += d;
                    let shift = d * c.sign;
                    p[..c.p_len].iter_mut().for_each(|x| *x -= shift);
                    w[..c.w_len].iter_mut().for_each(|x| *x -= shift);
                    moved = moved.max(d.abs());
                }
            }
            if moved < tol {
                return sweep;
            }
        }
        max_sweeps
    }
}

/// Every constraint row is `sign` times a prefix sum of `p` plus a prefix sum
/// of `w`; this form lets the sweeps skip the zero coefficients.
#[derive(Debug, Clone, Copy)]
struct PrefixForm {
    sign: f64,
    p_len: usize,
    w_len: usize,
    norm_sq: f64,
}

impl PrefixForm {
    fn of(h: &Halfspace) -> Self {
        let p_len = h.coeff_p.iter().take_while(|c| **c != 0.0).count();
        let w_len = h.coeff_w.iter().take_while(|c| **c != 0.0).count();
        let sign = if h.coeff_p.first().copied().unwrap_or(1.0) < 0.0 {
            -1.0
        } else {
            1.0
        };
        debug_assert!(h.coeff_p[..p_len]
            .iter()
            .chain(&h.coeff_w[..w_len])
            .all(|c| *c == sign));
        debug_assert!(h.coeff_p[p_len..]
            .iter()
            .chain(&h.coeff_w[w_len..])
            .all(|c| *c == 0.0));
        Self {
            sign,
            p_len,
            w_len,
            norm_sq: (p_len + w_len) as f64,
        }
    }
}

/// Multipliers of one node's projection, reused across solver iterations.
#[derive(Debug, Clone, Default)]
struct Duals {
    halfspace: Vec<f64>,
    prefix: Vec<PrefixForm>,
    lo_p: Vec<f64>,
    hi_p: Vec<f64>,
    lo_w: Vec<f64>,
}

impl Duals {
    fn zeros(n: usize, m: usize) -> Self {
        Self {
            halfspace: vec![0.0; m],
            prefix: Vec::new(),
            lo_p: vec![0.0; n],
            hi_p: vec![0.0; n],
            lo_w: vec![0.0; n],
        }
    }

    fn for_region(region: &NodeRegion, n: usize) -> Self {
        let mut d = Self::zeros(n, region.halfspaces.len());
        d.prefix = region.halfspaces.iter().map(PrefixForm::of).collect();
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        if *xi != 0.0 {
            *yi += alpha * xi;
        }
    }
}

/// `sum_n ln(1 + sum_k p[n][k] g[n][k])`.
pub fn objective(powers: &[Vec<f64>], gains: &[Vec<f64>]) -> Result<f64> {
    if powers.len() != gains.len() || powers.iter().zip(gains).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape(
            "power and gain matrices differ in shape".into(),
        ));
    }
    Ok(powers
        .iter()
        .zip(gains)
        .map(|(p, g)| dot(p, g).ln_1p())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Stop when the relative objective improvement of an iteration drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Sufficient-increase constant of the Armijo search.
    pub armijo: f64,
    pub projection_tol: f64,
    pub projection_max_sweeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 10_000,
            armijo: 1e-4,
            projection_tol: 1e-9,
            projection_max_sweeps: 20_000,
        }
    }
}

/// Optimal schedule of an offline instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSolution {
    /// `N x K` transmit energies.
    pub powers: Vec<Vec<f64>>,
    /// `N x K` overflow waste implied by replaying the battery dynamics.
    pub waste: Vec<Vec<f64>>,
    /// Objective divided by `N`, in nats per slot.
    pub rate_per_slot: f64,
    pub iterations: usize,
    /// Norm of the last projected-gradient step (zero at a stationary point).
    pub residual: f64,
    pub converged: bool,
    /// Objective after every accepted iterate, starting point first.
    pub history: Vec<f64>,
}

/// Projected-gradient ascent on the offline problem.
pub fn solve_offline(inst: &OfflineInstance, settings: &SolverSettings) -> Result<OfflineSolution> {
    let region = build_feasible_region(inst)?;
    let (n, k) = (inst.horizon(), inst.num_nodes());

    // Start from "spend half of what is available", replayed to be feasible.
    let mut p = vec![vec![0.0; n]; k];
    let mut w = vec![vec![0.0; n]; k];
    for node in 0..k {
        let mut b = inst.initial_battery[node];
        for t in 0..n {
            let spend = 0.5 * b.min(inst.max_transmit);
            p[node][t] = spend;
            let raw = b + inst.harvest[t][node] - spend;
            w[node][t] = (raw - inst.battery_capacity).max(0.0);
            b = battery_step(b, inst.harvest[t][node], spend, inst.battery_capacity);
        }
    }

    let eval = |p: &[Vec<f64>]| -> (f64, Vec<f64>) {
        // Returns the objective and per-slot 1 / (1 + snr).
        let mut total = 0.0;
        let inv = (0..n)
            .map(|t| {
                let snr: f64 = (0..k).map(|node| p[node][t] * inst.gains[t][node]).sum();
                total += snr.ln_1p();
                1.0 / (1.0 + snr)
            })
            .collect();
        (total, inv)
    };
    let gradient = |inv: &[f64]| -> Vec<Vec<f64>> {
        (0..k)
            .map(|node| (0..n).map(|t| inst.gains[t][node] * inv[t]).collect())
            .collect()
    };

    let (mut f, inv) = eval(&p);
    let mut grad = gradient(&inv);
    let mut step = 1.0;
    let mut duals: Vec<Duals> = region
        .nodes
        .iter()
        .map(|r| Duals::for_region(r, n))
        .collect();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut history = vec![f];

    while iterations < settings.max_iters {
        iterations += 1;
        // Projected point and feasible direction.
        let mut dir_p = p.clone();
        let mut dir_w = w.clone();
        for node in 0..k {
            for t in 0..n {
                dir_p[node][t] += step * grad[node][t];
            }
            region.nodes[node].project(
                &mut dir_p[node],
                &mut dir_w[node],
                &mut duals[node],
                settings.projection_tol,
                settings.projection_max_sweeps,
            );
            for t in 0..n {
                dir_p[node][t] -= p[node][t];
                dir_w[node][t] -= w[node][t];
            }
        }
        let slope: f64 = (0..k).map(|node| dot(&grad[node], &dir_p[node])).sum();
        residual = dir_p
            .iter()
            .chain(&dir_w)
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !(slope > 0.0) {
            converged = true;
            break;
        }

        let mut t_step = 1.0;
        let (candidate_p, candidate_w, f_new, inv_new) = loop {
            let cp: Vec<Vec<f64>> = p
                .iter()
                .zip(&dir_p)
                .map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + t_step * y).collect())
                .collect();
            let (fc, ic) = eval(&cp);
            if fc >= f + settings.armijo * t_step * slope || t_step < 1e-12 {
                let cw: Vec<Vec<f64>> = w
                    .iter()
                    .zip(&dir_w)
                    .map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + t_step * y).collect())
                    .collect();
                break (cp, cw, fc, ic);
            }
            t_step *= 0.5;
        };

        let improvement = f_new - f;
        let grad_new = gradient(&inv_new);

        // Barzilai-Borwein step for the next gradient move.
        let mut ss = 0.0;
        let mut sy = 0.0;
        for node in 0..k {
            for t in 0..n {
                let s = candidate_p[node][t] - p[node][t];
                let y = grad_new[node][t] - grad[node][t];
                ss += s * s;
                sy -= s * y;
            }
        }
        step = if sy > 1e-300 {
            (ss / sy).clamp(1e-4, 1e4)
        } else {
            (step * 2.0).min(1e4)
        };

        p = candidate_p;
        w = candidate_w;
        f = f_new;
        history.push(f);
        grad = grad_new;

        if improvement.abs() <= settings.tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    // Replay the battery to obtain an exactly feasible schedule and its waste.
    let mut powers = vec![vec![0.0; k]; n];
    let mut waste = vec![vec![0.0; k]; n];
    for node in 0..k {
        let mut b = inst.initial_battery[node];
        for t in 0..n {
            let spend = p[node][t].clamp(0.0, b.min(inst.max_transmit));
            powers[t][node] = spend;
            waste[t][node] = (b + inst.harvest[t][node] - spend - inst.battery_capacity).max(0.0);
            b = battery_step(b, inst.harvest[t][node], spend, inst.battery_capacity);
        }
    }
    let total = objective(&powers, &inst.gains)?;
    if !converged {
        log::warn!(
            "offline solver hit {} iterations (residual {residual:.3e})",
            settings.max_iters
        );
    }
    Ok(OfflineSolution {
        powers,
        waste,
        rate_per_slot: total / n as f64,
        iterations,
        residual,
        converged,
        history,
    })
}

/// One violated bound found by [`verify_feasibility`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub slot: usize,
    pub node: usize,
    pub power: f64,
    pub bound: f64,
}

/// Slack `min(B, P_max) - p` of every entry and all violations beyond `tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `N x K` slack; negative means infeasible.
    pub slack: Vec<Vec<f64>>,
    /// Batteries `B_1..B_N` replayed under minimal waste, `N x K`.
    pub batteries: Vec<Vec<f64>>,
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Replays the battery dynamics under `powers` (waste is whatever overflows)
/// and checks `0 <= p <= min(B, P_max)` in every slot.
pub fn verify_feasibility(
    powers: &[Vec<f64>],
    inst: &OfflineInstance,
    tol: f64,
) -> FeasibilityReport {
    let (n, k) = (inst.horizon(), inst.num_nodes());
    let mut slack = vec![vec![0.0; k]; n];
    let mut batteries = vec![vec![0.0; k]; n];
    let mut violations = Vec::new();
    for node in 0..k {
        let mut b = inst.initial_battery[node];
        for t in 0..n {
            let p = powers
                .get(t)
                .and_then(|row| row.get(node))
                .copied()
                .unwrap_or(f64::NAN);
            let bound = b.min(inst.max_transmit);
            batteries[t][node] = b;
            slack[t][node] = (bound - p).min(p);
            if !(p >= -tol && p <= bound + tol) {
                violations.push(Violation {
                    slot: t,
                    node,
                    power: p,
                    bound,
                });
            }
            b = battery_step(b, inst.harvest[t][node], p.max(0.0), inst.battery_capacity);
        }
    }
    FeasibilityReport {
        slack,
        batteries,
        violations,
    }
}

/// Supervised pairs `(E_n, B_n, G_n) -> P*_n` harvested from offline solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_nodes: usize,
    pub horizon: usize,
    /// Each input is `[e_1..e_K, B_1..B_K, g_1..g_K]`.
    pub inputs: Vec<Vec<f64>>,
    /// Each target is `[p*_1..p*_K]`.
    pub targets: Vec<Vec<f64>>,
    /// Mean offline rate per slot over the kept instances.
    pub mean_rate: f64,
    pub instances: usize,
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Header line then `e_*,B_*,g_*,p_*` records.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# K={} N={} units=energy[1e-2 J] gain[linear]",
            self.num_nodes, self.horizon
        )?;
        let mut writer = csv::Writer::from_writer(out);
        let k = self.num_nodes;
        let header: Vec<String> = ["e", "B", "g", "p"]
            .iter()
            .flat_map(|prefix| (1..=k).map(move |i| format!("{prefix}{i}")))
            .collect();
        writer.write_record(&header)?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            writer.write_record(x.iter().chain(y).map(|v| v.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        let field = |name: &str| -> Result<usize> {
            first
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix(name).and_then(|v| v.strip_prefix('=')))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("dataset header lacks {name}")))
        };
        let (k, n) = (field("K")?, field("N")?);
        let mut reader = csv::Reader::from_reader(input);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for record in reader.records() {
            let record = record?;
            let values: Vec<f64> = record
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad number {v}: {e}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != 4 * k {
                return Err(Error::Shape(format!(
                    "record has {} fields, expected {}",
                    values.len(),
                    4 * k
                )));
            }
            inputs.push(values[..3 * k].to_vec());
            targets.push(values[3 * k..].to_vec());
        }
        let instances = if n > 0 { inputs.len() / n } else { 0 };
        Ok(Self {
            num_nodes: k,
            horizon: n,
            inputs,
            targets,
            mean_rate: f64::NAN,
            instances,
            dropped: 0,
        })
    }
}

/// Solves `count` sampled instances of horizon `horizon` and flattens each
/// solution into `horizon` supervised records.
pub fn generate_dataset(
    count: usize,
    horizon: usize,
    env: &Environment,
    settings: &SolverSettings,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("dataset needs at least one instance"));
    }
    let k = env.num_nodes();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(count * horizon);
    let mut targets = Vec::with_capacity(count * horizon);
    let mut rate_sum = 0.0;
    let mut kept = 0;
    let mut dropped = 0;
    for i in 0..count {
        let mut streams = NodeStreams::new(seeds.gen(), k);
        let inst = OfflineInstance::sample(env, horizon, &mut streams)?;
        let sol = solve_offline(&inst, settings)?;
        if !sol.converged {
            log::warn!("dropping offline instance {i}: solver did not converge");
            dropped += 1;
            continue;
        }
        let report = verify_feasibility(&sol.powers, &inst, 1e-9);
        for t in 0..horizon {
            let mut x = Vec::with_capacity(3 * k);
            x.extend_from_slice(&inst.harvest[t]);
            x.extend_from_slice(&report.batteries[t]);
            x.extend_from_slice(&inst.gains[t]);
            inputs.push(x);
            targets.push(sol.powers[t].clone());
        }
        rate_sum += sol.rate_per_slot;
        kept += 1;
    }
    Ok(Dataset {
        num_nodes: k,
        horizon,
        inputs,
        targets,
        mean_rate: if kept > 0 {
            rate_sum / kept as f64
        } else {
            f64::NAN
        },
        instances: kept,
        dropped,
    })
}

/// Mean offline rate per slot over `count` sampled instances.
pub fn offline_rate(
    count: usize,
    horizon: usize,
    env: &Environment,
    settings: &SolverSettings,
    seed: u64,
) -> Result<f64> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..count {
        let mut streams = NodeStreams::new(seeds.gen(), env.num_nodes());
        let inst = OfflineInstance::sample(env, horizon, &mut streams)?;
        total += solve_offline(&inst, settings)?.rate_per_slot;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChannelModel, HarvestModel};

    fn instance(
        e: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
        b1: Vec<f64>,
        b_max: f64,
        p_max: f64,
    ) -> OfflineInstance {
        OfflineInstance {
            harvest: e,
            gains: g,
            initial_battery: b1,
            battery_capacity: b_max,
            max_transmit: p_max,
        }
    }

    #[test]
    fn single_slot_region_bounds_power_by_battery() {
        let inst = instance(vec![vec![3.0]], vec![vec![1.0]], vec![2.0], 20.0, 15.0);
        let region = build_feasible_region(&inst).unwrap();
        let node = &region.nodes[0];
        assert_eq!(node.halfspaces[0].coeff_p, vec![1.0]);
        assert_eq!(node.halfspaces[0].rhs, 2.0);
        assert!(node.max_violation(&[2.0], &[0.0]) <= 0.0);
        assert!(node.max_violation(&[2.5], &[0.0]) > 0.0);
    }

    #[test]
    fn two_slot_region_telescopes() {
        let inst = instance(
            vec![vec![0.0], vec![0.0]],
            vec![vec![1.0], vec![1.0]],
            vec![2.0],
            20.0,
            15.0,
        );
        let region = build_feasible_region(&inst).unwrap();
        let node = &region.nodes[0];
        assert_eq!(node.halfspaces[2].coeff_p, vec![1.0, 1.0]);
        assert_eq!(node.halfspaces[2].rhs, 2.0);
        assert!(node.max_violation(&[1.0, 1.0], &[0.0, 0.0]) <= 0.0);
        assert!(node.max_violation(&[1.5, 1.0], &[0.0, 0.0]) > 0.0);
    }

    #[test]
    fn zero_schedule_is_feasible_with_waste() {
        let inst = instance(
            vec![vec![15.0]; 3],
            vec![vec![1.0]; 3],
            vec![10.0],
            20.0,
            15.0,
        );
        let report = verify_feasibility(&vec![vec![0.0]; 3], &inst, 1e-9);
        assert!(report.is_feasible());
        let region = build_feasible_region(&inst).unwrap();
        // Waste replay: 10 + 15 -> 20 (5 wasted), then 15 wasted twice.
        assert!(region.nodes[0].max_violation(&[0.0; 3], &[5.0, 15.0, 15.0]) <= 1e-12);
        assert!(region.nodes[0].max_violation(&[0.0; 3], &[0.0; 3]) > 0.0);
    }

    #[test]
    fn symmetric_two_slot_case() {
        let inst = instance(
            vec![vec![0.0], vec![0.0]],
            vec![vec![1.0], vec![1.0]],
            vec![2.0],
            20.0,
            15.0,
        );
        let sol = solve_offline(&inst, &SolverSettings::default()).unwrap();
        assert!((sol.powers[0][0] - 1.0).abs() < 1e-4);
        assert!((sol.powers[1][0] - 1.0).abs() < 1e-4);
        assert!((sol.rate_per_slot - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn kkt_case_two_to_one_gains() {
        // 2 / (1 + 2 p1) = 1 / (1 + p2), p1 + p2 = 2  =>  p1 = 1.25, p2 = 0.75.
        let inst = instance(
            vec![vec![0.0], vec![0.0]],
            vec![vec![2.0], vec![1.0]],
            vec![2.0],
            20.0,
            15.0,
        );
        let sol = solve_offline(&inst, &SolverSettings::default()).unwrap();
        assert!((sol.powers[0][0] - 1.25).abs() < 1e-3, "{:?}", sol.powers);
        assert!((sol.powers[1][0] - 0.75).abs() < 1e-3);
        assert!(sol.converged);
    }

    #[test]
    fn objective_cases() {
        assert_eq!(
            objective(&[vec![0.0, 0.0]], &[vec![1.0, 3.0]]).unwrap(),
            0.0
        );
        assert!((objective(&[vec![1.0]], &[vec![1.0]]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = vec![vec![1.0, 2.0], vec![0.5, 0.0]];
        let g = vec![vec![2.0, 1.5], vec![1.0, 1.0]];
        let rows: f64 = p
            .iter()
            .zip(&g)
            .map(|(p, g)| crate::env::slot_sum_rate(p, g).unwrap())
            .sum();
        assert!((objective(&p, &g).unwrap() - rows).abs() < 1e-15);
        assert!(objective(&p, &g[..1]).is_err());
    }

    #[test]
    fn overspending_first_slot_is_flagged() {
        let inst = instance(
            vec![vec![1.0], vec![1.0]],
            vec![vec![1.0]; 2],
            vec![2.0],
            20.0,
            15.0,
        );
        let report = verify_feasibility(&[vec![2.5], vec![0.0]], &inst, 1e-9);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].slot, 0);
        assert!(verify_feasibility(&[vec![0.0], vec![0.0]], &inst, 1e-9).is_feasible());
    }

    #[test]
    fn capacity_forces_spending_or_waste() {
        // Huge harvests with a tiny battery: the optimum spends P_max every slot it can.
        let inst = instance(vec![vec![10.0]; 4], vec![vec![1.0]; 4], vec![2.0], 2.0, 2.0);
        let sol = solve_offline(&inst, &SolverSettings::default()).unwrap();
        for t in 0..4 {
            assert!((sol.powers[t][0] - 2.0).abs() < 1e-6, "{:?}", sol.powers);
        }
        assert!(sol.waste.iter().all(|w| w[0] >= 0.0));
    }

    #[test]
    fn dataset_shapes_and_csv_round_trip() {
        let env = Environment::new(
            SystemConfig::reference(2),
            HarvestModel::new(5.0, 3.5),
            ChannelModel::default(),
        )
        .unwrap();
        let data = generate_dataset(3, 5, &env, &SolverSettings::default(), 42).unwrap();
        assert_eq!(data.len(), 15);
        assert_eq!(data.inputs[0].len(), 6);
        assert_eq!(data.targets[0].len(), 2);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.inputs, data.inputs);
        assert_eq!(back.targets, data.targets);
        assert_eq!((back.num_nodes, back.horizon), (2, 5));
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let inst = instance(
            vec![vec![1.0, 1.0]],
            vec![vec![1.0]],
            vec![1.0, 1.0],
            20.0,
            15.0,
        );
        assert!(build_feasible_region(&inst).is_err());
    }
}
