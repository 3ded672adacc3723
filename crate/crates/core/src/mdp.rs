//! Tabular single-node baseline: quantize battery, channel and harvest,
//! solve the discounted MDP by value iteration, and act on the quantized state.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{ChannelModel, Environment, HarvestModel, NodeState};
use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-9;

/// Finite MDP with sparse transition rows; infeasible `(s, a)` pairs have no row.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// `offsets[s * A + a]..offsets[s * A + a + 1]` indexes `next`/`prob`.
    offsets: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
    /// Immediate reward, `None` for an infeasible pair.
    reward: Vec<Option<f64>>,
    pub gamma: f64,
}

impl TabularMdp {
    /// Builds from explicit rows: `rows[s][a]` is `None` for an infeasible pair,
    /// otherwise `(reward, [(next, prob)])`.
    #[allow(clippy::type_complexity)]
    pub fn from_rows(rows: Vec<Vec<Option<(f64, Vec<(usize, f64)>)>>>, gamma: f64) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        let mut builder = MdpBuilder::new(num_states, num_actions, gamma)?;
        for (s, row) in rows.into_iter().enumerate() {
            if row.len() != num_actions {
                return Err(Error::Shape(format!(
                    "state {s} has {} actions, expected {num_actions}",
                    row.len()
                )));
            }
            for entry in row {
                match entry {
                    None => builder.push_infeasible(),
                    Some((r, transitions)) => builder.push(r, transitions)?,
                }
            }
        }
        builder.finish()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn reward(&self, s: usize, a: usize) -> Option<f64> {
        self.reward[s * self.num_actions + a]
    }

    pub fn is_feasible(&self, s: usize, a: usize) -> bool {
        self.reward(s, a).is_some()
    }

    /// `(next, prob)` pairs of the row.
    pub fn transitions(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let i = s * self.num_actions + a;
        let range = self.offsets[i]..self.offsets[i + 1];
        self.next[range.clone()]
            .iter()
            .map(|&n| n as usize)
            .zip(self.prob[range].iter().copied())
    }

    fn expected(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.transitions(s, a).map(|(n, p)| p * values[n]).sum()
    }

    fn q_value(&self, s: usize, a: usize, values: &[f64]) -> Option<f64> {
        self.reward(s, a)
            .map(|r| r + self.gamma * self.expected(s, a, values))
    }

    /// Bellman optimality operator; returns the new values and greedy actions
    /// (lowest index among ties).
    pub fn bellman(&self, values: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let mut out = Vec::with_capacity(self.num_states);
        let mut actions = Vec::with_capacity(self.num_states);
        for s in 0..self.num_states {
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..self.num_actions {
                if let Some(q) = self.q_value(s, a, values) {
                    if q > best.0 {
                        best = (q, a);
                    }
                }
            }
            out.push(best.0);
            actions.push(best.1);
        }
        (out, actions)
    }
}

/// Incremental row-by-row construction in `(s, a)` order.
struct MdpBuilder {
    num_states: usize,
    num_actions: usize,
    offsets: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
    reward: Vec<Option<f64>>,
    gamma: f64,
}

impl MdpBuilder {
    fn new(num_states: usize, num_actions: usize, gamma: f64) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid(
                "an MDP needs at least one state and one action",
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("discount {gamma} outside [0, 1)")));
        }
        if num_states > u32::MAX as usize {
            return Err(Error::invalid("too many states"));
        }
        Ok(Self {
            num_states,
            num_actions,
            offsets: vec![0],
            next: Vec::new(),
            prob: Vec::new(),
            reward: Vec::with_capacity(num_states * num_actions),
            gamma,
        })
    }

    fn push_infeasible(&mut self) {
        self.reward.push(None);
        self.offsets.push(self.next.len());
    }

    fn push(&mut self, reward: f64, transitions: Vec<(usize, f64)>) -> Result<()> {
        let row = self.reward.len();
        if !reward.is_finite() {
            return Err(Error::invalid(format!("row {row}: non-finite reward")));
        }
        let mut mass = 0.0;
        for (n, p) in transitions {
            if n >= self.num_states || !(p >= 0.0) {
                return Err(Error::invalid(format!(
                    "row {row}: bad transition ({n}, {p})"
                )));
            }
            if p > 0.0 {
                self.next.push(n as u32);
                self.prob.push(p);
                mass += p;
            }
        }
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!(
                "row {row}: probability mass {mass} leaks more than {MASS_TOL}"
            )));
        }
        self.reward.push(Some(reward));
        self.offsets.push(self.next.len());
        Ok(())
    }

    fn finish(self) -> Result<TabularMdp> {
        if self.reward.len() != self.num_states * self.num_actions {
            return Err(Error::Shape("incomplete MDP".into()));
        }
        for s in 0..self.num_states {
            if (0..self.num_actions).all(|a| self.reward[s * self.num_actions + a].is_none()) {
                return Err(Error::invalid(format!("state {s} has no feasible action")));
            }
        }
        Ok(TabularMdp {
            num_states: self.num_states,
            num_actions: self.num_actions,
            offsets: self.offsets,
            next: self.next,
            prob: self.prob,
            reward: self.reward,
            gamma: self.gamma,
        })
    }
}

/// Optimal values and a greedy policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub iterations: usize,
    /// `|| T V - V ||_inf` of the returned values.
    pub residual: f64,
}

/// Jacobi value iteration until successive iterates differ by less than `tol` in sup norm.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<ValueTable> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut values = vec![0.0; mdp.num_states()];
    for iteration in 1..=max_iters {
        let (next, _) = mdp.bellman(&values);
        let change = sup_distance(&next, &values);
        values = next;
        if change < tol {
            let (after, policy) = mdp.bellman(&values);
            let residual = sup_distance(&after, &values);
            return Ok(ValueTable {
                values,
                policy,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(Error::NotConverged(format!(
        "value iteration did not reach {tol} in {max_iters} sweeps"
    )))
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Exact `H`-step discounted return of a stationary policy from every state.
pub fn policy_evaluate_bruteforce(
    mdp: &TabularMdp,
    policy: &[usize],
    horizon: usize,
) -> Result<Vec<f64>> {
    if policy.len() != mdp.num_states() {
        return Err(Error::Shape(format!(
            "policy over {} states, MDP has {}",
            policy.len(),
            mdp.num_states()
        )));
    }
    for (s, &a) in policy.iter().enumerate() {
        if a >= mdp.num_actions() || !mdp.is_feasible(s, a) {
            return Err(Error::invalid(format!(
                "policy picks infeasible action {a} in state {s}"
            )));
        }
    }
    let mut values = vec![0.0; mdp.num_states()];
    for _ in 0..horizon {
        values = (0..mdp.num_states())
            .map(|s| mdp.q_value(s, policy[s], &values).expect("checked"))
            .collect();
    }
    Ok(values)
}

/// Equiprobable quantization of a channel law: representative levels and the
/// interior bin edges used to map a gain to its level. Discrete laws are kept as is.
pub fn channel_quantization(
    channel: &ChannelModel,
    levels: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    channel.validate()?;
    match channel {
        ChannelModel::Rayleigh { mean } => {
            if levels == 0 {
                return Err(Error::invalid("need at least one channel level"));
            }
            let quantile = |u: f64| -mean * (1.0 - u).ln();
            let n = levels as f64;
            let reps = (0..levels)
                .map(|j| quantile((j as f64 + 0.5) / n))
                .collect();
            let edges = (1..levels).map(|j| quantile(j as f64 / n)).collect();
            Ok((reps, edges, vec![1.0 / n; levels]))
        }
        ChannelModel::Discrete { levels, weights } => {
            let w = weights.clone().unwrap_or_else(|| vec![1.0; levels.len()]);
            let total: f64 = w.iter().sum();
            let edges = levels.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
            Ok((levels.clone(), edges, w.iter().map(|x| x / total).collect()))
        }
    }
}

/// Harvest levels on the integer-multiple grid of `step`, spanning
/// `mean +- span` standard deviations inside `[0, cap]`; the end levels absorb the tails.
pub fn harvest_quantization(
    harvest: &HarvestModel,
    step: f64,
    span: f64,
    cap: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    harvest.validate()?;
    if !(step > 0.0) {
        return Err(Error::invalid("harvest step must be positive"));
    }
    let sigma = harvest.std_dev();
    // Level `j` stands for `[(j - 1/2) step, (j + 1/2) step)`; keep those meeting the span.
    let lo = ((harvest.mean - span * sigma) / step + 0.5)
        .floor()
        .max(0.0) as usize;
    let hi = (((harvest.mean + span * sigma) / step + 0.5).floor())
        .min((cap / step).floor())
        .max(lo as f64) as usize;
    let mut levels = Vec::new();
    let mut probs = Vec::new();
    for j in lo..=hi {
        let upper = if j == hi {
            1.0
        } else {
            harvest.cdf((j as f64 + 0.5) * step)
        };
        let lower = if j == lo {
            0.0
        } else {
            harvest.cdf((j as f64 - 0.5) * step)
        };
        levels.push(j as f64 * step);
        probs.push((upper - lower).max(0.0));
    }
    Ok((levels, probs))
}

/// Single-node quantized model plus the maps between real and grid states.
#[derive(Debug, Clone, PartialEq)]
pub struct P2pMdp {
    pub mdp: TabularMdp,
    /// Battery levels `0, step, ..., B_max`.
    pub battery: Vec<f64>,
    pub gain_levels: Vec<f64>,
    pub gain_edges: Vec<f64>,
    pub harvest_levels: Vec<f64>,
    /// Transmit energy of each action index.
    pub actions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpConfig {
    /// Action energies `0, step, ..., P_max`; also the battery and harvest grid step.
    pub energy_step: f64,
    pub channel_levels: usize,
    /// Harvest levels cover the mean plus or minus this many standard deviations.
    pub harvest_span: f64,
    pub gamma: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            energy_step: 1.0,
            channel_levels: 8,
            harvest_span: 4.0,
            gamma: 0.99,
            tolerance: 1e-6,
            max_iters: 100_000,
        }
    }
}

/// Builds the quantized single-node MDP of `env` (which must have `K = 1`).
pub fn build_p2p_mdp(env: &Environment, config: &MdpConfig) -> Result<P2pMdp> {
    if env.num_nodes() != 1 {
        return Err(Error::invalid("the tabular baseline models a single node"));
    }
    let sys = &env.system;
    let step = config.energy_step;
    if !(step > 0.0) {
        return Err(Error::invalid("energy step must be positive"));
    }
    let nb = (sys.battery_capacity / step).floor() as usize + 1;
    let na = (sys.max_transmit / step).floor() as usize + 1;
    let battery: Vec<f64> = (0..nb).map(|i| i as f64 * step).collect();
    let actions: Vec<f64> = (0..na).map(|i| i as f64 * step).collect();
    let (gain_levels, gain_edges, gain_probs) =
        channel_quantization(&env.channel, config.channel_levels)?;
    let (harvest_levels, harvest_probs) = harvest_quantization(
        &env.harvest,
        step,
        config.harvest_span,
        sys.battery_capacity,
    )?;
    let (ng, nh) = (gain_levels.len(), harvest_levels.len());
    let index = |b: usize, g: usize, h: usize| (b * ng + g) * nh + h;
    let harvest_steps: Vec<usize> = harvest_levels
        .iter()
        .map(|e| (e / step).round() as usize)
        .collect();
    let scale = sys.rate_scale();
    let mut builder = MdpBuilder::new(nb * ng * nh, na, config.gamma)?;
    for b in 0..nb {
        for gain in &gain_levels {
            for h in 0..nh {
                for (a, p) in actions.iter().enumerate() {
                    if a > b {
                        builder.push_infeasible();
                        continue;
                    }
                    let next_b = (b + harvest_steps[h] - a).min(nb - 1);
                    let mut row = Vec::with_capacity(ng * nh);
                    for (g2, pg) in gain_probs.iter().enumerate() {
                        for (h2, ph) in harvest_probs.iter().enumerate() {
                            row.push((index(next_b, g2, h2), pg * ph));
                        }
                    }
                    builder.push((scale * p * gain).ln_1p(), row)?;
                }
            }
        }
    }
    debug_assert_eq!(index(nb - 1, ng - 1, nh - 1) + 1, nb * ng * nh);
    Ok(P2pMdp {
        mdp: builder.finish()?,
        battery,
        gain_levels,
        gain_edges,
        harvest_levels,
        actions,
    })
}

impl P2pMdp {
    fn step(&self) -> f64 {
        self.battery.get(1).copied().unwrap_or(1.0)
    }

    /// Grid state of a real node state: battery rounded down, gain to its
    /// quantile bin, harvest to the nearest level.
    pub fn state_index(&self, s: &NodeState) -> usize {
        let step = self.step();
        let b = ((s.battery / step + 1e-9).floor().max(0.0) as usize).min(self.battery.len() - 1);
        let g = self.gain_edges.partition_point(|e| *e <= s.gain);
        let h = nearest(&self.harvest_levels, s.harvest);
        (b * self.gain_levels.len() + g) * self.harvest_levels.len() + h
    }

    /// `(battery, gain, harvest)` of a grid state.
    pub fn state_values(&self, i: usize) -> (f64, f64, f64) {
        let nh = self.harvest_levels.len();
        let ng = self.gain_levels.len();
        let h = i % nh;
        let g = (i / nh) % ng;
        let b = i / (nh * ng);
        (self.battery[b], self.gain_levels[g], self.harvest_levels[h])
    }

    /// Transmit energy of the tabulated policy; never exceeds the real battery.
    pub fn act(&self, table: &ValueTable, s: &NodeState) -> f64 {
        self.actions[table.policy[self.state_index(s)]].min(s.battery.max(0.0))
    }

    /// CSV of `state, battery, gain, harvest, value, action, power`.
    pub fn write_value_csv<W: Write>(&self, table: &ValueTable, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record([
            "state",
            "battery",
            "gain",
            "harvest",
            "value_nats",
            "action",
            "power",
        ])?;
        for (i, (v, a)) in table.values.iter().zip(&table.policy).enumerate() {
            let (b, g, h) = self.state_values(i);
            writer.write_record(&[
                i.to_string(),
                b.to_string(),
                g.to_string(),
                h.to_string(),
                v.to_string(),
                a.to_string(),
                self.actions[*a].to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn nearest(levels: &[f64], x: f64) -> usize {
    let i = levels.partition_point(|l| *l < x);
    if i == 0 {
        0
    } else if i == levels.len() || x - levels[i - 1] <= levels[i] - x {
        i - 1
    } else {
        i
    }
}
