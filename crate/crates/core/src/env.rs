//! Slotted energy-harvesting multiple access channel.
//!
//! Each node owns a finite battery, harvests a random amount of energy per
//! slot and sees an i.i.d. block-fading power gain. Energy harvested in slot
//! `n` only becomes spendable in slot `n + 1`:
//!
//! ```text
//! B[n+1] = min(max(B[n] + e[n] - p[n], 0), B_max),   0 <= p[n] <= min(B[n], P_max)
//! ```
//!
//! The per-slot reward is the sum-rate `ln(1 + sum_k p_k g_k)` in nats with
//! unit noise power spectral density.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when comparing a transmit energy against its feasibility bound.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Sorted set of admissible transmit energies `{0, p_min, ..., P_max}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionGrid(Vec<f64>);

impl ActionGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("action grid is empty"));
        }
        if levels[0] != 0.0 {
            return Err(Error::invalid("action grid must start at 0"));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) || levels.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(
                "action grid must be strictly increasing and finite",
            ));
        }
        Ok(Self(levels))
    }

    /// `{0, step, 2 step, ..., max}`; `max` must be a multiple of `step`.
    pub fn uniform(step: f64, max: f64) -> Result<Self> {
        if !(step > 0.0) || !(max > 0.0) {
            return Err(Error::invalid("action grid step and max must be positive"));
        }
        let count = (max / step).round() as usize;
        if ((count as f64) * step - max).abs() > 1e-9 * max.max(1.0) {
            return Err(Error::invalid(format!(
                "action grid max {max} is not a multiple of step {step}"
            )));
        }
        // Integer multiples keep levels like 0.3 from drifting to 0.30000000000000004.
        let levels = (0..=count)
            .map(|i| {
                if i == count {
                    max
                } else {
                    round_to(i as f64 * step, step)
                }
            })
            .collect();
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.0.last().expect("non-empty grid")
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    /// Number of leading levels that do not exceed `bound`; at least 1 since level 0 is
    /// always admissible.
    pub fn feasible_count(&self, bound: f64) -> usize {
        let n = self.0.partition_point(|&p| p <= bound + FEASIBILITY_TOL);
        n.max(1)
    }

    /// Index of the level closest to `p`.
    pub fn nearest(&self, p: f64) -> usize {
        let i = self.0.partition_point(|&x| x < p);
        if i == 0 {
            0
        } else if i == self.0.len() {
            i - 1
        } else if (self.0[i] - p) < (p - self.0[i - 1]) {
            i
        } else {
            i - 1
        }
    }
}

fn round_to(x: f64, step: f64) -> f64 {
    // Snap to 12 significant decimals of the step to remove accumulation noise.
    let digits = (-step.log10()).ceil().max(0.0) as i32 + 12;
    let scale = 10f64.powi(digits.min(15));
    (x * scale).round() / scale
}

/// Static parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub num_nodes: usize,
    /// Battery capacity `B_max` in energy units (1 unit = 1e-2 J).
    pub battery_capacity: f64,
    /// Largest per-slot transmit energy `P_max` in energy units.
    pub max_transmit: f64,
    pub action_grid: ActionGrid,
    /// Divide transmit energies by `K` inside the sum-rate.
    #[serde(default)]
    pub power_scaling: bool,
    /// Battery level at slot 1 in energy units.
    pub initial_battery: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::reference(5)
    }
}

impl SystemConfig {
    /// `B_max = 20`, `P_max = 15`, action grid `{0, 0.1, ..., 15}`, `B_1 = B_max / 2`.
    pub fn reference(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            battery_capacity: 20.0,
            max_transmit: 15.0,
            action_grid: ActionGrid::uniform(0.1, 15.0).expect("valid grid"),
            power_scaling: false,
            initial_battery: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::invalid("num_nodes must be positive"));
        }
        if !(self.max_transmit > 0.0 && self.max_transmit <= self.battery_capacity) {
            return Err(Error::invalid("require 0 < P_max <= B_max"));
        }
        if (self.action_grid.max() - self.max_transmit).abs() > 1e-9 {
            return Err(Error::invalid("last action level must equal P_max"));
        }
        if !(0.0..=self.battery_capacity).contains(&self.initial_battery) {
            return Err(Error::invalid("initial battery outside [0, B_max]"));
        }
        Ok(())
    }

    /// Factor applied to transmit energies inside the log.
    pub fn rate_scale(&self) -> f64 {
        if self.power_scaling {
            1.0 / self.num_nodes as f64
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    /// Resample until non-negative (a true truncated Gaussian).
    RejectRenormalize,
    /// Map negative draws to 0.
    ClipAtZero,
}

/// Per-slot harvested energy: Gaussian(mean, variance) truncated at zero.
///
/// `mean` and `variance` are the parameters of the underlying Gaussian, so in
/// reject mode the realized mean exceeds `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestModel {
    pub mean: f64,
    pub variance: f64,
    #[serde(default = "default_truncation")]
    pub truncation: Truncation,
}

fn default_truncation() -> Truncation {
    Truncation::RejectRenormalize
}

impl Default for HarvestModel {
    fn default() -> Self {
        Self::new(4.0, 3.5)
    }
}

impl HarvestModel {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance,
            truncation: Truncation::RejectRenormalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || !self.mean.is_finite() {
            return Err(Error::invalid(
                "harvest variance must be positive and mean finite",
            ));
        }
        Ok(())
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sigma = self.std_dev();
        match self.truncation {
            Truncation::ClipAtZero => {
                let z: f64 = rng.sample(StandardNormal);
                (self.mean + sigma * z).max(0.0)
            }
            Truncation::RejectRenormalize => {
                let lower = -self.mean / sigma;
                let z = if lower < 0.5 {
                    loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z >= lower {
                            break z;
                        }
                    }
                } else {
                    sample_normal_tail(lower, rng)
                };
                (self.mean + sigma * z).max(0.0)
            }
        }
    }

    /// Probability that a draw is at most `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        if x < 0.0 {
            return 0.0;
        }
        let normal = Normal::new(self.mean, self.std_dev()).expect("validated model");
        match self.truncation {
            Truncation::ClipAtZero => normal.cdf(x),
            Truncation::RejectRenormalize => {
                let below = normal.cdf(0.0);
                ((normal.cdf(x) - below) / (1.0 - below)).clamp(0.0, 1.0)
            }
        }
    }
}

/// Standard normal conditioned on `z >= lower` for `lower > 0`, by exponential
/// proposal rejection.
fn sample_normal_tail<R: Rng + ?Sized>(lower: f64, rng: &mut R) -> f64 {
    let rate = 0.5 * (lower + (lower * lower + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = lower + e / rate;
        let accept = (-(z - rate).powi(2) / 2.0).exp();
        if rng.gen::<f64>() <= accept {
            return z;
        }
    }
}

/// Block-fading power gain law, i.i.d. across slots and nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelModel {
    /// Exponential power gain (Rayleigh amplitude) with the given mean.
    Rayleigh {
        #[serde(default = "unit")]
        mean: f64,
    },
    /// Gains drawn from a finite level set, uniformly unless weights are given.
    Discrete {
        levels: Vec<f64>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

fn unit() -> f64 {
    1.0
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel::Rayleigh { mean: 1.0 }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            ChannelModel::Rayleigh { mean } => {
                if !(*mean > 0.0) {
                    return Err(Error::invalid("rayleigh mean must be positive"));
                }
            }
            ChannelModel::Discrete { levels, weights } => {
                if levels.is_empty() || levels.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::invalid(
                        "discrete channel levels must be non-empty and sorted",
                    ));
                }
                if levels[0] < 0.0 {
                    return Err(Error::invalid("channel gains must be non-negative"));
                }
                if let Some(w) = weights {
                    if w.len() != levels.len()
                        || w.iter().any(|&x| x < 0.0)
                        || w.iter().sum::<f64>() <= 0.0
                    {
                        return Err(Error::invalid(
                            "channel weights must match levels and be non-negative",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ChannelModel::Rayleigh { mean } => {
                let e: f64 = rng.sample(Exp1);
                mean * e
            }
            ChannelModel::Discrete {
                levels,
                weights: None,
            } => levels[rng.gen_range(0..levels.len())],
            ChannelModel::Discrete {
                levels,
                weights: Some(w),
            } => {
                let total: f64 = w.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (level, weight) in levels.iter().zip(w) {
                    if u < *weight {
                        return *level;
                    }
                    u -= weight;
                }
                *levels.last().expect("non-empty")
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ChannelModel::Rayleigh { mean } => *mean,
            ChannelModel::Discrete {
                levels,
                weights: None,
            } => levels.iter().sum::<f64>() / levels.len() as f64,
            ChannelModel::Discrete {
                levels,
                weights: Some(w),
            } => levels.iter().zip(w).map(|(l, w)| l * w).sum::<f64>() / w.iter().sum::<f64>(),
        }
    }
}

/// Local state of one node in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub battery: f64,
    pub gain: f64,
    pub harvest: f64,
}

impl NodeState {
    pub fn new(battery: f64, gain: f64, harvest: f64) -> Self {
        Self {
            battery,
            gain,
            harvest,
        }
    }
}

/// State of all `K` nodes at slot `slot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub nodes: Vec<NodeState>,
    pub slot: u64,
}

impl JointState {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn harvests(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().map(|s| s.harvest)
    }

    pub fn batteries(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().map(|s| s.battery)
    }

    pub fn gains(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().map(|s| s.gain)
    }
}

/// Per-node random substreams derived from one seed.
///
/// Node `k` always draws from the same stream, so changing `K` or the order in
/// which nodes are advanced never perturbs another node's draws.
#[derive(Debug, Clone)]
pub struct NodeStreams {
    streams: Vec<ChaCha8Rng>,
}

impl NodeStreams {
    pub fn new(seed: u64, num_nodes: usize) -> Self {
        let streams = (0..num_nodes)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64 + 1);
                rng
            })
            .collect();
        Self { streams }
    }

    pub fn node(&mut self, k: usize) -> &mut ChaCha8Rng {
        &mut self.streams[k]
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }
}

/// `min(max(B + e - p, 0), B_max)`.
pub fn battery_step(battery: f64, harvest: f64, power: f64, capacity: f64) -> f64 {
    (battery + harvest - power).max(0.0).min(capacity)
}

/// Like [`battery_step`] but rejects spending more than the battery holds.
pub fn battery_step_strict(battery: f64, harvest: f64, power: f64, capacity: f64) -> Result<f64> {
    if power < 0.0 || power > battery + FEASIBILITY_TOL {
        return Err(Error::Infeasible(vec![InfeasiblePower {
            node: 0,
            power,
            bound: battery,
        }]));
    }
    Ok(battery_step(battery, harvest, power, capacity))
}

/// `min(B, P_max)`, the largest energy a node may spend this slot.
pub fn feasible_power_bound(state: &NodeState, config: &SystemConfig) -> f64 {
    state.battery.min(config.max_transmit).max(0.0)
}

/// `ln(1 + sum_k p_k g_k)` in nats.
pub fn slot_sum_rate(powers: &[f64], gains: &[f64]) -> Result<f64> {
    if powers.len() != gains.len() {
        return Err(Error::Shape(format!(
            "{} powers for {} gains",
            powers.len(),
            gains.len()
        )));
    }
    let snr: f64 = powers.iter().zip(gains).map(|(p, g)| p * g).sum();
    Ok(snr.ln_1p())
}

/// A transmit energy that exceeded `min(B, P_max)` (or was negative).
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasiblePower {
    pub node: usize,
    pub power: f64,
    pub bound: f64,
}

impl std::fmt::Display for InfeasiblePower {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "node {}: p = {} outside [0, {}]",
            self.node, self.power, self.bound
        )
    }
}

/// Result of advancing the network by one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub next: JointState,
    /// Sum-rate collected in the slot, in nats.
    pub reward: f64,
    /// Energy discarded because a battery hit `B_max`, per node.
    pub overflow: Vec<f64>,
}

/// Harvest, channel and battery parameters bundled together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub system: SystemConfig,
    pub harvest: HarvestModel,
    pub channel: ChannelModel,
}

impl Environment {
    pub fn new(system: SystemConfig, harvest: HarvestModel, channel: ChannelModel) -> Result<Self> {
        system.validate()?;
        harvest.validate()?;
        channel.validate()?;
        Ok(Self {
            system,
            harvest,
            channel,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.system.num_nodes
    }

    /// Slot-1 state: every battery at `B_1`, fresh harvest and gain draws.
    pub fn initial_state(&self, streams: &mut NodeStreams) -> JointState {
        let nodes = (0..self.num_nodes())
            .map(|k| {
                let rng = streams.node(k);
                let gain = self.channel.sample(rng);
                let harvest = self.harvest.sample(rng);
                NodeState::new(self.system.initial_battery, gain, harvest)
            })
            .collect();
        JointState { nodes, slot: 1 }
    }

    pub fn feasible_bound(&self, state: &NodeState) -> f64 {
        feasible_power_bound(state, &self.system)
    }

    /// Checks `0 <= p_k <= min(B_k, P_max)` for every node.
    pub fn check_feasible(&self, state: &JointState, powers: &[f64]) -> Result<()> {
        if powers.len() != state.len() {
            return Err(Error::Shape(format!(
                "{} powers for {} nodes",
                powers.len(),
                state.len()
            )));
        }
        let violations: Vec<_> = state
            .nodes
            .iter()
            .zip(powers)
            .enumerate()
            .filter_map(|(node, (s, &power))| {
                let bound = self.feasible_bound(s);
                let ok = power.is_finite() && power >= 0.0 && power <= bound + FEASIBILITY_TOL;
                (!ok).then_some(InfeasiblePower { node, power, bound })
            })
            .collect();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Infeasible(violations))
        }
    }

    /// Advances one slot: collects the sum-rate, updates batteries and draws
    /// the next slot's harvest and gain for every node.
    pub fn step(
        &self,
        state: &JointState,
        powers: &[f64],
        streams: &mut NodeStreams,
    ) -> Result<SlotOutcome> {
        self.check_feasible(state, powers)?;
        let scale = self.system.rate_scale();
        let snr: f64 = state
            .nodes
            .iter()
            .zip(powers)
            .map(|(s, p)| scale * p * s.gain)
            .sum();
        let reward = snr.ln_1p();
        let capacity = self.system.battery_capacity;
        let mut overflow = Vec::with_capacity(state.len());
        let nodes = state
            .nodes
            .iter()
            .zip(powers)
            .enumerate()
            .map(|(k, (s, &p))| {
                let p = p.min(s.battery);
                let unclamped = s.battery + s.harvest - p;
                overflow.push((unclamped - capacity).max(0.0));
                let battery = battery_step(s.battery, s.harvest, p, capacity);
                let rng = streams.node(k);
                let gain = self.channel.sample(rng);
                let harvest = self.harvest.sample(rng);
                NodeState::new(battery, gain, harvest)
            })
            .collect();
        Ok(SlotOutcome {
            next: JointState {
                nodes,
                slot: state.slot + 1,
            },
            reward,
            overflow,
        })
    }

    /// Draws an `N x K` harvest matrix and gain matrix (row = slot).
    pub fn sample_trace(
        &self,
        horizon: usize,
        streams: &mut NodeStreams,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let k = self.num_nodes();
        let mut harvest = vec![vec![0.0; k]; horizon];
        let mut gains = vec![vec![0.0; k]; horizon];
        for node in 0..k {
            let rng = streams.node(node);
            for n in 0..horizon {
                gains[n][node] = self.channel.sample(rng);
                harvest[n][node] = self.harvest.sample(rng);
            }
        }
        (harvest, gains)
    }
}

/// Uniform random draw from `rng` seeded for a specific purpose.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
