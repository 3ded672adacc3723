//! Mean-field layer: population reward, value recursion, stationarity checks,
//! fictitious play with per-node deep Q-learners, and the distributed use of a
//! centrally trained network.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::central::{CentralPolicy, Evaluation};
use crate::dqn::{self, DqnAgent, DqnConfig, Transition};
use crate::env::{Environment, JointState, NodeState, NodeStreams};
use crate::error::{Error, Result};
use crate::statespace::{
    empirical_distribution, evolve_distribution, fp_average, GridSpec, MeanFieldDistribution,
    StateGrid, TransitionCounter, TransitionKernel,
};

/// `ln(1 + sum_i K pi_i p_i g_i)`, the reward every node collects when the
/// population is spread as `pi` and nodes in state `i` spend `p_i` on gain `g_i`.
pub fn mf_reward(
    pi: &MeanFieldDistribution,
    state_powers: &[f64],
    state_gains: &[f64],
    num_nodes: usize,
) -> Result<f64> {
    Ok((num_nodes as f64 * population_snr(pi, state_powers, state_gains)?).ln_1p())
}

/// `sum_i pi_i p_i g_i`.
fn population_snr(
    pi: &MeanFieldDistribution,
    state_powers: &[f64],
    state_gains: &[f64],
) -> Result<f64> {
    if pi.len() != state_powers.len() || pi.len() != state_gains.len() {
        return Err(Error::Shape(format!(
            "pi over {} states, {} powers, {} gains",
            pi.len(),
            state_powers.len(),
            state_gains.len()
        )));
    }
    Ok(pi
        .probs()
        .iter()
        .zip(state_powers)
        .zip(state_gains)
        .map(|((w, p), g)| w * p * g)
        .sum())
}

/// Reward a learner sees in mean-field-estimate mode: its own contribution
/// plus `K - 1` nodes drawn from the population, `ln(1 + s (p g + (K - 1) sum_i pi_i p_i g_i))`
/// with `s` the environment's rate scale.
pub fn mf_learning_reward(
    own_power: f64,
    own_gain: f64,
    population: f64,
    num_nodes: usize,
    scale: f64,
) -> f64 {
    (scale * (own_power * own_gain + (num_nodes as f64 - 1.0) * population)).ln_1p()
}

/// Transmit energy used by all nodes in each discrete state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatePolicy {
    powers: Vec<f64>,
}

impl StatePolicy {
    /// Rejects energies above `min(upper battery edge, P_max)` of their state.
    pub fn new(powers: Vec<f64>, grid: &StateGrid, max_transmit: f64) -> Result<Self> {
        if powers.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} powers for {} states",
                powers.len(),
                grid.len()
            )));
        }
        for (i, &p) in powers.iter().enumerate() {
            let (b, _, _) = grid.split(i);
            let bound = grid.battery.upper(b).min(max_transmit);
            if !(p >= 0.0 && p <= bound + 1e-12) {
                return Err(Error::invalid(format!(
                    "state {i}: power {p} outside [0, {bound}]"
                )));
            }
        }
        Ok(Self { powers })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            powers: vec![0.0; d],
        }
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }
}

/// Sum of `mf_reward` over `horizon` steps of the distribution recursion from `pi0`.
pub fn eval_value(
    pi0: &MeanFieldDistribution,
    policy: &StatePolicy,
    state_gains: &[f64],
    num_nodes: usize,
    kernel: &TransitionKernel,
    horizon: usize,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::invalid("value horizon must be at least 1"));
    }
    let mut pi = pi0.clone();
    let mut total = 0.0;
    for t in 0..horizon {
        total += mf_reward(&pi, policy.powers(), state_gains, num_nodes)?;
        if t + 1 < horizon {
            pi = evolve_distribution(&pi, kernel)?;
        }
    }
    Ok(total)
}

/// `(|| pi P - pi ||_2, | V_H(pi) / H - R(pi) |)`; both vanish at a stationary pair.
pub fn stationarity_residual(
    pi: &MeanFieldDistribution,
    policy: &StatePolicy,
    state_gains: &[f64],
    num_nodes: usize,
    kernel: &TransitionKernel,
    horizon: usize,
) -> Result<(f64, f64)> {
    let dist = evolve_distribution(pi, kernel)?.l2_distance(pi);
    let value = eval_value(pi, policy, state_gains, num_nodes, kernel, horizon)? / horizon as f64;
    let reward = mf_reward(pi, policy.powers(), state_gains, num_nodes)?;
    Ok((dist, (value - reward).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Each node evaluates the population reward from the broadcast belief.
    MeanFieldEstimate,
    /// The access point broadcasts the realized sum-rate (cooperative learning).
    ApBroadcast,
}

impl RewardMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::MeanFieldEstimate => "mean-field-estimate",
            Self::ApBroadcast => "ap-broadcast",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfmarlConfig {
    /// An iteration ends once the in-iteration estimate drifts this far from the previous one.
    pub drift_threshold: f64,
    /// Stop once the averaged belief moves less than this between iterations.
    pub tolerance: f64,
    /// Longest iteration, in slots.
    pub iteration_length: u64,
    pub reward_mode: RewardMode,
    /// Keep learning at least this many slots before testing convergence.
    pub min_training_slots: u64,
    /// Give up (flagging non-convergence) after this many slots.
    pub max_training_slots: u64,
    /// Slots between refreshes of the per-state power summary.
    pub policy_refresh: u64,
    pub grid: GridSpec,
    pub dqn: DqnConfig,
    pub seed: u64,
    /// Fraction of training slots, counted from the end, whose realized sum
    /// rate is reported as the run's RPS.
    pub score_fraction: f64,
}

impl Default for MfmarlConfig {
    fn default() -> Self {
        Self {
            drift_threshold: 0.01,
            tolerance: 0.001,
            iteration_length: 1000,
            reward_mode: RewardMode::MeanFieldEstimate,
            min_training_slots: 100_000,
            max_training_slots: 300_000,
            policy_refresh: 1000,
            grid: GridSpec::default(),
            dqn: DqnConfig {
                learning_rate: 1e-4,
                train_period: 8,
                episode_length: 20,
                ..Default::default()
            },
            seed: 0,
            score_fraction: 0.5,
        }
    }
}

impl MfmarlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drift_threshold > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::invalid(
                "drift threshold and tolerance must be positive",
            ));
        }
        if self.iteration_length == 0 || self.policy_refresh == 0 {
            return Err(Error::invalid(
                "iteration length and policy refresh must be positive",
            ));
        }
        if !(self.score_fraction > 0.0 && self.score_fraction <= 1.0) {
            return Err(Error::invalid("score fraction must lie in (0, 1]"));
        }
        if self.max_training_slots < self.min_training_slots {
            return Err(Error::invalid("max training slots below the minimum"));
        }
        self.dqn.validate()
    }
}

/// Belief bookkeeping of the fictitious-play loop.
#[derive(Debug, Clone, PartialEq)]
pub struct FictitiousPlayState {
    /// Iteration counter `m >= 1`.
    pub iteration: usize,
    /// Averaged belief broadcast to the nodes.
    pub belief: MeanFieldDistribution,
    /// Estimate produced by the last iteration.
    pub latest: MeanFieldDistribution,
}

impl FictitiousPlayState {
    pub fn new(initial: MeanFieldDistribution) -> Self {
        Self {
            iteration: 1,
            latest: initial.clone(),
            belief: initial,
        }
    }
}

/// Summary of one fictitious-play iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub slots_used: u64,
    /// `|| belief_{m+1} - belief_m ||_2`.
    pub drift: f64,
    pub mean_reward: f64,
    pub stopped_early: bool,
}

/// One training slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: u64,
    pub iteration: usize,
    /// Realized sum-rate.
    pub reward: f64,
    /// Exploration rate of node 0 when acting.
    pub epsilon: f64,
}

/// Lock-step simulation shared by all agents.
#[derive(Debug, Clone)]
pub struct MfSimulation {
    pub env: Environment,
    pub grid: StateGrid,
    pub state: JointState,
    streams: NodeStreams,
    state_gains: Vec<f64>,
    pub policy: StatePolicy,
    /// Fraction of states whose agents disagree with the modal action at the last refresh.
    pub disagreement: f64,
    pub transitions: TransitionCounter,
    pub slots: u64,
    pub records: Vec<SlotRecord>,
}

/// Most frequent action and its count. Ties go to the median of the tied
/// actions (the lower one for an even number), so a fully split vote yields
/// the median vote rather than the smallest.
fn modal_vote(votes: &mut [usize]) -> (usize, usize) {
    votes.sort_unstable();
    let mut tied = Vec::new();
    let mut count = 0usize;
    let mut j = 0;
    while j < votes.len() {
        let run = votes[j..].iter().take_while(|x| **x == votes[j]).count();
        if run > count {
            tied.clear();
            count = run;
        }
        if run == count {
            tied.push(votes[j]);
        }
        j += run;
    }
    let mode = if tied.is_empty() {
        0
    } else {
        tied[(tied.len() - 1) / 2]
    };
    (mode, count)
}

impl MfSimulation {
    pub fn new(env: Environment, grid: StateGrid, seed: u64) -> Self {
        let mut streams = NodeStreams::new(seed, env.num_nodes());
        let state = env.initial_state(&mut streams);
        let d = grid.len();
        Self {
            state_gains: grid.state_gains(),
            policy: StatePolicy::zeros(d),
            disagreement: 0.0,
            transitions: TransitionCounter::new(d),
            slots: 0,
            records: Vec::new(),
            env,
            grid,
            state,
            streams,
        }
    }

    pub fn state_gains(&self) -> &[f64] {
        &self.state_gains
    }

    /// Recomputes every state's power as the most common greedy choice of the
    /// agents at the state's representative point (ties go to the lower energy).
    pub fn refresh_policy(&mut self, agents: &[DqnAgent]) -> Result<()> {
        let d = self.grid.len();
        let centers: Vec<NodeState> = (0..d).map(|i| self.grid.center(i)).collect();
        let inputs = ndarray::Array2::from_shape_fn((d, 3), |(i, j)| dqn::features(&centers[i])[j]);
        let max_p = self.env.system.max_transmit;
        let mut votes: Vec<Vec<usize>> = vec![Vec::with_capacity(agents.len()); d];
        for agent in agents {
            let q = agent.qnet.forward_batch(inputs.view())?;
            for (i, row) in q.rows().into_iter().enumerate() {
                let feasible = agent.feasible_count(centers[i].battery.min(max_p));
                let mut best = 0;
                for a in 1..feasible {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                votes[i].push(best);
            }
        }
        let mut powers = vec![0.0; d];
        let mut disagreeing = 0usize;
        for (i, v) in votes.iter_mut().enumerate() {
            let (mode, count) = modal_vote(v);
            if count < v.len() {
                disagreeing += 1;
            }
            powers[i] = agents.first().map_or(0.0, |a| a.grid.get(mode));
        }
        self.disagreement = disagreeing as f64 / d as f64;
        self.policy = StatePolicy::new(powers, &self.grid, max_p)?;
        Ok(())
    }

    fn discretize(&self, s: &NodeState) -> usize {
        self.grid.discretize(s)
    }

    /// Advances one slot with every agent acting epsilon-greedily and learning.
    fn train_slot(
        &mut self,
        agents: &mut [DqnAgent],
        mode: RewardMode,
        population: f64,
        iteration: usize,
    ) -> Result<Vec<usize>> {
        let k = self.env.num_nodes();
        let max_p = self.env.system.max_transmit;
        let epsilon = agents.first().map_or(0.0, |a| a.epsilon);
        let mut actions = Vec::with_capacity(k);
        let mut powers = Vec::with_capacity(k);
        let mut feats = Vec::with_capacity(k);
        for (agent, s) in agents.iter_mut().zip(&self.state.nodes) {
            let f = dqn::features(s);
            let a = agent.act(&f, s.battery.min(max_p))?;
            actions.push(a);
            powers.push(agent.grid.get(a).min(s.battery.min(max_p)));
            feats.push(f);
        }
        let outcome = self.env.step(&self.state, &powers, &mut self.streams)?;
        let scale = self.env.system.rate_scale();
        let visited: Vec<usize> = self
            .state
            .nodes
            .iter()
            .map(|s| self.discretize(s))
            .collect();
        for (i, agent) in agents.iter_mut().enumerate() {
            let next = &outcome.next.nodes[i];
            let reward = match mode {
                RewardMode::ApBroadcast => outcome.reward,
                RewardMode::MeanFieldEstimate => {
                    mf_learning_reward(powers[i], self.state.nodes[i].gain, population, k, scale)
                }
            };
            agent.observe(Transition {
                state: feats[i],
                action: actions[i],
                reward,
                next_state: dqn::features(next),
                next_feasible: agent.feasible_count(next.battery.min(max_p)),
            })?;
            self.transitions.record(visited[i], self.discretize(next));
        }
        self.slots += 1;
        self.records.push(SlotRecord {
            slot: self.slots,
            iteration,
            reward: outcome.reward,
            epsilon,
        });
        self.state = outcome.next;
        Ok(visited)
    }
}

/// Runs one fictitious-play iteration: at most `iteration_length` slots,
/// ending early once the running in-iteration estimate moves `drift_threshold`
/// away from the previous iteration's estimate, or once `slot_budget` slots are used.
pub fn run_iteration(
    fp: &mut FictitiousPlayState,
    sim: &mut MfSimulation,
    agents: &mut [DqnAgent],
    config: &MfmarlConfig,
    slot_budget: u64,
) -> Result<IterationMetrics> {
    if agents.len() != sim.env.num_nodes() {
        return Err(Error::Shape(format!(
            "{} agents for {} nodes",
            agents.len(),
            sim.env.num_nodes()
        )));
    }
    let d = sim.grid.len();
    let population = population_snr(&fp.belief, sim.policy.powers(), sim.state_gains())?;
    let mut sums = vec![0.0; d];
    let mut n = 0u64;
    let mut reward_total = 0.0;
    let mut stopped_early = false;
    let limit = config.iteration_length.min(slot_budget.max(1));
    let estimate = loop {
        if sim.slots > 0 && sim.slots % config.policy_refresh == 0 {
            sim.refresh_policy(agents)?;
        }
        let visited = sim.train_slot(agents, config.reward_mode, population, fp.iteration)?;
        reward_total += sim.records.last().map_or(0.0, |r| r.reward);
        let slot_pi = empirical_distribution(&visited, d)?;
        for (acc, p) in sums.iter_mut().zip(slot_pi.probs()) {
            *acc += p;
        }
        n += 1;
        let running = MeanFieldDistribution::new(sums.iter().map(|s| s / n as f64).collect())?;
        if running.l2_distance(&fp.latest) >= config.drift_threshold {
            stopped_early = n < limit;
            break running;
        }
        if n >= limit {
            break running;
        }
    };
    let next_belief = fp_average(&fp.belief, &estimate, fp.iteration)?;
    let drift = next_belief.l2_distance(&fp.belief);
    let metrics = IterationMetrics {
        iteration: fp.iteration,
        slots_used: n,
        drift,
        mean_reward: reward_total / n as f64,
        stopped_early,
    };
    fp.belief = next_belief;
    fp.latest = estimate;
    fp.iteration += 1;
    Ok(metrics)
}

/// Everything produced by a fictitious-play training run.
#[derive(Debug, Clone)]
pub struct MfmarlOutcome {
    pub belief: MeanFieldDistribution,
    pub agents: Vec<DqnAgent>,
    pub policy: StatePolicy,
    pub iterations: Vec<IterationMetrics>,
    pub records: Vec<SlotRecord>,
    pub converged: bool,
    pub training_slots: u64,
    /// Empirical kernel of all observed state moves.
    pub kernel: TransitionKernel,
    pub disagreement: f64,
    pub reward_mode: RewardMode,
}

impl MfmarlOutcome {
    /// `|| belief P_hat - belief ||_2` with `P_hat` the empirical kernel.
    pub fn empirical_stationarity(&self) -> Result<f64> {
        Ok(evolve_distribution(&self.belief, &self.kernel)?.l2_distance(&self.belief))
    }

    pub fn training_rps(&self) -> f64 {
        self.tail_rps(1.0)
    }

    /// Mean realized reward over the last `fraction` of training slots.
    pub fn tail_rps(&self, fraction: f64) -> f64 {
        let n = self.records.len();
        let take = ((n as f64 * fraction.clamp(0.0, 1.0)).ceil() as usize).min(n);
        if take == 0 {
            return 0.0;
        }
        self.records[n - take..]
            .iter()
            .map(|r| r.reward)
            .sum::<f64>()
            / take as f64
    }

    /// Per-slot history CSV: slot, iteration, reward, windowed RPS, drift, epsilon, mode.
    pub fn write_history_csv<W: Write>(&self, out: W, window: usize) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record([
            "slot",
            "iteration",
            "reward",
            "rps",
            "drift",
            "epsilon",
            "reward_mode",
        ])?;
        let rewards: Vec<f64> = self.records.iter().map(|r| r.reward).collect();
        let rps = sliding_rps(&rewards, window);
        for (r, w) in self.records.iter().zip(rps) {
            let drift = self
                .iterations
                .get(r.iteration.saturating_sub(1))
                .map_or(f64::NAN, |m| m.drift);
            writer.write_record(&[
                r.slot.to_string(),
                r.iteration.to_string(),
                r.reward.to_string(),
                w.to_string(),
                drift.to_string(),
                r.epsilon.to_string(),
                self.reward_mode.label().to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Trailing mean over the last `window` entries (fewer at the start).
pub fn sliding_rps(rewards: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(rewards.len());
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate() {
        acc += r;
        if i >= window {
            acc -= rewards[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// One learner per node, seeded from `seed` and the node index.
pub fn make_agents(env: &Environment, config: &DqnConfig, seed: u64) -> Result<Vec<DqnAgent>> {
    let standardizer = dqn::input_standardizer(env);
    (0..env.num_nodes())
        .map(|k| {
            let node_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(k as u64 + 1);
            DqnAgent::new(
                env.system.action_grid.clone(),
                standardizer.clone(),
                config.clone(),
                node_seed,
            )
        })
        .collect()
}

/// Fictitious play with deep Q-learners until the averaged belief settles.
pub fn run_mfmarl(env: &Environment, config: &MfmarlConfig) -> Result<MfmarlOutcome> {
    config.validate()?;
    let grid = StateGrid::for_environment(env, config.grid)?;
    let mut agents = make_agents(env, &config.dqn, config.seed)?;
    let mut sim = MfSimulation::new(env.clone(), grid, config.seed);
    let mut fp = FictitiousPlayState::new(MeanFieldDistribution::uniform(sim.grid.len()));
    let mut iterations = Vec::new();
    let converged = loop {
        let budget = config.max_training_slots - sim.slots;
        let metrics = run_iteration(&mut fp, &mut sim, &mut agents, config, budget)?;
        let drift = metrics.drift;
        iterations.push(metrics);
        if sim.slots >= config.min_training_slots && drift <= config.tolerance {
            break true;
        }
        if sim.slots >= config.max_training_slots {
            log::warn!(
                "fictitious play stopped at {} slots without settling (drift {drift:.2e})",
                sim.slots
            );
            break false;
        }
    };
    sim.refresh_policy(&agents)?;
    Ok(MfmarlOutcome {
        belief: fp.belief,
        policy: sim.policy.clone(),
        iterations,
        records: std::mem::take(&mut sim.records),
        converged,
        training_slots: sim.slots,
        kernel: sim.transitions.kernel(),
        disagreement: sim.disagreement,
        reward_mode: config.reward_mode,
        agents,
    })
}

/// Rollout with every node acting greedily on its own state.
pub fn evaluate_agents(
    env: &Environment,
    agents: &[DqnAgent],
    slots: u64,
    seed: u64,
) -> Result<Evaluation> {
    if agents.len() != env.num_nodes() {
        return Err(Error::Shape(format!(
            "{} agents for {} nodes",
            agents.len(),
            env.num_nodes()
        )));
    }
    let max_p = env.system.max_transmit;
    crate::central::evaluate_policy(
        env,
        |state| {
            agents
                .iter()
                .zip(&state.nodes)
                .map(|(agent, s)| {
                    let bound = s.battery.min(max_p);
                    Ok(agent
                        .grid
                        .get(agent.greedy(&dqn::features(s), bound)?)
                        .min(bound))
                })
                .collect()
        },
        slots,
        seed,
    )
}

/// Own power from the central network, with the other `K - 1` states drawn
/// from `pi` and replaced by their grid representatives.
pub fn act_distributed_dnn<R: rand::Rng + ?Sized>(
    central: &CentralPolicy,
    own: &NodeState,
    own_index: usize,
    pi: &MeanFieldDistribution,
    grid: &StateGrid,
    rng: &mut R,
) -> Result<f64> {
    let k = central.num_nodes();
    if own_index >= k {
        return Err(Error::invalid(format!(
            "node index {own_index} out of range for K = {k}"
        )));
    }
    if pi.len() != grid.len() {
        return Err(Error::Shape(format!(
            "pi over {} states, grid has {}",
            pi.len(),
            grid.len()
        )));
    }
    let nodes = (0..k)
        .map(|j| {
            if j == own_index {
                *own
            } else {
                grid.center(pi.sample(rng))
            }
        })
        .collect();
    let powers = central.act(&JointState { nodes, slot: 0 })?;
    Ok(powers[own_index].clamp(0.0, own.battery.min(central.system.max_transmit).max(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributedConfig {
    /// Slots between access-point broadcasts of the estimated distribution.
    pub broadcast_period: u64,
    pub slots: u64,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for DistributedConfig {
    fn default() -> Self {
        Self {
            broadcast_period: 1000,
            slots: 100_000,
            grid: GridSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistributedOutcome {
    /// Realized sum-rate of every slot.
    pub rewards: Vec<f64>,
    /// Belief after every broadcast, the initial one first.
    pub beliefs: Vec<MeanFieldDistribution>,
    pub rps: f64,
}

/// Every node runs the central network on its own state plus sampled
/// neighbours; the belief is refreshed by fictitious-play averaging of the
/// per-period empirical distributions.
pub fn run_distributed_dnn(
    env: &Environment,
    central: &CentralPolicy,
    config: &DistributedConfig,
) -> Result<DistributedOutcome> {
    if central.num_nodes() != env.num_nodes() {
        return Err(Error::Shape(
            "central policy and environment disagree on K".into(),
        ));
    }
    if config.broadcast_period == 0 || config.slots == 0 {
        return Err(Error::invalid(
            "broadcast period and slot count must be positive",
        ));
    }
    let grid = StateGrid::for_environment(env, config.grid)?;
    let d = grid.len();
    let k = env.num_nodes();
    let mut streams = NodeStreams::new(config.seed, k);
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    sampler.set_stream(0xd157);
    let mut state = env.initial_state(&mut streams);
    let mut belief = MeanFieldDistribution::uniform(d);
    let mut beliefs = vec![belief.clone()];
    let mut sums = vec![0.0; d];
    let mut in_period = 0u64;
    let mut m = 1usize;
    let mut rewards = Vec::with_capacity(config.slots as usize);
    for _ in 0..config.slots {
        let visited: Vec<usize> = state.nodes.iter().map(|s| grid.discretize(s)).collect();
        for s in &visited {
            sums[*s] += 1.0 / k as f64;
        }
        in_period += 1;
        let powers = state
            .nodes
            .iter()
            .enumerate()
            .map(|(i, s)| act_distributed_dnn(central, s, i, &belief, &grid, &mut sampler))
            .collect::<Result<Vec<_>>>()?;
        let outcome = env.step(&state, &powers, &mut streams)?;
        rewards.push(outcome.reward);
        state = outcome.next;
        if in_period == config.broadcast_period {
            let estimate =
                MeanFieldDistribution::new(sums.iter().map(|s| s / in_period as f64).collect())?;
            belief = fp_average(&belief, &estimate, m)?;
            beliefs.push(belief.clone());
            m += 1;
            sums.iter_mut().for_each(|s| *s = 0.0);
            in_period = 0;
        }
    }
    let rps = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(DistributedOutcome {
        rewards,
        beliefs,
        rps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::Axis;

    #[test]
    fn single_state_reward() {
        let pi = MeanFieldDistribution::point_mass(1, 0);
        assert!((mf_reward(&pi, &[1.0], &[1.0], 5).unwrap() - 6f64.ln()).abs() < 1e-15);
        assert_eq!(mf_reward(&pi, &[0.0], &[1.0], 5).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_reward_matches_slot_rate() {
        let pi = MeanFieldDistribution::point_mass(3, 1);
        let r = mf_reward(&pi, &[0.0, 2.5, 1.0], &[1.0, 0.7, 3.0], 4).unwrap();
        let direct = crate::env::slot_sum_rate(&[2.5; 4], &[0.7; 4]).unwrap();
        assert!((r - direct).abs() < 1e-14);
        // The learning reward agrees when the node itself follows the population.
        let own = mf_learning_reward(2.5, 0.7, 2.5 * 0.7, 4, 1.0);
        assert!((own - direct).abs() < 1e-14);
    }

    #[test]
    fn value_recursion_base_cases() {
        let pi = MeanFieldDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let policy = StatePolicy {
            powers: vec![1.0, 0.5, 2.0],
        };
        let gains = [0.3, 1.2, 0.8];
        let id = TransitionKernel::identity(3);
        let r = mf_reward(&pi, policy.powers(), &gains, 3).unwrap();
        assert_eq!(eval_value(&pi, &policy, &gains, 3, &id, 1).unwrap(), r);
        assert!((eval_value(&pi, &policy, &gains, 3, &id, 10).unwrap() - 10.0 * r).abs() < 1e-12);
        assert_eq!(
            stationarity_residual(&pi, &policy, &gains, 3, &id, 10).unwrap(),
            (0.0, 0.0)
        );
        assert!(eval_value(&pi, &policy, &gains, 3, &id, 0).is_err());
    }

    #[test]
    fn value_recursion_matches_unrolled_sum() {
        let pi0 = MeanFieldDistribution::new(vec![0.6, 0.3, 0.1]).unwrap();
        let kernel = TransitionKernel::from_rows(vec![
            vec![0.5, 0.5, 0.0],
            vec![0.1, 0.1, 0.8],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        let policy = StatePolicy {
            powers: vec![0.0, 1.0, 3.0],
        };
        let gains = [2.0, 1.0, 0.5];
        let mut pi = pi0.probs().to_vec();
        let mut total = 0.0;
        for _ in 0..10 {
            let snr: f64 = (0..3)
                .map(|i| 4.0 * pi[i] * policy.powers[i] * gains[i])
                .sum();
            total += (1.0 + snr).ln();
            pi = (0..3)
                .map(|j| (0..3).map(|i| pi[i] * kernel.get(i, j)).sum())
                .collect();
        }
        assert!((eval_value(&pi0, &policy, &gains, 4, &kernel, 10).unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn state_policy_feasibility_guard() {
        let grid = StateGrid::new(
            Axis::uniform(0.0, 20.0, 2).unwrap(),
            Axis::uniform(0.0, 1.0, 1).unwrap(),
            Axis::uniform(0.0, 1.0, 1).unwrap(),
        );
        assert!(StatePolicy::new(vec![10.0, 15.0], &grid, 15.0).is_ok());
        assert!(StatePolicy::new(vec![10.5, 15.0], &grid, 15.0).is_err());
        assert!(StatePolicy::new(vec![1.0], &grid, 15.0).is_err());
    }

    #[test]
    fn sliding_window_mean() {
        assert_eq!(
            sliding_rps(&[1.0, 3.0, 5.0, 7.0], 2),
            vec![1.0, 2.0, 4.0, 6.0]
        );
    }

    #[test]
    fn modal_vote_prefers_majority_then_median() {
        assert_eq!(modal_vote(&mut [4, 1, 4, 9, 4]), (4, 3));
        assert_eq!(modal_vote(&mut [106, 84, 36, 108, 18]), (84, 1));
        assert_eq!(modal_vote(&mut [5, 5, 2, 2, 7]), (2, 2));
        assert_eq!(modal_vote(&mut [3, 9, 9, 3, 6, 6]), (6, 2));
        assert_eq!(modal_vote(&mut []), (0, 0));
    }
}
