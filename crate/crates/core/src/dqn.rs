//! Per-node deep Q-learning: replay memory, target network, epsilon-greedy
//! exploration with infeasible actions masked out.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionGrid, Environment, NodeState};
use crate::error::{Error, Result};
use crate::nn::{
    apply_gradients, Activation, Architecture, Checkpoint, Mlp, Optimizer, OptimizerState,
    Standardizer,
};

/// Local observation fed to the Q-network: `[e, B, g]`.
pub type Features = [f64; 3];

pub fn features(state: &NodeState) -> Features {
    [state.harvest, state.battery, state.gain]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Features,
    pub action: usize,
    pub reward: f64,
    pub next_state: Features,
    /// Number of actions feasible in `next_state` (a prefix of the grid).
    pub next_feasible: usize,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `t`, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct entries drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if n > self.items.len() {
            return Err(Error::InsufficientSamples {
                have: self.items.len(),
                want: n,
            });
        }
        Ok(index::sample(rng, self.items.len(), n)
            .iter()
            .map(|i| self.items[i])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    pub epsilon_max: f64,
    pub epsilon_min: f64,
    /// Multiplicative epsilon decay applied at the end of every episode.
    pub epsilon_decay: f64,
    /// Slots per exploration episode.
    pub episode_length: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Gradient steps between target-network copies.
    pub target_sync: u64,
    pub learning_rate: f64,
    /// Slots between gradient steps.
    pub train_period: u64,
    pub hidden: Vec<usize>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_max: 1.0,
            epsilon_min: 0.01,
            epsilon_decay: 0.995,
            episode_length: 1,
            batch_size: 32,
            buffer_capacity: 2000,
            target_sync: 100,
            learning_rate: 1e-3,
            train_period: 1,
            hidden: vec![60, 60, 58, 58, 56, 56, 54, 54, 52, 52],
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1)"));
        }
        if !(0.0 <= self.epsilon_min
            && self.epsilon_min <= self.epsilon_max
            && self.epsilon_max <= 1.0)
        {
            return Err(Error::invalid(
                "require 0 <= epsilon_min <= epsilon_max <= 1",
            ));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::invalid("epsilon decay must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::invalid("need 1 <= batch size <= buffer capacity"));
        }
        if self.target_sync == 0 || self.train_period == 0 || self.episode_length == 0 {
            return Err(Error::invalid(
                "target sync, train period and episode length must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// `3 -> hidden... -> |A|`, ReLU hidden layers, linear output.
pub fn q_network_arch(hidden: &[usize], num_actions: usize) -> Result<Architecture> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(3);
    sizes.extend_from_slice(hidden);
    sizes.push(num_actions);
    Architecture::new(sizes, Activation::Relu, Activation::Linear)
}

/// Fixed affine input scaling derived from the environment: each feature is
/// centred on its typical value and divided by its spread.
pub fn input_standardizer(env: &Environment) -> Standardizer {
    let m = env.harvest.mean;
    let harvest_scale = env.harvest.std_dev().max(0.1 * m.abs()).max(1e-3);
    let half = 0.5 * env.system.battery_capacity;
    let g = env.channel.mean().max(1e-6);
    Standardizer {
        mean: vec![m, half, g],
        scale: vec![harvest_scale, half, g],
    }
}

fn argmax_prefix(q: impl Iterator<Item = f64>, feasible: usize) -> usize {
    let mut best = 0;
    let mut best_q = f64::NEG_INFINITY;
    for (a, v) in q.take(feasible.max(1)).enumerate() {
        if v > best_q {
            best_q = v;
            best = a;
        }
    }
    best
}

/// Epsilon-greedy choice among the first `feasible` actions.
pub fn select_action<R: Rng + ?Sized>(
    qnet: &Mlp,
    state: &Features,
    feasible: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let feasible = feasible.max(1);
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..feasible));
    }
    let q = qnet.forward(state)?;
    Ok(argmax_prefix(q.into_iter(), feasible))
}

fn batch_matrix(rows: impl ExactSizeIterator<Item = Features>) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.flat_map(|r| r.into_iter()).collect();
    Array2::from_shape_vec((n, 3), flat).expect("three features per row")
}

/// `y_i = r_i + gamma * max over feasible a of Q_target(s'_i, a)`.
pub fn td_targets(batch: &[Transition], target: &Mlp, gamma: f64) -> Result<Vec<f64>> {
    if gamma == 0.0 {
        return Ok(batch.iter().map(|t| t.reward).collect());
    }
    let next = batch_matrix(batch.iter().map(|t| t.next_state));
    let q = target.forward_batch(next.view())?;
    Ok(batch
        .iter()
        .zip(q.rows())
        .map(|(t, row)| {
            let best = row
                .iter()
                .take(t.next_feasible.max(1))
                .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            t.reward + gamma * best
        })
        .collect())
}

/// One optimizer step on `mean (Q(s, a) - y)^2` over the batch; only the
/// chosen-action outputs carry gradient. Returns the loss before the step.
pub fn dqn_update(
    qnet: &mut Mlp,
    target: &Mlp,
    batch: &[Transition],
    config: &DqnConfig,
    state: &mut OptimizerState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let ys = td_targets(batch, target, config.gamma)?;
    let inputs = batch_matrix(batch.iter().map(|t| t.state));
    let n = batch.len() as f64;
    let (loss, grads) = qnet.backward_with(inputs.view(), |out| {
        let mut delta = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for (i, (t, y)) in batch.iter().zip(&ys).enumerate() {
            let r = out[[i, t.action]] - y;
            loss += r * r;
            delta[[i, t.action]] = 2.0 * r / n;
        }
        (loss / n, delta)
    })?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("Q loss became {loss}")));
    }
    apply_gradients(qnet, &grads, Optimizer::adam(), config.learning_rate, state)?;
    Ok(loss)
}

/// Deep copy of the online network.
pub fn sync_target(qnet: &Mlp) -> Mlp {
    qnet.clone()
}

/// One node's learner: online and target networks, replay memory, exploration state.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub qnet: Mlp,
    pub target: Mlp,
    pub buffer: ReplayBuffer,
    pub epsilon: f64,
    pub config: DqnConfig,
    pub grid: ActionGrid,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    /// Slots observed so far.
    pub slots: u64,
    /// Gradient steps taken so far.
    pub updates: u64,
    /// Target copies made so far.
    pub syncs: u64,
    pub last_loss: Option<f64>,
}

/// Serialized agent: both networks plus exploration state and step counters.
/// The replay memory and optimizer moments are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentCheckpoint {
    pub config: DqnConfig,
    pub grid: ActionGrid,
    pub qnet: Checkpoint,
    pub target: Checkpoint,
    pub epsilon: f64,
    pub slots: u64,
    pub updates: u64,
    pub syncs: u64,
}

impl DqnAgent {
    pub fn new(
        grid: ActionGrid,
        standardizer: Standardizer,
        config: DqnConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut qnet = Mlp::new(q_network_arch(&config.hidden, grid.len())?, seed)?;
        qnet.standardizer = standardizer;
        let target = sync_target(&qnet);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5eed);
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            epsilon: config.epsilon_max,
            qnet,
            target,
            grid,
            optimizer: OptimizerState::new(),
            rng,
            config,
            slots: 0,
            updates: 0,
            syncs: 0,
            last_loss: None,
        })
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            config: self.config.clone(),
            grid: self.grid.clone(),
            qnet: self.qnet.checkpoint(),
            target: self.target.checkpoint(),
            epsilon: self.epsilon,
            slots: self.slots,
            updates: self.updates,
            syncs: self.syncs,
        }
    }

    /// Rebuilds an agent with an empty replay memory, fresh optimizer moments
    /// and an exploration stream drawn from `seed`.
    pub fn from_checkpoint(ck: &AgentCheckpoint, seed: u64) -> Result<Self> {
        let grid = ActionGrid::new(ck.grid.levels().to_vec())?;
        let mut agent = Self::new(grid, ck.qnet.standardizer.clone(), ck.config.clone(), seed)?;
        let qnet = Mlp::from_checkpoint(&ck.qnet)?;
        let target = Mlp::from_checkpoint(&ck.target)?;
        if qnet.arch != agent.qnet.arch || target.arch != agent.qnet.arch {
            return Err(Error::Shape(
                "checkpoint networks differ from the configured Q-network".into(),
            ));
        }
        if !(ck.config.epsilon_min..=ck.config.epsilon_max).contains(&ck.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon {} outside the configured range",
                ck.epsilon
            )));
        }
        agent.qnet = qnet;
        agent.target = target;
        agent.epsilon = ck.epsilon;
        agent.slots = ck.slots;
        agent.updates = ck.updates;
        agent.syncs = ck.syncs;
        Ok(agent)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, seed: u64) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(&serde_json::from_reader(file)?, seed)
    }

    /// Number of grid levels not exceeding `bound`.
    pub fn feasible_count(&self, bound: f64) -> usize {
        self.grid.feasible_count(bound)
    }

    /// Epsilon-greedy action index for `state` with at most `bound` energy allowed.
    pub fn act(&mut self, state: &Features, bound: f64) -> Result<usize> {
        let feasible = self.feasible_count(bound);
        select_action(&self.qnet, state, feasible, self.epsilon, &mut self.rng)
    }

    /// Greedy action index.
    pub fn greedy(&self, state: &Features, bound: f64) -> Result<usize> {
        let q = self.qnet.forward(state)?;
        Ok(argmax_prefix(q.into_iter(), self.feasible_count(bound)))
    }

    /// Stores `t`, trains every `train_period` slots once the memory holds a
    /// batch, syncs the target on schedule and decays epsilon.
    pub fn observe(&mut self, t: Transition) -> Result<()> {
        if t.action >= self.grid.len() {
            return Err(Error::invalid(format!(
                "action {} outside grid of {}",
                t.action,
                self.grid.len()
            )));
        }
        self.buffer.push(t);
        self.slots += 1;
        if self.buffer.len() >= self.config.batch_size && self.slots % self.config.train_period == 0
        {
            let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
            let loss = dqn_update(
                &mut self.qnet,
                &self.target,
                &batch,
                &self.config,
                &mut self.optimizer,
            )?;
            self.last_loss = Some(loss);
            self.updates += 1;
            if self.updates % self.config.target_sync == 0 {
                self.target = sync_target(&self.qnet);
                self.syncs += 1;
            }
        }
        if self.slots % self.config.episode_length == 0 {
            self.epsilon = (self.epsilon * self.config.epsilon_decay).max(self.config.epsilon_min);
        }
        Ok(())
    }
}
