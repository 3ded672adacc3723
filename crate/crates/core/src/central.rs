//! Centralized policy: a network trained on offline schedules that maps the
//! joint `(E, B, G)` state to a feasible power vector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, JointState, NodeStreams, SystemConfig};
use crate::error::{Error, Result};
use crate::nn::{
    self, Activation, Architecture, EpochLoss, Mlp, Samples, Standardizer, TrainingConfig,
};
use crate::offline::Dataset;

/// Hidden-layer count of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthProfile {
    /// 30 hidden layers.
    Paper,
    /// 6 hidden layers.
    Desk,
    Custom(usize),
}

impl DepthProfile {
    pub fn hidden_layers(self) -> usize {
        match self {
            Self::Paper => 30,
            Self::Desk => 6,
            Self::Custom(h) => h,
        }
    }
}

/// Input `3K`, first hidden `30K`, then widths alternately repeat and shrink
/// by `2K`; leaky-ReLU hidden layers and a linear `K`-wide output.
pub fn build_central_arch(num_nodes: usize, profile: DepthProfile) -> Result<Architecture> {
    let k = num_nodes;
    let hidden = profile.hidden_layers();
    if k == 0 || hidden == 0 {
        return Err(Error::invalid("need K >= 1 and at least one hidden layer"));
    }
    let mut sizes = vec![3 * k, 30 * k];
    for j in 2..=hidden {
        let prev = *sizes.last().expect("non-empty");
        let width = if j % 2 == 0 {
            prev
        } else {
            prev.checked_sub(2 * k).unwrap_or(0)
        };
        if width < k {
            return Err(Error::invalid(format!(
                "{hidden} hidden layers shrink the width to {width} at layer {j}, below K = {k}"
            )));
        }
        sizes.push(width);
    }
    sizes.push(k);
    Architecture::new(sizes, Activation::leaky(), Activation::Linear)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentralConfig {
    pub profile: DepthProfile,
    pub training: TrainingConfig,
    /// Fraction of records held out for validation, taken from the end of the data set.
    pub validation_fraction: f64,
    pub init_seed: u64,
}

impl Default for CentralConfig {
    fn default() -> Self {
        Self {
            profile: DepthProfile::Desk,
            training: TrainingConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                epochs: 20,
                restore_best: true,
                ..Default::default()
            },
            validation_fraction: 0.2,
            init_seed: 0,
        }
    }
}

/// Trained network plus the system limits used to clamp its output.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralPolicy {
    pub net: Mlp,
    pub system: SystemConfig,
    pub validation_mse: f64,
    /// Validation error of predicting the mean training target everywhere.
    pub constant_mse: f64,
    pub history: Vec<EpochLoss>,
}

/// Fits the network to offline `(E, B, G) -> P*` records.
pub fn train_central(
    dataset: &Dataset,
    system: &SystemConfig,
    config: &CentralConfig,
) -> Result<CentralPolicy> {
    let k = system.num_nodes;
    if dataset.num_nodes != k {
        return Err(Error::Shape(format!(
            "dataset has K = {}, system has K = {k}",
            dataset.num_nodes
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty training data"));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::invalid("validation fraction must lie in [0, 1)"));
    }
    let samples = Samples::from_rows(&dataset.inputs, &dataset.targets)?;
    let (train_set, validation) = samples.split(config.validation_fraction);
    if train_set.is_empty() {
        return Err(Error::invalid("no records left for training"));
    }
    let mut net = Mlp::new(build_central_arch(k, config.profile)?, config.init_seed)?;
    net.standardizer = Standardizer::fit(train_set.inputs.view())?;
    let history = nn::train(&mut net, &train_set, Some(&validation), &config.training)?;
    let (validation_mse, constant_mse) = if validation.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mean = train_set
            .targets
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty");
        let baseline = ndarray::Array2::from_shape_fn((validation.len(), k), |(_, j)| mean[j]);
        (
            net.evaluate(validation.inputs.view(), validation.targets.view())?,
            nn::mse(baseline.view(), validation.targets.view())?,
        )
    };
    log::info!(
        "central policy: validation mse {validation_mse:.4} (constant predictor {constant_mse:.4})"
    );
    Ok(CentralPolicy {
        net,
        system: system.clone(),
        validation_mse,
        constant_mse,
        history,
    })
}

/// `[e_1..e_K, B_1..B_K, g_1..g_K]`.
pub fn joint_features(state: &JointState) -> Vec<f64> {
    state
        .harvests()
        .chain(state.batteries())
        .chain(state.gains())
        .collect()
}

/// Clamps each entry of `raw` to `[0, min(B_k, P_max)]`.
pub fn clamp_feasible(raw: &[f64], state: &JointState, system: &SystemConfig) -> Vec<f64> {
    raw.iter()
        .zip(&state.nodes)
        .map(|(p, s)| {
            let bound = s.battery.min(system.max_transmit).max(0.0);
            if p.is_nan() {
                0.0
            } else {
                p.clamp(0.0, bound)
            }
        })
        .collect()
}

impl CentralPolicy {
    pub fn num_nodes(&self) -> usize {
        self.system.num_nodes
    }

    /// Network output for the joint state, clamped to the feasible box.
    pub fn act(&self, state: &JointState) -> Result<Vec<f64>> {
        if state.len() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "state has {} nodes, policy expects {}",
                state.len(),
                self.num_nodes()
            )));
        }
        let raw = self.net.forward(&joint_features(state))?;
        Ok(clamp_feasible(&raw, state, &self.system))
    }

    /// Mean absolute difference between acting on node-permuted states and
    /// permuting the action; zero for a permutation-equivariant policy.
    pub fn permutation_gap(&self, states: &[JointState], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut count = 0usize;
        for state in states {
            let mut order: Vec<usize> = (0..state.len()).collect();
            order.shuffle(&mut rng);
            let permuted = JointState {
                nodes: order.iter().map(|&i| state.nodes[i]).collect(),
                slot: state.slot,
            };
            let base = self.act(state)?;
            let moved = self.act(&permuted)?;
            for (j, &i) in order.iter().enumerate() {
                total += (moved[j] - base[i]).abs();
                count += 1;
            }
        }
        Ok(if count == 0 {
            0.0
        } else {
            total / count as f64
        })
    }
}

/// Stored form of a [`CentralPolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralCheckpoint {
    pub system: SystemConfig,
    pub validation_mse: f64,
    pub constant_mse: f64,
    pub net: nn::Checkpoint,
}

impl CentralPolicy {
    pub fn checkpoint(&self) -> CentralCheckpoint {
        CentralCheckpoint {
            system: self.system.clone(),
            validation_mse: self.validation_mse,
            constant_mse: self.constant_mse,
            net: self.net.checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &CentralCheckpoint) -> Result<Self> {
        let net = Mlp::from_checkpoint(&ck.net)?;
        let k = ck.system.num_nodes;
        if net.input_width() != 3 * k || net.output_width() != k {
            return Err(Error::Shape(format!("network does not match K = {k}")));
        }
        Ok(Self {
            net,
            system: ck.system.clone(),
            validation_mse: ck.validation_mse,
            constant_mse: ck.constant_mse,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(&serde_json::from_reader(file)?)
    }
}

/// Free-function form of [`CentralPolicy::act`].
pub fn act_central(policy: &CentralPolicy, state: &JointState) -> Result<Vec<f64>> {
    policy.act(state)
}

/// Spend `min(B, P_max)` every slot.
pub fn greedy_action(state: &JointState, system: &SystemConfig) -> Vec<f64> {
    state
        .nodes
        .iter()
        .map(|s| s.battery.min(system.max_transmit).max(0.0))
        .collect()
}

/// Outcome of a policy rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seed: u64,
    pub slots: u64,
    /// Mean sum-rate per slot in nats.
    pub rps: f64,
}

/// Runs `actor` for `slots` slots from the initial state and averages the sum-rate.
///
/// Randomness comes only from `seed`; an infeasible action aborts the rollout.
pub fn evaluate_policy<F>(
    env: &Environment,
    mut actor: F,
    slots: u64,
    seed: u64,
) -> Result<Evaluation>
where
    F: FnMut(&JointState) -> Result<Vec<f64>>,
{
    if slots == 0 {
        return Err(Error::invalid("evaluation needs at least one slot"));
    }
    let mut streams = NodeStreams::new(seed, env.num_nodes());
    let mut state = env.initial_state(&mut streams);
    let mut total = 0.0;
    for _ in 0..slots {
        let powers = actor(&state)?;
        let outcome = env.step(&state, &powers, &mut streams)?;
        total += outcome.reward;
        state = outcome.next;
    }
    Ok(Evaluation {
        seed,
        slots,
        rps: total / slots as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChannelModel, HarvestModel, NodeState};

    #[test]
    fn paper_profile_widths() {
        let arch = build_central_arch(5, DepthProfile::Paper).unwrap();
        assert_eq!(&arch.sizes[..6], &[15, 150, 150, 140, 140, 130]);
        assert_eq!(arch.hidden_layers(), 30);
        assert_eq!(arch.sizes[30], 10);
        assert_eq!(*arch.sizes.last().unwrap(), 5);
    }

    #[test]
    fn desk_profile_widths() {
        let arch = build_central_arch(5, DepthProfile::Desk).unwrap();
        assert_eq!(arch.sizes, vec![15, 150, 150, 140, 140, 130, 130, 5]);
        let one = build_central_arch(1, DepthProfile::Desk).unwrap();
        assert_eq!(
            (one.sizes[0], one.sizes[1], *one.sizes.last().unwrap()),
            (3, 30, 1)
        );
    }

    #[test]
    fn too_deep_is_rejected() {
        assert!(build_central_arch(5, DepthProfile::Custom(30)).is_ok());
        assert!(build_central_arch(5, DepthProfile::Custom(31)).is_err());
        assert!(build_central_arch(5, DepthProfile::Custom(0)).is_err());
    }

    fn state(b: &[f64]) -> JointState {
        JointState {
            nodes: b.iter().map(|&b| NodeState::new(b, 1.0, 1.0)).collect(),
            slot: 1,
        }
    }

    #[test]
    fn clamp_cases() {
        let sys = SystemConfig::reference(3);
        assert_eq!(
            clamp_feasible(&[-1.0, 20.0, 20.0], &state(&[5.0, 3.0, 20.0]), &sys),
            vec![0.0, 3.0, 15.0]
        );
    }

    #[test]
    fn zero_actor_scores_zero() {
        let env = Environment::new(
            SystemConfig::reference(2),
            HarvestModel::new(4.0, 3.5),
            ChannelModel::default(),
        )
        .unwrap();
        let ev = evaluate_policy(&env, |s| Ok(vec![0.0; s.len()]), 500, 1).unwrap();
        assert_eq!(ev.rps, 0.0);
    }

    #[test]
    fn infeasible_actor_aborts() {
        let env = Environment::new(
            SystemConfig::reference(1),
            HarvestModel::new(4.0, 3.5),
            ChannelModel::default(),
        )
        .unwrap();
        assert!(evaluate_policy(&env, |_| Ok(vec![16.0]), 10, 1).is_err());
    }

    #[test]
    fn greedy_with_constant_supply_approaches_ln2() {
        let mut sys = SystemConfig::reference(1);
        sys.battery_capacity = 2.0;
        sys.max_transmit = 1.0;
        sys.action_grid = crate::env::ActionGrid::uniform(0.1, 1.0).unwrap();
        sys.initial_battery = 0.0;
        let channel = ChannelModel::Discrete {
            levels: vec![1.0],
            weights: None,
        };
        let env = Environment::new(sys.clone(), HarvestModel::new(1.0, 1e-12), channel).unwrap();
        let ev = evaluate_policy(&env, |s| Ok(greedy_action(s, &sys)), 10_000, 3).unwrap();
        // First slot has an empty battery, every later slot spends 1.
        assert!((ev.rps - 2f64.ln()).abs() < 1e-3, "{}", ev.rps);
    }
}
