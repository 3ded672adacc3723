//! Experiment configuration, scenario pipelines, sweeps and metrics output.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::central::{self, CentralConfig, CentralPolicy};
use crate::env::{ActionGrid, ChannelModel, Environment, HarvestModel, SystemConfig};
use crate::error::{Error, Result};
use crate::mdp::{self, MdpConfig};
use crate::mfg::{self, DistributedConfig, MfmarlConfig, RewardMode};
use crate::offline::{self, SolverSettings};
use crate::statespace::{write_distributions_csv, GridSpec};

/// Pipeline that produces one metrics record per seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Offline,
    CentralDnn,
    Mfmarl,
    CoopQ,
    DistDnn,
    Mdp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Offline,
        Method::CentralDnn,
        Method::Mfmarl,
        Method::CoopQ,
        Method::DistDnn,
        Method::Mdp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Offline => "offline",
            Self::CentralDnn => "central-dnn",
            Self::Mfmarl => "mfmarl",
            Self::CoopQ => "coop-q",
            Self::DistDnn => "dist-dnn",
            Self::Mdp => "mdp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Offline data generation and reference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineSettings {
    /// Instances solved to build the central training set.
    pub train_instances: usize,
    /// Fresh instances solved for the offline reference rate.
    pub eval_instances: usize,
    /// Slots per instance.
    pub horizon: usize,
}

impl Default for OfflineSettings {
    fn default() -> Self {
        Self {
            train_instances: 1000,
            eval_instances: 200,
            horizon: 20,
        }
    }
}

/// Parameter varied by a sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    /// Harvest mean `m`.
    HarvestMean,
    /// Harvest variance `v`.
    HarvestVariance,
    /// Node count `K`.
    NumNodes,
    /// Replay buffer capacity of every learner.
    BufferCapacity,
    /// Slots between access-point broadcasts in the distributed network policy.
    BroadcastPeriod,
}

impl SweepParameter {
    pub fn label(self) -> &'static str {
        match self {
            Self::HarvestMean => "m",
            Self::HarvestVariance => "v",
            Self::NumNodes => "K",
            Self::BufferCapacity => "buffer",
            Self::BroadcastPeriod => "T",
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(format!(
                    "{} must be a positive integer, got {value}",
                    self.label()
                )))
            }
        };
        match self {
            Self::HarvestMean => config.harvest.mean = value,
            Self::HarvestVariance => config.harvest.variance = value,
            Self::NumNodes => config.system.num_nodes = count()?,
            Self::BufferCapacity => config.mfmarl.dqn.buffer_capacity = count()?,
            Self::BroadcastPeriod => config.distributed.broadcast_period = count()? as u64,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// Everything needed to run one scenario. Energies are in harvest units,
/// rates in nats, durations in slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Slots per policy evaluation rollout.
    pub eval_slots: u64,
    /// Trailing window, in slots, of the RPS column in learning histories.
    pub history_window: usize,
    pub output_dir: PathBuf,
    /// Record elapsed seconds; off by default so reruns are byte-identical.
    pub record_wall_time: bool,
    /// Cartesian product of these axes is swept when non-empty.
    pub sweep: Vec<SweepAxis>,
    pub system: SystemConfig,
    pub harvest: HarvestModel,
    pub channel: ChannelModel,
    /// Discretization used by the mean-field layer.
    pub grid: GridSpec,
    pub solver: SolverSettings,
    pub offline: OfflineSettings,
    pub central: CentralConfig,
    pub mfmarl: MfmarlConfig,
    pub distributed: DistributedConfig,
    pub mdp: MdpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "custom".into(),
            methods: vec![Method::Offline],
            seeds: vec![1],
            eval_slots: 100_000,
            history_window: 100,
            output_dir: PathBuf::from("out"),
            record_wall_time: false,
            sweep: Vec::new(),
            system: SystemConfig::reference(5),
            harvest: HarvestModel::default(),
            channel: ChannelModel::default(),
            grid: GridSpec::default(),
            solver: SolverSettings::default(),
            offline: OfflineSettings::default(),
            central: CentralConfig::default(),
            mfmarl: MfmarlConfig::default(),
            distributed: DistributedConfig::default(),
            mdp: MdpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods selected"));
        }
        if self.eval_slots == 0 {
            return Err(Error::invalid("eval_slots must be positive"));
        }
        for axis in &self.sweep {
            if axis.values.is_empty() {
                return Err(Error::invalid(format!(
                    "sweep over {} has no values",
                    axis.parameter.label()
                )));
            }
        }
        self.environment()?;
        self.mfmarl.validate()?;
        self.mfmarl.dqn.validate()
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(
            self.system.clone(),
            self.harvest.clone(),
            self.channel.clone(),
        )
    }

    /// Configurations produced by expanding the sweep axes, each tagged with
    /// its axis values in the scenario name.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        let mut configs = vec![Self {
            sweep: Vec::new(),
            ..self.clone()
        }];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(configs.len() * axis.values.len());
            for base in &configs {
                for &value in &axis.values {
                    let mut c = base.clone();
                    axis.parameter.apply(&mut c, value)?;
                    c.scenario = format!("{}[{}={}]", base.scenario, axis.parameter.label(), value);
                    next.push(c);
                }
            }
            configs = next;
        }
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }
}

/// One row of results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub method: Method,
    /// Harvest mean.
    pub m: f64,
    /// Harvest variance.
    pub v: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    /// Rate per slot in nats.
    pub rps: f64,
    /// RPS as a percentage of the reference method of the same seed.
    pub percent_of_reference: Option<f64>,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: [&str; 9] = [
    "scenario",
    "method",
    "m_energy",
    "v_energy2",
    "K_nodes",
    "seed",
    "rps_nats",
    "percent_of_reference",
    "wall_time_s",
];

/// Failure of a named pipeline stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Attaches a stage tag to an error.
pub trait Staged<T> {
    fn stage(self, stage: &str) -> StageResult<T>;
}

impl<T> Staged<T> for Result<T> {
    fn stage(self, stage: &str) -> StageResult<T> {
        self.map_err(|source| StageError {
            stage: stage.to_string(),
            source,
        })
    }
}

/// Named output file produced by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOutput {
    pub records: Vec<MetricsRecord>,
    pub artifacts: Vec<Artifact>,
}

impl ScenarioOutput {
    fn extend(&mut self, other: ScenarioOutput) {
        self.records.extend(other.records);
        self.artifacts.extend(other.artifacts);
    }

    /// Writes `metrics.csv`, `metrics.json` and every artifact into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        emit(&self.records, Format::Csv, &dir.join("metrics.csv"))?;
        emit(&self.records, Format::Json, &dir.join("metrics.json"))?;
        for artifact in &self.artifacts {
            std::fs::write(dir.join(&artifact.name), &artifact.contents)?;
        }
        Ok(())
    }
}

/// Seed used for evaluation rollouts, kept apart from every training stream.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_e7a1_0000_0000
}

/// Seed used for the offline reference instances.
pub fn reference_seed(seed: u64) -> u64 {
    seed ^ 0x0ff1_13e0_0000_0000
}

struct Timer {
    start: Instant,
    enabled: bool,
}

impl Timer {
    fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn lap(&mut self) -> f64 {
        let elapsed = self.start.elapsed().as_secs_f64();
        self.start = Instant::now();
        if self.enabled {
            elapsed
        } else {
            0.0
        }
    }
}

fn percent(value: f64, reference: Option<f64>) -> Option<f64> {
    reference.filter(|r| *r > 0.0).map(|r| 100.0 * value / r)
}

/// Trains the central policy of one seed.
pub fn train_central_for_seed(
    config: &ExperimentConfig,
    env: &Environment,
    seed: u64,
) -> StageResult<CentralPolicy> {
    let data = offline::generate_dataset(
        config.offline.train_instances,
        config.offline.horizon,
        env,
        &config.solver,
        seed,
    )
    .stage("offline-gen")?;
    let mut central_config = config.central.clone();
    central_config.init_seed = seed;
    central_config.training.seed = seed;
    central::train_central(&data, &env.system, &central_config).stage("train-central")
}

/// Runs every selected method for every seed of a single (unswept) configuration.
pub fn run_scenario(config: &ExperimentConfig) -> StageResult<ScenarioOutput> {
    config.validate().stage("config")?;
    let env = config.environment().stage("config")?;
    let mut out = ScenarioOutput::default();
    let wants = |m: Method| config.methods.contains(&m);
    for &seed in &config.seeds {
        let mut timer = Timer::new(config.record_wall_time);
        let record = |method: Method, rps: f64, reference: Option<f64>, wall: f64| MetricsRecord {
            scenario: config.scenario.clone(),
            method,
            m: config.harvest.mean,
            v: config.harvest.variance,
            k: config.system.num_nodes,
            seed,
            rps,
            percent_of_reference: percent(rps, reference),
            wall_time_s: wall,
        };
        let tag = |name: &str| format!("{}_{}_seed{}", sanitize(&config.scenario), name, seed);

        let offline_rps = if wants(Method::Offline) {
            let rps = offline::offline_rate(
                config.offline.eval_instances,
                config.offline.horizon,
                &env,
                &config.solver,
                reference_seed(seed),
            )
            .stage("offline")?;
            out.records
                .push(record(Method::Offline, rps, None, timer.lap()));
            Some(rps)
        } else {
            None
        };

        let mut central_rps = None;
        let central_policy = if wants(Method::CentralDnn) || wants(Method::DistDnn) {
            let policy = train_central_for_seed(config, &env, seed)?;
            let mut ck = Vec::new();
            serde_json::to_writer(&mut ck, &policy.checkpoint())
                .map_err(Error::from)
                .stage("train-central")?;
            out.artifacts.push(Artifact {
                name: format!("{}.json", tag("central")),
                contents: ck,
            });
            if wants(Method::CentralDnn) {
                let ev = central::evaluate_policy(
                    &env,
                    |s| policy.act(s),
                    config.eval_slots,
                    eval_seed(seed),
                )
                .stage("eval")?;
                central_rps = Some(ev.rps);
                out.records
                    .push(record(Method::CentralDnn, ev.rps, offline_rps, timer.lap()));
            }
            Some(policy)
        } else {
            None
        };
        let learned_reference = central_rps.or(offline_rps);

        for (method, mode) in [
            (Method::Mfmarl, RewardMode::MeanFieldEstimate),
            (Method::CoopQ, RewardMode::ApBroadcast),
        ] {
            if !wants(method) {
                continue;
            }
            let mut mf_config = config.mfmarl.clone();
            mf_config.reward_mode = mode;
            mf_config.seed = seed;
            mf_config.grid = config.grid;
            let outcome = mfg::run_mfmarl(&env, &mf_config).stage(method.label())?;
            let rps = outcome.tail_rps(mf_config.score_fraction);
            out.records
                .push(record(method, rps, learned_reference, timer.lap()));
            let mut history = Vec::new();
            outcome
                .write_history_csv(&mut history, config.history_window)
                .stage(method.label())?;
            out.artifacts.push(Artifact {
                name: format!("{}.csv", tag(&format!("{}_history", method.label()))),
                contents: history,
            });
            let mut belief = Vec::new();
            write_distributions_csv(&mut belief, &[("belief".to_string(), &outcome.belief)])
                .stage(method.label())?;
            out.artifacts.push(Artifact {
                name: format!("{}.csv", tag(&format!("{}_belief", method.label()))),
                contents: belief,
            });
        }

        if wants(Method::DistDnn) {
            let policy = central_policy.as_ref().expect("trained above");
            let dist_config = DistributedConfig {
                seed: eval_seed(seed),
                grid: config.grid,
                ..config.distributed.clone()
            };
            let outcome = mfg::run_distributed_dnn(&env, policy, &dist_config).stage("dist-dnn")?;
            out.records.push(record(
                Method::DistDnn,
                outcome.rps,
                learned_reference,
                timer.lap(),
            ));
            let labelled: Vec<(String, _)> = outcome
                .beliefs
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("broadcast_{i}"), b))
                .collect();
            let mut beliefs = Vec::new();
            write_distributions_csv(&mut beliefs, &labelled).stage("dist-dnn")?;
            out.artifacts.push(Artifact {
                name: format!("{}.csv", tag("dist-dnn_beliefs")),
                contents: beliefs,
            });
            let mut history = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| StageError {
                stage: "dist-dnn".into(),
                source: e.into(),
            };
            history
                .write_record(["slot", "reward", "rps"])
                .map_err(csv_err)?;
            for (i, (r, w)) in outcome
                .rewards
                .iter()
                .zip(mfg::sliding_rps(&outcome.rewards, config.history_window))
                .enumerate()
            {
                history
                    .write_record(&[(i + 1).to_string(), r.to_string(), w.to_string()])
                    .map_err(csv_err)?;
            }
            let contents = history.into_inner().map_err(|e| StageError {
                stage: "dist-dnn".into(),
                source: e.into_error().into(),
            })?;
            out.artifacts.push(Artifact {
                name: format!("{}.csv", tag("dist-dnn_history")),
                contents,
            });
        }

        if wants(Method::Mdp) {
            let model = mdp::build_p2p_mdp(&env, &config.mdp).stage("mdp")?;
            let table =
                mdp::value_iteration(&model.mdp, config.mdp.tolerance, config.mdp.max_iters)
                    .stage("mdp")?;
            let ev = central::evaluate_policy(
                &env,
                |s| Ok(s.nodes.iter().map(|n| model.act(&table, n)).collect()),
                config.eval_slots,
                eval_seed(seed),
            )
            .stage("eval")?;
            out.records
                .push(record(Method::Mdp, ev.rps, offline_rps, timer.lap()));
            let mut values = Vec::new();
            model.write_value_csv(&table, &mut values).stage("mdp")?;
            out.artifacts.push(Artifact {
                name: format!("{}.csv", tag("mdp_values")),
                contents: values,
            });
        }
    }
    Ok(out)
}

/// Expands the sweep axes and runs every resulting configuration.
pub fn run_experiment(config: &ExperimentConfig) -> StageResult<ScenarioOutput> {
    let mut out = ScenarioOutput::default();
    for c in config.expand().stage("config")? {
        log::info!("running {}", c.scenario);
        out.extend(run_scenario(&c)?);
    }
    Ok(out)
}

/// Runs `template` once per value of `axis` (on top of any axes it already sweeps).
pub fn sweep(template: &ExperimentConfig, axis: SweepAxis) -> StageResult<Vec<MetricsRecord>> {
    let mut config = template.clone();
    config.sweep.push(axis);
    Ok(run_experiment(&config)?.records)
}

/// Seed-averaged summary of one (scenario, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenario: String,
    pub method: Method,
    pub m: f64,
    pub v: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seeds: usize,
    pub mean_rps: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_rps: f64,
}

/// Groups records by scenario and method in first-appearance order.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<Aggregate> {
    let mut groups: Vec<(String, Method, f64, f64, usize, Vec<f64>)> = Vec::new();
    for r in records {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.scenario && g.1 == r.method)
        {
            Some(g) => g.5.push(r.rps),
            None => groups.push((r.scenario.clone(), r.method, r.m, r.v, r.k, vec![r.rps])),
        }
    }
    groups
        .into_iter()
        .map(|(scenario, method, m, v, k, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Aggregate {
                scenario,
                method,
                m,
                v,
                k,
                seeds: values.len(),
                mean_rps: mean,
                std_rps: std,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for r in records {
        writer.write_record(&[
            r.scenario.clone(),
            r.method.label().to_string(),
            r.m.to_string(),
            r.v.to_string(),
            r.k.to_string(),
            r.seed.to_string(),
            r.rps.to_string(),
            r.percent_of_reference
                .map_or(String::new(), |p| p.to_string()),
            r.wall_time_s.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, records)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    Ok(serde_json::from_reader(input)?)
}

pub fn write_aggregate_csv<W: Write>(groups: &[Aggregate], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "scenario",
        "method",
        "m_energy",
        "v_energy2",
        "K_nodes",
        "seeds",
        "mean_rps_nats",
        "std_rps_nats",
    ])?;
    for g in groups {
        writer.write_record(&[
            g.scenario.clone(),
            g.method.label().to_string(),
            g.m.to_string(),
            g.v.to_string(),
            g.k.to_string(),
            g.seeds.to_string(),
            g.mean_rps.to_string(),
            g.std_rps.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the records to `path` in the given format.
pub fn emit(records: &[MetricsRecord], format: Format, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        Format::Csv => write_csv(records, file),
        Format::Json => write_json(records, file),
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Names accepted by [`named_scenario`].
pub const SCENARIOS: [&str; 9] = [
    "offline-only",
    "table2-desk",
    "table3-p2p",
    "table5-desk",
    "fig3-regime",
    "fig4-convergence",
    "fig6-buffer",
    "fig7-broadcast",
    "fig8-scaling",
];

/// Binary-action regime: `B_max = P_max = 1`, actions `{0, 1}`.
pub fn binary_system(num_nodes: usize) -> SystemConfig {
    SystemConfig {
        num_nodes,
        battery_capacity: 1.0,
        max_transmit: 1.0,
        action_grid: ActionGrid::new(vec![0.0, 1.0]).expect("valid grid"),
        power_scaling: false,
        initial_battery: 0.5,
    }
}

/// Built-in configurations for the table and figure reproductions.
pub fn named_scenario(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        scenario: name.to_string(),
        ..Default::default()
    };
    let axis = |parameter, values: &[f64]| SweepAxis {
        parameter,
        values: values.to_vec(),
    };
    let config = match name {
        "offline-only" => ExperimentConfig {
            methods: vec![Method::Offline],
            ..base
        },
        "table2-desk" => ExperimentConfig {
            methods: vec![Method::Offline, Method::CentralDnn],
            sweep: vec![axis(SweepParameter::HarvestMean, &[4.0, 6.0, 8.0])],
            ..base
        },
        "table3-p2p" => ExperimentConfig {
            methods: vec![Method::Offline, Method::CentralDnn, Method::Mdp],
            system: SystemConfig::reference(1),
            harvest: HarvestModel::new(10.0, 3.5),
            ..base
        },
        "table5-desk" => ExperimentConfig {
            methods: vec![
                Method::Offline,
                Method::CentralDnn,
                Method::Mfmarl,
                Method::CoopQ,
                Method::DistDnn,
            ],
            sweep: vec![axis(SweepParameter::HarvestMean, &[5.0, 8.0])],
            ..base
        },
        "fig3-regime" => {
            let mut c = ExperimentConfig {
                methods: vec![Method::Mfmarl],
                system: SystemConfig {
                    num_nodes: 20,
                    battery_capacity: 2.0,
                    max_transmit: 1.0,
                    action_grid: ActionGrid::uniform(0.1, 1.0)?,
                    power_scaling: false,
                    initial_battery: 1.0,
                },
                harvest: HarvestModel::new(0.01, 0.1),
                grid: GridSpec {
                    battery_bins: 4,
                    gain_bins: 4,
                    harvest_bins: 4,
                },
                sweep: vec![axis(SweepParameter::HarvestVariance, &[0.05, 0.1, 0.2])],
                ..base
            };
            c.mfmarl.min_training_slots = 20_000;
            c.mfmarl.max_training_slots = 40_000;
            c
        }
        "fig4-convergence" => ExperimentConfig {
            methods: vec![Method::Mfmarl, Method::CoopQ],
            harvest: HarvestModel::new(8.0, 3.5),
            ..base
        },
        "fig6-buffer" => ExperimentConfig {
            methods: vec![Method::Mfmarl],
            harvest: HarvestModel::new(8.0, 3.5),
            sweep: vec![axis(
                SweepParameter::BufferCapacity,
                &[64.0, 250.0, 1000.0, 2000.0, 5000.0],
            )],
            ..base
        },
        "fig7-broadcast" => ExperimentConfig {
            methods: vec![Method::DistDnn],
            harvest: HarvestModel::new(8.0, 3.5),
            sweep: vec![axis(
                SweepParameter::BroadcastPeriod,
                &[10.0, 100.0, 1000.0, 10_000.0],
            )],
            ..base
        },
        "fig8-scaling" => {
            let mut c = ExperimentConfig {
                methods: vec![Method::Mfmarl],
                system: binary_system(4),
                harvest: HarvestModel::new(0.3, 0.1),
                seeds: vec![1, 2],
                sweep: vec![
                    axis(SweepParameter::HarvestMean, &[0.3, 0.6]),
                    axis(SweepParameter::NumNodes, &[4.0, 12.0, 20.0]),
                ],
                ..base
            };
            c.mfmarl.min_training_slots = 20_000;
            c.mfmarl.max_training_slots = 40_000;
            c
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown scenario {other:?}; known: {}",
                SCENARIOS.join(", ")
            )));
        }
    };
    config.validate()?;
    Ok(config)
}
