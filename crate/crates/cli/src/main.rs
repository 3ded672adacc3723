use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ehmac::central::{self, CentralPolicy};
use ehmac::harness::{
    aggregate, eval_seed, named_scenario, run_experiment, train_central_for_seed,
    write_aggregate_csv, ExperimentConfig, Method, MetricsRecord, ScenarioOutput, StageResult,
    Staged, SweepAxis, SweepParameter, SCENARIOS,
};
use ehmac::offline::{self, Dataset};

/// Energy-harvesting multiple-access experiments.
#[derive(Debug, Parser)]
#[command(name = "ehmac", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in scenario to start from (see `list-scenarios`).
    #[arg(long, global = true, value_name = "NAME")]
    scenario: Option<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve offline instances and write the training set.
    OfflineGen,
    /// Train the central network (from `--dataset` or freshly generated data).
    TrainCentral {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a saved central network.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Fictitious play with mean-field reward estimates.
    RunMfmarl,
    /// Cooperative Q-learning on the broadcast sum-rate.
    RunCoop,
    /// Central network driven by sampled neighbour states.
    RunDistDnn,
    /// Tabular single-node baseline.
    BaselineMdp,
    /// Run every configured method over the configured sweep axes.
    Sweep {
        /// Extra axis, e.g. `m=4,6,8` or `K=4,12,20` (parameters: m, v, K, buffer, T).
        #[arg(long, value_name = "PARAM=VALUES")]
        axis: Vec<String>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// List built-in scenario names.
    ListScenarios,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(common: &Common) -> StageResult<ExperimentConfig> {
    let mut config = match (&common.config, &common.scenario) {
        (Some(_), Some(_)) => {
            return Err(ehmac::Error::invalid(
                "pass either --config or --scenario, not both",
            ))
            .stage("config");
        }
        (Some(path), None) => ExperimentConfig::load(path).stage("config")?,
        (None, Some(name)) => named_scenario(name).stage("config")?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate().stage("config")?;
    Ok(config)
}

fn parse_axis(text: &str) -> StageResult<SweepAxis> {
    let invalid = |msg: String| Err(ehmac::Error::invalid(msg)).stage("config");
    let Some((name, values)) = text.split_once('=') else {
        return invalid(format!("axis {text:?} is not PARAM=VALUES"));
    };
    let parameter = match name.trim() {
        "m" => SweepParameter::HarvestMean,
        "v" => SweepParameter::HarvestVariance,
        "K" | "k" => SweepParameter::NumNodes,
        "buffer" => SweepParameter::BufferCapacity,
        "T" => SweepParameter::BroadcastPeriod,
        other => return invalid(format!("unknown sweep parameter {other:?}")),
    };
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| ehmac::Error::invalid(format!("axis value {v:?}: {e}")))
        })
        .collect::<ehmac::Result<Vec<_>>>()
        .stage("config")?;
    Ok(SweepAxis { parameter, values })
}

fn write_output(output: &ScenarioOutput, dir: &Path) -> StageResult<()> {
    output.write_to(dir).stage("emit")?;
    for r in &output.records {
        let pct = r
            .percent_of_reference
            .map_or(String::new(), |p| format!(" ({p:.2}% of reference)"));
        println!(
            "{} {} seed {}: {:.4} nats/slot{}",
            r.scenario, r.method, r.seed, r.rps, pct
        );
    }
    log::info!(
        "wrote {} records to {}",
        output.records.len(),
        dir.display()
    );
    Ok(())
}

fn run_methods(mut config: ExperimentConfig, methods: Vec<Method>) -> StageResult<()> {
    config.methods = methods;
    let output = run_experiment(&config)?;
    write_output(&output, &config.output_dir)
}

fn run(cli: Cli) -> StageResult<()> {
    let config = resolve(&cli.common)?;
    let out_dir = config.output_dir.clone();
    match cli.command {
        Command::ListScenarios => {
            for name in SCENARIOS {
                println!("{name}");
            }
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", config.to_toml().stage("config")?);
            Ok(())
        }
        Command::OfflineGen => {
            let env = config.environment().stage("config")?;
            std::fs::create_dir_all(&out_dir)
                .map_err(ehmac::Error::from)
                .stage("emit")?;
            for &seed in &config.seeds {
                let data = offline::generate_dataset(
                    config.offline.train_instances,
                    config.offline.horizon,
                    &env,
                    &config.solver,
                    seed,
                )
                .stage("offline-gen")?;
                let path = out_dir.join(format!("dataset_seed{seed}.csv"));
                let file = std::fs::File::create(&path)
                    .map_err(ehmac::Error::from)
                    .stage("emit")?;
                data.write_csv(std::io::BufWriter::new(file))
                    .stage("emit")?;
                println!(
                    "seed {seed}: {} records, mean offline rate {:.4} nats/slot, {} dropped -> {}",
                    data.len(),
                    data.mean_rate,
                    data.dropped,
                    path.display()
                );
            }
            Ok(())
        }
        Command::TrainCentral { dataset } => {
            let env = config.environment().stage("config")?;
            std::fs::create_dir_all(&out_dir)
                .map_err(ehmac::Error::from)
                .stage("emit")?;
            for &seed in &config.seeds {
                let policy = match &dataset {
                    Some(path) => {
                        let file = std::fs::File::open(path)
                            .map_err(ehmac::Error::from)
                            .stage("offline-gen")?;
                        let data = Dataset::read_csv(std::io::BufReader::new(file))
                            .stage("offline-gen")?;
                        let mut c = config.central.clone();
                        c.init_seed = seed;
                        c.training.seed = seed;
                        central::train_central(&data, &env.system, &c).stage("train-central")?
                    }
                    None => train_central_for_seed(&config, &env, seed)?,
                };
                let path = out_dir.join(format!("central_seed{seed}.json"));
                policy.save(&path).stage("emit")?;
                println!(
                    "seed {seed}: validation mse {:.4} (constant predictor {:.4}) -> {}",
                    policy.validation_mse,
                    policy.constant_mse,
                    path.display()
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint } => {
            let policy = CentralPolicy::load(&checkpoint).stage("eval")?;
            let mut env = config.environment().stage("config")?;
            env.system = policy.system.clone();
            let mut records = Vec::new();
            for &seed in &config.seeds {
                let ev = central::evaluate_policy(
                    &env,
                    |s| policy.act(s),
                    config.eval_slots,
                    eval_seed(seed),
                )
                .stage("eval")?;
                records.push(MetricsRecord {
                    scenario: config.scenario.clone(),
                    method: Method::CentralDnn,
                    m: config.harvest.mean,
                    v: config.harvest.variance,
                    k: env.num_nodes(),
                    seed,
                    rps: ev.rps,
                    percent_of_reference: None,
                    wall_time_s: 0.0,
                });
            }
            write_output(
                &ScenarioOutput {
                    records,
                    artifacts: Vec::new(),
                },
                &out_dir,
            )
        }
        Command::RunMfmarl => run_methods(config, vec![Method::Mfmarl]),
        Command::RunCoop => run_methods(config, vec![Method::CoopQ]),
        Command::RunDistDnn => run_methods(config, vec![Method::DistDnn]),
        Command::BaselineMdp => run_methods(config, vec![Method::Mdp]),
        Command::Sweep { axis } => {
            let mut config = config;
            for a in &axis {
                config.sweep.push(parse_axis(a)?);
            }
            let output = run_experiment(&config)?;
            write_output(&output, &out_dir)?;
            let groups = aggregate(&output.records);
            let file = std::fs::File::create(out_dir.join("aggregate.csv"))
                .map_err(ehmac::Error::from)
                .stage("emit")?;
            write_aggregate_csv(&groups, std::io::BufWriter::new(file)).stage("emit")?;
            for g in &groups {
                println!(
                    "{} {}: {:.4} +- {:.4} over {} seeds",
                    g.scenario, g.method, g.mean_rps, g.std_rps, g.seeds
                );
            }
            Ok(())
        }
    }
}
