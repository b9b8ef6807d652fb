//! `cfrl`: simulate, preprocess, train, evaluate and sweep from the shell.
//!
//! Every failure ends with a one-line JSON object on stderr,
//! `{"error": {"kind": ..., "message": ...}}`, and a nonzero exit code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfrl_core::evaluation::{evaluate, EvalConfig};
use cfrl_core::experiment::{read_results, run_experiment, ExperimentConfig, RESULTS_FILE};
use cfrl_core::io::{read_dataset, read_json, read_preprocessed, write_dataset, write_json, write_preprocessed};
use cfrl_core::plot::{plot_trends, Panel};
use cfrl_core::policy::{train_baseline, FqiConfig, Method, Policy, TrainInputs};
use cfrl_core::preprocess::{
    estimate_marginals, fit_transition_mean, preprocess_with, Marginals, MeanModel, MeanModelConfig,
};
use cfrl_core::{sample_dataset, CmdpSpec, Dataset, EnvKind, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cfrl", version, about = "Counterfactually fair offline RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a behavior-policy dataset from a synthetic environment.
    Simulate {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave the noise record out of the sidecar.
        #[arg(long)]
        no_noises: bool,
        /// Output CSV; the JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Transport a dataset into every counterfactual attribute world.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        mean: MeanArgs,
        /// Output CSV; the header JSON and fitted model JSON go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method's policy on a dataset.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        mean: MeanArgs,
        /// Use an existing `preprocess` output for `ours` instead of refitting.
        #[arg(long)]
        preprocessed: Option<PathBuf>,
        /// FQI settings as JSON.
        #[arg(long)]
        fqi_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report CF metric and discounted return of a policy.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 10_000)]
        n_subjects: usize,
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configured sweep and draw its trend plots.
    Experiment {
        /// Experiment configuration as JSON; omitted fields take defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        no_plots: bool,
    },
    /// Draw trend plots from a results table.
    Plot {
        #[arg(long)]
        results: PathBuf,
        /// Panel to draw; all three when omitted.
        #[arg(long)]
        panel: Option<Panel>,
        /// SVG path for a single panel, or a directory for all three.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, default_value = "linear")]
    env: EnvKind,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.0)]
    reward_noise_sd: f64,
}

impl EnvArgs {
    fn spec(&self) -> CmdpSpec {
        CmdpSpec::new(self.env, self.delta).with_reward_noise(self.reward_noise_sd)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MeanKind {
    /// Least squares on the configured basis (affine unless configured).
    Linear,
    /// Per-attribute network.
    Mlp,
    /// The simulator's own conditional means and marginals.
    Exact,
}

#[derive(Args)]
struct MeanArgs {
    #[arg(long, value_enum, default_value_t = MeanKind::Linear)]
    mean_model: MeanKind,
    /// Mean-model settings as JSON (overrides `--mean-model linear|mlp`).
    #[arg(long)]
    mean_config: Option<PathBuf>,
}

fn model_path(csv: &Path) -> PathBuf {
    csv.with_extension("model.json")
}

fn fit_mean(args: &MeanArgs, data: &Dataset, env: Option<&CmdpSpec>) -> Result<(MeanModel, Marginals), Error> {
    if let MeanKind::Exact = args.mean_model {
        let env = env.ok_or_else(|| Error::Argument("--mean-model exact needs a dataset whose sidecar records the env".into()))?;
        return Ok((MeanModel::Exact { env: env.clone() }, Marginals::exact(env)));
    }
    let config = match (&args.mean_config, args.mean_model) {
        (Some(path), _) => read_json(path)?,
        (None, MeanKind::Mlp) => MeanModelConfig::reference_mlp(0),
        _ => MeanModelConfig::default(),
    };
    Ok((fit_transition_mean(data, &config)?, estimate_marginals(data)?))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { env, n, horizon, seed, no_noises, out } => {
            let spec = env.spec();
            let mut data = sample_dataset(&spec, n, horizon, seed)?;
            if no_noises {
                data = data.without_noises();
            }
            write_dataset(&data, Some(&spec), &out)?;
            log::info!("wrote {} trajectories to {}", data.len(), out.display());
        }
        Command::Preprocess { data, mean, out } => {
            let (data, env) = read_dataset(&data)?;
            let (model, marginals) = fit_mean(&mean, &data, env.as_ref())?;
            let pre = preprocess_with(&data, &model, &marginals)?;
            write_preprocessed(&pre, &out)?;
            write_json(&model, &model_path(&out))?;
        }
        Command::Train { method, data, mean, preprocessed, fqi_config, out } => {
            let (data, env) = read_dataset(&data)?;
            let fqi: FqiConfig = match fqi_config {
                Some(path) => read_json(&path)?,
                None => FqiConfig::default(),
            };
            let fitted = if method == Method::Ours {
                Some(match preprocessed {
                    Some(path) => (read_json::<MeanModel>(&model_path(&path))?, read_preprocessed(&path)?),
                    None => {
                        let (model, marginals) = fit_mean(&mean, &data, env.as_ref())?;
                        let pre = preprocess_with(&data, &model, &marginals)?;
                        (model, pre)
                    }
                })
            } else {
                None
            };
            let inputs = TrainInputs {
                env: env.as_ref(),
                preprocessed: fitted.as_ref().map(|f| &f.1),
                mean_model: fitted.as_ref().map(|f| &f.0),
            };
            let policy = train_baseline(method, &data, inputs, &fqi)?;
            write_json(&policy, &out)?;
        }
        Command::Evaluate { policy, env, n_subjects, horizon, gamma, seed, out } => {
            let policy: Policy = read_json(&policy)?;
            let report = evaluate(&policy, &env.spec(), &EvalConfig { n_subjects, horizon, gamma, seed })?;
            match out {
                Some(path) => write_json(&report, &path)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Experiment { config, out_dir, no_plots } => {
            let config: ExperimentConfig = read_json(&config)?;
            let table = run_experiment(&config, &out_dir)?;
            if !table.failures.is_empty() {
                log::warn!("{} cells failed; see errors.csv", table.failures.len());
            }
            if !no_plots && !table.rows.is_empty() {
                for panel in Panel::ALL {
                    plot_trends(&table.rows, panel, &out_dir.join(format!("{}.svg", panel.name())))?;
                }
            }
            println!(
                "{}",
                json!({
                    "rows": table.rows.len(),
                    "failures": table.failures.len(),
                    "results": out_dir.join(RESULTS_FILE),
                })
            );
        }
        Command::Plot { results, panel, out } => {
            let rows = read_results(&results)?;
            match panel {
                Some(panel) => plot_trends(&rows, panel, &out)?,
                None => {
                    std::fs::create_dir_all(&out)?;
                    for panel in Panel::ALL {
                        plot_trends(&rows, panel, &out.join(format!("{}.svg", panel.name())))?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
