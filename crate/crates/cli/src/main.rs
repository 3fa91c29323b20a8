//! `gvi-abm`: synthesize populations, generate ground truth, calibrate a flow
//! posterior, and emit posterior samples and predictive trajectories.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numeric failure.
//! Diagnostics go to standard error; data only ever goes to files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use gvi_abm::config::RunConfig;
use gvi_abm::flow::{CheckpointMeta, FlowModel, Prior};
use gvi_abm::pipeline;
use gvi_abm::population::{LocationKind, Population};
use gvi_abm::predictive::{self, Band, ThetaSource};
use gvi_abm::simulator::Trajectory;
use gvi_abm::Error;

#[derive(Parser, Debug)]
#[command(name = "gvi-abm", version, about = "Generalised variational calibration of epidemic agent-based models")]
struct Cli {
    /// TOML run configuration; omitted sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for simulations (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides the configuration's `out_dir`.
    #[arg(long, global = true, env = "GVI_ABM_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a population and write it to a file.
    SynthPop {
        /// Default: `<out_dir>/population.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate once at fixed intensities and write the trajectory CSV.
    GenTruth {
        /// Household, school and company intensities, each in (0, 2).
        #[arg(long, num_args = 3, value_names = ["HOUSEHOLD", "SCHOOL", "COMPANY"], allow_negative_numbers = true)]
        beta: Vec<f64>,
        /// Population file; synthesized from the configuration when omitted.
        #[arg(long)]
        population: Option<PathBuf>,
        /// Default: `<out_dir>/truth.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the flow posterior against an observed trajectory.
    Calibrate {
        /// Trajectory CSV (`day,new_infections,log_new_infections`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        population: Option<PathBuf>,
    },
    /// Draw posterior samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 10_000)]
        n: usize,
        /// Default: `<out_dir>/samples.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate trajectories at parameters drawn from the prior or a checkpoint.
    Predictive {
        /// Required when `--source flow`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Source::Flow)]
        source: Source,
        #[arg(short, long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        population: Option<PathBuf>,
        /// Default: `<out_dir>/predictive.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the pointwise 5–95% band of the log-series here.
        #[arg(long)]
        band: Option<PathBuf>,
        /// Report band coverage of this trajectory CSV on standard error.
        #[arg(long)]
        observed: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Prior,
    Flow,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::SupportViolation(_) => 3,
        Error::Domain { .. } => 2,
        e if e.is_input_error() => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config {
                field: "--threads".into(),
                message: "must be at least 1".into(),
            });
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("effective_config.toml"), &cfg.to_toml())?;

    match cli.command {
        Command::SynthPop { out } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.join("population.txt"));
            let pop = pipeline::population(&cfg)?;
            pop.save(&out)?;
            eprintln!(
                "wrote {} agents ({} households, {} schools, {} companies) to {}",
                pop.len(),
                pop.group_count(LocationKind::Household),
                pop.group_count(LocationKind::School),
                pop.group_count(LocationKind::Company),
                out.display()
            );
        }
        Command::GenTruth { beta, population, out } => {
            let beta = [beta[0], beta[1], beta[2]];
            let out = out.unwrap_or_else(|| cfg.out_dir.join("truth.csv"));
            let sim = pipeline::simulator(&cfg, load_population(&cfg, population.as_deref())?)?;
            let truth = pipeline::generate_truth(&cfg, &sim, beta)?;
            truth.write_csv(&out)?;
            let total: f64 = truth.new_infections.iter().sum();
            eprintln!("wrote {} days ({total} infections after day 0) to {}", truth.horizon(), out.display());
        }
        Command::Calibrate { data, population } => {
            let observed = Trajectory::read_csv(&data)?;
            let pop = load_population(&cfg, population.as_deref())?;
            let result = pipeline::calibrate(&cfg, pop, &observed, |r| {
                eprintln!(
                    "epoch {:>4}  score {:>12.3}  kl {:>8.4}  total {:>12.3}  val {:>12.3}",
                    r.epoch, r.score_term, r.kl_term, r.total_loss, r.val_loss
                );
            })?;
            let outcome = &result.outcome;
            let best_loss = outcome.best_val_loss();
            outcome.best.save(
                cfg.out_dir.join("best.json"),
                CheckpointMeta {
                    epoch: outcome.best_epoch,
                    loss: best_loss,
                    label: "best".into(),
                },
            )?;
            let last = outcome.log.last();
            outcome.final_flow.save(
                cfg.out_dir.join("final.json"),
                CheckpointMeta {
                    epoch: last.map_or(0, |r| r.epoch),
                    loss: last.map(|r| r.val_loss),
                    label: "final".into(),
                },
            )?;
            outcome.write_log(cfg.out_dir.join("training_log.csv"))?;
            let summary = serde_json::to_string_pretty(&result.summary).expect("summary serializes");
            write(&cfg.out_dir.join("summary.json"), &(summary + "\n"))?;
            let m = result.summary.posterior.means;
            eprintln!(
                "stopped ({:?}) after {} epochs, {} simulations; posterior means {:.3} {:.3} {:.3}",
                result.summary.stop_reason, result.summary.epochs, result.summary.sims_used, m[0], m[1], m[2]
            );
        }
        Command::Sample { checkpoint, n, out } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.join("samples.csv"));
            let (flow, _) = FlowModel::load(&checkpoint, Some(&cfg.flow))?;
            let draws = predictive::posterior_draws(&flow, n, cfg.seed)?;
            write(&out, &predictive::samples_csv(&draws))?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
        Command::Predictive {
            checkpoint,
            source,
            n,
            population,
            out,
            band,
            observed,
        } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.join("predictive.csv"));
            let flow = match &checkpoint {
                Some(path) => Some(FlowModel::load(path, Some(&cfg.flow))?.0),
                None => None,
            };
            let source = match source {
                Source::Prior => ThetaSource::Prior,
                Source::Flow => ThetaSource::Flow,
            };
            let observed = observed.map(Trajectory::read_csv).transpose()?;
            let sim = pipeline::simulator(&cfg, load_population(&cfg, population.as_deref())?)?;
            let thetas = predictive::draw_thetas(source, flow.as_ref(), &Prior::default(), n, cfg.seed)?;
            let trajectories = predictive::simulate(&sim, &thetas, cfg.seed)?;
            write(&out, &predictive::trajectories_csv(&trajectories))?;
            let bounds = Band::of(&trajectories, 0.05, 0.95)?;
            if let Some(path) = band {
                write(&path, &band_csv(&bounds))?;
            }
            eprintln!("wrote {n} trajectories to {}; mean band width {:.4}", out.display(), bounds.mean_width());
            if let Some(obs) = observed {
                if obs.horizon() != bounds.lower.len() {
                    return Err(Error::Contract(format!(
                        "observed series has {} days, simulations have {}",
                        obs.horizon(),
                        bounds.lower.len()
                    )));
                }
                eprintln!("observed series inside the band on {:.1}% of days", 100.0 * bounds.coverage(&obs.log_series));
            }
        }
    }
    Ok(())
}

fn load_population(cfg: &RunConfig, path: Option<&Path>) -> Result<Arc<Population>, Error> {
    match path {
        Some(p) => {
            let pop = Population::load(p)?;
            if pop.config_hash() != cfg.population.hash() {
                eprintln!("warning: {} was synthesized from a different population config", p.display());
            }
            Ok(Arc::new(pop))
        }
        None => pipeline::population(cfg),
    }
}

fn band_csv(band: &Band) -> String {
    let mut out = String::from("day,lower,upper\n");
    for (d, (lo, hi)) in band.lower.iter().zip(&band.upper).enumerate() {
        out.push_str(&format!("{},{lo:.6},{hi:.6}\n", d + 1));
    }
    out
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
