use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mutualnet::{build_query_table, lookup, ModelSpec, SamplingSpec};
use mutualnet_harness::artifacts;
use mutualnet_harness::config::{builtin_model, default_resolution_set, DataConfig, ExperimentConfig, TrainMode};
use mutualnet_harness::desk::{run_desk, DeskOptions, DESK_MODES};
use mutualnet_harness::report::{self, MeasuredTimes, Series};
use mutualnet_harness::{dataset, experiment};

#[derive(Parser)]
#[command(name = "mutualnet", version, about = "Train, calibrate and deploy width-resolution slimmable networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) the network described by a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many completed epochs; rerun to resume.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Recompute normalization statistics for every evaluation configuration.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate every configuration on the validation split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reduce the accuracy table to the budget → configuration staircase.
    BuildTable {
        #[arg(long)]
        config: PathBuf,
    },
    /// Best configuration for a budget, from a stored query table.
    Lookup {
        /// A query_table.csv or the run directory holding one.
        #[arg(long)]
        table: PathBuf,
        /// Budget in MFLOPs.
        #[arg(long)]
        budget: f64,
    },
    /// Train, calibrate, evaluate and build the table in one go.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Accuracy-FLOPs curves (CSV and SVG) for a finished run.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Extra curves as LABEL=RUN_DIR.
        #[arg(long = "baseline")]
        baselines: Vec<String>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-configuration FLOPs of a model.
    Cost {
        /// Builtin model name or ModelSpec JSON path.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0.05)]
        width_step: f64,
        /// Defaults to the base resolution.
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<u32>,
        /// Defaults to the base frame count.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<u32>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expected mutual-learning training cost against independent models.
    Accounting {
        #[arg(long, default_value = "mobilenet_v1")]
        model: String,
        /// Defaults to the model's width bounds.
        #[arg(long)]
        width_lower: Option<f64>,
        #[arg(long)]
        width_upper: Option<f64>,
        #[arg(long, default_value_t = 2)]
        n_random: usize,
        /// Defaults to the model's usual training resolutions.
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<u32>,
        /// Independent-model FLOPs multipliers; pass an empty string for none.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9,1.0")]
        scales: Vec<String>,
        /// Measured minutes per epoch: one per scale, then MutualNet.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
    },
    /// Print a builtin architecture as JSON (`tiny_slowfast` is the
    /// two-branch 3D spec).
    ShowModel {
        name: String,
    },
    /// The four-way CIFAR-10 desk experiment.
    Desk {
        #[arg(long, default_value = "runs/desk")]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        epochs: u64,
        /// CIFAR-10 root (holding cifar-10-batches-bin).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        no_download: bool,
        /// Use only the first N training images.
        #[arg(long, default_value_t = 0)]
        train_limit: usize,
        #[arg(long, default_value_t = 0.05)]
        width_step: f64,
        /// Subset of modes, comma separated.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
}

fn load_model(name: &str) -> Result<ModelSpec> {
    if let Some(m) = builtin_model(name) {
        return Ok(m);
    }
    let text = std::fs::read_to_string(name).with_context(|| format!("{name} is neither a builtin model nor a readable file"))?;
    Ok(ModelSpec::from_json(&text)?)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    DESK_MODES
        .into_iter()
        .find(|m| m.name() == s)
        .with_context(|| format!("unknown mode {s:?}"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, stop_after } => {
            let cfg = load_config(&config)?;
            let ds = dataset::load(&cfg.data)?;
            let t = experiment::train(&cfg, &ds, stop_after)?;
            println!("{} epochs completed; checkpoint in {}", t.epochs_completed, cfg.output_dir.display());
        }
        Command::Calibrate { config } => {
            let cfg = load_config(&config)?;
            let net = experiment::load_network(&cfg)?;
            let ds = dataset::load(&cfg.data)?;
            let bank = experiment::calibrate_grid(&cfg, &net, &ds)?;
            artifacts::save_bank(&cfg.output_dir, &bank, &cfg.hash())?;
            println!("calibrated {} configurations", bank.len());
        }
        Command::Evaluate { config } => {
            let cfg = load_config(&config)?;
            let hash = cfg.hash();
            let net = experiment::load_network(&cfg)?;
            let bank = artifacts::load_bank(&cfg.output_dir, Some(&hash))?;
            let ds = dataset::load(&cfg.data)?;
            let acc = experiment::evaluate(&cfg, &net, &bank, &ds)?;
            artifacts::save_accuracy(&cfg.output_dir, &acc, net.spec(), &hash)?;
            let best = acc.rows.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy));
            if let Some(b) = best {
                println!("evaluated {} configurations; best {} at {:.2}%", acc.rows.len(), b.config, 100.0 * b.accuracy);
            }
        }
        Command::BuildTable { config } => {
            let cfg = load_config(&config)?;
            let acc = artifacts::load_accuracy(&cfg.output_dir, Some(&cfg.hash()))?;
            let model = cfg.model_spec()?;
            let table = build_query_table(&acc, &model)?;
            artifacts::save_query_table(&cfg.output_dir.join(artifacts::QUERY_TABLE_FILE), &table)?;
            println!("{} entries", table.entries().len());
        }
        Command::Lookup { table, budget } => {
            let path = if table.is_dir() { table.join(artifacts::QUERY_TABLE_FILE) } else { table };
            let t = artifacts::load_query_table(&path)?;
            let (cfg, acc) = lookup(&t, budget * 1e6)?;
            println!(
                "width {} resolution {} frames {} accuracy {:.4}",
                cfg.width, cfg.resolution, cfg.frames, acc
            );
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let art = experiment::run_experiment(&cfg)?;
            println!(
                "run {} ({}) finished: {} table entries in {}",
                cfg.name,
                art.config_hash,
                art.table.entries().len(),
                art.dir.display()
            );
        }
        Command::Report { config, baselines, out } => {
            let cfg = load_config(&config)?;
            let model = cfg.model_spec()?;
            let main = artifacts::load_accuracy(&cfg.output_dir, Some(&cfg.hash()))?;
            let mut extra = Vec::new();
            for b in &baselines {
                let (label, dir) = b.split_once('=').with_context(|| format!("baseline {b:?} is not LABEL=RUN_DIR"))?;
                extra.push((label.to_string(), artifacts::load_accuracy(Path::new(dir), None)?));
            }
            let series: Vec<Series> = extra.iter().map(|(l, t)| Series { label: l.clone(), table: t }).collect();
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let files = report::report_curves(
                &dir,
                &model,
                &Series {
                    label: cfg.mode.name().into(),
                    table: &main,
                },
                &series,
            )?;
            println!("wrote {} and {}", files.csv.display(), files.svg.display());
        }
        Command::Cost {
            model,
            width_step,
            resolutions,
            frames,
            out,
        } => {
            let m = load_model(&model)?;
            let res = if resolutions.is_empty() { vec![m.base_resolution] } else { resolutions };
            let fr = if frames.is_empty() { vec![m.base_frames] } else { frames };
            let configs = mutualnet::enumerate_configs(&m, width_step, &res, &fr)?;
            let rows = mutualnet::cost::cost_table(&m, &configs)?;
            match out {
                Some(p) => artifacts::save_cost_table(&p, &rows)?,
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush()?;
                }
            }
        }
        Command::Accounting {
            model,
            width_lower,
            width_upper,
            n_random,
            resolutions,
            scales,
            times,
        } => {
            let m = load_model(&model)?;
            let sampling = SamplingSpec {
                width_lower: width_lower.unwrap_or(m.width_bounds[0]),
                width_upper: width_upper.unwrap_or(m.width_bounds[1]),
                n_random,
                resolution_set: if resolutions.is_empty() {
                    default_resolution_set(&m)
                } else {
                    resolutions
                },
                temporal_set: vec![m.base_frames],
                seed: 0,
            };
            let scales: Vec<f64> = scales
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad scale {s:?}")))
                .collect::<Result<_>>()?;
            let measured = times.split_last().map(|(&mutualnet, independent)| MeasuredTimes {
                independent: independent.to_vec(),
                mutualnet,
            });
            let r = report::accounting_report(&m, &sampling, &scales, measured.as_ref())?;
            print!("{}", r.render());
        }
        Command::ShowModel { name } => {
            if name == "tiny_slowfast" {
                println!("{}", serde_json::to_string_pretty(&mutualnet::archs::tiny_slowfast())?);
            } else {
                let m = builtin_model(&name).with_context(|| format!("unknown builtin model {name:?}"))?;
                println!("{}", m.to_json());
            }
        }
        Command::Desk {
            out,
            epochs,
            data_dir,
            no_download,
            train_limit,
            width_step,
            modes,
        } => {
            if epochs == 0 {
                bail!("--epochs must be positive");
            }
            let modes = if modes.is_empty() {
                DESK_MODES.to_vec()
            } else {
                modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?
            };
            let opts = DeskOptions {
                epochs,
                data: DataConfig::Cifar10 {
                    path: data_dir,
                    download: !no_download,
                    augment: true,
                    train_limit,
                },
                width_step,
                modes,
            };
            let s = run_desk(&out, &opts)?;
            println!("desk summary for {} runs written to {}", s.runs.len(), out.display());
        }
    }
    Ok(())
}

