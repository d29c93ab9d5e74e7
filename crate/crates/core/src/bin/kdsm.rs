use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kdsm::eval::{aggregate, summary_table, FoldMetrics, MetricReport};
use kdsm::network::Mode;
use kdsm::pipeline::evaluate::evaluate_split;
use kdsm::pipeline::train::cluster_plan;
use kdsm::pipeline::{infer, train, AssignMode, Checkpoint, Start, TrainConfig};
use kdsm::synthworld::{read_pgm, write_dataset, Dataset, Setting, WorldConfig};
use kdsm::text::build_prompt;
use kdsm::{KdsmError, Result};

#[derive(Parser)]
#[command(name = "kdsm", version, about = "Open-vocabulary keypoint detection on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset directory.
    GenData {
        /// World configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the train-side categories of a fold into heatmap groups.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "B")]
        setting: Setting,
        #[arg(long)]
        fold: usize,
        /// Training configuration supplying O, the embedding source and the seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in configuration used when `--config` is absent.
        #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
        preset: String,
        /// Overrides the configured mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (its stored configuration wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out side of a fold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        fold: usize,
        #[arg(long, default_value = "max")]
        assign: AssignMode,
        /// Report label; defaults to the checkpoint's mode.
        #[arg(long)]
        label: Option<String>,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Locate prompted keypoints on one PGM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `species:category`, repeatable.
        #[arg(long = "prompt", required = true)]
        prompts: Vec<String>,
        #[arg(long, default_value = "max")]
        assign: AssignMode,
    },
    /// Merge evaluation reports and average per label over folds.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| KdsmError::io(path, e))
}

fn load_train_config(config: Option<&Path>, preset: &str, mode: Option<Mode>) -> Result<TrainConfig> {
    let mut cfg = match (config, preset) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, "full") => TrainConfig::full(),
        (None, _) => TrainConfig::desk(mode.unwrap_or_default()),
    };
    if let Some(m) = mode {
        cfg.model.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let wc = match config {
                Some(p) => {
                    let s = std::fs::read_to_string(&p).map_err(|e| KdsmError::io(&p, e))?;
                    toml::from_str::<WorldConfig>(&s).map_err(|e| KdsmError::Config(format!("{}: {e}", p.display())))?
                }
                None => WorldConfig::default(),
            };
            let world = write_dataset(&wc, &out)?;
            println!("wrote {} samples of {} species to {}", world.n_samples(), world.species.len(), out.display());
        }
        Cmd::Cluster {
            data,
            setting,
            fold,
            config,
            out,
        } => {
            let cfg = load_train_config(config.as_deref(), "desk", Some(Mode::Kdsm))?;
            let ds = Dataset::load(&data)?;
            let plan = ds.split(setting, fold)?;
            let grouping = cluster_plan(&cfg, &plan, &cfg.embedding_source()?)?;
            grouping.save(&out)?;
            print!("{}", grouping.sidecar());
        }
        Cmd::Train {
            config,
            preset,
            mode,
            data,
            setting,
            fold,
            out,
            resume,
        } => {
            let cfg = load_train_config(config.as_deref(), &preset, mode)?;
            let ds = Dataset::load(&data)?;
            let plan = ds.split(setting, fold)?;
            let start = match resume {
                Some(p) => Start::Resume(Box::new(Checkpoint::load_with(&p, Some(&cfg))?)),
                None => Start::Fresh,
            };
            let done = train(&cfg, &ds.samples, &plan, start, Some(&out))?;
            let last = done.losses.last().map(|e| e.loss).unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}, checkpoint {}", done.checkpoint.meta.step, out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            setting,
            fold,
            assign,
            label,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let plan = ds.split(setting, fold)?;
            if (ck.meta.setting, ck.meta.fold) != (setting, fold) {
                log::warn!(
                    "checkpoint was trained on setting {} fold {}; evaluating setting {setting} fold {fold}",
                    ck.meta.setting,
                    ck.meta.fold
                );
            }
            let metrics = evaluate_split(&ck, &ds.samples, &plan, assign)?;
            let label = label.unwrap_or_else(|| format!("{} setting {setting}", ck.meta.config.model.mode));
            let report = aggregate(&label, &[metrics])?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write(&p, &report.to_json())?;
            }
        }
        Cmd::Infer {
            ckpt,
            image,
            prompts,
            assign,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let img = read_pgm(&image)?;
            let specs = prompts
                .iter()
                .map(|p| {
                    let (s, c) = p
                        .split_once(':')
                        .ok_or_else(|| KdsmError::Usage(format!("prompt {p:?} is not `species:category`")))?;
                    build_prompt(s.trim(), c.trim())
                })
                .collect::<Result<Vec<_>>>()?;
            for k in infer(&ck, &img, &specs, assign)? {
                println!("{}", serde_json::to_string(&k).expect("keypoint serializes"));
            }
        }
        Cmd::Report { inputs, out } => {
            let mut by_label: BTreeMap<String, Vec<FoldMetrics>> = BTreeMap::new();
            for p in &inputs {
                let s = std::fs::read_to_string(p).map_err(|e| KdsmError::io(p, e))?;
                let r = MetricReport::from_json(&s)?;
                by_label.entry(r.label).or_default().extend(r.folds);
            }
            let reports = by_label
                .iter()
                .map(|(label, folds)| aggregate(label, folds))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", summary_table(&reports));
            if let Some(p) = out {
                let s = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
                write(&p, &s)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
