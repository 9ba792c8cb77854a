//! `udalign` — train, adapt, and evaluate the uncertainty-guided
//! segmentation pipeline on the built-in synthetic layered-phantom corpus.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use udalign_core::checkpoint::Checkpoint;
use udalign_core::dataset::{load_dataset, load_image_pgm};
use udalign_core::error::{Error, Result};
use udalign_core::metrics::{evaluate, metrics_csv, render_uncertainty, write_metrics_csv};
use udalign_core::synth::{build_corpus, manifest_path, Split};
use udalign_core::trainer::{adapt, pretrain_resume, pretrain_source, TrainerPaths};
use udalign_core::types::DomainTag;
use udalign_core::TrainConfig;

const CONFIG_HELP: &str = "\
CONFIG FILE (JSON; every key optional, defaults shown by `config-show`):
  seed, n_classes, phase1_iters, phase1_lr, phase2_iters, phase2_lr,
  batch_size, adam_beta1, adam_beta2, checkpoint_every,
  backbone.{base_channels,stages,pyramid_bins,feature_dim},
  latent.{latent_dim,mc_samples,sigma_scale},
  recalib.{common_channels,spatial_divisor,squeeze_ratio},
  disc.{layers,base_width},
  weights.{lambda_s,lambda_t,lambda_d,lambda_g,lambda_kl},
  curriculum.{f_start,f_end,total_epochs},
  ablation.{use_frm,use_uce,use_ust},
  corpus.{n_source,n_target,train_fraction,phantom.*,source_style.*,target_style.*}
Individual keys can be overridden with --set key=value (dotted paths).";

#[derive(Parser)]
#[command(
    name = "udalign",
    about = "Uncertainty-guided domain alignment for layered-image segmentation",
    after_help = CONFIG_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override (shorthand for --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key, e.g. --set weights.lambda_t=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut value: serde_json::Value = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => serde_json::json!({}),
        };
        for kv in &self.sets {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got {kv}")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        if let Some(seed) = self.seed {
            set_path(&mut value, "seed", serde_json::json!(seed))?;
        }
        let cfg = TrainConfig::from_json(&value.to_string())?;
        Ok(cfg)
    }
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::Config(format!("cannot descend into {path}")));
        }
        let map = cur.as_object_mut().expect("checked above");
        if i == parts.len() - 1 {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Err(Error::Config(format!("empty --set key in {path}")))
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for DomainTag {
    fn from(d: DomainArg) -> DomainTag {
        match d {
            DomainArg::Source => DomainTag::Source,
            DomainArg::Target => DomainTag::Target,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain synthetic corpus and its manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (images/, labels/, manifest.json).
        #[arg(long)]
        out: PathBuf,
        /// Number of source-domain samples (overrides corpus.n_source).
        #[arg(long)]
        n_source: Option<usize>,
        /// Number of target-domain samples (overrides corpus.n_target).
        #[arg(long)]
        n_target: Option<usize>,
    },
    /// Phase 1: source-supervised pretraining.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from an existing pretrain checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase 2: adaptation to the unlabeled target domain.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Initial checkpoint: pretrain output, or an adapt checkpoint to
        /// resume at its epoch boundary.
        #[arg(long)]
        init: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss CSV (a .trend.csv sibling records the
        /// per-epoch mean target uncertainty).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory for per-epoch curriculum dumps (id,score,selected).
        #[arg(long)]
        curriculum_dump: Option<PathBuf>,
    },
    /// Dice and conformity over one domain/split of a dataset.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics CSV to write (class,dice,conformity).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Render the per-pixel uncertainty of one image to an 8-bit PGM with a
    /// JSON sidecar holding the raw min/max.
    RenderUncertainty {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input image (8-bit PGM).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output PGM path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as JSON.
    ConfigShow {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            n_source,
            n_target,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = n_source {
                cfg.corpus.n_source = n;
            }
            if let Some(n) = n_target {
                cfg.corpus.n_target = n;
            }
            let manifest = build_corpus(&cfg.corpus, &out, cfg.seed)?;
            println!(
                "wrote {} samples to {}",
                manifest.entries.len(),
                manifest_path(&out).display()
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            data,
            out,
            log,
            resume,
        } => {
            let cfg = config.load()?;
            let ds = load_dataset(&data)?;
            let paths = TrainerPaths {
                log_csv: log,
                checkpoint_out: Some(out.clone()),
                curriculum_dir: None,
            };
            let outcome = match resume {
                Some(ck_path) => {
                    let ck = Checkpoint::load(&ck_path)?;
                    pretrain_resume(&ds, &cfg, &paths, &ck)?
                }
                None => pretrain_source(&ds, &cfg, &paths)?,
            };
            println!(
                "pretrain finished at iteration {} (final loss {:.6}); checkpoint {}",
                outcome.checkpoint.iteration,
                outcome.log.last().map(|(_, r)| r.total).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Adapt {
            config,
            data,
            init,
            out,
            log,
            curriculum_dump,
        } => {
            let cfg = config.load()?;
            let ds = load_dataset(&data)?;
            let ck = Checkpoint::load(&init)?;
            let paths = TrainerPaths {
                log_csv: log,
                checkpoint_out: Some(out.clone()),
                curriculum_dir: curriculum_dump,
            };
            let outcome = adapt(&ds, &ck, &cfg, &paths)?;
            let trend = &outcome.epoch_scores;
            println!(
                "adapt finished at iteration {} over {} epochs; mean target uncertainty {:.6} -> {:.6}; checkpoint {}",
                outcome.checkpoint.iteration,
                trend.len().saturating_sub(1),
                trend.first().map(|(_, s)| *s).unwrap_or(f64::NAN),
                trend.last().map(|(_, s)| *s).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            config,
            data,
            ckpt,
            out,
            domain,
            split,
        } => {
            let cfg = config.load()?;
            let ds = load_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let (model, _) = ck.restore_model(&cfg)?;
            let rows = evaluate(&model, &ds, domain.into(), split.into(), &cfg.latent, cfg.seed)?;
            print!("{}", metrics_csv(&rows));
            if let Some(path) = out {
                write_metrics_csv(&path, &rows)?;
            }
            Ok(())
        }
        Command::RenderUncertainty {
            config,
            image,
            ckpt,
            out,
        } => {
            let cfg = config.load()?;
            let ck = Checkpoint::load(&ckpt)?;
            let (model, _) = ck.restore_model(&cfg)?;
            let img = load_image_pgm(&image, DomainTag::Target)?;
            render_uncertainty(&model, &img, &cfg.latent, cfg.seed, &out)?;
            println!("wrote {} (+ .json sidecar)", out.display());
            Ok(())
        }
        Command::ConfigShow { config } => {
            let cfg = config.load()?;
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
