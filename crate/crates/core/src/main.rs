use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use uses2::datagen::{build_corpus, Manifest, SplitCounts};
use uses2::evalcli::{enhance_file, evaluate_checkpoint, model_stats};
use uses2::model::{load_checkpoint, Model, ModelConfig, Variant};
use uses2::training::{StageSpec, TrainConfig, Trainer, TRAINER_FILE};
use uses2::{Error, Result};

#[derive(Parser)]
#[command(name = "uses2", version, about = "Sampling-rate and channel-count independent speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with single- and multi-channel manifests.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        dev: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        /// JSON with optional "model" and "train" objects.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest; the training data is used when absent.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Checkpoint to start from (stage 2) or an interrupted run of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance a WAV file into a single-channel float-32 WAV.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest and write a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print parameter count and MAC/s (1-ch and 2-ch).
    Info {
        #[arg(long, conflicts_with_all = ["config", "variant"])]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "variant")]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown variant {s}"))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<serde_json::Value>,
    #[serde(default)]
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn model_config(cfg: &ConfigFile) -> Result<ModelConfig> {
    match &cfg.model {
        Some(v) => ModelConfig::from_json(v),
        None => Ok(ModelConfig::comp()),
    }
}

fn train(
    stage: u8,
    config: Option<&Path>,
    data: &Path,
    dev: Option<&Path>,
    resume: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let stage = StageSpec::new(stage)?;
    let file = read_config(config)?;
    let default_out = PathBuf::from(format!("runs/stage{}", stage.stage()));
    let out = out.unwrap_or(&default_out);
    let mut trainer = match resume {
        Some(dir) => {
            // A run directory of the same stage continues; anything else seeds a new stage.
            let previous = if dir.join(TRAINER_FILE).exists() {
                Some(Trainer::resume(dir)?)
            } else {
                None
            };
            match previous {
                Some(t) if t.stage == stage => t,
                _ => Trainer::from_checkpoint(dir, stage, file.train.clone())?,
            }
        }
        None => Trainer::new(Model::new(model_config(&file)?, file.train.seed)?, stage, file.train.clone())?,
    };
    let train_set = stage.filter(Manifest::read(data)?.load_all()?)?;
    let dev_set = match dev {
        Some(p) => stage.filter(Manifest::read(p)?.load_all()?)?,
        None => Vec::new(),
    };
    fs::create_dir_all(out)?;
    trainer.run(&train_set, &dev_set, Some(out), |r| {
        println!("{}", serde_json::to_string(r).unwrap_or_default());
    })?;
    trainer.save(out)?;
    eprintln!("stage {} finished at step {}; checkpoint in {}", stage.stage(), trainer.step, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            out,
            seed,
            train,
            dev,
            test,
        } => {
            let s = build_corpus(&out, SplitCounts { train, dev, test }, seed)?;
            for (subset, split, path) in &s.manifests {
                println!("{subset}/{split}: {}", path.display());
            }
        }
        Command::Train {
            stage,
            config,
            data,
            dev,
            resume,
            out,
        } => train(stage, config.as_deref(), &data, dev.as_deref(), resume.as_deref(), out.as_deref())?,
        Command::Enhance { ckpt, input, out } => {
            let w = enhance_file(&ckpt, &input, &out)?;
            eprintln!("wrote {} samples at {} Hz to {}", w.len(), w.rate_hz(), out.display());
        }
        Command::Evaluate { ckpt, manifest, report } => {
            let rep = evaluate_checkpoint(&ckpt, &manifest, &report)?;
            println!("{}", serde_json::to_string_pretty(&rep.mean)?);
        }
        Command::Info { ckpt, config, variant } => {
            let cfg = if let Some(dir) = ckpt {
                load_checkpoint(&dir)?.0.config
            } else if let Some(p) = config {
                model_config(&read_config(Some(&p))?)?
            } else {
                ModelConfig::for_variant(variant.unwrap_or(Variant::Comp))
            };
            println!("{}", serde_json::to_string_pretty(&model_stats(&cfg)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
