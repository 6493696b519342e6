use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use vadclip_core::checkpoint;
use vadclip_core::data::Dataset;
use vadclip_core::gradcheck::gradcheck;
use vadclip_core::inference::{coarse_scores, extract_segments, predict_frames, unit_to_cosine};
use vadclip_core::io::{read_feature_file, save_dataset};
use vadclip_core::synthetic::generate_synthetic_dataset;
use vadclip_core::train::{
    evaluate, write_history_csv, write_pr_csv, write_predictions, write_score_csv, PredictionRecord, Trainer,
};
use vadclip_core::{InferencePath, RunConfig, VadClip};

#[derive(Parser)]
#[command(name = "vadclip", version, about = "Weakly supervised video anomaly detection")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "VADCLIP_OUT_DIR", default_value = "vadclip-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Xd,
    Ucf,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete configuration file.
    Config {
        #[arg(long, value_enum, default_value = "xd")]
        preset: Preset,
    },
    /// Write the synthetic train/test splits to `<out>/train` and `<out>/test`.
    GenSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train, checkpoint and evaluate on the test split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the checkpoint's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        path: Option<InferencePath>,
        #[arg(long)]
        segment_threshold: Option<f64>,
        #[arg(long)]
        min_length: Option<usize>,
    },
    /// Score one feature file and print the record as JSON.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Finite-difference gradient check; fails on any group out of tolerance.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_evaluation(out: &Path, model: &VadClip, cfg: &RunConfig, data: &Dataset) -> anyhow::Result<()> {
    let (report, records) = evaluate(model, data, &cfg.inference, cfg.optim.input_cap)?;
    let json = report.to_json()?;
    std::fs::write(out.join("report.json"), &json)?;
    write_predictions(out.join("predictions.jsonl"), &records)?;
    write_score_csv(out.join("scores.csv"), &records, data)?;
    write_pr_csv(out.join("pr_curve.csv"), &records, data, cfg.inference.path)?;
    println!("{json}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let out = cli.out;
    match cli.command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Xd => RunConfig::xd_violence(),
                Preset::Ucf => RunConfig::ucf_crime(),
            };
            print!("{}", cfg.to_toml()?);
        }
        Command::GenSynthetic { config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let Some(spec) = cfg.data.synthetic.as_ref() else {
                bail!("configuration has no synthetic section");
            };
            let (train, test) = generate_synthetic_dataset(spec, seed.unwrap_or(cfg.data.synthetic_seed))?;
            save_dataset(out.join("train"), &train)?;
            save_dataset(out.join("test"), &test)?;
            println!("wrote {} training and {} test videos to {}", train.len(), test.len(), out.display());
        }
        Command::Train { config, epochs, resume } => {
            create_dir(&out)?;
            let (mut trainer, data) = match resume {
                Some(ckpt) => {
                    let restored = checkpoint::load(&ckpt)?;
                    let data = restored.config.data.load()?;
                    (restored.into_trainer(&data.train)?, data)
                }
                None => {
                    let cfg = load_config(config.as_deref())?;
                    let data = cfg.data.load()?;
                    (Trainer::new(cfg, &data.train, data.vocab.clone())?, data)
                }
            };
            let target = epochs.unwrap_or(trainer.config.optim.epochs);
            trainer.train_until(target)?;
            checkpoint::save_trainer(out.join("checkpoint.vadc"), &trainer)?;
            write_history_csv(out.join("history.csv"), &trainer.history)?;
            std::fs::write(out.join("config.toml"), trainer.config.to_toml()?)?;
            let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
            write_evaluation(&out, &trainer.model, &trainer.config, eval_set)?;
        }
        Command::Evaluate {
            checkpoint: ckpt,
            data,
            path,
            segment_threshold,
            min_length,
        } => {
            create_dir(&out)?;
            let restored = checkpoint::load(&ckpt)?;
            let mut cfg = restored.config.clone();
            if let Some(p) = path {
                cfg.inference.path = p;
            }
            if let Some(t) = segment_threshold {
                cfg.inference.segment_threshold = t;
            }
            if let Some(m) = min_length {
                cfg.inference.min_length = m;
            }
            cfg.validate()?;
            let dataset = match data {
                Some(dir) => vadclip_core::io::load_dataset(dir)?,
                None => cfg.data.load()?.test,
            };
            write_evaluation(&out, &restored.model, &cfg, &dataset)?;
        }
        Command::Predict { checkpoint: ckpt, features } => {
            let restored = checkpoint::load(&ckpt)?;
            let cfg = &restored.config;
            let model = &restored.model;
            let seq = read_feature_file(&features)?;
            let t_out = model.class_embedding_values();
            let frames = predict_frames(model, &t_out, &seq.to_f64(), cfg.optim.input_cap)?;
            let normal = model.vocab().normal_index();
            let record = PredictionRecord {
                video_id: seq.video_id().to_string(),
                label: 0,
                c_branch: coarse_scores(&frames, normal, InferencePath::CBranch),
                a_branch: coarse_scores(&frames, normal, InferencePath::ABranch),
                segments: extract_segments(
                    &frames.alignment,
                    model.vocab(),
                    unit_to_cosine(cfg.inference.segment_threshold),
                    cfg.inference.min_length,
                ),
            };
            println!("{}", serde_json::to_string(&record)?);
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(config.as_deref())?;
            let report = gradcheck(&cfg)?;
            print!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
