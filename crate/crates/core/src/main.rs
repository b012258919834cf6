use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use arn::dataset::{self, GridSpec};
use arn::proposal_encoder::SceneGeometry;
use arn::query_encoder::tokenize;
use arn::training::{run_training, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "arn",
    version,
    about = "Weakly supervised referring expression grounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest and feature store.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        scenes: usize,
        #[arg(long, default_value_t = 5)]
        proposals: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config on the `train` split, validating on `val`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report IoU > 0.5 accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Ground a free-text query in one image.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        query: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth {
            seed,
            scenes,
            proposals,
            out,
        } => {
            let generated =
                dataset::generate_synthetic(seed, scenes, proposals, &GridSpec::default())?;
            dataset::write_manifest(&out, &generated)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} scenes to {}", generated.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let config = TrainConfig::load(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let scenes = dataset::load_manifest(&data)?;
            let (train, val): (Vec<_>, Vec<_>) =
                scenes.into_iter().partition(|s| s.split == "train");
            let val: Vec<_> = val.into_iter().filter(|s| s.split == "val").collect();
            if train.is_empty() {
                bail!("no scenes in the train split of {}", data.display());
            }
            let outcome = run_training(&train, &val, &config, Some(&out))?;
            println!(
                "trained {} iterations ({} scenes skipped); checkpoint at {}",
                outcome.checkpoint.iteration,
                outcome.skipped,
                out.join("checkpoint.arnc").display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let (model, params) = ckpt.restore()?;
            let scenes: Vec<_> = dataset::load_manifest(&data)?
                .into_iter()
                .filter(|s| s.split == split)
                .collect();
            if scenes.is_empty() {
                bail!("no scenes in split {split:?}");
            }
            let report = arn::eval::evaluate(&scenes, &model, &params, &ckpt.vocabulary(), &split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ground {
            checkpoint,
            data,
            image,
            query,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let (model, params) = ckpt.restore()?;
            let scenes = dataset::load_manifest(&data)?;
            let scene = scenes
                .iter()
                .find(|s| s.image_id == image)
                .ok_or_else(|| arn::Error::UnknownImage(image.clone()))?;
            let words = tokenize(&query);
            if words.is_empty() {
                bail!("query has no words");
            }
            let tokens = ckpt.vocabulary().encode(&words);
            let geometry = SceneGeometry::new(&scene.proposals, scene.width, scene.height)?;
            let grounded = model.ground(&params, &geometry, &tokens)?;
            let chosen = &scene.proposals[grounded.proposal];
            let weights: BTreeMap<&str, f64> = model
                .modalities()
                .iter()
                .zip(&grounded.modality_weights)
                .map(|(m, &w)| (m.name(), w))
                .collect();
            let out = json!({
                "image": image,
                "query": words,
                "proposal": chosen.id,
                "box": chosen.bbox,
                "fused": grounded.scores.fused,
                "proposal_ids": scene.proposals.iter().map(|p| p.id).collect::<Vec<_>>(),
                "modality_weights": weights,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}
