use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use drivedit_core::evalkit::{evaluate_manifest, AggregateTable, Providers, SampleMetrics};
use drivedit_core::manifest::{load_sample, read_manifest};
use drivedit_core::TrainingSample;
use drivedit_train::objectives::GeneratorContract;
use drivedit_train::trainer::{evaluate_checkpoint, load_checkpoint, save_checkpoint, write_metrics};
use drivedit_train::{make_synthetic_dataset, train as run_training, ToyPerceptual, TrainConfig};

use crate::load_backends;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    Manifest { path: std::path::PathBuf },
}

/// A training config plus where its data comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainJob {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub heldout: Option<DataSource>,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataSource::Synthetic { count: 256, seed: 0 },
            heldout: Some(DataSource::Synthetic { count: 60, seed: 1 }),
        }
    }
}

fn load_data(src: &DataSource, cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    Ok(match src {
        DataSource::Synthetic { count, seed } => make_synthetic_dataset(*count, *seed, cfg.text_encoder().as_ref())?,
        DataSource::Manifest { path } => read_manifest(path)?
            .iter()
            .map(|r| load_sample(path, r))
            .collect::<drivedit_core::Result<_>>()
            .with_context(|| format!("loading {}", path.display()))?,
    })
}

pub fn train(config: Option<&Path>, out: &Path) -> Result<()> {
    let job: TrainJob = match config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainJob::default(),
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("train_config.json"), serde_json::to_vec_pretty(&job)?)?;
    let data = load_data(&job.data, &job.train)?;
    let phi = ToyPerceptual::new(job.train.perceptual_seed);
    tracing::info!(samples = data.len(), "training");
    let outcome = run_training(&job.train, &data, &phi, |r| {
        if r.step % 50 == 0 {
            tracing::info!(stage = r.stage, step = r.step, loss = r.loss.total, "step");
        }
        Ok(())
    })?;
    write_metrics(&outcome.log, &out.join("metrics.jsonl"))?;
    save_checkpoint(
        &outcome.model,
        &job.train.text_encoder,
        outcome.log.len(),
        &out.join("checkpoint.tckp"),
    )?;
    if let Some(src) = &job.heldout {
        let heldout = load_data(src, &job.train)?;
        let backends = load_backends(None)?;
        let providers = Providers {
            clip: backends.embedder.as_ref(),
            dino: backends.image_embedder.as_ref(),
        };
        let report = evaluate_checkpoint(&outcome.model, &heldout, providers, &phi, &job.train.stage1_weights)?;
        tracing::info!(mean_sft = report.mean_sft, "held-out evaluation");
        std::fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    samples: Vec<SampleMetrics>,
    table: AggregateTable,
}

pub fn eval(
    manifest: &Path,
    outputs: &Path,
    backends: Option<&Path>,
    checkpoint: Option<&Path>,
    pad: u32,
    report: &Path,
) -> Result<()> {
    let backends = load_backends(backends)?;
    if let Some(ckpt) = checkpoint {
        let (model, _) = load_checkpoint(ckpt)?;
        std::fs::create_dir_all(outputs)?;
        for rec in read_manifest(manifest)? {
            let s = load_sample(manifest, &rec)?;
            let y = model.apply(&s.source_image, &s.forward_instruction, &s.forward_mask)?;
            y.clamp01().save_png(&outputs.join(format!("{}.png", rec.pair_id)))?;
        }
    }
    let providers = Providers {
        clip: backends.embedder.as_ref(),
        dino: backends.image_embedder.as_ref(),
    };
    let (samples, table) = evaluate_manifest(manifest, outputs, providers, pad)?;
    tracing::info!(samples = samples.len(), rows = table.rows.len(), "evaluation done");
    std::fs::write(report, serde_json::to_vec_pretty(&EvalOutput { samples, table })?)?;
    Ok(())
}
