//! Two-stage training loop, checkpoints and held-out evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use drivedit_core::backends::EmbedderConfig;
use drivedit_core::evalkit::{aggregate, evaluate_sample, AggregateTable, Providers, SampleMetrics, DEFAULT_CROP_PAD};
use drivedit_core::{EmbeddingProvider, Error, LossWeights, MockEmbedder, Result, TrainingSample};

use crate::objectives::{
    loss_sft, loss_total_grad, GeneratorContract, LossBackends, LossBreakdown, PerceptualExtractor,
};
use crate::toygen::{ToyGenerator, ToyShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_batch_size: usize,
    pub stage2_batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Rescale the batch gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub shape: ToyShape,
    pub text_encoder: EmbedderConfig,
    pub perceptual_seed: u64,
    /// Supervised stage: only the reconstruction and identity terms.
    pub stage1_weights: LossWeights,
    pub stage2_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let full = LossWeights::default();
        Self {
            stage1_steps: 500,
            stage2_steps: 100,
            stage1_batch_size: 4,
            stage2_batch_size: 4,
            learning_rate: 0.01,
            optimizer: Optimizer::default(),
            max_grad_norm: None,
            seed: 0,
            shape: ToyShape {
                hidden: 12,
                embed_dim: 16,
            },
            text_encoder: EmbedderConfig::Mock { dim: 16, seed: 0 },
            perceptual_seed: 0,
            stage1_weights: LossWeights {
                cycle: 0.0,
                cycle_lpips: 0.0,
                clip: 0.0,
                ..full
            },
            stage2_weights: full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1_weights.validate()?;
        self.stage2_weights.validate()?;
        let w1 = &self.stage1_weights;
        if w1.cycle != 0.0 || w1.cycle_lpips != 0.0 || w1.clip != 0.0 {
            return Err(Error::invalid(
                "stage 1 trains only the reconstruction and identity terms",
            ));
        }
        if self.stage1_batch_size == 0 || self.stage2_batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn text_encoder(&self) -> Arc<dyn EmbeddingProvider> {
        match self.text_encoder {
            EmbedderConfig::Mock { dim, seed } => Arc::new(MockEmbedder::new(dim, seed)),
        }
    }

    pub fn init_model(&self) -> Result<ToyGenerator> {
        ToyGenerator::new(self.shape, self.seed, self.text_encoder())
    }
}

/// Fixed-rate stochastic gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Momentum { momentum } => (0.0..1.0).contains(&momentum),
            Optimizer::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad optimizer settings {self:?}")))
        }
    }
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, opt: &Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match *opt {
            Optimizer::Momentum { momentum } => {
                for ((p, m), g) in params.iter_mut().zip(self.m.iter_mut()).zip(grad) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                    .zip(grad)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ToyGenerator,
    pub log: Vec<StepRecord>,
}

/// Seed-fixed sequence of batches, reshuffled every pass over the data.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64, stage: u8) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64) << 56));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stage 1 then stage 2, one optimizer state carried across both. `on_step` sees each record as it
/// is produced. A non-finite loss aborts with the offending breakdown.
pub fn train(
    cfg: &TrainConfig,
    dataset: &[TrainingSample],
    phi: &dyn PerceptualExtractor,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = cfg.init_model()?;
    let mut log = Vec::new();
    if cfg.stage1_steps + cfg.stage2_steps > 0 && dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let clip_provider = cfg.text_encoder();
    let n = model.params().len();
    let mut opt = OptState::new(n);
    let stages = [
        (1u8, cfg.stage1_steps, cfg.stage1_batch_size, cfg.stage1_weights),
        (2u8, cfg.stage2_steps, cfg.stage2_batch_size, cfg.stage2_weights),
    ];
    for (stage, steps, batch_size, weights) in stages {
        let mut batches = Batches::new(dataset.len(), cfg.seed, stage);
        for step in 0..steps {
            let idx = batches.next(batch_size);
            let mut grad = vec![0.0; n];
            let mut mean = LossBreakdown::default();
            for &i in &idx {
                let b = LossBackends {
                    phi,
                    provider: clip_provider.as_ref(),
                };
                let l = loss_total_grad(&dataset[i], &model, b, &weights, &mut grad)?;
                mean.sft += l.sft;
                mean.identity += l.identity;
                mean.cycle += l.cycle;
                mean.clip += l.clip;
                mean.total += l.total;
            }
            let k = idx.len() as f64;
            for v in [
                &mut mean.sft,
                &mut mean.identity,
                &mut mean.cycle,
                &mut mean.clip,
                &mut mean.total,
            ] {
                *v /= k;
            }
            if !mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite loss at stage {stage} step {step}: {mean:?} (batch {idx:?})"
                )));
            }
            for g in grad.iter_mut() {
                *g /= k;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let scale = match cfg.max_grad_norm {
                Some(m) if norm > m => m / norm,
                _ => 1.0,
            };
            for g in grad.iter_mut() {
                *g *= scale;
            }
            opt.step(&cfg.optimizer, cfg.learning_rate, model.params_mut(), &grad);
            let rec = StepRecord {
                stage,
                step,
                loss: mean,
                grad_norm: norm,
            };
            on_step(&rec)?;
            log.push(rec);
        }
    }
    Ok(TrainOutcome { model, log })
}

pub fn write_metrics(log: &[StepRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

const CKPT_MAGIC: &[u8; 4] = b"TCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the flat parameter vector.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub shape: ToyShape,
    pub text_encoder: EmbedderConfig,
    pub tensors: Vec<TensorEntry>,
    pub steps: usize,
}

/// `"TCKP"`, u32 LE version, u64 LE parameter count, f64 LE parameters,
/// u32 LE manifest length, JSON manifest.
pub fn encode_checkpoint(model: &ToyGenerator, text_encoder: &EmbedderConfig, steps: usize) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .shape()
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry {
                name: name.to_string(),
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        shape: model.shape(),
        text_encoder: text_encoder.clone(),
        tensors,
        steps,
    };
    let json = serde_json::to_vec(&manifest)?;
    let p = model.params();
    let mut out = Vec::with_capacity(20 + 8 * p.len() + json.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for v in p {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ToyGenerator, CheckpointManifest)> {
    let bad = |m: &str| Error::Codec(format!("checkpoint: {m}"));
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated"))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(&mut pos, count.checked_mul(8).ok_or_else(|| bad("count overflow"))?)?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(take(&mut pos, len)?)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let text: Arc<dyn EmbeddingProvider> = match manifest.text_encoder {
        EmbedderConfig::Mock { dim, seed } => Arc::new(MockEmbedder::new(dim, seed)),
    };
    let model = ToyGenerator::new(manifest.shape, 0, text)?.with_params(params)?;
    Ok((model, manifest))
}

pub fn save_checkpoint(model: &ToyGenerator, text_encoder: &EmbedderConfig, steps: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, text_encoder, steps)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyGenerator, CheckpointManifest)> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub table: AggregateTable,
    pub mean_sft: f64,
}

/// Runs the forward edit on every held-out sample and scores it against the
/// target image.
pub fn evaluate_checkpoint(
    model: &dyn GeneratorContract,
    heldout: &[TrainingSample],
    providers: Providers<'_>,
    phi: &dyn PerceptualExtractor,
    weights: &LossWeights,
) -> Result<EvalReport> {
    let mut samples = Vec::with_capacity(heldout.len());
    let mut sft = 0.0;
    for (i, s) in heldout.iter().enumerate() {
        let out = model.apply(&s.source_image, &s.forward_instruction, &s.forward_mask)?;
        sft += loss_sft(&s.target_image, &out, phi, weights)?;
        samples.push(evaluate_sample(
            &format!("{i:05}"),
            s.edit_type,
            &out,
            &s.target_image,
            &s.forward_mask,
            providers,
            DEFAULT_CROP_PAD,
        )?);
    }
    let table = aggregate(&samples);
    Ok(EvalReport {
        samples,
        table,
        mean_sft: if heldout.is_empty() {
            0.0
        } else {
            sft / heldout.len() as f64
        },
    })
}
