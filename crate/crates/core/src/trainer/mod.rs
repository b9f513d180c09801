//! Optimization loop: mixed-task batches, shared-encoder forward pass,
//! joint loss, Adam under a warmup/cosine schedule.

mod adam;
mod batch;
mod checkpoint;
mod schedule;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use batch::{compose_batch, mt_count, Pair, PairBatch};
pub use checkpoint::{config_hash, ArrayEntry, Checkpoint, CheckpointHeader};
pub use schedule::lr_at;

use crate::corpus::Task;
use crate::encoder::{init_params, BatchForward, EncoderConfig, EncoderParams, RunMode};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objectives;
use crate::rng;

const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lambda_spreadout: f64,
    pub mt_fraction: f64,
    pub seed: u64,
    /// Steps between retrieval evaluations; 0 disables them.
    pub eval_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Sequences per encoding tape.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 64,
            lambda_spreadout: 1.0,
            mt_fraction: 0.0,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            micro_batch: crate::encoder::DEFAULT_MICRO_BATCH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.mt_fraction) {
            return fail(format!("mt_fraction must be in [0, 1], got {}", self.mt_fraction));
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return fail(format!("peak_lr must be finite and non-negative, got {}", self.peak_lr));
        }
        if !(self.lambda_spreadout.is_finite() && self.lambda_spreadout >= 0.0) {
            return fail(format!("lambda_spreadout must be non-negative, got {}", self.lambda_spreadout));
        }
        if self.micro_batch == 0 {
            return fail("micro_batch must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.peak_lr, self.warmup_steps, self.total_steps)
    }
}

/// Aligned training pools.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub s2t: Vec<Pair>,
    pub mt: Vec<Pair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams<f32>,
    pub optimizer: AdamState<f32>,
    /// Completed updates.
    pub step: u64,
}

impl TrainState {
    pub fn init(encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        let params = init_params(encoder, seed)?;
        let optimizer = AdamState::new(&params.tensors);
        Ok(Self {
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            params: ck.params,
            optimizer: ck.optimizer,
            step: ck.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub s2t: usize,
    pub mt: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: f64,
    pub spreadout: f64,
    pub task_mix: TaskMix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<BTreeMap<String, f64>>,
}

/// One update: compose the batch for `state.step`, encode both sides with
/// the shared parameters, take the joint loss over the full batch, and
/// apply Adam at `lr_at(step)`.
pub fn train_step(
    state: &mut TrainState,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<StepMetrics> {
    let step = state.step;
    let batch = compose_batch(
        &data.s2t,
        &data.mt,
        cfg.batch_size,
        cfg.mt_fraction,
        cfg.seed,
        step,
    )?;
    let n = batch.len();
    let seqs: Vec<&[usize]> = batch
        .a
        .iter()
        .chain(&batch.b)
        .map(|s| s.ids.as_slice())
        .collect();
    let mode = RunMode::Train {
        step_seed: rng::derive_seed(cfg.seed, &[DROPOUT_STREAM, step]),
    };
    let fwd = BatchForward::run(&state.params, encoder, &seqs, cfg.micro_batch, mode)?;
    let e = fwd.embeddings();
    let p = e.cols();
    let x = Tensor::new(&[n, p], e.data()[..n * p].to_vec())?;
    let y = Tensor::new(&[n, p], e.data()[n * p..].to_vec())?;
    let loss = objectives::loss_with_grads(&x, &y, cfg.lambda_spreadout)?;
    let mut d = loss.dx.into_data();
    d.extend(loss.dy.into_data());
    let grads = fwd.backward(&Tensor::new(&[2 * n, p], d)?)?;
    let lr = cfg.lr_at(step);
    adam_step(&mut state.params.tensors, &grads, &mut state.optimizer, lr)?;
    state.step += 1;
    Ok(StepMetrics {
        step,
        lr,
        loss: loss.total as f64,
        contrastive: loss.contrastive as f64,
        spreadout: loss.spreadout as f64,
        task_mix: TaskMix {
            s2t: batch.count(Task::S2T),
            mt: batch.count(Task::MT),
        },
        eval: None,
    })
}

/// Run updates until `cfg.total_steps`, calling `on_step` after each. The
/// callback sees the updated state and may attach evaluation results or
/// write checkpoints; an error from either side stops training.
pub fn train(
    state: &mut TrainState,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_step: impl FnMut(&mut StepMetrics, &TrainState) -> Result<()>,
) -> Result<()> {
    encoder.validate()?;
    cfg.validate()?;
    while state.step < cfg.total_steps {
        let mut m = train_step(state, encoder, cfg, data)?;
        on_step(&mut m, state)?;
    }
    Ok(())
}

/// Append-only JSON-lines metrics log.
pub struct MetricsLog {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        crate::fsutil::write_atomic(path, b"")?;
        Self::open_append(path)
    }

    /// Reopen for a run resuming at `step`: records at or after `step` are
    /// dropped so the finished log matches an uninterrupted run.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if m.step < step {
                    kept.extend_from_slice(line.as_bytes());
                    kept.push(b'\n');
                }
            }
        }
        crate::fsutil::write_atomic(path, &kept)?;
        Self::open_append(path)
    }

    fn open_append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        let mut line = serde_json::to_vec(m)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepMetrics>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
