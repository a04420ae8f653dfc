//! Joint loss, optimizer, learning-rate schedule, early stopping, and the
//! batching of variable-length windows.

use std::path::Path;
use std::time::Instant;

use minitensor::{add, cross_entropy_from_logits, no_grad, scale, sum_all, Scalar, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{DatasetSplit, EncodedSample};
use crate::model::{Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("validation split is empty")]
    EmptyValidationSplit,
    #[error("batch size {0} is below the minimum of 2 (batch-norm statistics)")]
    BadBatchSize(usize),
    #[error("non-finite loss at epoch {epoch}; training aborted at the last finite checkpoint")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Numeric precision of the training computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warm-up.
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub warmup_epochs: usize,
    /// Per-epoch multiplicative decay after warm-up: lr *= (1 - lr_decay).
    pub lr_decay: f64,
    /// Epochs without validation improvement before restoring the best
    /// checkpoint and dropping the rate.
    pub patience: usize,
    pub lr_drop_factor: f64,
    /// Restore-and-drop cycles before training stops.
    pub max_drops: usize,
    pub batch_size: usize,
    /// Weight of the mode prediction loss.
    pub theta: f64,
    /// Weight of the location prediction loss (ablation toggle).
    pub loc_loss_weight: f64,
    /// Safety cap; the drop schedule normally stops training first.
    pub max_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2_penalty: 1e-6,
            warmup_epochs: 2,
            lr_decay: 0.02,
            patience: 3,
            lr_drop_factor: 0.1,
            max_drops: 3,
            batch_size: 256,
            theta: 1.0,
            loc_loss_weight: 1.0,
            max_epochs: 100,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// A padded batch of integer-encoded windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub users: Vec<u32>,
    pub locations: Vec<u32>,
    pub time_bins: Vec<u32>,
    pub weekdays: Vec<u32>,
    pub modes: Vec<u32>,
    pub target_locations: Vec<u32>,
    pub target_modes: Vec<u32>,
}

impl Batch {
    pub fn from_samples_padded(samples: &[&EncodedSample], pad_id: u32) -> Batch {
        let size = samples.len();
        let max_len = samples.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut batch = Batch {
            size,
            max_len,
            lengths: Vec::with_capacity(size),
            users: Vec::with_capacity(size),
            locations: vec![pad_id; size * max_len],
            time_bins: vec![0; size * max_len],
            weekdays: vec![0; size * max_len],
            modes: vec![0; size * max_len],
            target_locations: Vec::with_capacity(size),
            target_modes: Vec::with_capacity(size),
        };
        for (bi, s) in samples.iter().enumerate() {
            batch.lengths.push(s.len());
            batch.users.push(s.user);
            batch.target_locations.push(s.target_location);
            batch.target_modes.push(s.target_mode as u32);
            for k in 0..s.len() {
                batch.locations[bi * max_len + k] = s.locations[k];
                batch.time_bins[bi * max_len + k] = s.time_bins[k] as u32;
                batch.weekdays[bi * max_len + k] = s.weekdays[k] as u32;
                batch.modes[bi * max_len + k] = s.modes[k] as u32;
            }
        }
        batch
    }

    pub fn from_samples(samples: &[&EncodedSample]) -> Batch {
        Self::from_samples_padded(samples, 0)
    }

    pub fn single(sample: &EncodedSample) -> Batch {
        Self::from_samples(&[sample])
    }
}

/// Bucket samples by similar length, pad each bucket to its own maximum, and
/// shuffle deterministically per epoch: sample order is reshuffled, a stable
/// sort groups similar lengths, fixed-size chunks become batches, and the
/// batch order is shuffled again.
pub fn make_batches(
    samples: &[EncodedSample],
    batch_size: usize,
    pad_id: u32,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>, TrainError> {
    if batch_size < 2 {
        return Err(TrainError::BadBatchSize(batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| samples[i].len());
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&EncodedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            Batch::from_samples_padded(&refs, pad_id)
        })
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Fixed-order evaluation batches (no shuffling, no length bucketing).
pub fn eval_batches(samples: &[EncodedSample], batch_size: usize) -> Vec<Batch> {
    samples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&EncodedSample> = chunk.iter().collect();
            Batch::from_samples(&refs)
        })
        .collect()
}

/// Training cannot feed a batch of one through batch norm; fold any singleton
/// batch into its neighbour.
fn coalesce_singletons(batches: Vec<Batch>, samples: &[EncodedSample]) -> Vec<Batch> {
    let _ = samples;
    if batches.len() < 2 {
        return batches;
    }
    let mut out: Vec<Batch> = Vec::with_capacity(batches.len());
    for batch in batches {
        if batch.size == 1 && !out.is_empty() {
            let prev = out.pop().unwrap();
            out.push(merge_batches(&prev, &batch));
        } else {
            out.push(batch);
        }
    }
    out
}

fn merge_batches(a: &Batch, b: &Batch) -> Batch {
    let size = a.size + b.size;
    let max_len = a.max_len.max(b.max_len);
    let mut merged = Batch {
        size,
        max_len,
        lengths: Vec::with_capacity(size),
        users: Vec::with_capacity(size),
        locations: vec![0; size * max_len],
        time_bins: vec![0; size * max_len],
        weekdays: vec![0; size * max_len],
        modes: vec![0; size * max_len],
        target_locations: Vec::with_capacity(size),
        target_modes: Vec::with_capacity(size),
    };
    let mut row = 0usize;
    for src in [a, b] {
        for bi in 0..src.size {
            merged.lengths.push(src.lengths[bi]);
            merged.users.push(src.users[bi]);
            merged.target_locations.push(src.target_locations[bi]);
            merged.target_modes.push(src.target_modes[bi]);
            for k in 0..src.lengths[bi] {
                merged.locations[row * max_len + k] = src.locations[bi * src.max_len + k];
                merged.time_bins[row * max_len + k] = src.time_bins[bi * src.max_len + k];
                merged.weekdays[row * max_len + k] = src.weekdays[bi * src.max_len + k];
                merged.modes[row * max_len + k] = src.modes[bi * src.max_len + k];
            }
            row += 1;
        }
    }
    merged
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Batch loss summary. `total` is the optimisation objective: the sum over
/// the batch of location CE plus theta times mode CE; `mean_per_sample` is
/// the logging variant.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: f64,
    pub location: f64,
    pub mode: f64,
    pub mean_per_sample: f64,
    pub samples: usize,
}

/// The joint loss; returns the scalar graph node to backpropagate plus the
/// detached summary numbers.
pub fn joint_loss<E: Scalar>(
    loc_logits: &Tensor<E>,
    mode_logits: &Tensor<E>,
    target_locations: &[u32],
    target_modes: &[u32],
    theta: f64,
    loc_weight: f64,
) -> Result<(Tensor<E>, LossTerms), TrainError> {
    let loc_ce = cross_entropy_from_logits(loc_logits, target_locations)?;
    let mode_ce = cross_entropy_from_logits(mode_logits, target_modes)?;
    let loc_sum = sum_all(&loc_ce);
    let mode_sum = sum_all(&mode_ce);
    let total = add(&scale(&loc_sum, loc_weight), &scale(&mode_sum, theta))?;
    let samples = target_locations.len();
    let terms = LossTerms {
        total: total.item().to_f64(),
        location: loc_sum.item().to_f64(),
        mode: mode_sum.item().to_f64(),
        mean_per_sample: total.item().to_f64() / samples.max(1) as f64,
        samples,
    };
    if !terms.total.is_finite() {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    Ok((total, terms))
}

// ---------------------------------------------------------------------------
// optimiser
// ---------------------------------------------------------------------------

/// Adam with the classical L2 penalty added to the gradient before the
/// moment updates. Moments are kept in f64 regardless of the parameter
/// precision.
pub struct Adam<E: Scalar> {
    params: Vec<Tensor<E>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2_penalty: f64,
}

impl<E: Scalar> Adam<E> {
    pub fn new(params: Vec<Tensor<E>>, l2_penalty: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_penalty,
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (pi, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            p.update_value(|w| {
                for i in 0..w.len() {
                    let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64())
                        + self.l2_penalty * w[i].to_f64();
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] = E::from_f64(w[i].to_f64() - lr * m_hat / (v_hat.sqrt() + self.eps));
                }
            });
        }
    }
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

/// Schedule position: linear warm-up over the first `warmup_epochs` worth of
/// steps, multiplicative decay per completed post-warm-up epoch, and a
/// multiplicative factor per early-stop drop.
pub fn learning_rate(
    cfg: &TrainConfig,
    steps_per_epoch: usize,
    global_step: usize,
    completed_epochs: usize,
    drops: usize,
) -> f64 {
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let base = if global_step < warmup_steps {
        cfg.learning_rate * global_step as f64 / warmup_steps.max(1) as f64
    } else {
        let decay_epochs = completed_epochs.saturating_sub(cfg.warmup_epochs) as i32;
        cfg.learning_rate * (1.0 - cfg.lr_decay).powi(decay_epochs)
    };
    base * cfg.lr_drop_factor.powi(drops as i32)
}

/// What the early stopper decided after seeing one epoch's validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement { strikes: usize },
    RestoreAndDrop { best_epoch: usize, drops: usize },
    Stop { best_epoch: usize },
}

/// Patience-based early stopping with restore-and-drop cycles: after
/// `patience` epochs without improvement, training resumes from the best
/// checkpoint at a tenth of the rate; after `max_drops` such cycles it stops.
pub struct EarlyStopper {
    patience: usize,
    max_drops: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    strikes: usize,
    pub drops: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, max_drops: usize) -> Self {
        EarlyStopper {
            patience,
            max_drops,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            strikes: 0,
            drops: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.strikes = 0;
            return StopDecision::Improved;
        }
        self.strikes += 1;
        if self.strikes < self.patience {
            return StopDecision::NoImprovement {
                strikes: self.strikes,
            };
        }
        self.strikes = 0;
        if self.drops >= self.max_drops {
            return StopDecision::Stop {
                best_epoch: self.best_epoch,
            };
        }
        self.drops += 1;
        StopDecision::RestoreAndDrop {
            best_epoch: self.best_epoch,
            drops: self.drops,
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One line of the training log (`train_log.jsonl`). Wall time is reported
/// on the summary only, so logs stay byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc1: f64,
    pub event: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_s: f64,
}

struct Snapshot<E: Scalar> {
    params: Vec<Vec<E>>,
    buffers: Vec<(String, Vec<E>)>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    adam_t: i32,
}

fn take_snapshot<E: Scalar>(model: &Model<E>, adam: &Adam<E>) -> Snapshot<E> {
    Snapshot {
        params: model
            .named_parameters()
            .iter()
            .map(|(_, t)| t.to_vec())
            .collect(),
        buffers: model.named_buffers(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        adam_t: adam.t,
    }
}

fn restore_snapshot<E: Scalar>(model: &Model<E>, adam: &mut Adam<E>, snap: &Snapshot<E>) {
    for ((_, t), vals) in model.named_parameters().iter().zip(&snap.params) {
        t.set_value(vals);
    }
    for (name, vals) in &snap.buffers {
        model.set_buffer(name, vals.clone()).expect("buffer name");
    }
    adam.m = snap.adam_m.clone();
    adam.v = snap.adam_v.clone();
    adam.t = snap.adam_t;
}

/// Train until the drop schedule stops, returning the per-epoch log. The
/// model is left holding the best-validation weights. When `artifacts_dir`
/// is given, `best.ckpt` is rewritten at every validation improvement and
/// `train_log.jsonl` at the end.
pub fn train<E: Scalar>(
    model: &Model<E>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    artifacts_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if split.validation.is_empty() {
        return Err(TrainError::EmptyValidationSplit);
    }
    let started = Instant::now();
    let mut adam = Adam::new(
        model.named_parameters().into_iter().map(|(_, t)| t).collect(),
        cfg.l2_penalty,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7560_3095_8D30_BE1B));
    let val_batches = eval_batches(&split.validation, cfg.batch_size);
    let steps_per_epoch = {
        let first = make_batches(&split.train, cfg.batch_size, 0, cfg.seed, 1)?;
        coalesce_singletons(first, &split.train).len()
    };

    let mut stopper = EarlyStopper::new(cfg.patience, cfg.max_drops);
    let mut best: Option<Snapshot<E>> = None;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut global_step = 0usize;
    let mut last_lr = 0.0;

    let write_artifacts = |records: &[EpochRecord]| -> Result<(), TrainError> {
        if let Some(dir) = artifacts_dir {
            let path = dir.join("train_log.jsonl");
            let mut text = String::new();
            for r in records {
                text.push_str(&serde_json::to_string(r).expect("epoch record serialises"));
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    };

    'training: for epoch in 1..=cfg.max_epochs {
        let batches = coalesce_singletons(
            make_batches(&split.train, cfg.batch_size, 0, cfg.seed, epoch)?,
            &split.train,
        );
        let mut epoch_loss_sum = 0.0;
        let mut epoch_samples = 0usize;
        for batch in &batches {
            last_lr = learning_rate(cfg, steps_per_epoch, global_step, epoch - 1, stopper.drops);
            adam.zero_grads();
            let out = model.forward(batch, true, &mut rng)?;
            let loss = joint_loss(
                &out.loc_logits,
                &out.mode_logits,
                &batch.target_locations,
                &batch.target_modes,
                cfg.theta,
                cfg.loc_loss_weight,
            );
            let (total, terms) = match loss {
                Ok(v) => v,
                Err(TrainError::Diverged { .. }) => {
                    if let Some(snap) = &best {
                        restore_snapshot(model, &mut adam, snap);
                    }
                    write_artifacts(&records)?;
                    return Err(TrainError::Diverged { epoch });
                }
                Err(e) => return Err(e),
            };
            total.backward()?;
            adam.step(last_lr);
            global_step += 1;
            epoch_loss_sum += terms.total;
            epoch_samples += terms.samples;
        }

        let (val_loss, val_acc1) = validate(model, &val_batches, cfg)?;
        if !val_loss.is_finite() {
            if let Some(snap) = &best {
                restore_snapshot(model, &mut adam, snap);
            }
            write_artifacts(&records)?;
            return Err(TrainError::Diverged { epoch });
        }
        let decision = stopper.observe(epoch, val_loss);
        let event = match decision {
            StopDecision::Improved => {
                best = Some(take_snapshot(model, &adam));
                if let Some(dir) = artifacts_dir {
                    checkpoint::save(&dir.join("best.ckpt"), model)
                        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
                }
                "improved".to_string()
            }
            StopDecision::NoImprovement { strikes } => format!("no_improvement_{strikes}"),
            StopDecision::RestoreAndDrop { best_epoch, drops } => {
                if let Some(snap) = &best {
                    restore_snapshot(model, &mut adam, snap);
                }
                format!("restore_epoch_{best_epoch}_drop_{drops}")
            }
            StopDecision::Stop { best_epoch } => format!("stop_best_epoch_{best_epoch}"),
        };
        records.push(EpochRecord {
            epoch,
            lr: last_lr,
            train_loss: epoch_loss_sum / epoch_samples.max(1) as f64,
            val_loss,
            val_acc1,
            event,
        });
        if matches!(decision, StopDecision::Stop { .. }) {
            break 'training;
        }
    }

    if let Some(snap) = &best {
        restore_snapshot(model, &mut adam, snap);
    }
    write_artifacts(&records)?;
    Ok(TrainReport {
        epochs: records,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Mean validation joint loss and Acc@1 over a fixed batch list, in
/// evaluation mode with no gradient recording.
pub fn validate<E: Scalar>(
    model: &Model<E>,
    batches: &[Batch],
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut count = 0usize;
    for batch in batches {
        let (out, terms) = no_grad(|| -> Result<_, TrainError> {
            let out = model.forward(batch, false, &mut rng)?;
            let (_, terms) = joint_loss(
                &out.loc_logits,
                &out.mode_logits,
                &batch.target_locations,
                &batch.target_modes,
                cfg.theta,
                cfg.loc_loss_weight,
            )?;
            Ok((out, terms))
        })?;
        loss_sum += terms.total;
        count += batch.size;
        let logits = out.loc_logits.to_vec();
        let classes = model.config.num_locations;
        for (bi, &target) in batch.target_locations.iter().enumerate() {
            let row = &logits[bi * classes..(bi + 1) * classes];
            if crate::metrics::top1_index(row) == target as usize {
                hits += 1;
            }
        }
    }
    Ok((loss_sum / count.max(1) as f64, hits as f64 / count.max(1) as f64 * 100.0))
}
