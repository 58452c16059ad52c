//! Answer-masked losses, progressive loss for looped models, AdamW with a
//! trapezoid schedule and batch-size ramp, and the training loop.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{Batch, EncodedSample, Vocabulary};
use crate::model::{batch_abacus_ids, ForwardInput, ForwardOptions, Model, ModelError, OptimizerState, VariantKind};
use crate::positions::{sample_offset, AbacusConfig, OffsetMode};
use crate::substrate::{Real, SubstrateError, Tape, Var};
use crate::task_data::indexed_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch has no answer tokens to train on")]
    EmptyMask,
    #[error("progressive loss requires a looped model")]
    NotLooped,
    #[error("non-finite loss {loss} at step {step} (batch size {batch_size}, lr {lr})")]
    NonFinite {
        step: u64,
        loss: f64,
        batch_size: usize,
        lr: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data is empty")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Encoding(#[from] crate::encoding::EncodingError),
    #[error(transparent)]
    Position(#[from] crate::positions::PositionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Raised by a step observer.
    #[error("{0}")]
    Observer(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over every answer token in the batch.
    #[default]
    TokenMean,
    /// Mean within each sample, then across samples.
    SampleMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub batch_ramp: f64,
    pub steps: u64,
    pub progressive_alpha: f64,
    pub divide_block_grads: bool,
    pub reduction: LossReduction,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub warmup_fraction: f64,
    pub cooldown_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            batch_ramp: 0.6,
            steps: 20_000,
            progressive_alpha: 1.0,
            divide_block_grads: false,
            reduction: LossReduction::TokenMean,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            warmup_fraction: 0.1,
            cooldown_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.progressive_alpha) {
            return fail("progressive_alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.batch_ramp) {
            return fail("batch_ramp must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.steps == 0 {
            return fail("batch_size and steps must be positive");
        }
        if self.warmup_fraction < 0.0 || self.cooldown_fraction < 0.0 || self.warmup_fraction + self.cooldown_fraction > 1.0 {
            return fail("warmup_fraction and cooldown_fraction must be non-negative and sum to at most 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::from_fractions(self.steps, self.warmup_fraction, self.cooldown_fraction)
    }
}

/// Trapezoid: linear warmup, constant plateau, linear cooldown to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LrSchedule {
    pub warmup: u64,
    pub plateau: u64,
    pub cooldown: u64,
}

impl LrSchedule {
    pub fn from_fractions(total: u64, warmup: f64, cooldown: f64) -> Self {
        let w = (total as f64 * warmup).round() as u64;
        let c = ((total as f64 * cooldown).round() as u64).min(total - w);
        Self {
            warmup: w,
            plateau: total - w - c,
            cooldown: c,
        }
    }

    pub fn total(&self) -> u64 {
        self.warmup + self.plateau + self.cooldown
    }

    /// Multiplier for 1-based step `s`.
    pub fn factor(&self, s: u64) -> f64 {
        let total = self.total();
        if s <= self.warmup {
            s as f64 / self.warmup.max(1) as f64
        } else if s <= self.warmup + self.plateau {
            1.0
        } else if s >= total {
            0.0
        } else {
            (total - s) as f64 / self.cooldown as f64
        }
    }
}

/// Batch size at 1-based step `s`: linear from `full / 8` to `full` over the
/// first `ramp` fraction of training.
pub fn ramp_batch_size(full: usize, ramp: f64, s: u64, total: u64) -> usize {
    let start = (full / 8).max(1);
    let ramp_steps = ramp * total as f64;
    if ramp_steps <= 0.0 {
        return full;
    }
    let frac = ((s.saturating_sub(1)) as f64 / ramp_steps).min(1.0);
    (start as f64 + (full - start) as f64 * frac).round() as usize
}

/// Per-position weights implementing the reduction mode.
pub fn loss_weights(batch: &Batch, mode: LossReduction) -> Result<Vec<f64>> {
    let total = batch.weights.iter().filter(|&&w| w).count();
    if total == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(match mode {
        LossReduction::TokenMean => batch
            .weights
            .iter()
            .map(|&w| if w { 1.0 / total as f64 } else { 0.0 })
            .collect(),
        LossReduction::SampleMean => {
            let counts: Vec<usize> = batch
                .weights
                .chunks(batch.seq.max(1))
                .map(|row| row.iter().filter(|&&w| w).count())
                .collect();
            let samples = counts.iter().filter(|&&c| c > 0).count() as f64;
            batch
                .weights
                .iter()
                .enumerate()
                .map(|(i, &w)| if w { 1.0 / (counts[i / batch.seq] as f64 * samples) } else { 0.0 })
                .collect()
        }
    })
}

/// Cross-entropy over answer positions only.
pub fn masked_loss<T: Real>(tape: &mut Tape<T>, logits: Var, batch: &Batch, mode: LossReduction) -> Result<Var> {
    let w: Vec<T> = loss_weights(batch, mode)?.into_iter().map(T::lit).collect();
    Ok(tape.cross_entropy(logits, &batch.targets, &w)?)
}

pub struct ProgressiveLoss {
    pub loss: Var,
    pub full: f64,
    pub partial: Option<f64>,
    pub r_partial: usize,
}

/// `(1 - a/2) L(r) + (a/2) L(r')` with `r'` uniform on `1..=r`, recorded on
/// one tape so a single backward pass covers both terms.
#[allow(clippy::too_many_arguments)]
pub fn progressive_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    vars: &[Var],
    input: &ForwardInput,
    batch: &Batch,
    mode: LossReduction,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<ProgressiveLoss> {
    if model.variant.kind != VariantKind::Looped {
        return Err(TrainError::NotLooped);
    }
    let r = model.variant.recurrences;
    let full_logits = model.graph(tape, vars, input, &ForwardOptions::default())?[0];
    let full = masked_loss(tape, full_logits, batch, mode)?;
    let full_value = tape.value(full)[0].as_f64();
    let r_partial = rng.gen_range(1..=r);
    let w = alpha / 2.0;
    if w == 0.0 {
        return Ok(ProgressiveLoss {
            loss: full,
            full: full_value,
            partial: None,
            r_partial,
        });
    }
    let opts = ForwardOptions {
        recurrences: Some(r_partial),
        ..Default::default()
    };
    let partial_logits = model.graph(tape, vars, input, &opts)?[0];
    let partial = masked_loss(tape, partial_logits, batch, mode)?;
    let partial_value = tape.value(partial)[0].as_f64();
    let scaled = tape.scale(full, 1.0 - w);
    let loss = tape.axpy(w, partial, scaled)?;
    Ok(ProgressiveLoss {
        loss,
        full: full_value,
        partial: Some(partial_value),
        r_partial,
    })
}

/// Divides the gradients of the layer stack by `r`; other gradients are
/// left untouched.
pub fn scale_recurrent_gradients<T: Real>(model: &Model, grads: &mut [Vec<T>], r: usize) {
    if r <= 1 {
        return;
    }
    let s = T::lit(1.0 / r as f64);
    for (i, g) in grads.iter_mut().enumerate() {
        if model.is_block_param(i) {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies to weight matrices, not
/// to embedding tables, norms, biases or scalars.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainingConfig) -> Self {
        let state = OptimizerState {
            t: 0,
            m: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            v: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        };
        Self::with_state(model, cfg, state)
    }

    pub fn with_state(model: &Model, cfg: &TrainingConfig, state: OptimizerState) -> Self {
        let decay_mask = model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| p.shape().len() == 2 && !n.starts_with("embed.") && !n.contains(".fire.w1"))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state,
            decay_mask,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f32>], lr: f64) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let decay = if self.decay_mask[i] { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *x = (*x as f64 * (1.0 - decay) - lr * update) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub wall_time: f64,
    pub grad_norm: f64,
    pub flops: f64,
}

/// Rough training FLOPs for one step: six per weight per token, plus
/// attention score and mix products.
pub fn estimate_step_flops(model: &Model, batch: &Batch) -> f64 {
    let tokens = (batch.batch * batch.seq) as f64;
    let embed: usize = model
        .names()
        .iter()
        .zip(model.params())
        .filter(|(n, _)| n.starts_with("embed."))
        .map(|(_, p)| p.len())
        .sum();
    let weights = (model.num_params() - embed) as f64 * model.variant.recurrences as f64;
    let attn = 6.0 * 2.0 * tokens * batch.seq as f64 * model.config.hidden_size as f64 * model.variant.effective_depth() as f64;
    6.0 * weights * tokens + attn
}

/// Model plus optimizer at a given step; the unit of resumption.
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainingConfig) -> Self {
        let optimizer = AdamW::new(&model, cfg);
        Self {
            model,
            optimizer,
            step: 0,
        }
    }
}

/// Gradients of the training loss on one batch, with the loss value.
/// Training uses `f32`; `f64` serves exact checks.
pub fn batch_gradients<T: Real>(
    model: &Model,
    vocab: &Vocabulary,
    batch: &Batch,
    beta: usize,
    cfg: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = model.params_as::<T>().iter().map(|p| tape.param(p)).collect();
    let ids = if model.config.position.abacus {
        Some(batch_abacus_ids(vocab, &batch.inputs, batch.seq, beta, model.config.abacus.table_size)?)
    } else {
        None
    };
    let input = ForwardInput {
        tokens: &batch.inputs,
        batch: batch.batch,
        seq: batch.seq,
        abacus_ids: ids.as_deref(),
    };
    let loss = if model.variant.kind == VariantKind::Looped && cfg.progressive_alpha > 0.0 {
        progressive_loss(&mut tape, model, &vars, &input, batch, cfg.reduction, cfg.progressive_alpha, rng)?.loss
    } else {
        let logits = model.graph(&mut tape, &vars, &input, &ForwardOptions::default())?[0];
        masked_loss(&mut tape, logits, batch, cfg.reduction)?
    };
    let value = tape.value(loss)[0].as_f64();
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![T::zero(); p.len()], <[T]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// [`batch_gradients`] followed by the optional division of block
/// gradients by the recurrence count.
pub fn step_gradients<T: Real>(
    model: &Model,
    vocab: &Vocabulary,
    batch: &Batch,
    beta: usize,
    cfg: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Vec<T>>)> {
    let (loss, mut grads) = batch_gradients::<T>(model, vocab, batch, beta, cfg, rng)?;
    if cfg.divide_block_grads && model.variant.kind == VariantKind::Looped {
        scale_recurrent_gradients(model, &mut grads, model.variant.recurrences);
    }
    Ok((loss, grads))
}

/// Batch and offset for one training step. The returned stream continues
/// with the step's remaining draws (partial recurrence count).
pub struct StepDraw {
    pub batch: Batch,
    /// One Abacus offset shared by every sequence in the batch.
    pub beta: usize,
    pub rng: ChaCha8Rng,
}

pub fn draw_step(abacus: &AbacusConfig, data: &[EncodedSample], cfg: &TrainingConfig, s: u64) -> Result<StepDraw> {
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut rng = indexed_rng(cfg.seed, s);
    let size = ramp_batch_size(cfg.batch_size, cfg.batch_ramp, s, cfg.steps);
    let picked: Vec<EncodedSample> = (0..size).map(|_| data[rng.gen_range(0..data.len())].clone()).collect();
    let batch = Batch::collate(&picked)?;
    let beta = sample_offset(abacus, &mut rng, OffsetMode::Train);
    Ok(StepDraw { batch, beta, rng })
}

/// Runs optimizer steps until `state.step == until` (capped at
/// `cfg.steps`). Every step draws its batch, offset and partial recurrence
/// from a stream keyed by `(seed, step)`, so a resumed run reproduces an
/// uninterrupted one exactly.
pub fn train(
    state: &mut TrainState,
    data: &[EncodedSample],
    vocab: &Vocabulary,
    cfg: &TrainingConfig,
    until: u64,
    mut observe: impl FnMut(&StepMetrics, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let schedule = cfg.schedule();
    let start = Instant::now();
    let until = until.min(cfg.steps);
    while state.step < until {
        let s = state.step + 1;
        let StepDraw {
            batch,
            beta,
            mut rng,
        } = draw_step(&state.model.config.abacus, data, cfg, s)?;
        let size = batch.batch;
        let (loss, mut grads) = step_gradients::<f32>(&state.model, vocab, &batch, beta, cfg, &mut rng)?;
        let lr = cfg.learning_rate * schedule.factor(s);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: s,
                loss,
                batch_size: size,
                lr,
            });
        }
        let grad_norm = match cfg.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        state.optimizer.step(&mut state.model, &grads, lr);
        state.step = s;
        let metrics = StepMetrics {
            step: s,
            loss,
            lr,
            batch_size: size,
            wall_time: start.elapsed().as_secs_f64(),
            grad_norm,
            flops: estimate_step_flops(&state.model, &batch),
        };
        observe(&metrics, state)?;
    }
    Ok(())
}
