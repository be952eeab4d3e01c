//! Optimizer, learning-rate schedule, feature masking and the training loop.

mod eval;
mod log;

pub use eval::{evaluate, EvalResult, UtteranceResult};
pub use log::{StepRecord, TrainLog};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::data::{pack_batches, Batch, Tokenizer, Utterance};
use crate::encoder::{ForwardOptions, Model, ModelConfig, ParamCounts, Variant};
use crate::error::{Error, Result};
use crate::moe;
use crate::rng::{self, StreamRng};
use crate::tensor::{ParamStore, Real, Tape, Tensor};

/// Random frequency and time masking of input features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub freq_masks: usize,
    pub freq_width: usize,
    pub time_masks: usize,
    pub time_width: usize,
    /// Time-mask width is also capped at `time_ratio * T`.
    pub time_ratio: f64,
}

impl AugmentConfig {
    /// 2 frequency masks of width up to 30, 10 time masks of width up to
    /// 50 frames and at most 10% of the utterance.
    pub fn standard() -> Self {
        AugmentConfig {
            freq_masks: 2,
            freq_width: 30,
            time_masks: 10,
            time_width: 50,
            time_ratio: 0.1,
        }
    }

    pub fn disabled() -> Self {
        AugmentConfig {
            freq_masks: 0,
            freq_width: 0,
            time_masks: 0,
            time_width: 0,
            time_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_ratio) {
            return Err(Error::config("time_ratio", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub cosine_steps: usize,
    pub step_decay_factor: f64,
    pub clip_norm: f64,
    pub aux_weight: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    /// Budget of raw (unstacked) frames per batch.
    pub batch_max_frames: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Recipe of the large-scale setup: 64k warmup steps to 1e-3, 60k cosine
    /// steps, then halving.
    pub fn large() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 64_000,
            cosine_steps: 60_000,
            step_decay_factor: 0.5,
            clip_norm: 0.1,
            aux_weight: 10.0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            max_steps: 1_000_000,
            batch_max_frames: 1_000_000,
            seed: 0,
            augment: AugmentConfig::standard(),
        }
    }

    /// The same recipe shrunk to minutes on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 100,
            cosine_steps: 700,
            max_steps: 800,
            batch_max_frames: 1_600,
            ..Self::large()
        }
    }

    /// Rates, weights and the decay factor must be finite and non-negative;
    /// zero learning rate and zero auxiliary weight are allowed for controls.
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("peak_lr", self.peak_lr),
            ("clip_norm", self.clip_norm),
            ("aux_weight", self.aux_weight),
            ("weight_decay", self.weight_decay),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if self.clip_norm == 0.0 {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.step_decay_factor > 0.0 && self.step_decay_factor <= 1.0) {
            return Err(Error::config("step_decay_factor", "must lie in (0, 1]"));
        }
        for (field, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.cosine_steps == 0 {
            return Err(Error::config("cosine_steps", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be positive"));
        }
        if self.batch_max_frames == 0 {
            return Err(Error::config("batch_max_frames", "must be positive"));
        }
        self.augment.validate()
    }

    pub fn lr_floor(&self) -> f64 {
        self.peak_lr * self.step_decay_factor
    }
}

/// Learning rate at optimizer step `step`: linear warmup from 0, cosine from
/// the peak down to `peak * step_decay_factor`, then one further factor per
/// `cosine_steps` interval.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    if step < config.warmup_steps {
        return peak * step as f64 / config.warmup_steps as f64;
    }
    let floor = config.lr_floor();
    let s = step - config.warmup_steps;
    if s <= config.cosine_steps {
        let phase = std::f64::consts::PI * s as f64 / config.cosine_steps as f64;
        return floor + (peak - floor) * 0.5 * (1.0 + phase.cos());
    }
    let k = (s - config.cosine_steps) / config.cosine_steps;
    floor
        * config
            .step_decay_factor
            .powi(i32::try_from(k).unwrap_or(i32::MAX))
}

/// Zeroes random frequency bands and time spans of one `[frames x feat_dim]`
/// utterance in place.
///
/// Draw order: for each frequency mask, `width ~ U{0..=min(freq_width, F)}`
/// then `start ~ U{0..=F-width}`; then for each time mask,
/// `width ~ U{0..=min(time_width, floor(time_ratio * T))}` then
/// `start ~ U{0..=T-width}`.
pub fn apply_masking(
    features: &mut [f32],
    frames: usize,
    feat_dim: usize,
    config: &AugmentConfig,
    rng: &mut StreamRng,
) {
    debug_assert_eq!(features.len(), frames * feat_dim);
    for _ in 0..config.freq_masks {
        let width = rng.random_range(0..=config.freq_width.min(feat_dim));
        let start = rng.random_range(0..=feat_dim - width);
        for row in features.chunks_mut(feat_dim) {
            row[start..start + width].fill(0.0);
        }
    }
    let cap = config
        .time_width
        .min((config.time_ratio * frames as f64).floor() as usize)
        .min(frames);
    for _ in 0..config.time_masks {
        let width = rng.random_range(0..=cap);
        let start = rng.random_range(0..=frames - width);
        features[start * feat_dim..(start + width) * feat_dim].fill(0.0);
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: i32,
}

impl<S: Real> AdamW<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the gradients in `params`, each multiplied by
    /// `grad_scale` first.
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        lr: f64,
        grad_scale: f64,
        config: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let wd = config.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64() * grad_scale;
                let mi = b1 * m.as_f64() + (1.0 - b1) * g;
                let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = S::from_f64(mi);
                *v = S::from_f64(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + config.adam_eps) + wd * x.as_f64();
                *x -= S::from_f64(lr * update);
            }
        }
    }
}

/// Model and optimizer state advanced one step at a time.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Forward, loss, backward, clipping and one AdamW update. Augmentation
    /// draws from the `augment` stream indexed by the step number.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step + 1;
        let mut batch = batch.clone();
        let mut aug = rng::substream(self.config.seed, "augment", step as u64);
        for b in 0..batch.len() {
            let frames = batch.lengths[b];
            let fd = batch.feat_dim;
            apply_masking(
                batch.utterance_features_mut(b),
                frames,
                fd,
                &self.config.augment,
                &mut aug,
            );
        }

        let model = &mut self.model;
        let mut tape = Tape::new();
        let out = model
            .forward(&mut tape, &batch, ForwardOptions::default())
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step,
                    term: "forward",
                },
                e => e,
            })?;
        let log_probs = tape.log_softmax(out.logits)?;
        let (ctc_var, _) =
            ctc::ctc_loss_packed(&mut tape, log_probs, &out.segments, &batch.targets)?;
        let ctc_loss = tape.value(ctc_var).item().as_f64();
        if !ctc_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                term: "ctc_loss",
            });
        }
        let usage: Vec<Vec<f64>> = out.dispatches.iter().map(|d| d.usage()).collect();
        let (total, load) = if model.config.variant.is_moe() {
            let lb = moe::load_balance_loss(&mut tape, &out.dispatches, model.config.experts)?;
            let load = tape.value(lb).item().as_f64();
            if !load.is_finite() {
                return Err(Error::Diverged {
                    step,
                    term: "load_balance_loss",
                });
            }
            let weighted = tape.scale(lb, self.config.aux_weight as f32);
            (tape.add(ctc_var, weighted)?, load)
        } else {
            (ctc_var, 0.0)
        };
        let total_loss = tape.value(total).item().as_f64();

        model.params.zero_grad();
        tape.backward_into(total, &mut model.params)?;
        let grad_norm = model.params.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                term: "gradient",
            });
        }
        let scale = clip_scale(grad_norm, self.config.clip_norm);
        let lr = lr_at(step, &self.config);
        self.optimizer
            .step(&mut model.params, lr, scale, &self.config);
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            ctc_loss,
            load_balance_loss: load,
            total_loss,
            grad_norm,
            usage,
        })
    }
}

/// Factor that brings a gradient of norm `norm` down to at most `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Batches of one pass over `data`, shuffled with the `batching` stream of
/// epoch `epoch`.
pub fn epoch_batches(data: &[Utterance], config: &TrainConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::substream(config.seed, "batching", epoch);
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let frames: Vec<usize> = data.iter().map(|u| u.frames).collect();
    pack_batches(&frames, &order, config.batch_max_frames)
}

/// Trains for `config.max_steps` steps. `on_step` sees the model after every
/// step, e.g. for progress output or periodic checkpoints.
pub fn train<F>(
    model: Model<f32>,
    config: &TrainConfig,
    data: &[Utterance],
    tokenizer: &Tokenizer,
    mut on_step: F,
) -> Result<(Model<f32>, TrainLog)>
where
    F: FnMut(&Model<f32>, &StepRecord) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Contract(
            "training needs at least one utterance".into(),
        ));
    }
    let mut log = TrainLog::new(model.config.num_moe_layers(), model.config.experts);
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut epoch = 0u64;
    'outer: loop {
        for idx in epoch_batches(data, config, epoch) {
            if trainer.step >= config.max_steps {
                break 'outer;
            }
            let utts: Vec<&Utterance> = idx.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&utts, tokenizer)?;
            let record = trainer.train_step(&batch)?;
            on_step(&trainer.model, &record)?;
            log.push(record)?;
        }
        epoch += 1;
    }
    Ok((trainer.model, log))
}

/// Outcome of training one variant.
pub struct RunResult {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub heldout: EvalResult,
    pub param_counts: ParamCounts,
}

impl RunResult {
    pub fn variant(&self) -> Variant {
        self.model.config.variant
    }
}

/// Trains every configuration on the same data and evaluates each on the
/// held-out split. Training configurations must be identical so that the
/// comparison isolates the architecture.
pub fn run_experiment<F>(
    configs: &[(ModelConfig, TrainConfig)],
    train_set: &[Utterance],
    heldout: &[Utterance],
    tokenizer: &Tokenizer,
    mut on_step: F,
) -> Result<Vec<RunResult>>
where
    F: FnMut(Variant, &StepRecord),
{
    if let Some((_, first)) = configs.first() {
        if configs.iter().any(|(_, t)| t != first) {
            return Err(Error::Contract(
                "all variants in an experiment must share one training configuration".into(),
            ));
        }
    }
    let mut runs = Vec::with_capacity(configs.len());
    for (mc, tc) in configs {
        let model = Model::build(*mc, tc.seed)?;
        let variant = mc.variant;
        let (model, log) = train(model, tc, train_set, tokenizer, |_, r| {
            on_step(variant, r);
            Ok(())
        })?;
        let heldout = evaluate(&model, heldout, tokenizer, tc.batch_max_frames, None)?;
        let param_counts = model.param_counts();
        runs.push(RunResult {
            model,
            log,
            heldout,
            param_counts,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> TrainConfig {
        TrainConfig {
            peak_lr: 1.0,
            warmup_steps: 10,
            cosine_steps: 20,
            step_decay_factor: 0.5,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn warmup_endpoints() {
        let c = schedule();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 1.0);
        assert!((lr_at(5, &c) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_midpoint_is_mean_of_peak_and_floor() {
        let c = schedule();
        assert!((lr_at(20, &c) - 0.75).abs() < 1e-12);
        assert!((lr_at(30, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn step_decay_after_cosine() {
        let c = schedule();
        assert!((lr_at(49, &c) - 0.5).abs() < 1e-12);
        assert!((lr_at(50, &c) - 0.25).abs() < 1e-12);
        assert!((lr_at(70, &c) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn large_recipe_warmup_midpoint() {
        assert!((lr_at(32_000, &TrainConfig::large()) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let c = TrainConfig::large();
        let w = c.warmup_steps;
        assert!((lr_at(w - 1, &c) - lr_at(w, &c)).abs() < 2.0 * c.peak_lr / w as f64);
    }

    #[test]
    fn rejects_bad_decay_factor() {
        let c = TrainConfig {
            step_decay_factor: 1.5,
            ..TrainConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_width_masks_are_identity() {
        let cfg = AugmentConfig {
            freq_width: 0,
            time_width: 0,
            ..AugmentConfig::standard()
        };
        let orig: Vec<f32> = (0..40).map(|i| i as f32 + 1.0).collect();
        let mut x = orig.clone();
        apply_masking(&mut x, 10, 4, &cfg, &mut rng::stream(1, "t"));
        assert_eq!(x, orig);
    }

    #[test]
    fn full_width_time_mask_is_allowed() {
        let cfg = AugmentConfig {
            freq_masks: 0,
            freq_width: 0,
            time_masks: 50,
            time_width: 100,
            time_ratio: 1.0,
        };
        let mut zeroed_all = false;
        for seed in 0..50 {
            let mut x = vec![1.0f32; 12];
            apply_masking(&mut x, 4, 3, &cfg, &mut rng::stream(seed, "t"));
            zeroed_all |= x.iter().all(|&v| v == 0.0);
        }
        assert!(zeroed_all);
    }

    #[test]
    fn clip_scale_never_increases() {
        assert_eq!(clip_scale(0.05, 0.1), 1.0);
        assert!((clip_scale(0.5, 0.1) * 0.5 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::vector(vec![2.0])).unwrap();
        let cfg = TrainConfig::desk();
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, 0.1, 1.0, &cfg);
        let w = store.iter().next().unwrap().value.item();
        assert!((w - (2.0 - 0.1 * cfg.weight_decay * 2.0)).abs() < 1e-12);
    }
}
