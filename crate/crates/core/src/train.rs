//! AdamW with linear warmup and cosine decay, global-norm clipping, and the
//! training loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, BatchStream, DataError};
use crate::model::{ModelError, ModelParams};
use crate::recurrence::{loss_and_grads, RecurrenceError, RecurrenceStrategy};
use crate::tensor::Float;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Hook(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub grad_clip_norm: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Root of every random stream in a run (init, batch order, sweep).
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Small-model hyperparameters: lr 3e-3, 10% warmup, batch 64, clip 1.0.
    pub fn paper_small() -> Self {
        Self {
            learning_rate: 3e-3,
            warmup_fraction: 0.1,
            total_steps: 7630,
            batch_size: 64,
            seq_len: 1024,
            grad_clip_norm: 1.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_eps(),
            weight_decay: default_weight_decay(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Large-model hyperparameters: lr 1e-3, 2% warmup.
    pub fn paper_large() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_fraction: 0.02,
            ..Self::paper_small()
        }
    }

    /// Laptop-sized run: the small-model schedule at batch 16, T = 128.
    pub fn desk_small() -> Self {
        Self {
            total_steps: 500,
            batch_size: 16,
            seq_len: 128,
            ..Self::paper_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be > 0, got {}", self.grad_clip_norm));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and ≥ 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be > 0 and weight_decay ≥ 0".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }
}

/// Learning rate for optimizer step `step` (0-based).
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps();
    if step < warm {
        return cfg.learning_rate * step as f64 / warm as f64;
    }
    let span = cfg.total_steps.saturating_sub(warm);
    if span == 0 {
        return cfg.learning_rate;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clip {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor every gradient was multiplied by (1 when under the threshold).
    pub factor: f64,
}

/// Scales all gradients by `max_norm / g` when their global norm `g` exceeds
/// `max_norm`. A non-finite entry aborts with the offending tensor's name.
pub fn clip_global_norm<F: Float>(grads: &mut ModelParams<F>, max_norm: f64, step: usize) -> Result<Clip> {
    let infos = ModelParams::<F>::param_infos(&grads.config);
    let mut sq = 0.0;
    for (info, t) in infos.iter().zip(grads.tensors()) {
        if !t.is_finite() {
            return Err(TrainError::NonFinite {
                what: format!("gradient of {}", info.name),
                step,
            });
        }
        sq += t.sum_sq();
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFinite {
            what: "global gradient norm".into(),
            step,
        });
    }
    let factor = if norm > max_norm { max_norm / norm } else { 1.0 };
    if factor < 1.0 {
        let f = F::from_f64(factor);
        for t in grads.tensors_mut() {
            t.scale_assign(f);
        }
    }
    Ok(Clip { norm, factor })
}

/// L2 norm of each decoder layer's gradients.
pub fn layer_grad_norms<F: Float>(grads: &ModelParams<F>) -> Vec<f64> {
    grads
        .layers
        .iter()
        .map(|l| l.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt())
        .collect()
}

/// First and second moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub step: u64,
}

impl<F: Float> AdamWState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction. Weight decay is decoupled,
/// `w ← w − lr·λ·w`, and only touches tensors flagged for decay.
pub fn adamw_step<F: Float>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamWState<F>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let infos = ModelParams::<F>::param_infos(&params.config);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(&infos);
    for ((((w, g), m), v), info) in tensors {
        let decay = if info.decay { lr * cfg.weight_decay } else { 0.0 };
        let it = w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut());
        for (((w, &g), m), v) in it {
            let g = g.as_f64();
            let mf = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
            let vf = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
            *m = F::from_f64(mf);
            *v = F::from_f64(vf);
            let mut wf = w.as_f64();
            wf -= decay * wf;
            wf -= lr * (mf / bc1) / ((vf / bc2).sqrt() + cfg.adam_eps);
            *w = F::from_f64(wf);
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
    pub layer_grad_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub tokens_seen: usize,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Callbacks for logging and checkpointing. Both default to doing nothing.
pub trait TrainHooks<F> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps with the parameters after `step` updates.
    fn on_checkpoint(&mut self, _step: usize, _params: &ModelParams<F>) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainHooks<F> for () {}

/// Trains on batches from `next_batch(step)`. On error the parameters hold
/// the last finite update.
pub fn train_with<F: Float>(
    params: &mut ModelParams<F>,
    strategy: &RecurrenceStrategy,
    cfg: &TrainConfig,
    mut next_batch: impl FnMut(usize) -> Batch,
    hooks: &mut dyn TrainHooks<F>,
) -> Result<TrainReport> {
    cfg.validate()?;
    strategy.validate(&params.config)?;
    let mut state = AdamWState::new(params);
    let mut report = TrainReport::default();
    for step in 0..cfg.total_steps {
        let batch = next_batch(step);
        let (loss, mut grads) = loss_and_grads(params, strategy, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss".into(),
                step,
            });
        }
        let layer_norms = layer_grad_norms(&grads);
        let clip = clip_global_norm(&mut grads, cfg.grad_clip_norm, step)?;
        let lr = lr_at(step, cfg);
        let mut next = params.clone();
        adamw_step(&mut next, &grads, &mut state, lr, cfg);
        if !next.is_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters after update".into(),
                step,
            });
        }
        *params = next;
        report.steps += 1;
        report.tokens_seen += batch.inputs.len();
        report.losses.push(loss);
        report.grad_norms.push(clip.norm);
        hooks.on_step(&StepRecord {
            step,
            loss,
            lr,
            grad_norm: clip.norm,
            clip_factor: clip.factor,
            layer_grad_norms: layer_norms,
        })?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            hooks.on_checkpoint(step + 1, params)?;
        }
    }
    report.initial_loss = report.losses.first().copied();
    report.final_loss = report.losses.last().copied();
    Ok(report)
}

/// Trains on shuffled windows of `train_tokens`, ordered by `cfg.seed`.
pub fn train<F: Float>(
    params: &mut ModelParams<F>,
    train_tokens: &[usize],
    strategy: &RecurrenceStrategy,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks<F>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.seq_len > params.config.max_seq_len {
        return Err(TrainError::InvalidConfig(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            cfg.seq_len, params.config.max_seq_len
        )));
    }
    let mut stream = BatchStream::new(train_tokens, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    train_with(params, strategy, cfg, |_| stream.next_batch(), hooks)
}

/// Mean of the last `n` entries (all of them when fewer).
pub fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionalMode};
    use proptest::prelude::*;

    fn cfg(total: usize, warmup: f64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            warmup_fraction: warmup,
            ..TrainConfig::desk_small()
        }
    }

    #[test]
    fn presets() {
        let s = TrainConfig::paper_small();
        assert_eq!((s.learning_rate, s.warmup_fraction, s.batch_size, s.grad_clip_norm), (3e-3, 0.1, 64, 1.0));
        let l = TrainConfig::paper_large();
        assert_eq!((l.learning_rate, l.warmup_fraction), (1e-3, 0.02));
        assert!(TrainConfig { warmup_fraction: 1.0, ..s.clone() }.validate().is_err());
        assert!(TrainConfig { grad_clip_norm: 0.0, ..s }.validate().is_err());
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1000, 0.1);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), c.learning_rate);
        assert!((lr_at(550, &c) - c.learning_rate / 2.0).abs() < 1e-12);
        assert!(lr_at(1000, &c).abs() < 1e-18);
        assert!((lr_at(50, &c) - c.learning_rate / 2.0).abs() < 1e-15);
        let c = cfg(10, 0.15);
        assert_eq!(c.warmup_steps(), 2);
        let no_warm = cfg(10, 0.0);
        assert_eq!(lr_at(0, &no_warm), no_warm.learning_rate);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative() {
        let c = cfg(997, 0.1);
        let w = c.warmup_steps();
        let left = c.learning_rate * (w as f64 - 1e-9) / w as f64;
        assert!((lr_at(w, &c) - left).abs() < 1e-9);
        for s in 0..=c.total_steps {
            assert!(lr_at(s, &c) >= 0.0);
            assert!(lr_at(s, &c) <= c.learning_rate);
        }
    }

    fn grads_with(values: &[f64]) -> ModelParams<f64> {
        let cfg = ModelConfig::tiny(PositionalMode::Nope);
        let mut g = ModelParams::<f64>::init(&cfg, 0).unwrap().zeros_like();
        g.head.data_mut()[..values.len()].copy_from_slice(values);
        g
    }

    #[test]
    fn clip_examples() {
        let mut g = grads_with(&[0.3, 0.4]);
        let c = clip_global_norm(&mut g, 1.0, 0).unwrap();
        assert_eq!(c.factor, 1.0);
        assert!((c.norm - 0.5).abs() < 1e-15);
        let mut g = grads_with(&[3.0, 4.0]);
        let c = clip_global_norm(&mut g, 1.0, 0).unwrap();
        assert!((c.factor - 0.2).abs() < 1e-15);
        assert!((g.head.data()[0] - 0.6).abs() < 1e-15);
        assert!((g.head.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_names_the_bad_tensor() {
        let mut g = grads_with(&[1.0]);
        g.layers[1].wk.data_mut()[3] = f64::NAN;
        let err = clip_global_norm(&mut g, 1.0, 17).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient of layers.1.wk at step 17");
    }

    proptest! {
        #[test]
        fn clipped_norm_within_threshold(values in proptest::collection::vec(-50.0f64..50.0, 1..30), max in 0.01f64..10.0) {
            let mut g = grads_with(&values);
            clip_global_norm(&mut g, max, 0).unwrap();
            let after: f64 = g.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
            prop_assert!(after <= max + 1e-12);
        }
    }

    /// Single-element AdamW written out by hand.
    fn scalar_adamw(w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        let (mut w, mut m, mut v) = (w, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w = w - lr * wd * w - lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn adamw_matches_scalar_oracle() {
        let model = ModelConfig::tiny(PositionalMode::Nope);
        let mut p = ModelParams::<f64>::init(&model, 0).unwrap();
        let w0 = p.head.data()[0];
        let n0 = p.final_norm.data()[0];
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::desk_small()
        };
        let mut st = AdamWState::new(&p);
        let mut g = p.zeros_like();
        g.head.data_mut()[0] = 1.0;
        adamw_step(&mut p, &g, &mut st, 0.1, &c);
        let expected = w0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.head.data()[0] - expected).abs() < 1e-12);
        assert_eq!(p.final_norm.data()[0], n0);

        let c = TrainConfig {
            weight_decay: 0.05,
            ..TrainConfig::desk_small()
        };
        let mut p = ModelParams::<f64>::init(&model, 0).unwrap();
        let mut st = AdamWState::new(&p);
        let seq = [0.5, -1.5, 2.0, 0.01];
        for (i, &gv) in seq.iter().enumerate() {
            let mut g = p.zeros_like();
            g.head.data_mut()[0] = gv;
            adamw_step(&mut p, &g, &mut st, 0.01 * (i + 1) as f64, &c);
        }
        let mut w = w0;
        let (mut m, mut v) = (0.0, 0.0);
        for (i, &gv) in seq.iter().enumerate() {
            let t = (i + 1) as i32;
            let lr = 0.01 * t as f64;
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            w = w - lr * 0.05 * w - lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.head.data()[0] - w).abs() < 1e-12);
        assert_eq!(scalar_adamw(w0, &[1.0], 0.1, 0.9, 0.999, 1e-8, 0.0), expected);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let model = ModelConfig::tiny(PositionalMode::rope());
        let mut p = ModelParams::<f64>::init(&model, 2).unwrap();
        let before = p.clone();
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::desk_small()
        };
        let mut st = AdamWState::new(&p);
        let zero = p.zeros_like();
        adamw_step(&mut p, &zero, &mut st, 0.5, &c);
        assert_eq!(p, before);
    }

    #[test]
    fn decay_is_decoupled_and_skips_norms_and_embeddings() {
        let model = ModelConfig::tiny(PositionalMode::LearnedAbsolute { max_len: 8 });
        let mut p = ModelParams::<f64>::init(&model, 2).unwrap();
        let before = p.clone();
        let c = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::desk_small()
        };
        let mut st = AdamWState::new(&p);
        let zero = p.zeros_like();
        adamw_step(&mut p, &zero, &mut st, 0.5, &c);
        // Zero gradient: only the decay term λ·lr·w remains.
        for (a, b) in p.layers[0].wq.data().iter().zip(before.layers[0].wq.data()) {
            assert!((a - (b - 0.5 * 0.1 * b)).abs() < 1e-15);
        }
        assert_eq!(p.layers[0].attn_norm, before.layers[0].attn_norm);
        assert_eq!(p.final_norm, before.final_norm);
        assert_eq!(p.tok_emb, before.tok_emb);
        assert_eq!(p.pos_emb, before.pos_emb);
    }

    fn tiny_batch() -> Batch {
        let inputs: Vec<usize> = (0..16).map(|i| (i * 5 + 1) % 32).collect();
        let targets: Vec<usize> = (0..16).map(|i| (i * 5 + 6) % 32).collect();
        Batch::new(inputs, targets, 8).unwrap()
    }

    #[test]
    fn zero_steps_leaves_params_alone() {
        let model = ModelConfig::tiny(PositionalMode::Nope);
        let mut p = ModelParams::<f64>::init(&model, 2).unwrap();
        let before = p.clone();
        let c = TrainConfig {
            total_steps: 0,
            ..TrainConfig::desk_small()
        };
        let r = train_with(&mut p, &RecurrenceStrategy::Baseline, &c, |_| tiny_batch(), &mut ()).unwrap();
        assert_eq!(p, before);
        assert!(r.losses.is_empty() && r.grad_norms.is_empty());
    }

    #[test]
    fn repeated_batch_is_memorised_deterministically() {
        let model = ModelConfig::tiny(PositionalMode::Alibi);
        let c = TrainConfig {
            total_steps: 150,
            learning_rate: 1e-2,
            batch_size: 2,
            seq_len: 8,
            ..TrainConfig::desk_small()
        };
        let strategy = RecurrenceStrategy::ilr(&[2, 1]).unwrap();
        let run = || {
            let mut p = ModelParams::<f64>::init(&model, 9).unwrap();
            train_with(&mut p, &strategy, &c, |_| tiny_batch(), &mut ()).unwrap()
        };
        let r = run();
        assert!(r.final_loss.unwrap() < 0.1 * r.initial_loss.unwrap(), "{:?}", (r.initial_loss, r.final_loss));
        assert_eq!(r, run());
    }

    struct Collect(Vec<StepRecord>, Vec<usize>);

    impl TrainHooks<f64> for Collect {
        fn on_step(&mut self, r: &StepRecord) -> Result<()> {
            self.0.push(r.clone());
            Ok(())
        }

        fn on_checkpoint(&mut self, step: usize, _: &ModelParams<f64>) -> Result<()> {
            self.1.push(step);
            Ok(())
        }
    }

    #[test]
    fn hooks_see_every_step_and_checkpoint() {
        let model = ModelConfig::tiny(PositionalMode::Nope);
        let mut p = ModelParams::<f64>::init(&model, 2).unwrap();
        let c = TrainConfig {
            total_steps: 7,
            checkpoint_every: 3,
            batch_size: 2,
            seq_len: 8,
            ..TrainConfig::desk_small()
        };
        let mut hooks = Collect(Vec::new(), Vec::new());
        train_with(&mut p, &RecurrenceStrategy::Baseline, &c, |_| tiny_batch(), &mut hooks).unwrap();
        assert_eq!(hooks.0.len(), 7);
        assert_eq!(hooks.1, vec![3, 6]);
        assert_eq!(hooks.0[0].lr, 0.0);
        assert_eq!(hooks.0[2].layer_grad_norms.len(), 2);
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_last_good_params() {
        let model = ModelConfig::tiny(PositionalMode::Nope);
        let mut p = ModelParams::<f64>::init(&model, 2).unwrap();
        p.head.data_mut()[0] = f64::INFINITY;
        let before = p.clone();
        let c = TrainConfig {
            total_steps: 3,
            batch_size: 2,
            seq_len: 8,
            ..TrainConfig::desk_small()
        };
        let err = train_with(&mut p, &RecurrenceStrategy::Baseline, &c, |_| tiny_batch(), &mut ()).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0, .. }), "{err}");
        assert_eq!(p, before);
    }
}
