//! Optimization: learning-rate schedule, Adam, one training step, and the
//! pre-training loop.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{
    language_sampling_probs, make_batches, median_hours, sample_mask, BatchSampler, Corpus,
    MaskingConfig,
};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::{LossOptions, MaskedExample, Model};
use crate::numerics::{derive_seed, rng_for, Gradients, ParamStore, Tape, Tensor};
use crate::objectives::codebook_perplexity;

const PURPOSE_MASK: u64 = 1;
const PURPOSE_FORWARD: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Parameter initialization seed.
    pub init_seed: u64,
    /// Seed for batches, masks, dropout and quantizer noise.
    pub data_seed: u64,
    /// Clip the global gradient norm to this value when set.
    pub max_grad_norm: Option<f64>,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
    /// Keep the convolutional feature encoder fixed.
    pub freeze_feature_encoder: bool,
    /// Language sampling exponent for low-resource languages.
    pub sampling_alpha: f64,
    /// Hours at or below which a language counts as low-resource; the
    /// median when unset.
    pub sampling_threshold: Option<f64>,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_steps: 200,
            total_steps: 3000,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            batch_size: 8,
            init_seed: 1,
            data_seed: 2,
            max_grad_norm: None,
            checkpoint_every: 1000,
            freeze_feature_encoder: false,
            sampling_alpha: 0.5,
            sampling_threshold: None,
            masking: MaskingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            warmup_steps: 8000,
            total_steps: 400_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be > 0");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be < total_steps");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return bad("max_grad_norm must be > 0");
        }
        self.masking.validate()
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::IndexOutOfRange {
            index: step as usize,
            len: cfg.total_steps as usize + 1,
        });
    }
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    Ok(if step <= w {
        if w == 0 {
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / w as f64
        }
    } else {
        cfg.peak_lr * (t - step) as f64 / (t - w) as f64
    })
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, p)| Tensor::zeros(p.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.param(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / (libm::sqrt(vi / c2) + eps);
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub temperature: f64,
    pub total: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub adversarial: Option<f64>,
    pub orthogonal: Option<f64>,
    pub grad_norm: f64,
    pub codebook_perplexity: f64,
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model.params);
        Self {
            model,
            adam,
            step: 0,
        }
    }
}

fn is_feature_encoder(name: &str) -> bool {
    name.starts_with("fe.")
}

/// Sampling probabilities the trainer uses for `corpus`.
pub fn sampling_probs(cfg: &TrainConfig, corpus: &Corpus) -> Result<Vec<f64>> {
    let hours = corpus.hours();
    let threshold = cfg
        .sampling_threshold
        .unwrap_or_else(|| median_hours(&hours));
    language_sampling_probs(&hours, cfg.sampling_alpha, Some(threshold))
}

/// Masks for one batch; redrawn until at least two steps are masked.
pub fn batch_masks(
    state: &TrainState,
    corpus: &Corpus,
    utterances: &[usize],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<Vec<usize>>> {
    let enc = &state.model.config.encoder;
    utterances
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let len = enc.subsampled_len(corpus.utterances[u].frames());
            if len < 2 {
                return Err(Error::InputTooShort {
                    min: 2 * enc.min_frames(),
                    got: corpus.utterances[u].frames(),
                });
            }
            let mut rng = rng_for(cfg.data_seed, &[step, PURPOSE_MASK, i as u64]);
            loop {
                let m = sample_mask(len, &cfg.masking, &mut rng);
                if m.len() >= 2 {
                    return Ok(m);
                }
            }
        })
        .collect()
}

fn finite_or(component: &'static str, step: u64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { component, step })
    }
}

/// Forward, backward and one Adam update on `utterances`.
pub fn train_step(
    state: &mut TrainState,
    corpus: &Corpus,
    utterances: &[usize],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let step = state.step;
    let lr = lr_at_step((step + 1).min(cfg.total_steps), cfg)?;
    let temperature = state.model.config.quantizer.temperature_at(step);
    let masks = batch_masks(state, corpus, utterances, cfg, step)?;
    let examples: Vec<MaskedExample<'_>> = utterances
        .iter()
        .zip(&masks)
        .map(|(&u, mask)| MaskedExample {
            frames: &corpus.utterances[u].features,
            language: corpus.utterances[u].language,
            mask,
        })
        .collect();
    let opts = LossOptions {
        mode: Mode::Train,
        temperature,
        reverse_gradient: true,
        seed: derive_seed(cfg.data_seed, &[step, PURPOSE_FORWARD]),
    };

    let (mut grads, metrics) = {
        let model = &state.model;
        let mut tape = Tape::with_params(&model.params);
        let loss = model.config.batch_loss(&mut tape, &examples, &opts)?;
        let val = |v| tape.value(v).item();
        let total = finite_or("total", step, val(loss.total)?)?;
        let contrastive = finite_or("contrastive", step, val(loss.parts.contrastive)?)?;
        let diversity = finite_or("diversity", step, val(loss.parts.diversity)?)?;
        let adversarial = match loss.parts.adversarial {
            Some(v) => Some(finite_or("adversarial", step, val(v)?)?),
            None => None,
        };
        let orthogonal = match loss.parts.orthogonal {
            Some(v) => Some(finite_or("orthogonal", step, val(v)?)?),
            None => None,
        };
        let probs: Vec<&Tensor> = loss.probs.iter().map(|&p| tape.value(p)).collect();
        let perplexity = batch_perplexity(&probs)?;
        let grads = tape.backward(loss.total)?;
        (
            grads,
            StepMetrics {
                step,
                lr,
                temperature,
                total,
                contrastive,
                diversity,
                adversarial,
                orthogonal,
                grad_norm: 0.0,
                codebook_perplexity: perplexity,
            },
        )
    };

    if cfg.freeze_feature_encoder {
        let frozen: Vec<_> = state
            .model
            .params
            .iter()
            .filter(|(_, name, _)| is_feature_encoder(name))
            .map(|(id, _, _)| id)
            .collect();
        for id in frozen {
            grads.remove_param(id);
        }
    }
    let grad_norm = finite_or("gradient", step, grads.global_norm())?;
    if let Some(max) = cfg.max_grad_norm {
        if grad_norm > max {
            let s = max / grad_norm;
            for (_, g) in grads.params_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    state.adam.update(
        &mut state.model.params,
        &grads,
        lr,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    state.step += 1;
    Ok(StepMetrics {
        grad_norm,
        ..metrics
    })
}

/// Codebook perplexity over all rows of a batch.
fn batch_perplexity(probs: &[&Tensor]) -> Result<f64> {
    let Some(first) = probs.first() else {
        return Ok(0.0);
    };
    let (g, v) = (first.shape()[1], first.shape()[2]);
    let rows: usize = probs.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * g * v);
    for p in probs {
        data.extend_from_slice(p.data());
    }
    codebook_perplexity(&Tensor::new(alloc::vec![rows, g, v], data)?)
}

/// Receives metrics and checkpoints from [`run_pretraining`].
pub trait TrainingSink {
    fn on_metrics(&mut self, metrics: &StepMetrics) -> Result<()>;
    /// `complete` is false for intermediate checkpoints.
    fn on_checkpoint(&mut self, state: &TrainState, complete: bool) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl TrainingSink for NullSink {
    fn on_metrics(&mut self, _: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _: &TrainState, _: bool) -> Result<()> {
        Ok(())
    }
}

pub fn batch_sampler<'c>(cfg: &TrainConfig, corpus: &'c Corpus) -> Result<BatchSampler<'c>> {
    let probs = sampling_probs(cfg, corpus)?;
    make_batches(corpus, &probs, cfg.batch_size, cfg.data_seed)
}

/// Runs from `state.step` to `cfg.total_steps`. Batch `n` depends only on
/// the data seed and `n`, so resuming from a checkpoint reproduces the
/// uninterrupted run.
pub fn run_pretraining(
    state: &mut TrainState,
    cfg: &TrainConfig,
    corpus: &Corpus,
    sink: &mut dyn TrainingSink,
) -> Result<()> {
    cfg.validate()?;
    corpus.validate()?;
    if corpus.num_languages() != state.model.config.num_languages {
        return Err(Error::Config(format!(
            "model expects {} languages, corpus has {}",
            state.model.config.num_languages,
            corpus.num_languages()
        )));
    }
    if corpus.feature_dim != state.model.config.encoder.input_feature_dim {
        return Err(Error::Config(format!(
            "model expects {}-dim features, corpus has {}",
            state.model.config.encoder.input_feature_dim, corpus.feature_dim
        )));
    }
    let sampler = batch_sampler(cfg, corpus)?;
    while state.step < cfg.total_steps {
        let batch = sampler.batch(state.step);
        let metrics = train_step(state, corpus, &batch.utterances, cfg)?;
        sink.on_metrics(&metrics)?;
        if cfg.checkpoint_every > 0
            && state.step.is_multiple_of(cfg.checkpoint_every)
            && state.step < cfg.total_steps
        {
            sink.on_checkpoint(state, false)?;
        }
    }
    sink.on_checkpoint(state, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(lr_at_step(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at_step(8000, &cfg).unwrap(), 5e-4);
        assert_eq!(lr_at_step(4000, &cfg).unwrap(), 2.5e-4);
        assert_eq!(lr_at_step(400_000, &cfg).unwrap(), 0.0);
        assert!(lr_at_step(400_001, &cfg).is_err());
    }
}
