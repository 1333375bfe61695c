//! Assembly of the backbone, quantizer, conditioning and losses into one
//! model per variant.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    apply_mask, context_encode, feature_encode, quantize, ContextSequence, EncoderConfig,
    LayerHook, Mode, QuantizerConfig,
};
use crate::error::{Error, Result};
use crate::langcond::{
    adapter_param_specs, adaptive_adapter_param_specs, embedding_param_specs, ConditioningKind,
    LangCondConfig, LanguageConditioning, EMBEDDING,
};
use crate::numerics::{materialize, rng_for, ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::objectives::{
    adversarial_loss, contrastive_loss, discriminator_param_specs, grl, orthogonal_loss,
    total_loss, AdversarialConfig, ContrastiveConfig, LossComponents, LossWeights,
    OrthogonalConfig,
};
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_languages: usize,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub contrastive: ContrastiveConfig,
    pub adversarial: AdversarialConfig,
    pub orthogonal: OrthogonalConfig,
    pub langcond: LangCondConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Variant::Xlsr, 4)
    }
}

impl ModelConfig {
    pub fn desk(variant: Variant, num_languages: usize) -> Self {
        let encoder = EncoderConfig::desk();
        Self {
            variant,
            num_languages,
            adversarial: AdversarialConfig {
                tap_layer: encoder.num_blocks,
                hidden_units: 64,
                ..AdversarialConfig::default()
            },
            encoder,
            quantizer: QuantizerConfig::default(),
            contrastive: ContrastiveConfig::default(),
            orthogonal: OrthogonalConfig::default(),
            langcond: LangCondConfig::default(),
        }
    }

    /// Full-size profile: 16 blocks of width 512, 16 languages.
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            variant,
            num_languages: 16,
            encoder: EncoderConfig::full_scale(),
            quantizer: QuantizerConfig {
                num_groups: 2,
                entries_per_group: 320,
                entry_dim: 384,
                ..QuantizerConfig::default()
            },
            contrastive: ContrastiveConfig::default(),
            adversarial: AdversarialConfig::default(),
            orthogonal: OrthogonalConfig::default(),
            langcond: LangCondConfig {
                adapter_bottleneck: 256,
                ..LangCondConfig::default()
            },
        }
    }

    /// Smallest profile, for finite-difference checks.
    pub fn tiny(variant: Variant, num_languages: usize) -> Self {
        Self {
            variant,
            num_languages,
            encoder: EncoderConfig::tiny(),
            quantizer: QuantizerConfig {
                num_groups: 2,
                entries_per_group: 4,
                entry_dim: 4,
                hard: false,
                ..QuantizerConfig::default()
            },
            contrastive: ContrastiveConfig {
                num_distractors: 4,
                ..ContrastiveConfig::default()
            },
            adversarial: AdversarialConfig {
                tap_layer: 2,
                hidden_units: 8,
                ..AdversarialConfig::default()
            },
            orthogonal: OrthogonalConfig::default(),
            langcond: LangCondConfig {
                adapter_bottleneck: 4,
                k_scale: 2,
                k_bias: 2,
                factor_init_std: 0.1,
                ..LangCondConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        if self.num_languages == 0 {
            return Err(Error::Config("num_languages must be positive".into()));
        }
        if self.quantizer.target_dim() != self.encoder.projection_dim {
            return Err(Error::Config(format!(
                "quantizer width {} (groups x entry_dim) must equal projection_dim {}",
                self.quantizer.target_dim(),
                self.encoder.projection_dim
            )));
        }
        if !(self.contrastive.temperature > 0.0) {
            return Err(Error::Temperature(self.contrastive.temperature));
        }
        let blocks = self.encoder.num_blocks;
        if self.variant == Variant::La && self.adversarial.tap_layer > blocks {
            return Err(Error::Config(format!(
                "adversarial tap_layer {} exceeds num_blocks {blocks}",
                self.adversarial.tap_layer
            )));
        }
        if self.conditioning().is_some() && self.langcond.insertion_layer > blocks {
            return Err(Error::Config(format!(
                "insertion_layer {} exceeds num_blocks {blocks}",
                self.langcond.insertion_layer
            )));
        }
        if self.variant == Variant::Lsaw
            && (self.langcond.k_scale == 0 || self.langcond.k_bias == 0)
        {
            return Err(Error::Config("k_scale and k_bias must be >= 1".into()));
        }
        Ok(())
    }

    pub fn conditioning(&self) -> Option<ConditioningKind> {
        ConditioningKind::for_variant(self.variant)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            diversity: self.contrastive.diversity_weight,
            lambda: self.adversarial.lambda,
            alpha: self.orthogonal.alpha,
        }
    }

    /// Every trainable parameter of this variant, in a stable order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut out = Vec::new();
        let d = self.encoder.model_dim;
        let m = self.num_languages;
        self.encoder.param_specs(&mut out);
        self.quantizer.param_specs(d, &mut out);
        let b = self.langcond.bottleneck(d);
        match self.variant {
            Variant::Xlsr => {}
            Variant::La => discriminator_param_specs(d, &self.adversarial, m, &mut out),
            Variant::Le => embedding_param_specs(m, d, &mut out),
            Variant::Lsa => adapter_param_specs(m, d, b, &mut out),
            Variant::Lsaw => adaptive_adapter_param_specs(m, d, b, &self.langcond, &mut out),
        }
        Ok(out)
    }

    fn hook(&self, language: usize) -> Option<LanguageConditioning> {
        self.conditioning().map(|kind| LanguageConditioning {
            kind,
            language,
            num_languages: self.num_languages,
            insertion_layer: self.langcond.insertion_layer,
        })
    }

    /// Unmasked encoder pass; returns every layer tap and the projection.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        frames: &Tensor,
        language: usize,
        mode: Mode,
        seed: u64,
    ) -> Result<ContextSequence> {
        crate::encoder::check_language(language, self.num_languages)?;
        let mut rng = rng_for(seed, &[0]);
        let x = tape.constant(frames.clone());
        let z = feature_encode(tape, &self.encoder, x, mode, &mut rng)?;
        let hook = self.hook(language);
        context_encode(
            tape,
            &self.encoder,
            z,
            hook.as_ref().map(|h| h as &dyn LayerHook),
            mode,
            &mut rng,
        )
    }

    /// Loss of one batch on `tape` (bound to the model parameters).
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[MaskedExample<'_>],
        opts: &LossOptions,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut contrastive = Vec::with_capacity(batch.len());
        let mut diversity = Vec::with_capacity(batch.len());
        let mut adversarial = Vec::new();
        let mut probs = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            crate::encoder::check_language(ex.language, self.num_languages)?;
            let mut rng = rng_for(opts.seed, &[i as u64]);
            let x = tape.constant(ex.frames.clone());
            let z = feature_encode(tape, &self.encoder, x, opts.mode, &mut rng)?;
            let q = quantize(
                tape,
                &self.quantizer,
                z,
                opts.temperature,
                opts.mode,
                &mut rng,
            )?;
            let corrupted = apply_mask(tape, z, ex.mask)?;
            let hook = self.hook(ex.language);
            let ctx = context_encode(
                tape,
                &self.encoder,
                corrupted,
                hook.as_ref().map(|h| h as &dyn LayerHook),
                opts.mode,
                &mut rng,
            )?;
            let terms = contrastive_loss(
                tape,
                ctx.output,
                q.targets,
                q.probs,
                ex.mask,
                &self.contrastive,
                &mut rng,
            )?;
            contrastive.push(terms.contrastive);
            diversity.push(terms.diversity);
            probs.push(q.probs);
            if self.variant == Variant::La {
                let tap = ctx.tap(self.adversarial.tap_layer).ok_or_else(|| {
                    Error::Config(format!("no tap at layer {}", self.adversarial.tap_layer))
                })?;
                let h = if opts.reverse_gradient {
                    grl(tape, tap)?
                } else {
                    tap
                };
                adversarial.push(adversarial_loss(tape, h, &vec![ex.language; z.len])?);
            }
        }
        let contrastive = mean_of(tape, &contrastive)?;
        let diversity = mean_of(tape, &diversity)?;
        let adversarial = if adversarial.is_empty() {
            None
        } else {
            Some(mean_of(tape, &adversarial)?)
        };
        let orthogonal = if self.variant == Variant::Le {
            let table = tape.param_named(EMBEDDING)?;
            Some(orthogonal_loss(tape, table)?)
        } else {
            None
        };
        let parts = LossComponents {
            contrastive,
            diversity,
            adversarial,
            orthogonal,
        };
        let total = total_loss(tape, self.variant, &parts, &self.loss_weights())?;
        Ok(BatchLoss {
            total,
            parts,
            probs,
        })
    }
}

fn mean_of(tape: &mut Tape<'_>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    tape.scale(acc, 1.0 / xs.len() as f64)
}

/// One utterance with its language and the encoder-rate steps to mask.
#[derive(Debug, Clone, Copy)]
pub struct MaskedExample<'a> {
    pub frames: &'a Tensor,
    pub language: usize,
    pub mask: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub mode: Mode,
    pub temperature: f64,
    /// Route the discriminator input through the gradient reversal layer.
    pub reverse_gradient: bool,
    pub seed: u64,
}

impl LossOptions {
    pub fn eval(temperature: f64, seed: u64) -> Self {
        Self {
            mode: Mode::Eval,
            temperature,
            reverse_gradient: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLoss {
    pub total: Var,
    pub parts: LossComponents,
    /// Per-utterance `[T', G, V]` selection distributions.
    pub probs: Vec<Var>,
}

/// A configuration plus its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = materialize(&config.param_specs()?, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let specs = config.param_specs()?;
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: config expects {}, got {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let t = params
                .by_name(&s.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Eval-mode hidden states at layer boundary `layer`, `[T', model_dim]`.
    pub fn features_at(&self, frames: &Tensor, language: usize, layer: usize) -> Result<Tensor> {
        if layer > self.config.encoder.num_blocks {
            return Err(Error::IndexOutOfRange {
                index: layer,
                len: self.config.encoder.num_blocks + 1,
            });
        }
        let mut tape = Tape::with_params(&self.params);
        let ctx = self
            .config
            .encode(&mut tape, frames, language, Mode::Eval, 0)?;
        Ok(tape.value(ctx.taps[layer]).clone())
    }

    /// Eval-mode projected context output, `[T', projection_dim]`.
    pub fn context(&self, frames: &Tensor, language: usize) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let ctx = self
            .config
            .encode(&mut tape, frames, language, Mode::Eval, 0)?;
        Ok(tape.value(ctx.output).clone())
    }
}
