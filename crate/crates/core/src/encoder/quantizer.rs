use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Mode};
use crate::error::{Error, Result};
use crate::numerics::{gumbel_softmax, hard_one_hot, Init, ParamSpec, Tape, Var};

/// Product quantizer over `num_groups` codebooks of `entries_per_group`
/// vectors each. Codebooks live in the parameter store as `quant.codebook`
/// with shape `[G * V, entry_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub num_groups: usize,
    pub entries_per_group: usize,
    pub entry_dim: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub temperature_decay: f64,
    /// Straight-through one-hot selection; soft selection when false.
    pub hard: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            num_groups: 2,
            entries_per_group: 32,
            entry_dim: 16,
            temperature_start: 2.0,
            temperature_end: 0.5,
            temperature_decay: 0.9995,
            hard: true,
        }
    }
}

impl QuantizerConfig {
    /// Geometric annealing `max(start * decay^step, end)`.
    pub fn temperature_at(&self, step: u64) -> f64 {
        let t = self.temperature_start * libm::pow(self.temperature_decay, step as f64);
        t.max(self.temperature_end)
    }

    pub fn target_dim(&self) -> usize {
        self.num_groups * self.entry_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.entries_per_group < 2 || self.entry_dim == 0 {
            return Err(Error::Config(
                "quantizer needs >= 1 group, >= 2 entries and entry_dim > 0".into(),
            ));
        }
        if !(self.temperature_end > 0.0) || self.temperature_start < self.temperature_end {
            return Err(Error::Config(
                "quantizer temperatures must satisfy start >= end > 0".into(),
            ));
        }
        if !(self.temperature_decay > 0.0 && self.temperature_decay <= 1.0) {
            return Err(Error::Config("temperature_decay must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self, model_dim: usize, out: &mut Vec<ParamSpec>) {
        let gv = self.num_groups * self.entries_per_group;
        out.push(ParamSpec::new(
            "quant.logits.w",
            &[model_dim, gv],
            Init::LeCun,
        ));
        out.push(ParamSpec::new("quant.logits.b", &[gv], Init::Zeros));
        out.push(ParamSpec::new(
            "quant.codebook",
            &[gv, self.entry_dim],
            Init::Uniform(1.0),
        ));
    }
}

/// Quantized targets and the per-group selection distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    /// `[T', G * entry_dim]`, concatenation of the chosen entries.
    pub targets: Var,
    /// `[T', G, V]` softmax of the (noise-free) selection logits.
    pub probs: Var,
}

/// Selects one entry per group and timestep. Train mode samples with Gumbel
/// noise; eval mode uses the noise-free tempered softmax, so the selection
/// is a pure function of the features.
pub fn quantize<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    cfg: &QuantizerConfig,
    features: FeatureSequence,
    temperature: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Quantized> {
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    let (g, v) = (cfg.num_groups, cfg.entries_per_group);
    let w = tape.param_named("quant.logits.w")?;
    let b = tape.param_named("quant.logits.b")?;
    let codebook = tape.param_named("quant.codebook")?;
    let logits = tape.linear(features.values, w, Some(b))?;

    let mut chosen = Vec::with_capacity(g);
    let mut probs = Vec::with_capacity(g);
    for gi in 0..g {
        let lg = tape.slice_cols(logits, gi * v, (gi + 1) * v)?;
        let sel = match mode {
            Mode::Train => gumbel_softmax(tape, lg, temperature, cfg.hard, rng)?,
            Mode::Eval => {
                let scaled = tape.scale(lg, 1.0 / temperature)?;
                let soft = tape.softmax(scaled)?;
                if cfg.hard {
                    let hard = hard_one_hot(tape.value(soft));
                    tape.straight_through(soft, hard)?
                } else {
                    soft
                }
            }
        };
        let rows: Vec<usize> = (gi * v..(gi + 1) * v).collect();
        let book = tape.gather_rows(codebook, &rows)?;
        chosen.push(tape.matmul(sel, book)?);
        probs.push(tape.softmax(lg)?);
    }
    let (targets, flat) = if g == 1 {
        (chosen[0], probs[0])
    } else {
        (tape.concat_cols(&chosen)?, tape.concat_cols(&probs)?)
    };
    let probs = tape.reshape(flat, &[features.len, g, v])?;
    Ok(Quantized { targets, probs })
}
