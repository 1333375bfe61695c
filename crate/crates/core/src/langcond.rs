//! Language-conditioning components: additive embedding table, per-language
//! residual adapters, and shared adapters whose weights are modulated per
//! language by rank-k factors. Also parameter accounting across variants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{check_language, LayerHook};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{count_scalars, Init, ParamSpec, Tape, Var};
use crate::variant::Variant;

pub const EMBEDDING: &str = "lang.embedding";
const ADAPTIVE: &str = "lang.adaptive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangCondConfig {
    /// Layer boundary where conditioning is applied (0 = conformer input).
    pub insertion_layer: usize,
    /// Adapter bottleneck width; 0 means `model_dim / 4`.
    pub adapter_bottleneck: usize,
    /// Rank of the multiplicative (scale) factors.
    pub k_scale: usize,
    /// Rank of the additive (bias) factors.
    pub k_bias: usize,
    /// Std of the randomly initialized half of each factor pair.
    pub factor_init_std: f64,
}

impl Default for LangCondConfig {
    fn default() -> Self {
        Self {
            insertion_layer: 0,
            adapter_bottleneck: 0,
            k_scale: 8,
            k_bias: 8,
            factor_init_std: 0.01,
        }
    }
}

impl LangCondConfig {
    pub fn bottleneck(&self, model_dim: usize) -> usize {
        if self.adapter_bottleneck == 0 {
            (model_dim / 4).max(1)
        } else {
            self.adapter_bottleneck
        }
    }
}

pub fn embedding_param_specs(num_languages: usize, dim: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec::new(
        EMBEDDING,
        &[num_languages, dim],
        Init::Normal(1.0 / libm::sqrt(dim as f64)),
    ));
}

fn adapter_prefix(m: usize) -> String {
    format!("lang.adapter{m}")
}

pub fn adapter_param_specs(
    num_languages: usize,
    dim: usize,
    bottleneck: usize,
    out: &mut Vec<ParamSpec>,
) {
    for m in 0..num_languages {
        let p = adapter_prefix(m);
        out.push(ParamSpec::new(format!("{p}.ln.g"), &[dim], Init::Ones));
        out.push(ParamSpec::new(format!("{p}.ln.b"), &[dim], Init::Zeros));
        out.push(ParamSpec::new(
            format!("{p}.down.w"),
            &[dim, bottleneck],
            Init::LeCun,
        ));
        out.push(ParamSpec::new(
            format!("{p}.down.b"),
            &[bottleneck],
            Init::Zeros,
        ));
        out.push(ParamSpec::new(
            format!("{p}.up.w"),
            &[bottleneck, dim],
            Init::Zeros,
        ));
        out.push(ParamSpec::new(format!("{p}.up.b"), &[dim], Init::Zeros));
    }
}

/// Parameter names of one adaptive weight matrix.
///
/// The effective weight for language `m` is
/// `W_S ⊙ (R_m S_mᵀ) + U_m V_mᵀ` with `R_m: [d_in, k_scale]`,
/// `S_m: [d_out, k_scale]`, `U_m: [d_in, k_bias]`, `V_m: [d_out, k_bias]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptiveWeightLayer {
    pub name: String,
}

impl AdaptiveWeightLayer {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    pub fn shared(&self) -> String {
        format!("{}.ws", self.name)
    }

    pub fn factor(&self, m: usize, which: &str) -> String {
        format!("{}.l{m}.{which}", self.name)
    }

    /// Identity-start initialization: `R_m S_mᵀ` is all ones and
    /// `U_m V_mᵀ` is zero, so every language starts from `W_S`.
    pub fn param_specs(
        &self,
        num_languages: usize,
        d_in: usize,
        d_out: usize,
        shared_init: Init,
        cfg: &LangCondConfig,
        out: &mut Vec<ParamSpec>,
    ) {
        out.push(ParamSpec::new(self.shared(), &[d_in, d_out], shared_init));
        let std = cfg.factor_init_std;
        for m in 0..num_languages {
            out.push(ParamSpec::new(
                self.factor(m, "r"),
                &[d_in, cfg.k_scale],
                Init::FirstColumnOnes { rest_std: std },
            ));
            out.push(ParamSpec::new(
                self.factor(m, "s"),
                &[d_out, cfg.k_scale],
                Init::FirstColumnOnes { rest_std: 0.0 },
            ));
            out.push(ParamSpec::new(
                self.factor(m, "u"),
                &[d_in, cfg.k_bias],
                Init::Normal(std),
            ));
            out.push(ParamSpec::new(
                self.factor(m, "v"),
                &[d_out, cfg.k_bias],
                Init::Zeros,
            ));
        }
    }

    /// Assembles `W^m` on the tape.
    pub fn weight(&self, tape: &mut Tape<'_>, m: usize) -> Result<Var> {
        let ws = tape.param_named(&self.shared())?;
        let r = tape.param_named(&self.factor(m, "r"))?;
        let s = tape.param_named(&self.factor(m, "s"))?;
        let u = tape.param_named(&self.factor(m, "u"))?;
        let v = tape.param_named(&self.factor(m, "v"))?;
        let st = tape.transpose(s)?;
        let scale = tape.matmul(r, st)?;
        let vt = tape.transpose(v)?;
        let bias = tape.matmul(u, vt)?;
        let modulated = tape.mul(ws, scale)?;
        tape.add(modulated, bias)
    }
}

/// `Y = X W^m` for `X: [T, d_in]` (row form of `(W^m)ᵀ x` per timestep).
pub fn adaptive_forward(
    tape: &mut Tape<'_>,
    x: Var,
    m: usize,
    num_languages: usize,
    layer: &AdaptiveWeightLayer,
) -> Result<Var> {
    check_language(m, num_languages)?;
    let w = layer.weight(tape, m)?;
    tape.matmul(x, w)
}

pub fn adaptive_adapter_param_specs(
    num_languages: usize,
    dim: usize,
    bottleneck: usize,
    cfg: &LangCondConfig,
    out: &mut Vec<ParamSpec>,
) {
    out.push(ParamSpec::new(
        format!("{ADAPTIVE}.ln.g"),
        &[dim],
        Init::Ones,
    ));
    out.push(ParamSpec::new(
        format!("{ADAPTIVE}.ln.b"),
        &[dim],
        Init::Zeros,
    ));
    AdaptiveWeightLayer::new(format!("{ADAPTIVE}.down")).param_specs(
        num_languages,
        dim,
        bottleneck,
        Init::LeCun,
        cfg,
        out,
    );
    out.push(ParamSpec::new(
        format!("{ADAPTIVE}.down.b"),
        &[bottleneck],
        Init::Zeros,
    ));
    AdaptiveWeightLayer::new(format!("{ADAPTIVE}.up")).param_specs(
        num_languages,
        bottleneck,
        dim,
        Init::Zeros,
        cfg,
        out,
    );
    out.push(ParamSpec::new(
        format!("{ADAPTIVE}.up.b"),
        &[dim],
        Init::Zeros,
    ));
}

/// `h_t + E_m` for every row.
pub fn add_language_embedding(tape: &mut Tape<'_>, h: Var, table: Var, m: usize) -> Result<Var> {
    let count = tape.shape(table)[0];
    check_language(m, count)?;
    let row = tape.gather_rows(table, &[m])?;
    let row = tape.reshape(row, &[tape.shape(table)[1]])?;
    tape.add_row(h, row)
}

/// `h + Up_m(silu(Down_m(LN_m(h))))`, using only language `m`'s block.
pub fn adapter_forward(tape: &mut Tape<'_>, h: Var, m: usize, num_languages: usize) -> Result<Var> {
    check_language(m, num_languages)?;
    let p = adapter_prefix(m);
    let g = tape.param_named(&format!("{p}.ln.g"))?;
    let b = tape.param_named(&format!("{p}.ln.b"))?;
    let x = tape.layer_norm(h, g, b)?;
    let w = tape.param_named(&format!("{p}.down.w"))?;
    let b = tape.param_named(&format!("{p}.down.b"))?;
    let x = tape.linear(x, w, Some(b))?;
    let x = tape.silu(x)?;
    let w = tape.param_named(&format!("{p}.up.w"))?;
    let b = tape.param_named(&format!("{p}.up.b"))?;
    let x = tape.linear(x, w, Some(b))?;
    tape.add(h, x)
}

/// Residual adapter with shared weights modulated per language.
pub fn adaptive_adapter_forward(
    tape: &mut Tape<'_>,
    h: Var,
    m: usize,
    num_languages: usize,
) -> Result<Var> {
    check_language(m, num_languages)?;
    let g = tape.param_named(&format!("{ADAPTIVE}.ln.g"))?;
    let b = tape.param_named(&format!("{ADAPTIVE}.ln.b"))?;
    let x = tape.layer_norm(h, g, b)?;
    let down = AdaptiveWeightLayer::new(format!("{ADAPTIVE}.down"));
    let x = adaptive_forward(tape, x, m, num_languages, &down)?;
    let b = tape.param_named(&format!("{ADAPTIVE}.down.b"))?;
    let x = tape.add_row(x, b)?;
    let x = tape.silu(x)?;
    let up = AdaptiveWeightLayer::new(format!("{ADAPTIVE}.up"));
    let x = adaptive_forward(tape, x, m, num_languages, &up)?;
    let b = tape.param_named(&format!("{ADAPTIVE}.up.b"))?;
    let x = tape.add_row(x, b)?;
    tape.add(h, x)
}

/// Which conditioning mechanism a model variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningKind {
    Embedding,
    Adapter,
    Adaptive,
}

impl ConditioningKind {
    pub fn for_variant(v: Variant) -> Option<Self> {
        match v {
            Variant::Le => Some(Self::Embedding),
            Variant::Lsa => Some(Self::Adapter),
            Variant::Lsaw => Some(Self::Adaptive),
            Variant::Xlsr | Variant::La => None,
        }
    }
}

/// Conditioning for one utterance of language `language`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LanguageConditioning {
    pub kind: ConditioningKind,
    pub language: usize,
    pub num_languages: usize,
    pub insertion_layer: usize,
}

impl LayerHook for LanguageConditioning {
    fn at_layer(&self, tape: &mut Tape<'_>, layer: usize, hidden: Var) -> Result<Var> {
        if layer != self.insertion_layer {
            return Ok(hidden);
        }
        match self.kind {
            ConditioningKind::Embedding => {
                let table = tape.param_named(EMBEDDING)?;
                if tape.shape(table)[1] != tape.shape(hidden)[1] {
                    return Err(crate::error::shape_err(
                        "add_language_embedding",
                        format!("{:?} vs {:?}", tape.shape(table), tape.shape(hidden)),
                    ));
                }
                add_language_embedding(tape, hidden, table, self.language)
            }
            ConditioningKind::Adapter => {
                adapter_forward(tape, hidden, self.language, self.num_languages)
            }
            ConditioningKind::Adaptive => {
                adaptive_adapter_forward(tape, hidden, self.language, self.num_languages)
            }
        }
    }
}

/// Trainable parameter count of a variant and its increase over the
/// contrastive baseline built on the same backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub baseline: usize,
    pub increase_pct: f64,
}

pub fn count_params(variant: Variant, cfg: &ModelConfig) -> Result<ParamCount> {
    let mut v = cfg.clone();
    v.variant = variant;
    let mut base = cfg.clone();
    base.variant = Variant::Xlsr;
    let total = count_scalars(&v.param_specs()?);
    let baseline = count_scalars(&base.param_specs()?);
    if baseline == 0 {
        return Err(Error::Config("empty baseline model".into()));
    }
    Ok(ParamCount {
        total,
        baseline,
        increase_pct: 100.0 * (total as f64 - baseline as f64) / baseline as f64,
    })
}
