//! Training losses: contrastive task with codebook diversity penalty,
//! adversarial language discriminator, embedding orthogonality penalty, and
//! their per-variant combination.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamSpec, Tape, Tensor, Var};
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Logit temperature τ.
    pub temperature: f64,
    /// Distractors K drawn per masked step.
    pub num_distractors: usize,
    /// Diversity weight β.
    pub diversity_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            num_distractors: 10,
            diversity_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    /// Trade-off weight λ.
    pub lambda: f64,
    /// Layer boundary feeding the discriminator (0 = conformer input).
    pub tap_layer: usize,
    /// Width of each of the two hidden layers.
    pub hidden_units: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            tap_layer: 4,
            hidden_units: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrthogonalConfig {
    /// Penalty coefficient α.
    pub alpha: f64,
}

impl Default for OrthogonalConfig {
    fn default() -> Self {
        Self { alpha: 10.0 }
    }
}

/// For each masked position `i` (an index into `mask_indices`), draws
/// `min(k, n - 1)` other masked positions uniformly without replacement.
pub fn sample_distractors<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            rand::seq::index::sample(rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect()
}

/// Mean over masked steps of the negative log posterior of the true target
/// among `{q_t} ∪ distractors`, with cosine logits scaled by `1/temperature`.
///
/// `distractors[i]` lists positions in `mask_indices`; every row must have
/// the same length.
pub fn info_nce(
    tape: &mut Tape<'_>,
    context: Var,
    targets: Var,
    mask_indices: &[usize],
    distractors: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    let n = mask_indices.len();
    if n < 2 {
        return Err(Error::Contract(alloc::format!(
            "contrastive loss needs at least 2 masked steps, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    let k = distractors.first().map_or(0, Vec::len);
    if distractors.len() != n || distractors.iter().any(|d| d.len() != k) {
        return Err(Error::Contract("ragged distractor lists".into()));
    }
    let width = k + 1;
    let mut c_idx = Vec::with_capacity(n * width);
    let mut q_idx = Vec::with_capacity(n * width);
    for (i, &t) in mask_indices.iter().enumerate() {
        c_idx.extend(core::iter::repeat_n(t, width));
        q_idx.push(t);
        q_idx.extend(distractors[i].iter().map(|&j| mask_indices[j]));
    }
    let c = tape.gather_rows(context, &c_idx)?;
    let q = tape.gather_rows(targets, &q_idx)?;
    let sims = tape.cosine_rows(c, q)?;
    let sims = tape.reshape(sims, &[n, width])?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, &vec![0; n])?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}

/// The contrastive term and the diversity term for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastiveTerms {
    pub contrastive: Var,
    pub diversity: Var,
}

pub fn contrastive_loss<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    context: Var,
    targets: Var,
    probs: Var,
    mask_indices: &[usize],
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<ContrastiveTerms> {
    if mask_indices.len() < 2 {
        return Err(Error::Contract(alloc::format!(
            "contrastive loss needs at least 2 masked steps, got {}",
            mask_indices.len()
        )));
    }
    let distractors = sample_distractors(mask_indices.len(), cfg.num_distractors, rng);
    let contrastive = info_nce(
        tape,
        context,
        targets,
        mask_indices,
        &distractors,
        cfg.temperature,
    )?;
    let diversity = diversity_loss(tape, probs)?;
    Ok(ContrastiveTerms {
        contrastive,
        diversity,
    })
}

fn check_normalized(probs: &Tensor) -> Result<(usize, usize)> {
    let shape = probs.shape();
    if shape.len() != 3 {
        return Err(crate::error::shape_err(
            "diversity_loss",
            alloc::format!("expected [T, G, V], got {shape:?}"),
        ));
    }
    let (g, v) = (shape[1], shape[2]);
    let worst = probs
        .data()
        .chunks(v)
        .map(|row| libm::fabs(row.iter().sum::<f64>() - 1.0))
        .fold(0.0, f64::max);
    if worst > 1e-4 {
        return Err(Error::Unnormalized(worst));
    }
    Ok((g, v))
}

/// `(1/G) Σ_g (1 − exp(H(p̄_g)) / V)` where `p̄_g` averages group `g`'s
/// selection distribution over all rows of `probs` (`[T, G, V]`).
pub fn diversity_loss(tape: &mut Tape<'_>, probs: Var) -> Result<Var> {
    let (g, v) = check_normalized(tape.value(probs))?;
    let t = tape.shape(probs)[0];
    let flat = tape.reshape(probs, &[t, g * v])?;
    let mean = tape.mean_rows(flat)?;
    let mean = tape.reshape(mean, &[g, v])?;
    let plogp = tape.xlogx(mean)?;
    let neg_h = tape.sum_last(plogp)?;
    let h = tape.neg(neg_h)?;
    let perplexity = tape.exp(h)?;
    let avg = tape.mean(perplexity)?;
    let scaled = tape.scale(avg, -1.0 / v as f64)?;
    tape.add_scalar(scaled, 1.0)
}

/// `Σ_g exp(H(p̄_g))`: effective number of codebook entries in use.
pub fn codebook_perplexity(probs: &Tensor) -> Result<f64> {
    let (g, v) = check_normalized(probs)?;
    let t = probs.shape()[0];
    let mut total = 0.0;
    for gi in 0..g {
        let mut h = 0.0;
        for vi in 0..v {
            let p = (0..t)
                .map(|ti| probs.data()[(ti * g + gi) * v + vi])
                .sum::<f64>()
                / t as f64;
            if p > 0.0 {
                h -= p * libm::log(p);
            }
        }
        total += libm::exp(h);
    }
    Ok(total)
}

/// Gradient reversal layer.
pub fn grl(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    tape.grl(x)
}

/// Two hidden layers plus a softmax classifier over `num_languages`.
pub fn discriminator_param_specs(
    input_dim: usize,
    cfg: &AdversarialConfig,
    num_languages: usize,
    out: &mut Vec<ParamSpec>,
) {
    let h = cfg.hidden_units;
    out.push(ParamSpec::new("adv.l1.w", &[input_dim, h], Init::LeCun));
    out.push(ParamSpec::new("adv.l1.b", &[h], Init::Zeros));
    out.push(ParamSpec::new("adv.l2.w", &[h, h], Init::LeCun));
    out.push(ParamSpec::new("adv.l2.b", &[h], Init::Zeros));
    out.push(ParamSpec::new(
        "adv.out.w",
        &[h, num_languages],
        Init::LeCun,
    ));
    out.push(ParamSpec::new("adv.out.b", &[num_languages], Init::Zeros));
}

pub fn discriminator_logits(tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
    let mut h = hidden;
    for layer in ["adv.l1", "adv.l2"] {
        let w = tape.param_named(&alloc::format!("{layer}.w"))?;
        let b = tape.param_named(&alloc::format!("{layer}.b"))?;
        h = tape.linear(h, w, Some(b))?;
        h = tape.silu(h)?;
    }
    let w = tape.param_named("adv.out.w")?;
    let b = tape.param_named("adv.out.b")?;
    tape.linear(h, w, Some(b))
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
pub fn nll_from_logits(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.shape(logits).last().copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}

/// Frame-level language discrimination loss on `hidden` (`[N, dim]`).
///
/// Reports the mean over frames. The caller decides whether `hidden` went
/// through [`grl`] first.
pub fn adversarial_loss(tape: &mut Tape<'_>, hidden: Var, labels: &[usize]) -> Result<Var> {
    let logits = discriminator_logits(tape, hidden)?;
    nll_from_logits(tape, logits, labels)
}

/// `Σ_i Σ_j (E_i · E_j − [i == j])²`.
pub fn orthogonal_loss(tape: &mut Tape<'_>, embeddings: Var) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(crate::error::shape_err(
            "orthogonal_loss",
            alloc::format!("expected [M >= 1, d], got {shape:?}"),
        ));
    }
    let m = shape[0];
    let et = tape.transpose(embeddings)?;
    let gram = tape.matmul(embeddings, et)?;
    let mut eye = Tensor::zeros(&[m, m]);
    for i in 0..m {
        eye.data_mut()[i * m + i] = 1.0;
    }
    let eye = tape.constant(eye);
    let dev = tape.sub(gram, eye)?;
    let sq = tape.mul(dev, dev)?;
    tape.sum(sq)
}

/// Loss weights β, λ, α.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub diversity: f64,
    pub lambda: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossComponents {
    pub contrastive: Var,
    pub diversity: Var,
    pub adversarial: Option<Var>,
    pub orthogonal: Option<Var>,
}

/// Combines the components required by `variant`:
/// every variant uses `L_c + β L_div`; LA adds `λ L_adv` (the adversarial
/// term is expected to have been computed behind a GRL); LE adds `α L_o`.
pub fn total_loss(
    tape: &mut Tape<'_>,
    variant: Variant,
    parts: &LossComponents,
    weights: &LossWeights,
) -> Result<Var> {
    let div = tape.scale(parts.diversity, weights.diversity)?;
    let mut total = tape.add(parts.contrastive, div)?;
    match variant {
        Variant::La => {
            let adv = parts.adversarial.ok_or(Error::MissingComponent {
                variant: "LA",
                component: "adversarial",
            })?;
            let adv = tape.scale(adv, weights.lambda)?;
            total = tape.add(total, adv)?;
        }
        Variant::Le => {
            let orth = parts.orthogonal.ok_or(Error::MissingComponent {
                variant: "LE",
                component: "orthogonal",
            })?;
            let orth = tape.scale(orth, weights.alpha)?;
            total = tape.add(total, orth)?;
        }
        Variant::Xlsr | Variant::Lsa | Variant::Lsaw => {}
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;

    #[test]
    fn distractors_exclude_self_and_have_no_repeats() {
        let mut rng = rng_for(1, &[]);
        let d = sample_distractors(6, 10, &mut rng);
        for (i, row) in d.iter().enumerate() {
            assert_eq!(row.len(), 5);
            assert!(!row.contains(&i));
            let mut s = row.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 5);
        }
        let d = sample_distractors(20, 3, &mut rng);
        assert!(d.iter().all(|r| r.len() == 3));
    }

    #[test]
    fn info_nce_needs_two_masked_steps() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3, 2], 1.0));
        let err = info_nce(&mut tape, c, c, &[1], &[vec![]], 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn missing_component_is_reported() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(1.0));
        let parts = LossComponents {
            contrastive: z,
            diversity: z,
            adversarial: None,
            orthogonal: None,
        };
        let w = LossWeights {
            diversity: 0.1,
            lambda: 0.01,
            alpha: 10.0,
        };
        assert!(matches!(
            total_loss(&mut tape, Variant::La, &parts, &w),
            Err(Error::MissingComponent {
                component: "adversarial",
                ..
            })
        ));
        assert!(matches!(
            total_loss(&mut tape, Variant::Le, &parts, &w),
            Err(Error::MissingComponent {
                component: "orthogonal",
                ..
            })
        ));
        assert!(total_loss(&mut tape, Variant::Lsaw, &parts, &w).is_ok());
    }
}
