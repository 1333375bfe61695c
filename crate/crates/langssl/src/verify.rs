//! Self-checks runnable from the command line.

use std::fmt;

use langssl_core::data::{sample_mask, MaskingConfig};
use langssl_core::model::{LossOptions, MaskedExample};
use langssl_core::numerics::{
    analytic_gradients, compare_gradients, compare_gradients_sampled, materialize, normal_tensor,
    rng_for, ParamStore, Tape, Tensor,
};
use langssl_core::objectives::{
    adversarial_loss, discriminator_param_specs, info_nce, orthogonal_loss, AdversarialConfig,
};
use langssl_core::trainer::{lr_at_step, AdamState, TrainConfig};
use langssl_core::{Model, ModelConfig, Variant};

/// Deliberate defects used to show that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Scale one analytic gradient entry before comparison.
    Gradient,
    /// Drop the gradient reversal on the discriminator path.
    Reversal,
    /// Use an uncorrected second moment in the Adam oracle replay.
    Adam,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Entries probed per parameter tensor; `None` probes every entry.
    pub entries_per_param: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            entries_per_param: Some(32),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

fn outcome(name: impl Into<String>, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

fn failed(name: impl Into<String>, err: impl fmt::Display) -> CheckOutcome {
    outcome(name, false, format!("error: {err}"))
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRL_TOLERANCE: f64 = 1e-12;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// One utterance with 96 input frames, 24 encoder steps.
fn grad_check_input() -> (Tensor, Vec<usize>) {
    let frames = normal_tensor(&[96, 40], 1.0, &mut rng_for(3, &[]));
    (frames, vec![0, 1, 2, 9, 10, 11, 12, 20])
}

/// Finite-difference check of one variant's total loss on the tiny profile.
/// Finite differences see the reversal layer as identity, so the check runs
/// the un-reversed objective; [`grl_sign`] covers the reversal itself.
pub fn gradient_check(variant: Variant, opts: &VerifyOptions) -> CheckOutcome {
    let name = format!("grad_check[{}]", variant.label());
    let mut cfg = ModelConfig::tiny(variant, 4);
    cfg.adversarial.lambda = 0.5;
    cfg.orthogonal.alpha = 0.5;
    let mut model = match Model::new(cfg.clone(), 6) {
        Ok(m) => m,
        Err(e) => return failed(name, e),
    };
    let (frames, mask) = grad_check_input();
    let loss_opts = LossOptions {
        reverse_gradient: false,
        ..LossOptions::eval(0.7, 4)
    };
    let mut loss = |tape: &mut Tape<'_>| {
        let ex = [MaskedExample {
            frames: &frames,
            language: 2,
            mask: &mask,
        }];
        Ok(cfg.batch_loss(tape, &ex, &loss_opts)?.total)
    };
    let mut analytic = match analytic_gradients(&model.params, &mut loss) {
        Ok(a) => a,
        Err(e) => return failed(name, e),
    };
    if opts.fault == Some(Fault::Gradient) {
        if let Some(g) = model
            .params
            .id("enc.proj.w")
            .and_then(|id| analytic.get_mut(&id))
        {
            g.data_mut()[0] = g.data()[0] * 1.5 + 1e-3;
        }
    }
    let ids: Vec<_> = model.params.ids().collect();
    let report = match opts.entries_per_param {
        Some(n) => compare_gradients_sampled(&mut model.params, &ids, 1e-5, &analytic, n, loss),
        None => compare_gradients(&mut model.params, &ids, 1e-5, &analytic, loss),
    };
    match report {
        Ok(r) => outcome(
            name,
            r.max_rel_error < GRAD_TOLERANCE,
            format!(
                "max_rel_error={:.3e} entries={} worst={}",
                r.max_rel_error,
                r.entries,
                r.worst.map_or("-".into(), |(n, i)| format!("{n}[{i}]"))
            ),
        ),
        Err(e) => failed(name, e),
    }
}

/// Encoder gradients of the discriminator loss flip sign under the reversal
/// layer while discriminator gradients do not.
pub fn grl_sign(opts: &VerifyOptions) -> CheckOutcome {
    let name = "grl_sign";
    let run = || -> langssl_core::Result<(f64, usize)> {
        let model = Model::new(ModelConfig::tiny(Variant::La, 4), 5)?;
        let (frames, mask) = grad_check_input();
        let ex = [MaskedExample {
            frames: &frames,
            language: 1,
            mask: &mask,
        }];
        let grads = |reverse: bool| -> langssl_core::Result<ParamStore> {
            let opts = LossOptions {
                reverse_gradient: reverse,
                ..LossOptions::eval(0.7, 2)
            };
            let mut tape = Tape::with_params(&model.params);
            let l = model.config.batch_loss(&mut tape, &ex, &opts)?;
            let adv = l.parts.adversarial.expect("LA has an adversarial term");
            let g = tape.backward(adv)?;
            let mut out = ParamStore::new();
            for (id, name, _) in model.params.iter() {
                out.insert(name, g.param_or_zeros(id, &model.params))?;
            }
            Ok(out)
        };
        let reversed = grads(opts.fault != Some(Fault::Reversal))?;
        let plain = grads(false)?;
        let (mut worst, mut nonzero) = (0.0f64, 0usize);
        for (_, name, a) in reversed.iter() {
            let b = plain.by_name(name).expect("same parameter set");
            let sign = if name.starts_with("adv.") { 1.0 } else { -1.0 };
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - sign * y).abs());
                nonzero += (*y != 0.0 && !name.starts_with("adv.")) as usize;
            }
        }
        Ok((worst, nonzero))
    };
    match run() {
        Ok((worst, nonzero)) => outcome(
            name,
            worst < GRL_TOLERANCE && nonzero > 0,
            format!("max_abs_diff={worst:.3e} encoder_entries={nonzero}"),
        ),
        Err(e) => failed(name, e),
    }
}

/// Conditioned variants reproduce the baseline forward at initialization.
pub fn identity_at_init() -> CheckOutcome {
    let name = "identity_at_init";
    let run = || -> langssl_core::Result<f64> {
        let x = normal_tensor(&[96, 40], 1.0, &mut rng_for(1, &[]));
        let base = Model::new(ModelConfig::desk(Variant::Xlsr, 4), 7)?.context(&x, 0)?;
        let mut worst = 0.0f64;
        for v in [Variant::Lsa, Variant::Lsaw] {
            let m = Model::new(ModelConfig::desk(v, 4), 7)?;
            for lang in 0..4 {
                worst = worst.max(m.context(&x, lang)?.max_abs_diff(&base));
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => outcome(
            name,
            w < IDENTITY_TOLERANCE,
            format!("max_abs_diff={w:.3e}"),
        ),
        Err(e) => failed(name, e),
    }
}

/// Expected masked fraction: step `i` stays unmasked iff none of the
/// `min(i + 1, span)` positions ending at `i` is a start.
pub fn expected_mask_fraction(len: usize, cfg: &MaskingConfig) -> f64 {
    let starts = cfg.num_starts(len);
    let unmasked = |w: usize| {
        (0..starts).fold(1.0, |acc, j| {
            acc * (len - w.min(len)).saturating_sub(j) as f64 / (len - j) as f64
        })
    };
    (0..len)
        .map(|i| 1.0 - unmasked((i + 1).min(cfg.span)))
        .sum::<f64>()
        / len as f64
}

pub fn masking_statistics() -> CheckOutcome {
    let cfg = MaskingConfig::default();
    let (len, trials) = (200, 10_000);
    let mut rng = rng_for(3, &[]);
    let masked: usize = (0..trials)
        .map(|_| sample_mask(len, &cfg, &mut rng).len())
        .sum();
    let empirical = masked as f64 / (len * trials) as f64;
    let expected = expected_mask_fraction(len, &cfg);
    outcome(
        "masking_statistics",
        (empirical - expected).abs() < 0.01,
        format!("empirical={empirical:.4} expected={expected:.4}"),
    )
}

/// Three Adam steps on one scalar against a hand-evaluated trace.
pub fn adam_oracle(opts: &VerifyOptions) -> CheckOutcome {
    let name = "adam_oracle";
    let expected = [0.4900000009999999, 0.49365053989954144, 0.49023681151859116];
    let run = || -> langssl_core::Result<f64> {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::full(&[1], 0.5))?;
        let mut adam = AdamState::new(&store);
        let beta2 = if opts.fault == Some(Fault::Adam) {
            0.99
        } else {
            0.98
        };
        let mut worst = 0.0f64;
        for (g, want) in [0.1, -0.2, 0.3].into_iter().zip(expected) {
            let mut tape = Tape::with_params(&store);
            let p = tape.param(id)?;
            let l = tape.scale(p, g)?;
            let l = tape.sum(l)?;
            let grads = tape.backward(l)?;
            adam.update(&mut store, &grads, 0.01, 0.9, beta2, 1e-8);
            worst = worst.max((store.get(id).data()[0] - want).abs());
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => outcome(name, w < 1e-12, format!("max_abs_diff={w:.3e}")),
        Err(e) => failed(name, e),
    }
}

pub fn lr_schedule() -> CheckOutcome {
    let cfg = TrainConfig::full_scale();
    let at = |s| lr_at_step(s, &cfg).unwrap_or(f64::NAN);
    let ok = at(0) == 0.0
        && at(cfg.warmup_steps) == cfg.peak_lr
        && at(cfg.warmup_steps / 2) == cfg.peak_lr / 2.0
        && at(cfg.total_steps) == 0.0
        && lr_at_step(cfg.total_steps + 1, &cfg).is_err();
    outcome(
        "lr_schedule",
        ok,
        format!(
            "lr(0)={} lr(warmup)={} lr(total)={}",
            at(0),
            at(cfg.warmup_steps),
            at(cfg.total_steps)
        ),
    )
}

/// Loss values with closed forms.
pub fn closed_form_losses() -> CheckOutcome {
    let name = "closed_form_losses";
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let run = || -> langssl_core::Result<[f64; 4]> {
        let rows = |r: &[&[f64]]| Tensor::from_rows(r);
        let mut tape = Tape::new();
        let c = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]])?);
        let q = tape.constant(rows(&[&[2.0, 0.0], &[0.0, 3.0]])?);
        let aligned = info_nce(&mut tape, c, q, &[0, 1], &[vec![1], vec![0]], 0.1)?;
        let c = tape.constant(rows(&[&[0.0, 1.0], &[0.0, -2.0]])?);
        let q = tape.constant(rows(&[&[1.0, 0.0], &[3.0, 0.0]])?);
        let orthogonal = info_nce(&mut tape, c, q, &[0, 1], &[vec![1], vec![0]], 0.1)?;

        let mut specs = Vec::new();
        discriminator_param_specs(8, &AdversarialConfig::default(), 16, &mut specs);
        let mut store = materialize(&specs, 3)?;
        for n in ["adv.out.w", "adv.out.b"] {
            let id = store.require(n)?;
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut dtape = Tape::with_params(&store);
        let h = dtape.constant(normal_tensor(&[5, 8], 1.0, &mut rng_for(1, &[])));
        let adv = adversarial_loss(&mut dtape, h, &[0, 3, 15, 7, 9])?;

        let e = tape.constant(rows(&[&[0.6, 0.8], &[0.6, 0.8]])?);
        let lo = orthogonal_loss(&mut tape, e)?;
        Ok([
            rel(tape.scalar(aligned)?, (-10f64).exp().ln_1p()),
            rel(tape.scalar(orthogonal)?, 2f64.ln()),
            rel(dtape.scalar(adv)?, 16f64.ln()),
            rel(tape.scalar(lo)?, 2.0),
        ])
    };
    match run() {
        Ok(errs) => {
            let worst = errs.iter().cloned().fold(0.0, f64::max);
            outcome(name, worst < 1e-9, format!("max_rel_error={worst:.3e}"))
        }
        Err(e) => failed(name, e),
    }
}

/// Runs every check in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = Variant::ALL
        .into_iter()
        .map(|v| gradient_check(v, opts))
        .collect();
    out.push(grl_sign(opts));
    out.push(identity_at_init());
    out.push(masking_statistics());
    out.push(adam_oracle(opts));
    out.push(lr_schedule());
    out.push(closed_form_losses());
    out
}
