use langssl_core::data::{generate_corpus, Corpus, SyntheticCorpusSpec};
use langssl_core::numerics::{ParamStore, Tape, Tensor};
use langssl_core::trainer::{
    lr_at_step, run_pretraining, train_step, AdamState, StepMetrics, TrainConfig, TrainState,
    TrainingSink,
};
use langssl_core::{Error, Model, ModelConfig, Result, Variant};
use proptest::prelude::*;

#[test]
fn schedule_hits_its_endpoints() {
    let cfg = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 10,
        total_steps: 30,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at_step(0, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at_step(5, &cfg).unwrap(), 5e-4);
    assert_eq!(lr_at_step(10, &cfg).unwrap(), 1e-3);
    assert_eq!(lr_at_step(20, &cfg).unwrap(), 5e-4);
    assert_eq!(lr_at_step(30, &cfg).unwrap(), 0.0);
    assert!(lr_at_step(31, &cfg).is_err());
    let full = TrainConfig::full_scale();
    assert_eq!(lr_at_step(full.warmup_steps, &full).unwrap(), 0.0005);
    assert_eq!(lr_at_step(full.warmup_steps / 2, &full).unwrap(), 0.00025);
}

proptest! {
    #[test]
    fn schedule_is_continuous(warmup in 1u64..500, extra in 1u64..500, step in 0u64..1000) {
        let cfg = TrainConfig {
            warmup_steps: warmup,
            total_steps: warmup + extra,
            ..TrainConfig::default()
        };
        let step = step % cfg.total_steps;
        let bound = cfg.peak_lr / warmup.min(extra) as f64 + 1e-12;
        let a = lr_at_step(step, &cfg).unwrap();
        let b = lr_at_step(step + 1, &cfg).unwrap();
        prop_assert!((a - b).abs() <= bound);
        prop_assert!(a >= 0.0 && a <= cfg.peak_lr);
    }
}

#[test]
fn adam_matches_a_hand_stepped_trace() {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::full(&[1], 0.5)).unwrap();
    let mut adam = AdamState::new(&store);
    // Hand-evaluated with lr 0.01, betas (0.9, 0.98), eps 1e-8.
    let expected = [0.4900000009999999, 0.49365053989954144, 0.49023681151859116];
    for (g, want) in [0.1, -0.2, 0.3].into_iter().zip(expected) {
        let grads = {
            let mut tape = Tape::with_params(&store);
            let p = tape.param(id).unwrap();
            let l = tape.scale(p, g).unwrap();
            let l = tape.sum(l).unwrap();
            tape.backward(l).unwrap()
        };
        adam.update(&mut store, &grads, 0.01, 0.9, 0.98, 1e-8);
        let got = store.get(id).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(adam.t, 3);
}

fn small_corpus(per_language: usize, seed: u64) -> Corpus {
    let mut spec = SyntheticCorpusSpec::with_languages(4);
    spec.utterances_per_language = per_language;
    spec.min_frames = 40;
    spec.max_frames = 64;
    generate_corpus(&spec, seed).unwrap()
}

fn short_run(total: u64) -> TrainConfig {
    TrainConfig {
        peak_lr: 2e-3,
        warmup_steps: 2,
        total_steps: total,
        batch_size: 3,
        checkpoint_every: 3,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    metrics: Vec<StepMetrics>,
    checkpoints: Vec<(u64, bool, TrainState)>,
}

impl TrainingSink for Recorder {
    fn on_metrics(&mut self, m: &StepMetrics) -> Result<()> {
        self.metrics.push(m.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState, complete: bool) -> Result<()> {
        self.checkpoints.push((state.step, complete, state.clone()));
        Ok(())
    }
}

fn run(variant: Variant, cfg: &TrainConfig, corpus: &Corpus) -> Recorder {
    let model = Model::new(ModelConfig::tiny(variant, 4), cfg.init_seed).unwrap();
    let mut state = TrainState::new(model);
    let mut rec = Recorder::default();
    run_pretraining(&mut state, cfg, corpus, &mut rec).unwrap();
    rec
}

fn bits(m: &[StepMetrics]) -> Vec<String> {
    m.iter().map(|x| format!("{x:?}")).collect()
}

#[test]
fn identical_seeds_give_identical_metric_streams() {
    let corpus = small_corpus(3, 1);
    let cfg = short_run(5);
    for v in [Variant::La, Variant::Lsaw] {
        let a = run(v, &cfg, &corpus);
        let b = run(v, &cfg, &corpus);
        assert_eq!(a.metrics.len(), 5);
        assert_eq!(bits(&a.metrics), bits(&b.metrics));
        let c = run(
            v,
            &TrainConfig {
                data_seed: 3,
                ..cfg.clone()
            },
            &corpus,
        );
        assert_ne!(bits(&a.metrics), bits(&c.metrics));
    }
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let corpus = small_corpus(3, 2);
    let cfg = short_run(7);
    let full = run(Variant::Le, &cfg, &corpus);
    let steps: Vec<(u64, bool)> = full.checkpoints.iter().map(|(s, c, _)| (*s, *c)).collect();
    assert_eq!(steps, vec![(3, false), (6, false), (7, true)]);

    let mut resumed = full.checkpoints[0].2.clone();
    let mut rec = Recorder::default();
    run_pretraining(&mut resumed, &cfg, &corpus, &mut rec).unwrap();
    assert_eq!(bits(&rec.metrics), bits(&full.metrics[3..]));
    assert_eq!(resumed, full.checkpoints[2].2);
}

#[test]
fn zero_weights_give_the_baseline_update() {
    let corpus = small_corpus(2, 3);
    let cfg = short_run(4);
    let mut la_cfg = ModelConfig::tiny(Variant::La, 4);
    la_cfg.adversarial.lambda = 0.0;
    let mut base = TrainState::new(Model::new(ModelConfig::tiny(Variant::Xlsr, 4), 1).unwrap());
    let mut la = TrainState::new(Model::new(la_cfg, 1).unwrap());
    let utts = [0, 3, 5];
    for _ in 0..2 {
        let mb = train_step(&mut base, &corpus, &utts, &cfg).unwrap();
        let ml = train_step(&mut la, &corpus, &utts, &cfg).unwrap();
        assert_eq!(mb.contrastive.to_bits(), ml.contrastive.to_bits());
    }
    for (_, name, t) in base.model.params.iter() {
        assert_eq!(la.model.params.by_name(name).unwrap(), t, "{name}");
    }
}

#[test]
fn frozen_feature_encoder_does_not_move() {
    let corpus = small_corpus(2, 4);
    let cfg = TrainConfig {
        freeze_feature_encoder: true,
        ..short_run(3)
    };
    let model = Model::new(ModelConfig::tiny(Variant::Lsa, 4), 1).unwrap();
    let before = model.params.clone();
    let mut state = TrainState::new(model);
    for _ in 0..3 {
        train_step(&mut state, &corpus, &[1, 2, 6], &cfg).unwrap();
    }
    let mut moved = 0;
    for (_, name, t) in before.iter() {
        let now = state.model.params.by_name(name).unwrap();
        if name.starts_with("fe.") {
            assert_eq!(now, t, "{name}");
        } else {
            moved += (now != t) as usize;
        }
    }
    assert!(moved > 10);
}

#[test]
fn empty_or_mismatched_corpus_is_a_config_error() {
    let corpus = small_corpus(1, 5);
    let empty = Corpus {
        utterances: vec![],
        ..corpus.clone()
    };
    let model = Model::new(ModelConfig::tiny(Variant::Xlsr, 4), 1).unwrap();
    let mut state = TrainState::new(model.clone());
    let err = run_pretraining(&mut state, &short_run(2), &empty, &mut Recorder::default());
    assert!(matches!(err, Err(Error::Config(_))));

    let two = Model::new(ModelConfig::tiny(Variant::Xlsr, 2), 1).unwrap();
    let mut state = TrainState::new(two);
    let err = run_pretraining(&mut state, &short_run(2), &corpus, &mut Recorder::default());
    assert!(matches!(err, Err(Error::Config(_))));
    assert_eq!(state.step, 0);
}

#[test]
fn training_reduces_the_loss_on_the_desk_corpus() {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default(), 1).unwrap();
    let cfg = TrainConfig {
        peak_lr: 2e-3,
        warmup_steps: 30,
        total_steps: 300,
        batch_size: 4,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    // Desk utterances run up to 160 frames, 40 encoder steps.
    let mut model_cfg = ModelConfig::tiny(Variant::Xlsr, 4);
    model_cfg.encoder.max_positions = 64;
    let mut state = TrainState::new(Model::new(model_cfg, cfg.init_seed).unwrap());
    let mut rec = Recorder::default();
    run_pretraining(&mut state, &cfg, &corpus, &mut rec).unwrap();
    let avg = |m: &[StepMetrics]| m.iter().map(|x| x.total).sum::<f64>() / m.len() as f64;
    let first = avg(&rec.metrics[..50]);
    let last = avg(&rec.metrics[250..]);
    assert!(last < first, "{first} -> {last}");
    assert!(rec.metrics.iter().all(|m| m.grad_norm.is_finite()));
}
