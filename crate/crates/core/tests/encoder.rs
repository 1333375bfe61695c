use langssl_core::encoder::{
    apply_mask, context_encode, feature_encode, quantize, EncoderConfig, Mode, QuantizerConfig,
};
use langssl_core::numerics::{
    grad_check, materialize, normal_tensor, rng_for, ParamId, ParamSpec, ParamStore, Tape, Tensor,
};
use langssl_core::Error;

fn encoder_store(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut specs: Vec<ParamSpec> = Vec::new();
    cfg.param_specs(&mut specs);
    materialize(&specs, seed).unwrap()
}

fn frames(t: usize, seed: u64) -> Tensor {
    normal_tensor(&[t, 40], 1.0, &mut rng_for(seed, &[]))
}

#[test]
fn feature_lengths_follow_same_padding() {
    let cfg = EncoderConfig::tiny();
    let store = encoder_store(&cfg, 1);
    let mut rng = rng_for(0, &[]);
    for (t, expect) in [(40, 10), (4, 1), (7, 2), (400, 100)] {
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(frames(t, 3));
        let z = feature_encode(&mut tape, &cfg, x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(z.len, expect);
        assert_eq!(tape.shape(z.values), &[expect, cfg.model_dim]);
    }
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(frames(3, 3));
    assert_eq!(
        feature_encode(&mut tape, &cfg, x, Mode::Eval, &mut rng).unwrap_err(),
        Error::InputTooShort { min: 4, got: 3 }
    );
}

#[test]
fn masking_replaces_exactly_the_listed_rows() {
    let cfg = EncoderConfig::tiny();
    let store = encoder_store(&cfg, 2);
    let emb = store.by_name("enc.mask_emb").unwrap().data().to_vec();
    let mut rng = rng_for(0, &[]);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(frames(32, 4));
    let z = feature_encode(&mut tape, &cfg, x, Mode::Eval, &mut rng).unwrap();
    assert_eq!(z.len, 8);
    let orig = tape.value(z.values).clone();

    let same = apply_mask(&mut tape, z, &[]).unwrap();
    assert_eq!(tape.value(same.values), &orig);

    let m = apply_mask(&mut tape, z, &[2, 5]).unwrap();
    let out = tape.value(m.values);
    for r in 0..8 {
        if r == 2 || r == 5 {
            assert_eq!(out.row(r), emb.as_slice());
        } else {
            assert_eq!(out.row(r), orig.row(r));
        }
    }

    let all: Vec<usize> = (0..8).collect();
    let m = apply_mask(&mut tape, z, &all).unwrap();
    let out = tape.value(m.values);
    assert!((0..8).all(|r| out.row(r) == emb.as_slice()));

    assert_eq!(
        apply_mask(&mut tape, z, &[8]).unwrap_err(),
        Error::IndexOutOfRange { index: 8, len: 8 }
    );
}

#[test]
fn eval_forward_is_a_pure_function() {
    let cfg = EncoderConfig::tiny();
    let store = encoder_store(&cfg, 3);
    let x = frames(48, 5);
    let run = |seed| {
        let mut rng = rng_for(seed, &[]);
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let z = feature_encode(&mut tape, &cfg, xv, Mode::Eval, &mut rng).unwrap();
        let c = context_encode(&mut tape, &cfg, z, None, Mode::Eval, &mut rng).unwrap();
        tape.value(c.output).clone()
    };
    let a = run(1);
    let b = run(99);
    assert_eq!(a.data(), b.data());
}

#[test]
fn full_layerdrop_projects_the_stack_input() {
    let mut cfg = EncoderConfig::tiny();
    cfg.layerdrop = 1.0;
    let store = encoder_store(&cfg, 4);
    let mut rng = rng_for(7, &[]);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(frames(24, 6));
    let z = feature_encode(&mut tape, &cfg, x, Mode::Train, &mut rng).unwrap();
    let c = context_encode(&mut tape, &cfg, z, None, Mode::Train, &mut rng).unwrap();
    assert!(c.skipped.iter().all(|&s| s));

    // Oracle: (z + pos[..T']) W + b with plain loops.
    let zt = tape.value(z.values);
    let pos = store.by_name("enc.pos").unwrap();
    let w = store.by_name("enc.proj.w").unwrap();
    let b = store.by_name("enc.proj.b").unwrap();
    let (t, d) = zt.rows_cols();
    let p = cfg.projection_dim;
    let out = tape.value(c.output);
    for r in 0..t {
        for j in 0..p {
            let mut s = b.data()[j];
            for k in 0..d {
                s += (zt.row(r)[k] + pos.row(r)[k]) * w.data()[k * p + j];
            }
            assert!((out.row(r)[j] - s).abs() < 1e-12);
        }
    }
    for l in 1..c.taps.len() {
        assert_eq!(tape.value(c.taps[l]), tape.value(c.taps[0]));
    }
}

#[test]
fn layerdrop_skip_frequency_matches_rate() {
    let mut cfg = EncoderConfig::tiny();
    cfg.num_blocks = 4;
    cfg.layerdrop = 0.2;
    let store = encoder_store(&cfg, 5);
    let x = frames(8, 7);
    let mut rng = rng_for(8, &[]);
    let (mut skipped, mut total) = (0usize, 0usize);
    while total < 10_000 {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let z = feature_encode(&mut tape, &cfg, xv, Mode::Train, &mut rng).unwrap();
        let c = context_encode(&mut tape, &cfg, z, None, Mode::Train, &mut rng).unwrap();
        skipped += c.skipped.iter().filter(|&&s| s).count();
        total += c.skipped.len();
        for (l, &s) in c.skipped.iter().enumerate() {
            if s {
                assert_eq!(tape.value(c.taps[l + 1]), tape.value(c.taps[l]));
            }
        }
    }
    let freq = skipped as f64 / total as f64;
    assert!((freq - 0.2).abs() < 0.01, "skip frequency {freq}");
}

#[test]
fn stack_input_tap_is_features_plus_positions() {
    let cfg = EncoderConfig::tiny();
    let store = encoder_store(&cfg, 6);
    let mut rng = rng_for(0, &[]);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(frames(20, 8));
    let z = feature_encode(&mut tape, &cfg, x, Mode::Eval, &mut rng).unwrap();
    let c = context_encode(&mut tape, &cfg, z, None, Mode::Eval, &mut rng).unwrap();
    assert_eq!(c.taps.len(), cfg.num_blocks + 1);
    let zt = tape.value(z.values);
    let pos = store.by_name("enc.pos").unwrap();
    let tap0 = tape.value(c.taps[0]);
    for r in 0..z.len {
        for k in 0..cfg.model_dim {
            assert_eq!(tap0.row(r)[k], zt.row(r)[k] + pos.row(r)[k]);
        }
    }
}

fn quantizer_store(cfg: &QuantizerConfig, enc: &EncoderConfig) -> ParamStore {
    let mut specs = Vec::new();
    enc.param_specs(&mut specs);
    cfg.param_specs(enc.model_dim, &mut specs);
    materialize(&specs, 9).unwrap()
}

#[test]
fn quantizer_shapes_and_normalization() {
    let enc = EncoderConfig::tiny();
    let q = QuantizerConfig {
        num_groups: 2,
        entries_per_group: 5,
        entry_dim: 8,
        ..QuantizerConfig::default()
    };
    let store = quantizer_store(&q, &enc);
    let mut rng = rng_for(1, &[]);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(frames(40, 9));
    let z = feature_encode(&mut tape, &enc, x, Mode::Eval, &mut rng).unwrap();
    let out = quantize(&mut tape, &q, z, 2.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.shape(out.targets), &[10, 16]);
    assert_eq!(tape.shape(out.probs), &[10, 2, 5]);
    for row in tape.value(out.probs).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(
        quantize(&mut tape, &q, z, 0.0, Mode::Train, &mut rng).unwrap_err(),
        Error::Temperature(0.0)
    );
}

#[test]
fn cold_quantizer_selects_group_argmax() {
    let enc = EncoderConfig::tiny();
    let q = QuantizerConfig {
        num_groups: 2,
        entries_per_group: 6,
        entry_dim: 3,
        ..QuantizerConfig::default()
    };
    let store = quantizer_store(&q, &enc);
    let mut rng = rng_for(2, &[]);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(frames(32, 10));
    let z = feature_encode(&mut tape, &enc, x, Mode::Eval, &mut rng).unwrap();
    let out = quantize(&mut tape, &q, z, 1e-9, Mode::Eval, &mut rng).unwrap();

    // Oracle: logits = z W + b, argmax per group, look up the codebook row.
    let zt = tape.value(z.values).clone();
    let w = store.by_name("quant.logits.w").unwrap();
    let b = store.by_name("quant.logits.b").unwrap();
    let book = store.by_name("quant.codebook").unwrap();
    let gv = 12;
    let targets = tape.value(out.targets);
    for r in 0..z.len {
        let logits: Vec<f64> = (0..gv)
            .map(|j| {
                b.data()[j]
                    + (0..enc.model_dim)
                        .map(|k| zt.row(r)[k] * w.data()[k * gv + j])
                        .sum::<f64>()
            })
            .collect();
        for g in 0..2 {
            let grp = &logits[g * 6..(g + 1) * 6];
            let best = (0..6).fold(0, |a, j| if grp[j] > grp[a] { j } else { a });
            let entry = book.row(g * 6 + best);
            assert_eq!(&targets.row(r)[g * 3..(g + 1) * 3], entry);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig::tiny();
    let mut store = encoder_store(&cfg, 11);
    let x = frames(24, 12);
    let weights = normal_tensor(&[6, cfg.projection_dim], 1.0, &mut rng_for(13, &[]));
    let ids: Vec<ParamId> = store.ids().collect();
    let report = grad_check(&mut store, &ids, 1e-4, |tape| {
        let mut rng = rng_for(0, &[]);
        let xv = tape.constant(x.clone());
        let z = feature_encode(tape, &cfg, xv, Mode::Eval, &mut rng)?;
        let z = apply_mask(tape, z, &[1, 2])?;
        let c = context_encode(tape, &cfg, z, None, Mode::Eval, &mut rng)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(c.output, w)?;
        tape.sum(p)
    })
    .unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}
