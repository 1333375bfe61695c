use langssl_core::langcond::{
    adapter_forward, adapter_param_specs, adaptive_adapter_param_specs, adaptive_forward,
    add_language_embedding, count_params, AdaptiveWeightLayer, LangCondConfig,
};
use langssl_core::numerics::{materialize, normal_tensor, rng_for, Init, ParamStore, Tape, Tensor};
use langssl_core::{Error, ModelConfig, Variant};
use nalgebra::DMatrix;

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

#[test]
fn embedding_is_a_row_bias() {
    let mut tape = Tape::new();
    let h = tape.constant(rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let table = tape.constant(rows(&[&[0.0, 0.0], &[0.5, -1.0]]));
    let same = add_language_embedding(&mut tape, h, table, 0).unwrap();
    assert_eq!(tape.value(same), tape.value(h));
    let out = add_language_embedding(&mut tape, h, table, 1).unwrap();
    assert_eq!(tape.value(out).data(), &[1.5, 1.0, 3.5, 3.0]);
    assert_eq!(
        add_language_embedding(&mut tape, h, table, 2).unwrap_err(),
        Error::UnknownLanguage { id: 2, count: 2 }
    );
}

#[test]
fn embedding_gradient_is_column_sum_on_one_row() {
    let mut store = ParamStore::new();
    let e = store
        .insert("e", normal_tensor(&[3, 2], 1.0, &mut rng_for(1, &[])))
        .unwrap();
    let w = rows(&[&[1.0, -2.0], &[0.5, 4.0], &[3.0, 0.0], &[-1.0, 1.0]]);
    let mut tape = Tape::with_params(&store);
    let h = tape.constant(Tensor::full(&[4, 2], 0.3));
    let ev = tape.param(e).unwrap();
    let out = add_language_embedding(&mut tape, h, ev, 1).unwrap();
    let wv = tape.constant(w);
    let p = tape.mul(out, wv).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(e).unwrap().data(), &[0.0, 0.0, 3.5, 3.0, 0.0, 0.0]);
}

fn adapter_store(m: usize, d: usize, b: usize, seed: u64) -> ParamStore {
    let mut specs = Vec::new();
    adapter_param_specs(m, d, b, &mut specs);
    materialize(&specs, seed).unwrap()
}

#[test]
fn adapter_starts_as_identity() {
    let store = adapter_store(3, 6, 2, 1);
    let mut tape = Tape::with_params(&store);
    let h = tape.constant(normal_tensor(&[5, 6], 1.0, &mut rng_for(2, &[])));
    for m in 0..3 {
        let out = adapter_forward(&mut tape, h, m, 3).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }
    assert!(matches!(
        adapter_forward(&mut tape, h, 3, 3),
        Err(Error::UnknownLanguage { id: 3, count: 3 })
    ));
}

#[test]
fn adapters_diverge_per_language_and_stay_isolated() {
    let (m, d) = (2, 4);
    let mut store = adapter_store(m, d, 2, 3);
    let x = normal_tensor(&[3, d], 1.0, &mut rng_for(4, &[]));
    let targets = [Tensor::full(&[3, d], 1.0), Tensor::full(&[3, d], -1.0)];
    let loss = |tape: &mut Tape<'_>, lang: usize| {
        let h = tape.constant(x.clone());
        let out = adapter_forward(tape, h, lang, m).unwrap();
        let t = tape.constant(targets[lang].clone());
        let diff = tape.sub(out, t).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        tape.sum(sq).unwrap()
    };
    for _ in 0..10 {
        for lang in 0..m {
            let grads = {
                let mut tape = Tape::with_params(&store);
                let l = loss(&mut tape, lang);
                tape.backward(l).unwrap()
            };
            for (id, g) in grads.params() {
                let other = format!("lang.adapter{}", 1 - lang);
                assert!(!store.name(id).starts_with(&other));
                for (p, gv) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *p -= 0.05 * gv;
                }
            }
        }
    }
    let mut tape = Tape::with_params(&store);
    let h = tape.constant(x.clone());
    let a = adapter_forward(&mut tape, h, 0, m).unwrap();
    let b = adapter_forward(&mut tape, h, 1, m).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-3);
}

/// Store holding one adaptive layer with hand-set factors.
fn hand_layer() -> (ParamStore, AdaptiveWeightLayer) {
    let layer = AdaptiveWeightLayer::new("w");
    let mut s = ParamStore::new();
    s.insert(&layer.shared(), rows(&[&[1.0, 0.0], &[0.0, 1.0]]))
        .unwrap();
    s.insert(&layer.factor(0, "r"), rows(&[&[1.0], &[1.0]]))
        .unwrap();
    s.insert(&layer.factor(0, "s"), rows(&[&[1.0], &[1.0]]))
        .unwrap();
    s.insert(&layer.factor(0, "u"), rows(&[&[1.0], &[0.0]]))
        .unwrap();
    s.insert(&layer.factor(0, "v"), rows(&[&[0.0], &[1.0]]))
        .unwrap();
    (s, layer)
}

#[test]
fn adaptive_weight_hand_example() {
    let (store, layer) = hand_layer();
    let mut tape = Tape::with_params(&store);
    let w = layer.weight(&mut tape, 0).unwrap();
    assert_eq!(tape.value(w).data(), &[1.0, 1.0, 0.0, 1.0]);
    let x = tape.constant(rows(&[&[1.0, 2.0]]));
    let y = adaptive_forward(&mut tape, x, 0, 1, &layer).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0]);
    assert!(matches!(
        adaptive_forward(&mut tape, x, 1, 1, &layer),
        Err(Error::UnknownLanguage { .. })
    ));
}

fn adaptive_store(m: usize, d: usize, b: usize, cfg: &LangCondConfig) -> ParamStore {
    let mut specs = Vec::new();
    adaptive_adapter_param_specs(m, d, b, cfg, &mut specs);
    materialize(&specs, 5).unwrap()
}

#[test]
fn adaptive_layer_starts_at_shared_weights() {
    let cfg = LangCondConfig {
        k_scale: 3,
        k_bias: 2,
        factor_init_std: 0.2,
        ..LangCondConfig::default()
    };
    let store = adaptive_store(4, 6, 3, &cfg);
    let layer = AdaptiveWeightLayer::new("lang.adaptive.down");
    let ws = store.by_name(&layer.shared()).unwrap().clone();
    let mut tape = Tape::with_params(&store);
    for m in 0..4 {
        let w = layer.weight(&mut tape, m).unwrap();
        assert_eq!(tape.value(w), &ws);
    }
}

fn matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.rows_cols();
    DMatrix::from_row_slice(r, c, t.data())
}

fn outer_sum(a: &Tensor, b: &Tensor) -> DMatrix<f64> {
    matrix(a) * matrix(b).transpose()
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    m.singular_values().iter().filter(|&&s| s > 1e-10).count()
}

#[test]
fn gradients_reach_only_the_active_language_and_rank_is_bounded() {
    let (k, kb) = (3, 2);
    let cfg = LangCondConfig {
        k_scale: k,
        k_bias: kb,
        factor_init_std: 0.2,
        ..LangCondConfig::default()
    };
    let (m, d, b) = (3, 8, 5);
    let mut store = adaptive_store(m, d, b, &cfg);
    let layer = AdaptiveWeightLayer::new("lang.adaptive.down");
    let x = normal_tensor(&[4, d], 1.0, &mut rng_for(6, &[]));
    let grads = {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let y = adaptive_forward(&mut tape, xv, 1, m, &layer).unwrap();
        let y = tape.silu(y).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap()
    };
    for (id, g) in grads.params() {
        let name = store.name(id).to_string();
        assert!(
            name == layer.shared() || name.starts_with("lang.adaptive.down.l1."),
            "unexpected gradient on {name}"
        );
        // `u` is multiplied by the zero-initialized `v`, so it only starts
        // moving after the first step.
        if !name.ends_with(".u") {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }
    // One SGD step, then check the assembled factor ranks.
    let ids: Vec<_> = grads.params().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.param(id).unwrap().clone();
        for (p, gv) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= 0.1 * gv;
        }
    }
    let get = |w: &str| store.by_name(&layer.factor(1, w)).unwrap();
    let scale = outer_sum(get("r"), get("s"));
    let bias = outer_sum(get("u"), get("v"));
    let deviation = &scale - DMatrix::from_element(d, b, 1.0);
    assert!(numerical_rank(&scale) <= k);
    assert!(numerical_rank(&bias) <= kb);
    assert!(numerical_rank(&deviation) <= k + 1);
    assert!(numerical_rank(&bias) >= 1, "additive factors should move");
}

#[test]
fn parameter_accounting() {
    for v in Variant::ALL {
        let c = count_params(Variant::Xlsr, &ModelConfig::full_scale(v)).unwrap();
        assert_eq!(c.increase_pct, 0.0);
    }
    let full = ModelConfig::full_scale(Variant::Xlsr);
    let pct = |v| count_params(v, &full).unwrap();
    let (le, la, lsa, lsaw) = (
        pct(Variant::Le),
        pct(Variant::La),
        pct(Variant::Lsa),
        pct(Variant::Lsaw),
    );
    // Independent count for the additive table: M x d scalars.
    assert_eq!(le.total - le.baseline, 16 * 512);
    assert!(
        le.baseline > 90_000_000 && le.baseline < 110_000_000,
        "{}",
        le.baseline
    );
    assert!(le.increase_pct >= 0.005 && le.increase_pct <= 0.02);
    assert!(le.increase_pct < la.increase_pct);
    assert!(la.increase_pct < lsaw.increase_pct);
    assert!(lsaw.increase_pct < lsa.increase_pct);
    // Discriminator: 512 -> 512 -> 512 -> 16 with biases.
    assert_eq!(
        la.total - la.baseline,
        512 * 512 + 512 + 512 * 512 + 512 + 512 * 16 + 16
    );
}

#[test]
fn shared_factor_init_is_ones_then_zeros() {
    let t = langssl_core::numerics::init_tensor(
        &langssl_core::numerics::ParamSpec::new(
            "s",
            &[3, 2],
            Init::FirstColumnOnes { rest_std: 0.0 },
        ),
        1,
    );
    assert_eq!(t.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
}
