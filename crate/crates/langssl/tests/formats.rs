use langssl::checkpoint::{self, CheckpointInfo};
use langssl::config::RunConfig;
use langssl::corpus_io::{read_corpus, read_features, read_info, write_corpus, write_features};
use langssl::metrics::{read_metrics, tail_mean, MetricsWriter};
use langssl::report::{to_csv, ReportSummary, CSV_HEADER};
use langssl::Error;
use langssl_core::data::{generate_corpus, SyntheticCorpusSpec};
use langssl_core::eval::ReportRow;
use langssl_core::numerics::{normal_tensor, rng_for, Tensor};
use langssl_core::trainer::{StepMetrics, TrainState};
use langssl_core::{Model, ModelConfig, Variant};

fn small_spec() -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        utterances_per_language: 3,
        ..SyntheticCorpusSpec::default()
    }
}

fn trained_state() -> TrainState {
    let model = Model::new(ModelConfig::tiny(Variant::Lsaw, 4), 3).unwrap();
    let mut state = TrainState::new(model);
    // Non-trivial optimizer state so the moments are exercised.
    for (i, m) in state.adam.m.iter_mut().enumerate() {
        for (j, x) in m.data_mut().iter_mut().enumerate() {
            *x = (i * 31 + j) as f64 * 1e-3;
        }
    }
    for v in &mut state.adam.v {
        v.data_mut().fill(0.25);
    }
    state.adam.t = 5;
    state.step = 5;
    state
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let state = trained_state();
    let info = CheckpointInfo {
        corpus_fingerprint: Some(42),
        final_contrastive: Some(1.0 / 3.0),
        codebook_perplexity: None,
        code_version: "test".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&path, &state, false, &info).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.state, state);
    assert_eq!(back.info, info);
    assert!(!back.complete);
    assert_eq!(
        checkpoint::encode(&back.state, false, &back.info),
        std::fs::read(&path).unwrap()
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let state = trained_state();
    let bytes = checkpoint::encode(&state, true, &CheckpointInfo::default());
    let p = std::path::Path::new("x.ckpt");
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(matches!(
        checkpoint::decode(&bad_magic, p),
        Err(Error::Format { .. })
    ));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(
        checkpoint::decode(&bad_version, p),
        Err(Error::Format { .. })
    ));
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1], p).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(checkpoint::decode(&trailing, p).is_err());
    assert!(checkpoint::decode(&bytes[..10], p).is_err());
}

#[test]
fn features_round_trip_at_single_precision() {
    let t = normal_tensor(&[7, 5], 1.0, &mut rng_for(1, &[]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.f32");
    write_features(&path, &t).unwrap();
    let back = read_features(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    for (a, b) in t.data().iter().zip(back.data()) {
        assert_eq!(*b, *a as f32 as f64);
    }
    std::fs::write(&path, b"LSF1\x02\0\0\0").unwrap();
    assert!(read_features(&path).is_err());
}

#[test]
fn corpus_round_trip_preserves_the_fingerprint() {
    let spec = small_spec();
    let corpus = generate_corpus(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus, Some(&spec), Some(5)).unwrap();
    let info = read_info(dir.path()).unwrap();
    assert_eq!(info.utterances, corpus.utterances.len());
    assert_eq!(info.seed, Some(5));
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.utterances.len(), corpus.utterances.len());
    assert_eq!(back.fingerprint(), info.fingerprint);
    for (a, b) in corpus.utterances.iter().zip(&back.utterances) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.language, b.language);
        assert_eq!(a.states, b.states);
    }
    // Writing what was read reproduces the files.
    let again = tempfile::tempdir().unwrap();
    write_corpus(again.path(), &back, Some(&spec), Some(5)).unwrap();
    assert_eq!(read_info(again.path()).unwrap(), info);
}

#[test]
fn tampered_corpus_fails_the_fingerprint_check() {
    let spec = small_spec();
    let corpus = generate_corpus(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus, None, None).unwrap();
    let u = &corpus.utterances[0];
    let mut f = u.features.clone();
    f.data_mut()[0] += 1.0;
    write_features(&dir.path().join(format!("features/{}.f32", u.id)), &f).unwrap();
    assert!(read_corpus(dir.path()).is_err());
}

#[test]
fn config_rejects_unknown_keys_and_round_trips() {
    let err = RunConfig::parse("[train]\npeak_lr = 1e-3\nbogus = 1\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("bogus"), "{err}");

    let cfg = RunConfig::parse("[train]\npeak_lr = 1e-3\n").unwrap();
    assert_eq!(cfg.train.peak_lr, 1e-3);
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    RunConfig::default().validate().unwrap();
}

#[test]
fn config_validation_cross_checks_sections() {
    let mut cfg = RunConfig::default();
    cfg.model.num_languages = 3;
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);

    let mut cfg = RunConfig::default();
    cfg.probe.tap_layer = Some(99);
    assert!(cfg.validate().is_err());

    let mut cfg = RunConfig::default();
    cfg.train.warmup_steps = cfg.train.total_steps;
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
}

fn metrics(step: u64, contrastive: f64) -> StepMetrics {
    StepMetrics {
        step,
        lr: 1e-3,
        temperature: 2.0,
        total: contrastive,
        contrastive,
        diversity: 0.5,
        adversarial: None,
        orthogonal: Some(0.25),
        grad_norm: 1.0,
        codebook_perplexity: 10.0,
    }
}

#[test]
fn metrics_resume_drops_later_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut w = MetricsWriter::open(&path, 0).unwrap();
    for s in 0..5 {
        w.write(&metrics(s, s as f64)).unwrap();
    }
    drop(w);
    let mut w = MetricsWriter::open(&path, 3).unwrap();
    w.write(&metrics(3, 30.0)).unwrap();
    drop(w);
    let recs: Vec<_> = read_metrics(&path)
        .unwrap()
        .into_iter()
        .map(|r| r.metrics)
        .collect();
    assert_eq!(
        recs.iter().map(|m| m.step).collect::<Vec<_>>(),
        [0, 1, 2, 3]
    );
    assert_eq!(recs[3].contrastive, 30.0);
    assert_eq!(recs[1], metrics(1, 1.0));
    assert_eq!(tail_mean(&recs, 2, |m| m.contrastive), Some(16.0));
    assert_eq!(tail_mean(&recs[..0], 2, |m| m.contrastive), None);
}

#[test]
fn report_csv_has_the_fixed_header() {
    let row = |variant, pct| ReportRow {
        variant,
        params_increase_pct: pct,
        lang_probe_acc: 0.5,
        frame_probe_macro: 0.25,
        frame_probe_per_language: vec![0.25; 4],
        final_contrastive: 2.0,
        codebook_perplexity: 100.0,
    };
    let rows = vec![row(Variant::Xlsr, 0.0), row(Variant::Le, 0.1 + 0.2)];
    let csv = to_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(lines.next().unwrap(), "xlsr,0,0.5,0.25,2,100");
    // Full precision survives the text form.
    let le: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(le[1].parse::<f64>().unwrap(), 0.1 + 0.2);

    let summary = ReportSummary {
        tap_layer: 4,
        corpus_fingerprint: u64::MAX,
        rows,
    };
    let json = serde_json::to_string(&summary).unwrap();
    assert_eq!(
        serde_json::from_str::<ReportSummary>(&json).unwrap(),
        summary
    );
}

#[test]
fn loaded_checkpoints_reproduce_forward_outputs() {
    let state = trained_state();
    let bytes = checkpoint::encode(&state, true, &CheckpointInfo::default());
    let back = checkpoint::decode(&bytes, std::path::Path::new("x")).unwrap();
    let x: Tensor = normal_tensor(&[64, 40], 1.0, &mut rng_for(2, &[]));
    let a = state.model.context(&x, 1).unwrap();
    let b = back.state.model.context(&x, 1).unwrap();
    assert_eq!(a, b);
}
