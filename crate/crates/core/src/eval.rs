//! Linear probes on frozen features and the cross-variant comparison table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{encoder_rate_states, Corpus};
use crate::error::{Error, Result};
use crate::langcond::count_params;
use crate::model::{Model, ModelConfig};
use crate::numerics::{rng_for, ParamStore, Tape, Tensor};
use crate::objectives::nll_from_logits;
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Layer boundary to read; `None` picks `min(4, num_blocks)`.
    pub tap_layer: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Replace labels with a per-frame random permutation (chance control).
    pub shuffle_labels: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            tap_layer: None,
            steps: 300,
            learning_rate: 0.05,
            train_fraction: 0.7,
            heldout_fraction: 0.3,
            seed: 11,
            shuffle_labels: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.train_fraction)
            || !ok(self.heldout_fraction)
            || libm::fabs(self.train_fraction + self.heldout_fraction - 1.0) > 1e-9
        {
            return Err(Error::Config(
                "probe split fractions must be in (0, 1) and sum to 1".into(),
            ));
        }
        if self.steps == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "probe needs steps > 0 and learning_rate > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve_tap(&self, cfg: &ModelConfig) -> Result<usize> {
        let blocks = cfg.encoder.num_blocks;
        let tap = self.tap_layer.unwrap_or(blocks.min(4));
        if tap > blocks {
            return Err(Error::IndexOutOfRange {
                index: tap,
                len: blocks + 1,
            });
        }
        Ok(tap)
    }
}

/// Where probe inputs come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'m> {
    /// Input filter-bank-like frames.
    Raw,
    /// One-hot generator states (leakage control).
    OneHotStates,
    /// Frozen encoder hidden states at a layer boundary.
    Encoder { model: &'m Model, layer: usize },
}

/// Frames of one utterance with language and generator-state labels.
struct Rows {
    features: Tensor,
    states: Vec<usize>,
}

fn utterance_rows(src: FeatureSource<'_>, corpus: &Corpus, u: usize) -> Result<Rows> {
    let utt = &corpus.utterances[u];
    Ok(match src {
        FeatureSource::Raw => Rows {
            features: utt.features.clone(),
            states: utt.states.clone(),
        },
        FeatureSource::OneHotStates => {
            let s = corpus.num_states;
            let mut t = Tensor::zeros(&[utt.frames(), s]);
            for (i, &st) in utt.states.iter().enumerate() {
                if st >= s {
                    return Err(Error::LabelOutOfRange {
                        label: st,
                        classes: s,
                    });
                }
                t.data_mut()[i * s + st] = 1.0;
            }
            Rows {
                features: t,
                states: utt.states.clone(),
            }
        }
        FeatureSource::Encoder { model, layer } => Rows {
            features: model.features_at(&utt.features, utt.language, layer)?,
            states: encoder_rate_states(&model.config.encoder, utt),
        },
    })
}

/// Deterministic utterance-level split, stratified by language.
fn split(corpus: &Corpus, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(cfg.seed, &[0x5b1]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut bucket in corpus.buckets() {
        bucket.shuffle(&mut rng);
        let n = bucket.len();
        let n_train = if n < 2 {
            n
        } else {
            (libm::round(n as f64 * cfg.train_fraction) as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&bucket[..n_train]);
        test.extend_from_slice(&bucket[n_train..]);
    }
    (train, test)
}

struct Design {
    x: Tensor,
    labels: Vec<usize>,
    languages: Vec<usize>,
}

fn design(
    src: FeatureSource<'_>,
    corpus: &Corpus,
    utts: &[usize],
    target: Target,
) -> Result<Design> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut languages = Vec::new();
    let mut width = 0;
    for &u in utts {
        let rows = utterance_rows(src, corpus, u)?;
        let (n, d) = rows.features.rows_cols();
        width = d;
        data.extend_from_slice(rows.features.data());
        let lang = corpus.utterances[u].language;
        languages.extend(core::iter::repeat_n(lang, n));
        match target {
            Target::Language => labels.extend(core::iter::repeat_n(lang, n)),
            Target::State => labels.extend_from_slice(&rows.states),
        }
    }
    let n = labels.len();
    Ok(Design {
        x: Tensor::new(vec![n, width], data)?,
        labels,
        languages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Language,
    State,
}

/// Standardizes columns with the training statistics.
fn standardize(train: &mut Tensor, test: &mut Tensor) {
    let (n, d) = train.rows_cols();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(train.row(r)) {
            *m += x / n as f64;
        }
    }
    for r in 0..n {
        for c in 0..d {
            let dx = train.row(r)[c] - mean[c];
            var[c] += dx * dx / n as f64;
        }
    }
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + 1e-8)).collect();
    for t in [train, test] {
        let (_, d) = t.rows_cols();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *x = (*x - mean[c]) * inv[c];
        }
    }
}

/// Predictions of a softmax-regression probe trained with Adam.
pub fn train_linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<Vec<usize>> {
    let (_, d) = train_x.rows_cols();
    let mut store = ParamStore::new();
    let w = store.insert("probe.w", Tensor::zeros(&[d, classes]))?;
    let b = store.insert("probe.b", Tensor::zeros(&[classes]))?;
    let mut adam = crate::trainer::AdamState::new(&store);
    for _ in 0..cfg.steps {
        let grads = {
            let mut tape = Tape::with_params(&store);
            let x = tape.constant(train_x.clone());
            let (wv, bv) = (tape.param(w)?, tape.param(b)?);
            let logits = tape.linear(x, wv, Some(bv))?;
            let loss = nll_from_logits(&mut tape, logits, train_y)?;
            tape.backward(loss)?
        };
        adam.update(&mut store, &grads, cfg.learning_rate, 0.9, 0.999, 1e-8);
    }
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(test_x.clone());
    let (wv, bv) = (tape.param(w)?, tape.param(b)?);
    let logits = tape.linear(x, wv, Some(bv))?;
    let l = tape.value(logits);
    let (n, c) = l.rows_cols();
    Ok((0..n)
        .map(|r| {
            let row = &l.data()[r * c..(r + 1) * c];
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

fn run_probe(
    src: FeatureSource<'_>,
    corpus: &Corpus,
    cfg: &ProbeConfig,
    target: Target,
    classes: usize,
) -> Result<(Vec<usize>, Design)> {
    cfg.validate()?;
    corpus.validate()?;
    let (train_u, test_u) = split(corpus, cfg);
    if train_u.is_empty() || test_u.is_empty() {
        return Err(Error::Config(
            "corpus too small to split for probing".into(),
        ));
    }
    let mut train = design(src, corpus, &train_u, target)?;
    let mut test = design(src, corpus, &test_u, target)?;
    if cfg.shuffle_labels {
        let mut rng = rng_for(cfg.seed, &[0x5f1e]);
        train.labels.shuffle(&mut rng);
        test.labels.shuffle(&mut rng);
    }
    standardize(&mut train.x, &mut test.x);
    let pred = train_linear_probe(&train.x, &train.labels, &test.x, classes, cfg)?;
    Ok((pred, test))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Held-out frame accuracy of a linear language classifier.
pub fn language_probe(src: FeatureSource<'_>, corpus: &Corpus, cfg: &ProbeConfig) -> Result<f64> {
    let (pred, test) = run_probe(src, corpus, cfg, Target::Language, corpus.num_languages())?;
    Ok(accuracy(&pred, &test.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameProbeResult {
    pub per_language: Vec<f64>,
    pub macro_avg: f64,
}

/// Held-out accuracy of a linear classifier for the generator state.
pub fn frame_probe(
    src: FeatureSource<'_>,
    corpus: &Corpus,
    cfg: &ProbeConfig,
) -> Result<FrameProbeResult> {
    if corpus.num_states == 0 || corpus.utterances.iter().any(|u| u.states.is_empty()) {
        return Err(Error::Config("corpus has no state labels".into()));
    }
    let (pred, test) = run_probe(src, corpus, cfg, Target::State, corpus.num_states)?;
    let m = corpus.num_languages();
    let mut hit = vec![0usize; m];
    let mut count = vec![0usize; m];
    for ((p, l), &lang) in pred.iter().zip(&test.labels).zip(&test.languages) {
        count[lang] += 1;
        hit[lang] += (p == l) as usize;
    }
    let per_language: Vec<f64> = hit
        .iter()
        .zip(&count)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let macro_avg = per_language.iter().sum::<f64>() / m as f64;
    Ok(FrameProbeResult {
        per_language,
        macro_avg,
    })
}

/// A trained variant together with its final training statistics.
#[derive(Debug, Clone)]
pub struct VariantRun<'m> {
    pub model: &'m Model,
    pub corpus_fingerprint: u64,
    pub final_contrastive: f64,
    pub codebook_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub params_increase_pct: f64,
    pub lang_probe_acc: f64,
    pub frame_probe_macro: f64,
    pub frame_probe_per_language: Vec<f64>,
    pub final_contrastive: f64,
    pub codebook_perplexity: f64,
}

pub fn compare_variants(
    runs: &[VariantRun<'_>],
    corpus: &Corpus,
    cfg: &ProbeConfig,
) -> Result<Vec<ReportRow>> {
    if runs.len() < 2 {
        return Err(Error::Config(format!(
            "comparison needs at least 2 checkpoints, got {}",
            runs.len()
        )));
    }
    let fp = corpus.fingerprint();
    if let Some(r) = runs.iter().find(|r| r.corpus_fingerprint != fp) {
        return Err(Error::Config(format!(
            "{} checkpoint was trained on a different corpus",
            r.model.config.variant
        )));
    }
    runs.iter()
        .map(|r| {
            let layer = cfg.resolve_tap(&r.model.config)?;
            let src = FeatureSource::Encoder {
                model: r.model,
                layer,
            };
            let frame = frame_probe(src, corpus, cfg)?;
            Ok(ReportRow {
                variant: r.model.config.variant,
                params_increase_pct: count_params(r.model.config.variant, &r.model.config)?
                    .increase_pct,
                lang_probe_acc: language_probe(src, corpus, cfg)?,
                frame_probe_macro: frame.macro_avg,
                frame_probe_per_language: frame.per_language,
                final_contrastive: r.final_contrastive,
                codebook_perplexity: r.codebook_perplexity,
            })
        })
        .collect()
}
