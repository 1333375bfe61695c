//! Synthetic multilingual corpus, temperature-based language sampling,
//! span masking and batch assembly.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{rng_for, same_padding, Tensor};

/// Training-set hours per language, used as default sampling weights.
pub const LANGUAGE_HOURS: [(&str, f64); 16] = [
    ("ml-in", 328.0),
    ("ne-np", 397.0),
    ("hy-am", 342.0),
    ("ka-ge", 281.0),
    ("mr-in", 269.0),
    ("te-in", 206.0),
    ("am-et", 266.0),
    ("tg-ke", 364.0),
    ("ps-ar", 295.0),
    ("he-il", 477.0),
    ("af-za", 313.0),
    ("az-az", 246.0),
    ("da-dk", 320.0),
    ("fi-fi", 287.0),
    ("lo-la", 434.0),
    ("my-mm", 362.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    pub hours: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub languages: Vec<LanguageSpec>,
    pub feature_dim: usize,
    pub utterances_per_language: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Size of the hidden-state inventory shared by all languages.
    pub num_states: usize,
    /// Std of each language's global emission offset.
    pub language_offset: f64,
    /// Std of each language's per-state deviation from the shared means.
    pub state_perturbation: f64,
    /// Std of isotropic emission noise.
    pub emission_std: f64,
    pub self_loop: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self::with_languages(4)
    }
}

impl SyntheticCorpusSpec {
    /// The first `count` languages of the reference table.
    pub fn with_languages(count: usize) -> Self {
        let languages = LANGUAGE_HOURS
            .iter()
            .take(count)
            .enumerate()
            .map(|(i, &(name, hours))| LanguageSpec {
                name: name.into(),
                hours,
                seed: 1000 + i as u64,
            })
            .collect();
        Self {
            languages,
            feature_dim: 40,
            utterances_per_language: 50,
            min_frames: 80,
            max_frames: 160,
            num_states: 12,
            language_offset: 0.25,
            state_perturbation: 0.25,
            emission_std: 0.6,
            self_loop: 0.85,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.languages.is_empty() {
            return bad("corpus needs at least one language".into());
        }
        let mut names = BTreeSet::new();
        for l in &self.languages {
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate language name `{}`", l.name));
            }
            if !(l.hours > 0.0) || !l.hours.is_finite() {
                return bad(format!("language `{}` needs hours > 0", l.name));
            }
        }
        if self.feature_dim == 0 || self.num_states == 0 {
            return bad("feature_dim and num_states must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 0 < min_frames <= max_frames".into());
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return bad("self_loop must be in [0, 1)".into());
        }
        for (name, v) in [
            ("language_offset", self.language_offset),
            ("state_perturbation", self.state_perturbation),
            ("emission_std", self.emission_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub name: String,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: usize,
    /// `[T, feature_dim]`, values exactly representable as f32.
    pub features: Tensor,
    /// Generator hidden state per input frame.
    pub states: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub languages: Vec<LanguageInfo>,
    pub num_states: usize,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn hours(&self) -> Vec<f64> {
        self.languages.iter().map(|l| l.hours).collect()
    }

    /// Utterance indices grouped by language.
    pub fn buckets(&self) -> Vec<Vec<usize>> {
        let mut b = alloc::vec![Vec::new(); self.languages.len()];
        for (i, u) in self.utterances.iter().enumerate() {
            b[u.language].push(i);
        }
        b
    }

    /// FNV-1a over names, shapes and feature bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for l in &self.languages {
            eat(l.name.as_bytes());
        }
        for u in &self.utterances {
            eat(u.id.as_bytes());
            eat(&(u.language as u64).to_le_bytes());
            for &x in u.features.data() {
                eat(&(x as f32).to_le_bytes());
            }
            for &s in &u.states {
                eat(&(s as u32).to_le_bytes());
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Config("corpus has no utterances".into()));
        }
        for u in &self.utterances {
            if u.language >= self.languages.len() {
                return Err(Error::UnknownLanguage {
                    id: u.language,
                    count: self.languages.len(),
                });
            }
            if u.features.ndim() != 2
                || u.features.shape()[1] != self.feature_dim
                || u.states.len() != u.frames()
            {
                return Err(Error::Config(format!("utterance `{}` is malformed", u.id)));
            }
        }
        Ok(())
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Per-language hidden-Markov emission process over a shared state set.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let (s, f) = (spec.num_states, spec.feature_dim);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Config(format!("{e}")))?;
    let mut shared_rng = rng_for(seed, &[0x5eed]);
    let shared: Vec<f64> = (0..s * f).map(|_| unit.sample(&mut shared_rng)).collect();

    let mut utterances = Vec::new();
    for (li, lang) in spec.languages.iter().enumerate() {
        let mut rng = rng_for(seed, &[1, lang.seed]);
        let offset: Vec<f64> = (0..f)
            .map(|_| spec.language_offset * unit.sample(&mut rng))
            .collect();
        let means: Vec<f64> = (0..s * f)
            .map(|i| shared[i] + offset[i % f] + spec.state_perturbation * unit.sample(&mut rng))
            .collect();
        // Language-specific preference over states for jumps and starts.
        let pref: Vec<f64> = (0..s).map(|_| 0.2 + rng.random::<f64>()).collect();
        let pick = WeightedIndex::new(&pref).map_err(|e| Error::Config(format!("{e}")))?;
        for ui in 0..spec.utterances_per_language {
            let t = rng.random_range(spec.min_frames..=spec.max_frames);
            let mut state = pick.sample(&mut rng);
            let mut states = Vec::with_capacity(t);
            let mut data = Vec::with_capacity(t * f);
            for _ in 0..t {
                states.push(state);
                for k in 0..f {
                    let x = means[state * f + k] + spec.emission_std * unit.sample(&mut rng);
                    data.push(f32_round(x));
                }
                if rng.random::<f64>() >= spec.self_loop {
                    state = pick.sample(&mut rng);
                }
            }
            utterances.push(Utterance {
                id: format!("{}-{ui:05}", lang.name),
                language: li,
                features: Tensor::new(alloc::vec![t, f], data)?,
                states,
            });
        }
    }
    Ok(Corpus {
        languages: spec
            .languages
            .iter()
            .map(|l| LanguageInfo {
                name: l.name.clone(),
                hours: l.hours,
            })
            .collect(),
        num_states: s,
        feature_dim: f,
        utterances,
    })
}

/// Input frame at the centre of encoder step `t` (two strided convolutions).
pub fn encoder_frame_centers(cfg: &EncoderConfig, frames: usize) -> Vec<usize> {
    let k = cfg.conv_filter[0];
    let (s1, s2) = (cfg.conv_strides[0][0], cfg.conv_strides[1][0]);
    let (t1, p1) = same_padding(frames, k, s1);
    let (t2, p2) = same_padding(t1, k, s2);
    let center = |i: usize, stride: usize, pad: usize, len: usize| {
        (i * stride + k / 2).saturating_sub(pad).min(len - 1)
    };
    (0..t2)
        .map(|j| center(center(j, s2, p2, t1), s1, p1, frames))
        .collect()
}

/// Generator states resampled to the encoder rate.
pub fn encoder_rate_states(cfg: &EncoderConfig, utt: &Utterance) -> Vec<usize> {
    encoder_frame_centers(cfg, utt.frames())
        .into_iter()
        .map(|i| utt.states[i])
        .collect()
}

/// Normalized sampling probabilities from per-language hours.
///
/// Each language's share `n_l / Σn` is raised to `alpha` when its hours are at
/// or below `threshold` and kept as is otherwise; `None` means no threshold.
pub fn language_sampling_probs(
    hours: &[f64],
    alpha: f64,
    threshold: Option<f64>,
) -> Result<Vec<f64>> {
    if hours.is_empty() {
        return Err(Error::Config("no languages to sample".into()));
    }
    if let Some(&bad) = hours.iter().find(|&&h| !(h > 0.0) || !h.is_finite()) {
        return Err(Error::Config(format!(
            "language weight must be > 0, got {bad}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    let total: f64 = hours.iter().sum();
    let raw: Vec<f64> = hours
        .iter()
        .map(|&h| {
            let share = h / total;
            if threshold.is_none_or(|th| h <= th) {
                libm::pow(share, alpha)
            } else {
                share
            }
        })
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / z).collect())
}

/// Median of the per-language hours, the default low-resource threshold.
pub fn median_hours(hours: &[f64]) -> f64 {
    let mut h = hours.to_vec();
    h.sort_by(f64::total_cmp);
    let n = h.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        h[n / 2]
    } else {
        0.5 * (h[n / 2 - 1] + h[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub start_probability: f64,
    pub span: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            start_probability: 0.065,
            span: 10,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_probability > 0.0 && self.start_probability < 1.0) {
            return Err(Error::Config("start_probability must be in (0, 1)".into()));
        }
        if self.span == 0 {
            return Err(Error::Config("span must be >= 1".into()));
        }
        Ok(())
    }

    /// `round_half_up(p * len)`, at least 1 and at most `len`.
    pub fn num_starts(&self, len: usize) -> usize {
        let n = libm::floor(self.start_probability * len as f64 + 0.5) as usize;
        n.max(1).min(len)
    }
}

/// Sorted union of `[i, min(i + span, len))` over distinct random starts.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, cfg: &MaskingConfig, rng: &mut R) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut masked = alloc::vec![false; len];
    for start in rand::seq::index::sample(rng, len, cfg.num_starts(len)) {
        for m in &mut masked[start..(start + cfg.span).min(len)] {
            *m = true;
        }
    }
    masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Indices into `Corpus::utterances`.
    pub utterances: Vec<usize>,
    pub languages: Vec<usize>,
    /// Language label of every input frame, per utterance.
    pub frame_languages: Vec<Vec<usize>>,
}

/// Stateless batch source: batch `n` depends only on `(seed, n)`.
#[derive(Debug, Clone)]
pub struct BatchSampler<'c> {
    corpus: &'c Corpus,
    buckets: Vec<Vec<usize>>,
    languages: WeightedIndex<f64>,
    batch_size: usize,
    seed: u64,
}

impl<'c> BatchSampler<'c> {
    pub fn batch(&self, n: u64) -> Batch {
        let mut rng = rng_for(self.seed, &[n]);
        let mut b = Batch {
            utterances: Vec::with_capacity(self.batch_size),
            languages: Vec::with_capacity(self.batch_size),
            frame_languages: Vec::with_capacity(self.batch_size),
        };
        for _ in 0..self.batch_size {
            let lang = self.languages.sample(&mut rng);
            let bucket = &self.buckets[lang];
            let idx = bucket[rng.random_range(0..bucket.len())];
            let utt = &self.corpus.utterances[idx];
            b.utterances.push(idx);
            b.languages.push(utt.language);
            b.frame_languages
                .push(alloc::vec![utt.language; utt.frames()]);
        }
        b
    }

    /// Endless stream starting at batch `first`.
    pub fn iter_from(&self, first: u64) -> impl Iterator<Item = Batch> + '_ {
        (first..).map(move |n| self.batch(n))
    }
}

pub fn make_batches<'c>(
    corpus: &'c Corpus,
    probs: &[f64],
    batch_size: usize,
    seed: u64,
) -> Result<BatchSampler<'c>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if probs.len() != corpus.num_languages() {
        return Err(Error::Config(format!(
            "{} sampling probabilities for {} languages",
            probs.len(),
            corpus.num_languages()
        )));
    }
    let buckets = corpus.buckets();
    if let Some(l) = (0..probs.len()).find(|&l| probs[l] > 0.0 && buckets[l].is_empty()) {
        return Err(Error::EmptyBucket(l));
    }
    let languages = WeightedIndex::new(probs)
        .map_err(|e| Error::Config(format!("invalid sampling probabilities: {e}")))?;
    Ok(BatchSampler {
        corpus,
        buckets,
        languages,
        batch_size,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_examples() {
        let p = language_sampling_probs(&[100.0, 400.0], 0.5, None).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] - 2.0 / 3.0).abs() < 1e-12);
        let p = language_sampling_probs(&[100.0, 400.0], 1.0, None).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-12);
        let p = language_sampling_probs(&[7.0; 3], 0.3, Some(1.0)).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!(language_sampling_probs(&[1.0, 0.0], 0.5, None).is_err());
    }

    #[test]
    fn threshold_keeps_high_resource_natural() {
        // Shares 0.2 / 0.8; only the first is tempered.
        let p = language_sampling_probs(&[100.0, 400.0], 0.5, Some(200.0)).unwrap();
        let a = libm::sqrt(0.2);
        assert!((p[0] - a / (a + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn start_count_rounds_half_up() {
        let m = MaskingConfig::default();
        assert_eq!(m.num_starts(100), 7);
        assert_eq!(m.num_starts(200), 13);
        assert_eq!(m.num_starts(5), 1);
        let tiny = MaskingConfig {
            start_probability: 1e-9,
            span: 10,
        };
        assert_eq!(tiny.num_starts(1000), 1);
    }

    #[test]
    fn frame_centers_stay_in_range() {
        let cfg = EncoderConfig::desk();
        for t in 4..200 {
            let c = encoder_frame_centers(&cfg, t);
            assert_eq!(c.len(), cfg.subsampled_len(t));
            assert!(c.iter().all(|&i| i < t));
            assert!(c.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
