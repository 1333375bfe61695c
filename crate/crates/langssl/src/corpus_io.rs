//! Corpus directories: `corpus.json`, a `manifest.jsonl` with one record per
//! utterance, and one `features/<id>.f32` file per utterance.
//!
//! Feature files hold the magic `LSF1`, `u32` rows and `u32` columns, then
//! row-major little-endian `f32` values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use langssl_core::data::{Corpus, LanguageInfo, SyntheticCorpusSpec, Utterance};
use langssl_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INFO_FILE: &str = "corpus.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURE_DIR: &str = "features";
const FEATURE_MAGIC: &[u8; 4] = b"LSF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub language: String,
    pub language_id: usize,
    pub frames: usize,
    /// Relative to the corpus directory.
    pub path: String,
    /// Generator hidden state per frame.
    pub states: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusInfo {
    pub languages: Vec<LanguageInfo>,
    pub num_states: usize,
    pub feature_dim: usize,
    pub utterances: usize,
    pub fingerprint: u64,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticCorpusSpec>,
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.rows_cols();
    let mut buf = Vec::with_capacity(12 + t.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(Error::io(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(Error::io(path))?;
    if buf.len() < 12 || &buf[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let payload = &buf[12..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {rows}x{cols} floats, found {} bytes",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

pub fn write_corpus(
    dir: &Path,
    corpus: &Corpus,
    spec: Option<&SyntheticCorpusSpec>,
    seed: Option<u64>,
) -> Result<()> {
    let feat_dir = dir.join(FEATURE_DIR);
    fs::create_dir_all(&feat_dir).map_err(Error::io(&feat_dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(Error::io(&manifest_path))?;
    let mut manifest = BufWriter::new(file);
    for u in &corpus.utterances {
        let rel = format!("{FEATURE_DIR}/{}.f32", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            language: corpus.languages[u.language].name.clone(),
            language_id: u.language,
            frames: u.frames(),
            path: rel,
            states: u.states.clone(),
        };
        serde_json::to_writer(&mut manifest, &rec).expect("manifest record serializes");
        manifest
            .write_all(b"\n")
            .map_err(Error::io(&manifest_path))?;
    }
    manifest.flush().map_err(Error::io(&manifest_path))?;

    let info = CorpusInfo {
        languages: corpus.languages.clone(),
        num_states: corpus.num_states,
        feature_dim: corpus.feature_dim,
        utterances: corpus.utterances.len(),
        fingerprint: corpus.fingerprint(),
        seed,
        spec: spec.cloned(),
    };
    let info_path = dir.join(INFO_FILE);
    let json = serde_json::to_string_pretty(&info).expect("corpus info serializes");
    fs::write(&info_path, json + "\n").map_err(Error::io(&info_path))
}

pub fn read_info(dir: &Path) -> Result<CorpusInfo> {
    let path = dir.join(INFO_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Loads a corpus and checks it against the recorded fingerprint.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let info = read_info(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(Error::io(&path))?;
    let mut utterances = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        let lang = info
            .languages
            .get(rec.language_id)
            .ok_or_else(|| Error::format(&path, format!("line {}: unknown language id", n + 1)))?;
        if lang.name != rec.language {
            return Err(Error::format(
                &path,
                format!(
                    "line {}: language `{}` does not match id {}",
                    n + 1,
                    rec.language,
                    rec.language_id
                ),
            ));
        }
        let features = read_features(&dir.join(&rec.path))?;
        if features.shape()[0] != rec.frames || rec.states.len() != rec.frames {
            return Err(Error::format(
                &path,
                format!("line {}: frame count mismatch for `{}`", n + 1, rec.id),
            ));
        }
        utterances.push(Utterance {
            id: rec.id,
            language: rec.language_id,
            features,
            states: rec.states,
        });
    }
    let corpus = Corpus {
        languages: info.languages,
        num_states: info.num_states,
        feature_dim: info.feature_dim,
        utterances,
    };
    corpus.validate()?;
    if corpus.fingerprint() != info.fingerprint {
        return Err(Error::format(
            dir,
            "corpus contents do not match the recorded fingerprint",
        ));
    }
    Ok(corpus)
}
