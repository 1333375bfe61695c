//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use langssl_core::data::generate_corpus;
use langssl_core::eval::{
    compare_variants, frame_probe, language_probe, FeatureSource, VariantRun,
};
use langssl_core::langcond::count_params;
use langssl_core::trainer::{run_pretraining, StepMetrics, TrainState, TrainingSink};
use langssl_core::{Model, ModelConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointInfo};
use crate::config::{RunConfig, RESOLVED_FILE};
use crate::corpus_io::{read_corpus, write_corpus};
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, tail_mean, MetricsWriter};
use crate::report::{to_table, write_report, ReportSummary, CSV_FILE, JSON_FILE};
use crate::verify::{run_all, Fault, VerifyOptions};
use crate::CODE_VERSION;

pub const RUN_ROOT_ENV: &str = "LANGSSL_RUN_ROOT";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const PROBE_FILE: &str = "probe.json";

/// Steps averaged for the reported final contrastive loss and perplexity.
pub const FINAL_WINDOW: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "langssl",
    version,
    about = "Language-aware self-supervised speech pretraining"
)]
pub struct Cli {
    /// Directory that relative corpus, run and report paths resolve against.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multilingual corpus.
    Generate(GenerateArgs),
    /// Pretrain one model variant.
    Pretrain(PretrainArgs),
    /// Train linear probes on a checkpoint's hidden states.
    Probe(ProbeArgs),
    /// Compare pretrained variants in a CSV/JSON table.
    Report(ReportArgs),
    /// Run gradient, identity and optimizer self-checks.
    Verify(VerifyArgs),
    /// Print parameter counts per variant.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    /// Run directory; defaults to the variant tag.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Continue from the newest checkpoint using the saved configuration.
    #[arg(long, conflicts_with_all = ["config", "variant", "steps", "lambda", "alpha", "tap_layer", "k_scale", "k_bias", "init_seed", "data_seed"])]
    pub resume: bool,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Layer boundary feeding the language discriminator.
    #[arg(long)]
    pub tap_layer: Option<usize>,
    #[arg(long)]
    pub k_scale: Option<usize>,
    #[arg(long)]
    pub k_bias: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Run directory holding a final checkpoint.
    #[arg(long)]
    pub run: PathBuf,
    /// Corpus to probe; defaults to the one the run was trained on.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Layer boundaries to probe (comma separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep")]
    pub tap_layer: Vec<usize>,
    /// Probe every layer boundary.
    #[arg(long)]
    pub sweep: bool,
    /// Replace labels by random ones (chance-level control).
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to compare (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tap_layer: Option<usize>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Check every gradient entry instead of a sample.
    #[arg(long)]
    pub full: bool,
    #[arg(long, hide = true, value_enum)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Profile {
    Full,
    Desk,
    Tiny,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub profile: Profile,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e| format!("{e}"))
}

/// Facts about a pretraining run, written next to its checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub corpus_dir: PathBuf,
    pub corpus_fingerprint: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: usize,
    pub lang_probe_acc: f64,
    pub frame_probe_macro: f64,
    pub frame_probe_per_language: Vec<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    let root = &cli.run_root;
    match cli.command {
        Command::Generate(a) => generate(root, a),
        Command::Pretrain(a) => pretrain(root, a),
        Command::Probe(a) => probe(root, a),
        Command::Report(a) => report(root, a),
        Command::Verify(a) => verify(a),
        Command::Params(a) => params(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn generate(root: &Path, a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.corpus_seed = s;
    }
    cfg.corpus.validate()?;
    let corpus = generate_corpus(&cfg.corpus, cfg.corpus_seed)?;
    let dir = root.join(&a.out);
    write_corpus(&dir, &corpus, Some(&cfg.corpus), Some(cfg.corpus_seed))?;
    println!(
        "wrote {} utterances in {} languages to {} (fingerprint {:016x})",
        corpus.utterances.len(),
        corpus.num_languages(),
        dir.display(),
        corpus.fingerprint()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, a: &PretrainArgs) -> Result<()> {
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(n) = a.steps {
        cfg.train.total_steps = n;
        if cfg.train.warmup_steps >= n {
            cfg.train.warmup_steps = n / 10;
        }
        if cfg.train.checkpoint_every >= n {
            cfg.train.checkpoint_every = 0;
        }
    }
    if let Some(x) = a.lambda {
        cfg.model.adversarial.lambda = x;
    }
    if let Some(x) = a.alpha {
        cfg.model.orthogonal.alpha = x;
    }
    if let Some(x) = a.tap_layer {
        cfg.model.adversarial.tap_layer = x;
    }
    if let Some(x) = a.k_scale {
        cfg.model.langcond.k_scale = x;
    }
    if let Some(x) = a.k_bias {
        cfg.model.langcond.k_bias = x;
    }
    if let Some(x) = a.init_seed {
        cfg.train.init_seed = x;
    }
    if let Some(x) = a.data_seed {
        cfg.train.data_seed = x;
    }
    cfg.validate()
}

fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// The newest checkpoint in a run directory, final first.
fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let fin = run_dir.join(FINAL_CHECKPOINT);
    if fin.exists() {
        return Ok(Some(fin));
    }
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
        let p = entry.map_err(Error::io(&dir))?.path();
        let is_ckpt = p.extension().is_some_and(|e| e == "ckpt");
        if is_ckpt && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}

struct RunSink {
    dir: PathBuf,
    metrics: MetricsWriter,
    info: CheckpointInfo,
}

impl RunSink {
    fn finish_info(&self) -> Result<CheckpointInfo> {
        let records: Vec<StepMetrics> = read_metrics(&self.dir.join(METRICS_FILE))?
            .into_iter()
            .map(|r| r.metrics)
            .collect();
        Ok(CheckpointInfo {
            final_contrastive: tail_mean(&records, FINAL_WINDOW, |m| m.contrastive),
            codebook_perplexity: tail_mean(&records, FINAL_WINDOW, |m| m.codebook_perplexity),
            ..self.info.clone()
        })
    }
}

fn sink_err(e: Error) -> langssl_core::Error {
    match e {
        Error::Core(c) => c,
        other => langssl_core::Error::Sink(other.to_string()),
    }
}

impl TrainingSink for RunSink {
    fn on_metrics(&mut self, m: &StepMetrics) -> langssl_core::Result<()> {
        self.metrics.write(m).map_err(sink_err)?;
        if m.step.is_multiple_of(100) {
            println!(
                "step {:>6}  total {:.4}  contrastive {:.4}  lr {:.2e}",
                m.step, m.total, m.contrastive, m.lr
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState, complete: bool) -> langssl_core::Result<()> {
        if complete {
            let info = self.finish_info().map_err(sink_err)?;
            checkpoint::save(&self.dir.join(FINAL_CHECKPOINT), state, true, &info)
        } else {
            let path = self
                .dir
                .join(CHECKPOINT_DIR)
                .join(checkpoint_name(state.step));
            checkpoint::save(&path, state, false, &self.info)
        }
        .map_err(sink_err)
    }
}

fn pretrain(root: &Path, a: PretrainArgs) -> Result<()> {
    let (cfg, run_dir, mut state, corpus_dir) = if a.resume {
        let run_dir = root.join(
            a.run
                .as_ref()
                .ok_or_else(|| Error::Usage("--resume needs --run".into()))?,
        );
        let cfg = RunConfig::load(Some(&run_dir.join(RESOLVED_FILE)))?;
        let manifest: RunManifest = read_json(&run_dir.join(RUN_FILE))?;
        let ckpt = latest_checkpoint(&run_dir)?
            .ok_or_else(|| Error::Usage(format!("no checkpoint in {}", run_dir.display())))?;
        let ck = checkpoint::load(&ckpt)?;
        if ck.complete {
            println!("{} is already complete", run_dir.display());
            return Ok(());
        }
        println!("resuming from step {}", ck.state.step);
        (cfg, run_dir, ck.state, manifest.corpus_dir)
    } else {
        let mut cfg = RunConfig::load(a.config.as_deref())?;
        apply_overrides(&mut cfg, &a)?;
        let name = a
            .run
            .clone()
            .unwrap_or_else(|| PathBuf::from(cfg.model.variant.tag()));
        let run_dir = root.join(name);
        let model = Model::new(cfg.model.clone(), cfg.train.init_seed)?;
        (cfg, run_dir, TrainState::new(model), root.join(&a.corpus))
    };
    let corpus = read_corpus(&corpus_dir)?;
    let ck_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(Error::io(&ck_dir))?;
    if !a.resume {
        cfg.write_resolved(&run_dir)?;
        let manifest = RunManifest {
            variant: cfg.model.variant,
            corpus_dir: fs::canonicalize(&corpus_dir).unwrap_or(corpus_dir.clone()),
            corpus_fingerprint: corpus.fingerprint(),
            init_seed: cfg.train.init_seed,
            data_seed: cfg.train.data_seed,
            code_version: CODE_VERSION.into(),
        };
        write_json(&run_dir.join(RUN_FILE), &manifest)?;
    }
    let mut sink = RunSink {
        metrics: MetricsWriter::open(&run_dir.join(METRICS_FILE), state.step)?,
        dir: run_dir.clone(),
        info: CheckpointInfo {
            corpus_fingerprint: Some(corpus.fingerprint()),
            code_version: CODE_VERSION.into(),
            ..CheckpointInfo::default()
        },
    };
    run_pretraining(&mut state, &cfg.train, &corpus, &mut sink)?;
    let info = sink.finish_info()?;
    println!(
        "{}: {} steps, final contrastive {:.4}, codebook perplexity {:.2}",
        cfg.model.variant,
        state.step,
        info.final_contrastive.unwrap_or(f64::NAN),
        info.codebook_perplexity.unwrap_or(f64::NAN)
    );
    Ok(())
}

struct LoadedRun {
    dir: PathBuf,
    config: RunConfig,
    manifest: RunManifest,
    checkpoint: checkpoint::Checkpoint,
}

fn load_run(root: &Path, run: &Path) -> Result<LoadedRun> {
    let dir = root.join(run);
    let path = dir.join(FINAL_CHECKPOINT);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "{} has no final checkpoint; finish pretraining first",
            dir.display()
        )));
    }
    Ok(LoadedRun {
        config: RunConfig::load(Some(&dir.join(RESOLVED_FILE)))?,
        manifest: read_json(&dir.join(RUN_FILE))?,
        checkpoint: checkpoint::load(&path)?,
        dir,
    })
}

fn check_tap(layer: usize, cfg: &ModelConfig) -> Result<()> {
    let blocks = cfg.encoder.num_blocks;
    if layer > blocks {
        return Err(Error::Usage(format!(
            "tap layer {layer} out of range: the encoder has layer boundaries 0..={blocks}"
        )));
    }
    Ok(())
}

fn probe(root: &Path, a: ProbeArgs) -> Result<()> {
    let run = load_run(root, &a.run)?;
    let model = &run.checkpoint.state.model;
    let mut pcfg = run.config.probe.clone();
    pcfg.shuffle_labels = a.shuffle_labels;
    let layers: Vec<usize> = if a.sweep {
        (0..=model.config.encoder.num_blocks).collect()
    } else if a.tap_layer.is_empty() {
        vec![pcfg.resolve_tap(&model.config)?]
    } else {
        a.tap_layer.clone()
    };
    for &l in &layers {
        check_tap(l, &model.config)?;
    }
    let corpus_dir = a.corpus.map_or(run.manifest.corpus_dir, |c| root.join(c));
    let corpus = read_corpus(&corpus_dir)?;
    let mut records = Vec::new();
    println!("{:>5} {:>10} {:>10}", "layer", "lang acc", "frame acc");
    for layer in layers {
        let src = FeatureSource::Encoder { model, layer };
        let frame = frame_probe(src, &corpus, &pcfg)?;
        let rec = ProbeRecord {
            layer,
            lang_probe_acc: language_probe(src, &corpus, &pcfg)?,
            frame_probe_macro: frame.macro_avg,
            frame_probe_per_language: frame.per_language,
        };
        println!(
            "{:>5} {:>10.4} {:>10.4}",
            rec.layer, rec.lang_probe_acc, rec.frame_probe_macro
        );
        records.push(rec);
    }
    write_json(&run.dir.join(PROBE_FILE), &records)
}

fn report(root: &Path, a: ReportArgs) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|r| load_run(root, r))
        .collect::<Result<Vec<_>>>()?;
    let corpus_dir = match a.corpus {
        Some(c) => root.join(c),
        None => runs[0].manifest.corpus_dir.clone(),
    };
    let corpus = read_corpus(&corpus_dir)?;
    let mut pcfg = runs[0].config.probe.clone();
    if let Some(t) = a.tap_layer {
        pcfg.tap_layer = Some(t);
    }
    let mut inputs = Vec::with_capacity(runs.len());
    for r in &runs {
        let model = &r.checkpoint.state.model;
        check_tap(
            pcfg.resolve_tap(&model.config).unwrap_or(usize::MAX),
            &model.config,
        )?;
        let info = &r.checkpoint.info;
        let missing = |what: &str| {
            Error::format(
                &r.dir.join(FINAL_CHECKPOINT),
                format!("checkpoint lacks {what}"),
            )
        };
        inputs.push(VariantRun {
            model,
            corpus_fingerprint: info
                .corpus_fingerprint
                .ok_or_else(|| missing("a corpus fingerprint"))?,
            final_contrastive: info
                .final_contrastive
                .ok_or_else(|| missing("a final contrastive loss"))?,
            codebook_perplexity: info
                .codebook_perplexity
                .ok_or_else(|| missing("a codebook perplexity"))?,
        });
    }
    let rows = compare_variants(&inputs, &corpus, &pcfg)?;
    let summary = ReportSummary {
        tap_layer: pcfg.resolve_tap(&inputs[0].model.config)?,
        corpus_fingerprint: corpus.fingerprint(),
        rows,
    };
    let out = root.join(&a.out);
    write_report(&out, &summary)?;
    print!("{}", to_table(&summary.rows));
    println!(
        "wrote {} and {}",
        out.join(CSV_FILE).display(),
        out.join(JSON_FILE).display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let opts = VerifyOptions {
        entries_per_param: if a.full {
            None
        } else {
            VerifyOptions::default().entries_per_param
        },
        fault: a.inject_fault,
    };
    let outcomes = run_all(&opts);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(failed))
    }
}

fn params(a: ParamsArgs) -> Result<()> {
    println!("variant,total,baseline,params_increase_pct");
    for v in Variant::ALL {
        let cfg = match a.profile {
            Profile::Full => ModelConfig::full_scale(v),
            Profile::Desk => ModelConfig::desk(v, 4),
            Profile::Tiny => ModelConfig::tiny(v, 4),
        };
        let c = count_params(v, &cfg)?;
        println!("{},{},{},{}", v.tag(), c.total, c.baseline, c.increase_pct);
    }
    Ok(())
}
