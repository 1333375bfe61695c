use std::path::Path;
use std::process::{Command, Output};

use langssl::cli::{FINAL_CHECKPOINT, METRICS_FILE, RUN_FILE};
use langssl::config::RESOLVED_FILE;
use langssl::metrics::read_metrics;

fn langssl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langssl"))
        .env("LANGSSL_RUN_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A corpus small enough for a few seconds of training.
fn small_config(root: &Path) -> String {
    let path = root.join("small.toml");
    let mut text = String::from("corpus_seed = 3\n[corpus]\nutterances_per_language = 6\n");
    for (i, (name, hours)) in [("aa", 1.0), ("bb", 0.5), ("cc", 0.25), ("dd", 0.1)]
        .into_iter()
        .enumerate()
    {
        text += &format!("[[corpus.languages]]\nname = \"{name}\"\nhours = {hours}\nseed = {i}\n");
    }
    text += "[train]\nbatch_size = 2\ncheckpoint_every = 4\n[probe]\nsteps = 20\n";
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&langssl(root, &["frobnicate"])), 2);
    assert_eq!(code(&langssl(root, &["pretrain", "--variant", "xyz"])), 2);
    std::fs::write(root.join("bad.toml"), "[model]\nnot_a_key = 1\n").unwrap();
    let bad = root.join("bad.toml");
    let o = langssl(root, &["generate", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));
    assert_eq!(code(&langssl(root, &["--help"])), 0);
}

#[test]
fn params_lists_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = langssl(dir.path(), &["params"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let tags: Vec<&str> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(tags, ["xlsr", "la", "le", "lsa", "lsaw"]);
}

#[test]
fn verify_passes_and_detects_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = langssl(dir.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(),
        11
    );

    for (fault, check) in [
        ("gradient", "grad_check[LSAW]"),
        ("reversal", "grl_sign"),
        ("adam", "adam_oracle"),
    ] {
        let o = langssl(dir.path(), &["verify", "--inject-fault", fault]);
        assert_eq!(code(&o), 1, "{fault}");
        let out = stdout(&o);
        let line = out.lines().find(|l| l.contains(check)).unwrap();
        assert!(line.starts_with("FAIL"), "{fault}: {line}");
    }
}

#[test]
fn pipeline_generate_pretrain_probe_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    let ok = |args: &[&str]| {
        let o = langssl(root, args);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        stdout(&o)
    };
    ok(&["generate", "--config", &cfg]);
    for v in ["xlsr", "le"] {
        ok(&[
            "pretrain",
            "--config",
            &cfg,
            "--variant",
            v,
            "--steps",
            "10",
        ]);
    }
    let run = root.join("le");
    for f in [RESOLVED_FILE, RUN_FILE, METRICS_FILE, FINAL_CHECKPOINT] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("checkpoints/step-00000004.ckpt").exists());
    let resolved = std::fs::read_to_string(run.join(RESOLVED_FILE)).unwrap();
    assert!(resolved.contains("total_steps = 10"));
    assert!(resolved.contains("variant = \"le\""), "{resolved}");

    let out = ok(&["probe", "--run", "le", "--sweep"]);
    assert_eq!(out.lines().count(), 1 + 5);
    let o = langssl(root, &["probe", "--run", "le", "--tap-layer", "2,5"]);
    assert_eq!(code(&o), 2);

    ok(&["report", "--runs", "xlsr,le", "--tap-layer", "1"]);
    let csv = std::fs::read_to_string(root.join("report/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("xlsr,0,"));
    assert!(root.join("report/report.json").exists());
    let o = langssl(root, &["report", "--runs", "xlsr"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resumed_runs_match_uninterrupted_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    let ok = |args: &[&str]| {
        let o = langssl(root, args);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    ok(&["generate", "--config", &cfg]);
    let train = [
        "pretrain",
        "--config",
        &cfg,
        "--variant",
        "la",
        "--steps",
        "10",
    ];
    ok(&[&train[..], &["--run", "full"]].concat());
    ok(&[&train[..], &["--run", "cut"]].concat());

    // Simulate an interruption after the step-8 checkpoint.
    let cut = root.join("cut");
    std::fs::remove_file(cut.join(FINAL_CHECKPOINT)).unwrap();
    let records = read_metrics(&cut.join(METRICS_FILE)).unwrap();
    let kept: String = records[..9]
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    std::fs::write(cut.join(METRICS_FILE), kept).unwrap();
    ok(&["pretrain", "--run", "cut", "--resume"]);

    let strip = |run: &str| -> Vec<String> {
        read_metrics(&root.join(run).join(METRICS_FILE))
            .unwrap()
            .into_iter()
            .map(|r| serde_json::to_string(&r.metrics).unwrap())
            .collect()
    };
    assert_eq!(strip("full"), strip("cut"));
    let a = std::fs::read(root.join("full").join(FINAL_CHECKPOINT)).unwrap();
    let b = std::fs::read(root.join("cut").join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a, b);
}
