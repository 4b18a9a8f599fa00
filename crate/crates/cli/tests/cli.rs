use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn faag(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faag"))
        .args(args)
        .current_dir(dir)
        .env_remove("FAAG_SEED")
        .output()
        .expect("spawn faag")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small corpus plus a briefly trained model.
fn setup() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    let model = dir.path().join("model.faag");
    ok(&faag(&["synth", "--out", "corpus", "--n", "3", "--words", "3", "--seed", "4"], dir.path()));
    ok(&faag(
        &["train", "--corpus", "corpus", "--out", "model.faag", "--epochs", "2", "--hidden", "16", "--seed", "1"],
        dir.path(),
    ));
    (dir, corpus, model)
}

fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    ok(&faag(&["synth", "--out", "a", "--n", "4", "--seed", "9"], dir.path()));
    ok(&faag(&["synth", "--out", "b", "--n", "4", "--seed", "9"], dir.path()));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    for i in 0..4 {
        let name = format!("utt_{i:04}.wav");
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth");
    assert_eq!(run["seeds"][0], 9);
}

#[test]
fn synth_rejects_zero_utterances() {
    let dir = TempDir::new().unwrap();
    let out = faag(&["synth", "--out", "a", "--n", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_faag"))
        .args(["synth", "--out", "a", "--n", "1"])
        .current_dir(dir.path())
        .env("FAAG_SEED", "31")
        .output()
        .unwrap();
    ok(&out);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["seeds"][0], 31);
}

#[test]
fn train_missing_manifest_names_path() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = faag(&["train", "--corpus", "empty", "--out", "m.faag"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("manifest.tsv"), "{}", stderr(&out));
}

#[test]
fn train_zero_epochs_saves_initialization() {
    let dir = TempDir::new().unwrap();
    ok(&faag(&["synth", "--out", "c", "--n", "2", "--words", "2"], dir.path()));
    let stdout = ok(&faag(
        &["train", "--corpus", "c", "--out", "m.faag", "--epochs", "0", "--hidden", "8", "--seed", "5"],
        dir.path(),
    ));
    assert!(stdout.contains("final corpus CER"));
    let saved = faag_core::model::load_model(dir.path().join("m.faag")).unwrap();
    let init = faag_core::model::init_model(13, 8, 5).unwrap();
    assert_eq!(saved, init);
    assert!(dir.path().join("m.faag.manifest.json").exists());
    assert!(dir.path().join("m.faag.log.jsonl").exists());
}

#[test]
fn transcribe_errors_have_distinct_codes() {
    let (dir, _, model) = setup();
    let out = faag(
        &["transcribe", "--model", "model.faag", "--wav", "corpus/utt_0000.wav"],
        dir.path(),
    );
    ok(&out);

    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(dir.path().join("bad.faag"), bytes).unwrap();
    let out = faag(&["transcribe", "--model", "bad.faag", "--wav", "corpus/utt_0000.wav"], dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("checksum"));

    let short = faag_core::audio::Waveform::new(vec![0.1; 100], 16_000).unwrap();
    faag_core::audio::write_wav(&short, dir.path().join("short.wav")).unwrap();
    let out = faag(&["transcribe", "--model", "model.faag", "--wav", "short.wav"], dir.path());
    assert_eq!(out.status.code(), Some(7));
}

#[test]
fn attack_writes_same_length_audio_and_report() {
    let (dir, _, _) = setup();
    let args = [
        "attack", "--model", "model.faag", "--wav", "corpus/utt_0000.wav", "--phrase", "go", "--iterations", "3",
        "--out", "adv.wav", "--report", "r.jsonl",
    ];
    ok(&faag(&args, dir.path()));
    let x = faag_core::audio::read_wav(dir.path().join("corpus/utt_0000.wav")).unwrap();
    let adv = faag_core::audio::read_wav(dir.path().join("adv.wav")).unwrap();
    assert_eq!(x.len(), adv.len());
    let rows = read_jsonl(&dir.path().join("r.jsonl"));
    assert_eq!(rows.len(), 1);
    for key in ["success_rate", "distortion_db", "ratio_frames", "wall_time_seconds", "per_checkpoint_log"] {
        assert!(rows[0].get(key).is_some(), "missing {key}");
    }
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("adv.wav.manifest.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["attack"]["iterations"], 3);
    assert!(run["model_crc32"].is_string());
}

#[test]
fn attack_phrase_too_long_reports_both_lengths() {
    let (dir, _, _) = setup();
    let long = "call red blue green open door go home stop play music now left right";
    let out = faag(
        &[
            "attack", "--model", "model.faag", "--wav", "corpus/utt_0000.wav", "--phrase", long, "--lambda", "3",
            "--out", "adv.wav", "--report", "r.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(8), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("|t| + lambda") && msg.contains("|y|"), "{msg}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let (dir, _, _) = setup();
    fs::write(dir.path().join("run.toml"), "seed = 12\n[attack]\niterations = 2\nlearning_rate = 5.0\n").unwrap();
    let args = [
        "attack", "--config", "run.toml", "--model", "model.faag", "--wav", "corpus/utt_0001.wav", "--phrase", "go",
        "--lr", "7", "--out", "adv.wav", "--report", "r.jsonl",
    ];
    ok(&faag(&args, dir.path()));
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("adv.wav.manifest.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["attack"]["iterations"], 2);
    assert_eq!(run["config"]["attack"]["learning_rate"], 7.0);
    assert_eq!(run["seeds"][0], 12);

    fs::write(dir.path().join("bad.toml"), "[attack]\nbogus = 1\n").unwrap();
    let out = faag(&["transcribe", "--config", "bad.toml", "--model", "model.faag", "--wav", "adv.wav"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rows_follow_lambda_and_are_deterministic() {
    let (dir, _, _) = setup();
    let sweep = |report: &str, out: &str| {
        ok(&faag(
            &[
                "sweep", "--model", "model.faag", "--wav", "corpus/utt_0002.wav", "--phrase", "go", "--lambdas", "2,0,1",
                "--iterations", "2", "--out-dir", out, "--report", report, "--jobs", "2",
            ],
            dir.path(),
        ))
    };
    sweep("a.jsonl", "a");
    sweep("b.jsonl", "b");
    let rows = read_jsonl(&dir.path().join("a.jsonl"));
    let lambdas: Vec<u64> = rows.iter().map(|r| r["lambda"].as_u64().unwrap()).collect();
    assert_eq!(lambdas, vec![0, 1, 2]);
    for r in &rows {
        assert!(r["ratio_frames"].as_f64().unwrap() > 0.0);
    }
    for l in 0..3 {
        let name = format!("adv_lambda{l}.wav");
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
    assert!(dir.path().join("a/run_manifest.json").exists());
}

#[test]
fn defend_reports_schema_and_rejects_rate_mismatch() {
    let (dir, _, _) = setup();
    let manifest = fs::read_to_string(dir.path().join("corpus/manifest.tsv")).unwrap();
    let truths: Vec<&str> = manifest.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    let stdout = ok(&faag(
        &[
            "defend", "--model", "model.faag", "--benign", "corpus/utt_0000.wav", "--suspicious", "corpus/utt_0001.wav",
            "--phrase", "zzzz", "--truth", truths[0], "--truth", truths[1], "--report", "d.json",
        ],
        dir.path(),
    ));
    let r: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(r["phrase_in_transcript"], false);
    for key in ["transcript", "attack_success_rate", "transcription_accuracy"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("d.json.manifest.json").exists());

    let other = faag_core::audio::Waveform::new(vec![0.1; 2000], 8_000).unwrap();
    faag_core::audio::write_wav(&other, dir.path().join("8k.wav")).unwrap();
    let out = faag(
        &[
            "defend", "--model", "model.faag", "--benign", "8k.wav", "--suspicious", "corpus/utt_0001.wav", "--phrase",
            "go", "--truth", "x",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bench_prints_summary_with_stable_op_counts() {
    let (dir, _, _) = setup();
    fs::write(dir.path().join("phrases.txt"), "go\n").unwrap();
    let bench = |report: &str| {
        ok(&faag(
            &[
                "bench", "--model", "model.faag", "--corpus", "corpus", "--phrases", "phrases.txt", "--iterations", "2",
                "--report", report,
            ],
            dir.path(),
        ))
    };
    let stdout = bench("a.jsonl");
    assert!(stdout.contains("mean speedup"));
    bench("b.jsonl");
    let a = read_jsonl(&dir.path().join("a.jsonl"));
    let b = read_jsonl(&dir.path().join("b.jsonl"));
    assert_eq!(a.len(), 3);
    for (ra, rb) in a.iter().zip(&b) {
        let ratio = ra["ratio_frames"].as_f64().unwrap();
        assert!(ratio > 0.0 && ratio <= 1.0);
        assert_eq!(ra["faag_window_ops"], rb["faag_window_ops"]);
        assert_eq!(ra["baseline_window_ops"], rb["baseline_window_ops"]);
    }
}

#[test]
fn help_documents_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = ok(&faag(&["--help"], dir.path()));
    assert!(out.contains("Exit codes") && out.contains("FAAG_SEED"));
}
