//! Character error rate, embedded-phrase success and the experiment protocols
//! built on them: the prepend-benign-audio defense and the clip-vs-whole
//! timing bench.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, run_baseline, select_clip, AttackConfig, Position, TargetPhrase};
use crate::audio::{concat, Waveform};
use crate::error::{Error, Result};
use crate::features::{FrameParams, Mfcc};
use crate::model::{transcribe, AcousticModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub edit_distance: usize,
    pub target_len: usize,
    pub cer: f64,
    pub success_rate: f64,
}

impl CerReport {
    fn new(edit_distance: usize, target_len: usize) -> Self {
        let cer = edit_distance as f64 / target_len as f64;
        CerReport {
            edit_distance,
            target_len,
            cer,
            success_rate: (1.0 - cer).max(0.0),
        }
    }
}

/// Unit-cost Levenshtein distance over chars.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cer(target: &str, hypothesis: &str) -> Result<CerReport> {
    let t: Vec<char> = target.chars().collect();
    if t.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(CerReport::new(edit_distance(&t, &h), t.len()))
}

/// Best CER of `target` against any contiguous window of `transcript`.
///
/// This is approximate-substring matching: the DP row for the empty prefix
/// of the target is all zeros, so a match may start anywhere, and the
/// minimum over the last row lets it end anywhere.
pub fn phrase_success(target: &str, transcript: &str) -> Result<CerReport> {
    let t: Vec<char> = target.chars().collect();
    if t.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let y: Vec<char> = transcript.chars().collect();
    let mut prev = vec![0usize; y.len() + 1];
    let mut cur = vec![0usize; y.len() + 1];
    for (i, ct) in t.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cy) in y.iter().enumerate() {
            let sub = prev[j] + usize::from(ct != cy);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let best = prev.iter().copied().min().unwrap_or(t.len());
    Ok(CerReport::new(best, t.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub transcript: String,
    pub phrase_in_transcript: bool,
    pub attack_success_rate: f64,
    pub transcription_accuracy: f64,
}

/// Success threshold above which the phrase counts as present.
pub const PHRASE_PRESENT: f64 = 0.99;

/// Prepends `benign` to `suspicious`, transcribes the result and scores it
/// against the attacker's phrase and the concatenated ground truth.
pub fn eval_defense(
    benign: &Waveform,
    suspicious: &Waveform,
    model: &AcousticModel,
    params: &FrameParams,
    target_phrase: &str,
    ground_truth_texts: &[String],
) -> Result<DefenseReport> {
    let combined = concat(benign, suspicious)?;
    let mfcc = Mfcc::new(*params, combined.sample_rate())?;
    let (transcript, _) = transcribe(model, &mfcc, combined.samples())?;
    let phrase = phrase_success(target_phrase, &transcript)?;
    let truth = ground_truth_texts.join(" ");
    let accuracy = cer(&truth, &transcript)?.success_rate;
    Ok(DefenseReport {
        transcript,
        phrase_in_transcript: phrase.success_rate >= PHRASE_PRESENT,
        attack_success_rate: phrase.success_rate,
        transcription_accuracy: accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub audio_index: usize,
    pub phrase: String,
    pub ratio_frames: f64,
    pub faag_seconds: f64,
    pub baseline_seconds: f64,
    pub speedup: f64,
    pub faag_window_ops: u64,
    pub baseline_window_ops: u64,
    pub op_ratio: f64,
    pub faag_success_rate: f64,
    pub baseline_success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn mean_speedup(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.speedup))
    }

    pub fn mean_op_ratio(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.op_ratio))
    }

    /// Speedup of the summed wall times, less sensitive to per-run jitter.
    pub fn total_speedup(&self) -> f64 {
        let faag: f64 = self.rows.iter().map(|r| r.faag_seconds).sum();
        let base: f64 = self.rows.iter().map(|r| r.baseline_seconds).sum();
        1.0 - faag / base
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs the clip attack (Begin position, the given lambda) and the whole-audio
/// baseline on every (audio, phrase) pair, sequentially.
pub fn bench_speedup(
    corpus: &[Waveform],
    phrases: &[TargetPhrase],
    model: &AcousticModel,
    params: &FrameParams,
    lambda: usize,
    cfg: &AttackConfig,
) -> Result<BenchReport> {
    if corpus.is_empty() || phrases.is_empty() {
        return Err(Error::InvalidInput("bench needs at least one audio and one phrase".into()));
    }
    let mut rows = Vec::new();
    for (i, x) in corpus.iter().enumerate() {
        for phrase in phrases {
            let plan = select_clip(x, phrase, model, params, lambda, Position::Begin)?;
            let faag = run_attack(x, phrase, model, params, &plan, cfg)?;
            let base = run_baseline(x, phrase, model, params, cfg)?;
            rows.push(BenchRow {
                audio_index: i,
                phrase: phrase.text.clone(),
                ratio_frames: faag.ratio_frames,
                faag_seconds: faag.wall_time_seconds,
                baseline_seconds: base.wall_time_seconds,
                speedup: 1.0 - faag.wall_time_seconds / base.wall_time_seconds,
                faag_window_ops: faag.window_ops,
                baseline_window_ops: base.window_ops,
                op_ratio: faag.window_ops as f64 / base.window_ops as f64,
                faag_success_rate: faag.success_rate,
                baseline_success_rate: base.success_rate,
            });
        }
    }
    Ok(BenchReport { rows })
}

/// Appends one JSON object per row.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::InvalidInput(format!("cannot serialize report row: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
