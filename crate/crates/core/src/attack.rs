//! Clip selection and the targeted perturbation attack.
//!
//! [`select_clip`] sizes the attacked clip from the ratio of logit windows to
//! transcript characters: `n_win = ceil(|c| / |y| * (|t| + lambda))` windows of
//! `step` samples each. [`run_attack`] optimizes a perturbation on that clip
//! only and splices the result back into the untouched remainder.
//! [`run_baseline`] runs the same optimizer over the whole waveform.
//!
//! The perturbation is parameterized in int16 counts, so the learning rate is
//! in the same units as the dB metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{distortion_db, peak_db, Waveform, READ_SCALE};
use crate::ctc::{ctc_loss, TargetLabels};
use crate::error::{Error, Result};
use crate::eval::phrase_success;
use crate::features::{FrameParams, Mfcc};
use crate::model::{backward, forward, greedy_decode, transcribe, AcousticModel, Alphabet};
use crate::optim::Adam;
use crate::train::is_valid_transcript;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Begin,
    Middle,
    End,
}

impl std::str::FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "begin" => Ok(Position::Begin),
            "middle" => Ok(Position::Middle),
            "end" => Ok(Position::End),
            other => Err(Error::InvalidConfig(format!("unknown position {other:?}"))),
        }
    }
}

/// Separator placed between the phrase and the untouched audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suffix {
    TwoSpaces,
    AndWord,
    SingleSpace,
}

impl Suffix {
    pub fn as_str(self) -> &'static str {
        match self {
            Suffix::TwoSpaces => "  ",
            Suffix::AndWord => " and",
            Suffix::SingleSpace => " ",
        }
    }
}

impl std::str::FromStr for Suffix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spaces" | "two_spaces" => Ok(Suffix::TwoSpaces),
            "and" => Ok(Suffix::AndWord),
            "space" | "single_space" => Ok(Suffix::SingleSpace),
            other => Err(Error::InvalidConfig(format!("unknown suffix {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPhrase {
    pub text: String,
    pub suffix: Suffix,
}

impl TargetPhrase {
    pub fn new(text: impl Into<String>, suffix: Suffix) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if !is_valid_transcript(&text) {
            return Err(Error::InvalidInput(format!(
                "phrase {text:?} must be lowercase a-z and spaces"
            )));
        }
        Ok(TargetPhrase { text, suffix })
    }

    /// Text the attacked clip must decode to. Begin appends the separator,
    /// End prepends two spaces, Middle does both.
    pub fn effective_text(&self, position: Position) -> String {
        match position {
            Position::Begin => format!("{}{}", self.text, self.suffix.as_str()),
            Position::End => format!("  {}", self.text),
            Position::Middle => format!("  {}{}", self.text, self.suffix.as_str()),
        }
    }

    pub fn effective_len(&self, position: Position) -> usize {
        self.effective_text(position).chars().count()
    }
}

/// Where the attacked clip sits inside the original audio.
///
/// Begin: `start = 0`, `end` is the split index. End: `start = |x| - clip_len`.
/// Middle: `start` is the offset skipping roughly three characters of audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub position: Position,
    pub start: usize,
    pub end: usize,
    pub lambda: usize,
    pub clip_windows: usize,
    pub clip_len_samples: usize,
    pub ratio_frames: f64,
    pub audio_len: usize,
    pub logit_count: usize,
    pub transcript_len: usize,
    pub target_len: usize,
}

impl ClipPlan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Plan covering the whole waveform, as used by the baseline.
    pub fn whole(audio_len: usize) -> ClipPlan {
        ClipPlan {
            position: Position::Begin,
            start: 0,
            end: audio_len,
            lambda: 0,
            clip_windows: 0,
            clip_len_samples: audio_len,
            ratio_frames: 1.0,
            audio_len,
            logit_count: 0,
            transcript_len: 0,
            target_len: 0,
        }
    }
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Clip geometry from the counts alone.
///
/// `logit_count` is `|c|`, `transcript_len` is `|y|` and `target_len` is the
/// effective `|t|` including separators.
pub fn plan_clip(
    audio_len: usize,
    logit_count: usize,
    transcript_len: usize,
    target_len: usize,
    lambda: usize,
    params: &FrameParams,
    position: Position,
) -> Result<ClipPlan> {
    let allocated = target_len + lambda;
    if transcript_len == 0 || allocated > transcript_len {
        return Err(Error::PhraseTooLong {
            needed: allocated,
            available: transcript_len,
        });
    }
    let step = params.step_samples;
    let clip_windows = div_ceil(logit_count * allocated, transcript_len);
    let clip_len = clip_windows * step;
    let too_short = |start: usize| Error::AudioTooShort {
        start,
        clip_len,
        audio_len,
    };
    let start = match position {
        Position::Begin => 0,
        Position::End => audio_len.checked_sub(clip_len).ok_or_else(|| too_short(0))?,
        Position::Middle => div_ceil(3 * logit_count, transcript_len) * step,
    };
    if start + clip_len > audio_len {
        return Err(too_short(start));
    }
    if clip_len < params.window_size_samples {
        return Err(Error::TooShort {
            len: clip_len,
            needed: params.window_size_samples,
        });
    }
    Ok(ClipPlan {
        position,
        start,
        end: start + clip_len,
        lambda,
        clip_windows,
        clip_len_samples: clip_len,
        ratio_frames: clip_len as f64 / audio_len as f64,
        audio_len,
        logit_count,
        transcript_len,
        target_len,
    })
}

/// Transcribes `x`, then sizes and places the clip for `t`.
pub fn select_clip(
    x: &Waveform,
    t: &TargetPhrase,
    model: &AcousticModel,
    params: &FrameParams,
    lambda: usize,
    position: Position,
) -> Result<ClipPlan> {
    let mfcc = Mfcc::new(*params, x.sample_rate())?;
    let (y, c) = transcribe(model, &mfcc, x.samples())?;
    plan_clip(
        x.len(),
        c,
        y.chars().count(),
        t.effective_len(position),
        lambda,
        params,
        position,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    /// Adam step size in int16 counts.
    pub learning_rate: f64,
    /// Initial bound on `dB(delta) - dB(clip)`.
    pub initial_con: f64,
    pub con_decay: f64,
    pub check_every: usize,
    /// Scalar weight on the sequence-level CTC term.
    pub loss_weight: f64,
    /// Weight of the squared l2 norm of the (normalized) perturbation.
    pub l2_weight: f64,
    /// Recorded for replay; the optimization starts from zero and draws no randomness.
    pub seed: u64,
    /// Box on adversarial samples.
    pub clip_bound: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 1000,
            learning_rate: 10.0,
            initial_con: 40.0,
            con_decay: 0.8,
            check_every: 100,
            loss_weight: 1.0,
            l2_weight: 1e-3,
            seed: 0,
            clip_bound: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.con_decay > 0.0 && self.con_decay < 1.0) {
            return Err(Error::InvalidConfig("con_decay must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || self.check_every == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate and check_every must be positive".into(),
            ));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound <= 1.0) {
            return Err(Error::InvalidConfig("clip_bound must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub loss: f64,
    pub con: f64,
    pub decoded: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub adversarial: Waveform,
    pub phrase: String,
    pub effective_target: String,
    pub position: Position,
    pub lambda: usize,
    pub clip_start: usize,
    pub clip_end: usize,
    pub original_transcript: String,
    pub transcript: String,
    pub clip_transcript: String,
    pub clip_success: bool,
    pub success_rate: f64,
    pub distortion_db: f64,
    pub clip_distortion_db: f64,
    pub ratio_frames: f64,
    pub iterations_run: usize,
    pub wall_time_seconds: f64,
    pub window_ops: u64,
    pub per_checkpoint_log: Vec<Checkpoint>,
}

struct Objective<'a> {
    model: &'a AcousticModel,
    mfcc: Mfcc,
    labels: TargetLabels,
    loss_weight: f64,
    l2_weight: f64,
}

struct Evaluation {
    loss: f64,
    decoded: String,
    windows: usize,
    grad: Option<Vec<f64>>,
}

impl Objective<'_> {
    fn evaluate(&self, adv: &[f64], delta: &[f64], with_grad: bool) -> Result<Evaluation> {
        let (features, cache) = self.mfcc.forward(adv)?;
        let (logits, trace) = forward(self.model, &features)?;
        let decoded = greedy_decode(&logits, &Alphabet::default());
        let ctc = ctc_loss(logits.view(), &self.labels)?;
        let l2: f64 = delta.iter().map(|d| d * d).sum();
        let loss = self.loss_weight * ctc.loss + self.l2_weight * l2;
        let grad = if with_grad {
            let mut grad_logits = ctc.grad_logits;
            grad_logits *= self.loss_weight;
            let (_, grad_features) = backward(self.model, &features, &trace, grad_logits.view())?;
            let mut g = self.mfcc.backward(&cache, grad_features.view())?;
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += 2.0 * self.l2_weight * di;
            }
            Some(g)
        } else {
            None
        };
        Ok(Evaluation {
            loss,
            decoded,
            windows: logits.windows(),
            grad,
        })
    }
}

struct Optimized {
    delta: Vec<f64>,
    clip_transcript: String,
    clip_success: bool,
    clip_distortion_db: f64,
    window_ops: u64,
    log: Vec<Checkpoint>,
}

/// Adam on the clip perturbation with the shrinking dB box.
fn optimize_clip(
    model: &AcousticModel,
    params: &FrameParams,
    sample_rate: u32,
    clip: &[f64],
    target_text: &str,
    cfg: &AttackConfig,
) -> Result<Optimized> {
    let labels = Alphabet::default().encode(target_text)?;
    let mfcc = Mfcc::new(*params, sample_rate)?;
    let windows = crate::features::frame_count(clip.len(), params)?;
    if windows < labels.min_frames() {
        return Err(Error::Unalignable {
            target_len: labels.len(),
            needed: labels.min_frames(),
            windows,
        });
    }
    let clip_db = peak_db(clip);
    if clip_db == f64::NEG_INFINITY {
        return Err(Error::SilentAudio);
    }
    let peak = clip.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let objective = Objective {
        model,
        mfcc,
        labels,
        loss_weight: cfg.loss_weight,
        l2_weight: cfg.l2_weight,
    };

    let n = clip.len();
    // Perturbation in int16 counts and its normalized image.
    let mut counts = vec![0.0; n];
    let mut delta = vec![0.0; n];
    let mut adv = clip.to_vec();
    let mut adam = Adam::new(&[n], cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mut con = cfg.initial_con;
    let mut best: Option<(f64, Vec<f64>, String)> = None;
    let mut log = Vec::new();
    let mut window_ops = 0u64;

    let delta_db = |delta: &[f64]| peak_db(delta) - clip_db;
    let consider = |delta: &[f64], decoded: &str, best: &mut Option<(f64, Vec<f64>, String)>, con: f64| {
        let db = delta_db(delta);
        let success = decoded == target_text && db <= con;
        if success && best.as_ref().is_none_or(|(b, _, _)| db < *b) {
            *best = Some((db, delta.to_vec(), decoded.to_string()));
        }
        success
    };

    for iteration in 0..cfg.iterations {
        let eval = objective.evaluate(&adv, &delta, true)?;
        window_ops += 2 * eval.windows as u64;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        if iteration % cfg.check_every == 0 {
            log.push(Checkpoint {
                iteration,
                loss: eval.loss,
                con,
                decoded: eval.decoded.clone(),
            });
            if consider(&delta, &eval.decoded, &mut best, con) {
                con *= cfg.con_decay;
            }
        }
        let grad_counts: Vec<f64> = eval
            .grad
            .expect("requested")
            .iter()
            .map(|g| g / READ_SCALE)
            .collect();
        adam.step(&mut [&mut counts], &[&grad_counts]);

        let bound = peak * 10f64.powf(con / 20.0);
        for j in 0..n {
            let d = (counts[j] / READ_SCALE).clamp(-bound, bound);
            let x = (clip[j] + d).clamp(-cfg.clip_bound, cfg.clip_bound);
            delta[j] = x - clip[j];
            counts[j] = delta[j] * READ_SCALE;
            adv[j] = x;
        }
    }

    let last = objective.evaluate(&adv, &delta, false)?;
    window_ops += last.windows as u64;
    consider(&delta, &last.decoded, &mut best, con);

    Ok(match best {
        Some((db, delta, decoded)) => Optimized {
            delta,
            clip_transcript: decoded,
            clip_success: true,
            clip_distortion_db: db,
            window_ops,
            log,
        },
        None => Optimized {
            clip_distortion_db: delta_db(&delta),
            delta,
            clip_transcript: last.decoded,
            clip_success: false,
            window_ops,
            log,
        },
    })
}

fn attack_range(
    x: &Waveform,
    phrase: &TargetPhrase,
    effective_target: String,
    model: &AcousticModel,
    params: &FrameParams,
    plan: &ClipPlan,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    if plan.end > x.len() || plan.start >= plan.end || plan.audio_len != x.len() {
        return Err(Error::InvalidInput(format!(
            "plan {}..{} for {} samples does not match audio of {} samples",
            plan.start,
            plan.end,
            plan.audio_len,
            x.len()
        )));
    }
    let mfcc = Mfcc::new(*params, x.sample_rate())?;
    let (original_transcript, _) = transcribe(model, &mfcc, x.samples())?;

    let started = Instant::now();
    let clip = &x.samples()[plan.range()];
    let opt = optimize_clip(model, params, x.sample_rate(), clip, &effective_target, cfg)?;
    let mut samples = x.samples().to_vec();
    for (s, (c, d)) in samples[plan.range()].iter_mut().zip(clip.iter().zip(&opt.delta)) {
        *s = c + d;
    }
    let adversarial = Waveform::new(samples, x.sample_rate())?;
    let (transcript, _) = transcribe(model, &mfcc, adversarial.samples())?;
    let wall_time_seconds = started.elapsed().as_secs_f64();

    Ok(AttackResult {
        success_rate: phrase_success(&phrase.text, &transcript)?.success_rate,
        distortion_db: distortion_db(x, &adversarial)?.db,
        adversarial,
        phrase: phrase.text.clone(),
        effective_target,
        position: plan.position,
        lambda: plan.lambda,
        clip_start: plan.start,
        clip_end: plan.end,
        original_transcript,
        transcript,
        clip_transcript: opt.clip_transcript,
        clip_success: opt.clip_success,
        clip_distortion_db: opt.clip_distortion_db,
        ratio_frames: plan.ratio_frames,
        iterations_run: cfg.iterations,
        wall_time_seconds,
        window_ops: opt.window_ops,
        per_checkpoint_log: opt.log,
    })
}

/// Optimizes a perturbation on the planned clip so that the clip alone decodes
/// to the phrase's effective text, then splices it back into `x`.
pub fn run_attack(
    x: &Waveform,
    t: &TargetPhrase,
    model: &AcousticModel,
    params: &FrameParams,
    plan: &ClipPlan,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_range(x, t, t.effective_text(plan.position), model, params, plan, cfg)
}

/// The same optimizer over the whole waveform, rewriting the full transcript
/// to the bare phrase.
pub fn run_baseline(
    x: &Waveform,
    t: &TargetPhrase,
    model: &AcousticModel,
    params: &FrameParams,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_range(x, t, t.text.clone(), model, params, &ClipPlan::whole(x.len()), cfg)
}

/// One Begin-position attack per lambda, returned in the order given.
/// Runs are independent and execute on the current rayon pool.
pub fn sweep_lambda(
    x: &Waveform,
    t: &TargetPhrase,
    model: &AcousticModel,
    params: &FrameParams,
    lambdas: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    sweep_lambda_at(x, t, model, params, lambdas, Position::Begin, cfg)
}

pub fn sweep_lambda_at(
    x: &Waveform,
    t: &TargetPhrase,
    model: &AcousticModel,
    params: &FrameParams,
    lambdas: &[usize],
    position: Position,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let plans = lambdas
        .iter()
        .map(|&l| select_clip(x, t, model, params, l, position))
        .collect::<Result<Vec<_>>>()?;
    plans
        .par_iter()
        .map(|plan| run_attack(x, t, model, params, plan, cfg))
        .collect()
}

/// Highest success rate, then lowest distortion.
pub fn best_result(results: &[AttackResult]) -> Option<&AttackResult> {
    results.iter().reduce(|best, r| {
        let better = r.success_rate > best.success_rate
            || (r.success_rate == best.success_rate && r.distortion_db < best.distortion_db);
        if better {
            r
        } else {
            best
        }
    })
}
