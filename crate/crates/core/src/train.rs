//! Synthetic tone corpus and the CTC trainer that produces the white-box
//! target model.
//!
//! Every letter is a pure tone (log-spaced between 300 Hz and 3 kHz) lasting
//! four analysis steps; a space is four steps of silence. Utterances are
//! padded with `window - step` trailing zeros so that a `k`-character
//! transcript yields exactly `4k` windows.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::ctc::{ctc_loss, TargetLabels};
use crate::error::{Error, Result};
use crate::eval::cer;
use crate::features::{frame_count, FeatureMatrix, FrameParams, Mfcc};
use crate::model::{backward, forward, greedy_decode, AcousticModel, Alphabet};
use crate::optim::Adam;

pub const VOCABULARY: [&str; 16] = [
    "call", "red", "blue", "green", "open", "door", "go", "home", "stop", "play", "music", "now",
    "left", "right", "yes", "and",
];

pub const WINDOWS_PER_CHAR: usize = 4;
pub const TONE_AMPLITUDE: f64 = 0.5;
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Tone frequency for a letter; `None` for space.
pub fn char_frequency(c: char) -> Option<f64> {
    match c {
        'a'..='z' => {
            let i = (c as u8 - b'a') as f64;
            Some(300.0 * 10f64.powf(i / 25.0))
        }
        _ => None,
    }
}

pub fn is_valid_transcript(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| c.is_ascii_lowercase() || c == ' ')
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub audio: Waveform,
    pub transcript: String,
}

impl Utterance {
    pub fn new(audio: Waveform, transcript: String, params: &FrameParams) -> Result<Self> {
        if !is_valid_transcript(&transcript) {
            return Err(Error::InvalidInput(format!(
                "transcript {transcript:?} must be non-empty lowercase a-z and spaces"
            )));
        }
        let labels = Alphabet::default().encode(&transcript)?;
        let windows = frame_count(audio.len(), params)?;
        if windows < labels.min_frames() {
            return Err(Error::Unalignable {
                target_len: labels.len(),
                needed: labels.min_frames(),
                windows,
            });
        }
        Ok(Utterance { audio, transcript })
    }
}

/// Renders `text` with the tone code.
pub fn render_text(text: &str, params: &FrameParams, sample_rate: u32) -> Result<Waveform> {
    if !is_valid_transcript(text) {
        return Err(Error::InvalidInput(format!("cannot render {text:?}")));
    }
    let char_len = WINDOWS_PER_CHAR * params.step_samples;
    let total = text.chars().count() * char_len + params.window_size_samples - params.step_samples;
    let mut samples = vec![0.0; total];
    for (i, c) in text.chars().enumerate() {
        if let Some(f) = char_frequency(c) {
            for n in i * char_len..(i + 1) * char_len {
                // Phase follows the absolute sample index, so runs of the same
                // letter form one continuous tone.
                samples[n] = TONE_AMPLITUDE * (2.0 * PI * f * n as f64 / sample_rate as f64).sin();
            }
        }
    }
    Waveform::new(samples, sample_rate)
}

pub fn synth_corpus(n_utterances: usize, words_per_utterance: usize, seed: u64) -> Result<Vec<Utterance>> {
    synth_corpus_with(
        n_utterances,
        words_per_utterance,
        seed,
        &FrameParams::default(),
        DEFAULT_SAMPLE_RATE,
    )
}

pub fn synth_corpus_with(
    n_utterances: usize,
    words_per_utterance: usize,
    seed: u64,
    params: &FrameParams,
    sample_rate: u32,
) -> Result<Vec<Utterance>> {
    if n_utterances == 0 || words_per_utterance == 0 {
        return Err(Error::InvalidInput(
            "corpus needs at least one utterance of at least one word".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_utterances)
        .map(|_| {
            let words: Vec<&str> = (0..words_per_utterance)
                .map(|_| VOCABULARY[rng.gen_range(0..VOCABULARY.len())])
                .collect();
            let text = words.join(" ");
            let audio = render_text(&text, params, sample_rate)?;
            Utterance::new(audio, text, params)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0)
            || !beta_ok(self.adam_beta1)
            || !beta_ok(self.adam_beta2)
        {
            return Err(Error::InvalidConfig(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub cer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

struct Prepared {
    features: FeatureMatrix,
    labels: TargetLabels,
    transcript: String,
}

fn prepare(corpus: &[Utterance], params: &FrameParams) -> Result<Vec<Prepared>> {
    let alphabet = Alphabet::default();
    corpus
        .iter()
        .map(|u| {
            let mfcc = Mfcc::new(*params, u.audio.sample_rate())?;
            let (features, _) = mfcc.forward(u.audio.samples())?;
            let labels = alphabet.encode(&u.transcript)?;
            if features.windows() < labels.min_frames() {
                return Err(Error::Unalignable {
                    target_len: labels.len(),
                    needed: labels.min_frames(),
                    windows: features.windows(),
                });
            }
            Ok(Prepared {
                features,
                labels,
                transcript: u.transcript.clone(),
            })
        })
        .collect()
}

fn prepared_cer(model: &AcousticModel, data: &[Prepared]) -> Result<f64> {
    let alphabet = Alphabet::default();
    let scores = data
        .par_iter()
        .map(|p| {
            let (logits, _) = forward(model, &p.features)?;
            Ok(cer(&p.transcript, &greedy_decode(&logits, &alphabet))?.cer)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::eval::mean(scores.into_iter()))
}

/// Per-utterance Adam updates on the CTC loss. Parameters stay on the `f32`
/// grid after every step.
pub fn train(
    model: &AcousticModel,
    corpus: &[Utterance],
    params: &FrameParams,
    cfg: &TrainConfig,
) -> Result<(AcousticModel, TrainingLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let data = prepare(corpus, params)?;
    let mut model = model.clone();
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(
        &sizes,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let item = &data[i];
            let (logits, trace) = forward(&model, &item.features)?;
            let loss = ctc_loss(logits.view(), &item.labels)?;
            if !loss.loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss.loss;
            let (grads, _) = backward(&model, &item.features, &trace, loss.grad_logits.view())?;
            adam.step(&mut model.tensors_mut(), &grads.tensors());
            model.quantize();
        }
        if !model.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: total / data.len() as f64,
            cer: prepared_cer(&model, &data)?,
        });
    }
    Ok((model, log))
}

/// Mean CER of greedy transcripts over the corpus.
pub fn evaluate(model: &AcousticModel, corpus: &[Utterance], params: &FrameParams) -> Result<f64> {
    prepared_cer(model, &prepare(corpus, params)?)
}

/// Writes `utt_NNNN.wav` files and a `manifest.tsv` of `<file>\t<transcript>` lines.
pub fn write_corpus_dir(dir: impl AsRef<Path>, corpus: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, u) in corpus.iter().enumerate() {
        let name = format!("utt_{i:04}.wav");
        write_wav(&u.audio, dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", u.transcript));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus_dir(dir: impl AsRef<Path>, params: &FrameParams) -> Result<Vec<Utterance>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let corpus = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (file, transcript) = line.split_once('\t').ok_or_else(|| {
                Error::Manifest(format!("{}:{}: expected <file>\\t<transcript>", path.display(), n + 1))
            })?;
            let audio = read_wav(dir.join(file))?;
            Utterance::new(audio, transcript.to_string(), params)
        })
        .collect::<Result<Vec<_>>>()?;
    if corpus.is_empty() {
        return Err(Error::Manifest(format!("{} lists no utterances", path.display())));
    }
    Ok(corpus)
}
