mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use faag_core::attack::{run_attack, select_clip, sweep_lambda_at, Position, Suffix, TargetPhrase};
use faag_core::audio::{read_wav, write_wav};
use faag_core::eval::{append_jsonl, bench_speedup, eval_defense};
use faag_core::features::{FrameParams, Mfcc};
use faag_core::model::{init_model, load_model, save_model, transcribe, DEFAULT_HIDDEN};
use faag_core::train::{evaluate, load_corpus_dir, synth_corpus, train, write_corpus_dir};
use faag_core::Error;
use serde_json::json;

use config::{AttackFlags, FileConfig};
use manifest::{manifest_path_for, RunManifest};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error or invalid configuration / input text
  3  file could not be read or written
  4  unsupported or inconsistent audio (format, silence, sample rate, length)
  5  model file rejected (format, checksum, dimensions)
  6  corpus manifest or transcript/audio alignment error
  7  audio too short for the window or the planned clip
  8  phrase too long for the transcript (|t| + lambda > |y|)
  9  numerical failure (divergence or non-finite loss)

Environment:
  FAAG_SEED  default seed when neither --seed nor the config file sets one";

#[derive(Parser, Debug)]
#[command(name = "faag", version, about = "Fast targeted audio adversarial examples on a toy CTC recognizer", after_help = EXIT_CODES)]
struct Cli {
    /// TOML config file; flags take precedence over its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent attack runs (bench always uses one)
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Seed; falls back to the config file, then FAAG_SEED, then 0
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic tone corpus with a manifest.tsv
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Words per utterance
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        words: u64,
    },
    /// Train the recognizer on a corpus directory
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Per-epoch JSONL log [default: <out>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the greedy transcript of a WAV file
    Transcribe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
    /// Attack one planned clip and write the reassembled audio
    Attack {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value_t = 0)]
        lambda: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSONL file the result row is appended to
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        flags: AttackFlags,
    },
    /// Attack once per lambda; rows are written in increasing lambda order
    Sweep {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        lambdas: Vec<usize>,
        /// Directory for adv_lambda<L>.wav files
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        flags: AttackFlags,
    },
    /// Prepend benign audio to a suspicious file and report whether the phrase survives
    Defend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        benign: PathBuf,
        #[arg(long)]
        suspicious: PathBuf,
        #[arg(long)]
        phrase: String,
        /// Ground-truth transcript pieces in playback order
        #[arg(long, required = true)]
        truth: Vec<String>,
        /// Also write the report JSON here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time the clip attack against the whole-audio baseline on a corpus
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// One target phrase per line
        #[arg(long)]
        phrases: PathBuf,
        #[arg(long, default_value_t = 0)]
        lambda: usize,
        #[arg(long, default_value = "spaces")]
        suffix: Suffix,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        flags: AttackFlags,
    },
}

#[derive(clap::Args, Debug)]
struct TargetArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    phrase: String,
    #[arg(long, default_value = "begin")]
    position: Position,
    #[arg(long, default_value = "spaces")]
    suffix: Suffix,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::EmptyTarget | Error::UnknownSymbol(_) => 2,
        Error::Io { .. } => 3,
        Error::UnsupportedFormat(_)
        | Error::SilentAudio
        | Error::RateMismatch { .. }
        | Error::LengthMismatch { .. } => 4,
        Error::FormatVersionMismatch(_)
        | Error::ChecksumMismatch { .. }
        | Error::DimMismatch { .. }
        | Error::InvalidDim(_)
        | Error::ShapeMismatch { .. } => 5,
        Error::Manifest(_) | Error::Unalignable { .. } => 6,
        Error::TooShort { .. } | Error::AudioTooShort { .. } => 7,
        Error::PhraseTooLong { .. } => 8,
        Error::Divergence { .. } | Error::NonFiniteLoss { .. } | Error::EmptyLogits | Error::TooLarge(_) => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if cli.jobs == 0 {
        return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
    }
    let seed = file.seed(cli.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {} workers: {e}", cli.jobs)))?;
    let params = FrameParams::default();

    match cli.command {
        Command::Synth { out, n, words } => {
            let corpus = synth_corpus(n as usize, words as usize, seed)?;
            write_corpus_dir(&out, &corpus)?;
            let mut m = RunManifest::new("synth", json!({ "n": n, "words": words }))?;
            m.seeds.push(seed);
            m.outputs.push(out.clone());
            m.write(&manifest_path_for(&out))?;
            println!("wrote {} utterances to {}", corpus.len(), out.display());
        }
        Command::Train {
            corpus,
            out,
            epochs,
            lr,
            hidden,
            log,
        } => {
            let data = load_corpus_dir(&corpus, &params)?;
            let cfg = file.train_config(epochs, lr, seed)?;
            let hidden = hidden.or(file.train.hidden).unwrap_or(DEFAULT_HIDDEN);
            let init = init_model(params.n_coeffs, hidden, seed)?;
            let (model, training_log) = pool.install(|| train(&init, &data, &params, &cfg))?;
            save_model(&model, &out)?;
            let log = log.unwrap_or_else(|| with_suffix(&out, ".log.jsonl"));
            remove_if_exists(&log)?;
            append_jsonl(&log, &training_log.epochs)?;
            let final_cer = match training_log.epochs.last() {
                Some(e) => e.cer,
                None => evaluate(&model, &data, &params)?,
            };
            let mut m = RunManifest::new("train", json!({ "train": cfg, "hidden": hidden }))?;
            m.seeds.push(seed);
            m.inputs.push(corpus);
            m.outputs.extend([out.clone(), log]);
            m = with_output_crc(m, &out)?;
            m.write(&manifest_path_for(&out))?;
            println!("final corpus CER {final_cer:.4}");
        }
        Command::Transcribe { model, wav } => {
            let model = load_model(&model)?;
            let x = read_wav(&wav)?;
            let mfcc = Mfcc::new(params, x.sample_rate())?;
            let (text, _) = transcribe(&model, &mfcc, x.samples())?;
            println!("{text}");
        }
        Command::Attack {
            target,
            lambda,
            out,
            report,
            flags,
        } => {
            let cfg = file.attack_config(&flags, seed)?;
            let model = load_model(&target.model)?;
            let x = read_wav(&target.wav)?;
            let phrase = TargetPhrase::new(target.phrase.clone(), target.suffix)?;
            let plan = select_clip(&x, &phrase, &model, &params, lambda, target.position)?;
            let result = run_attack(&x, &phrase, &model, &params, &plan, &cfg)?;
            write_wav(&result.adversarial, &out)?;
            append_jsonl(&report, std::slice::from_ref(&result))?;
            let mut m = RunManifest::new("attack", json!({ "attack": cfg, "target": target_json(&target), "lambda": lambda }))?
                .with_model(&target.model)?;
            m.seeds.push(seed);
            m.inputs.push(target.wav.clone());
            m.outputs.extend([out.clone(), report]);
            m.write(&manifest_path_for(&out))?;
            print_result(&result);
        }
        Command::Sweep {
            target,
            mut lambdas,
            out_dir,
            report,
            flags,
        } => {
            lambdas.sort_unstable();
            lambdas.dedup();
            let cfg = file.attack_config(&flags, seed)?;
            let model = load_model(&target.model)?;
            let x = read_wav(&target.wav)?;
            let phrase = TargetPhrase::new(target.phrase.clone(), target.suffix)?;
            let results =
                pool.install(|| sweep_lambda_at(&x, &phrase, &model, &params, &lambdas, target.position, &cfg))?;
            fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
                path: out_dir.clone(),
                source,
            })?;
            let mut m = RunManifest::new("sweep", json!({ "attack": cfg, "target": target_json(&target), "lambdas": lambdas }))?
                .with_model(&target.model)?;
            for r in &results {
                let path = out_dir.join(format!("adv_lambda{}.wav", r.lambda));
                write_wav(&r.adversarial, &path)?;
                m.outputs.push(path);
                print_result(r);
            }
            append_jsonl(&report, &results)?;
            m.seeds.push(seed);
            m.inputs.push(target.wav.clone());
            m.outputs.push(report);
            m.write(&manifest_path_for(&out_dir))?;
        }
        Command::Defend {
            model,
            benign,
            suspicious,
            phrase,
            truth,
            report,
        } => {
            let m_path = model;
            let model = load_model(&m_path)?;
            let b = read_wav(&benign)?;
            let s = read_wav(&suspicious)?;
            let r = eval_defense(&b, &s, &model, &params, &phrase, &truth)?;
            let text = serde_json::to_string(&r)
                .map_err(|e| Error::InvalidInput(format!("cannot serialize report: {e}")))?;
            println!("{text}");
            if let Some(path) = report {
                fs::write(&path, text + "\n").map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                let mut m = RunManifest::new("defend", json!({ "phrase": phrase, "truth": truth }))?.with_model(&m_path)?;
                m.seeds.push(seed);
                m.inputs.extend([benign, suspicious]);
                m.outputs.push(path.clone());
                m.write(&manifest_path_for(&path))?;
            }
        }
        Command::Bench {
            model,
            corpus,
            phrases,
            lambda,
            suffix,
            report,
            flags,
        } => {
            let cfg = file.attack_config(&flags, seed)?;
            let m_path = model;
            let model = load_model(&m_path)?;
            let audios: Vec<_> = load_corpus_dir(&corpus, &params)?.into_iter().map(|u| u.audio).collect();
            let text = fs::read_to_string(&phrases).map_err(|source| Error::Io {
                path: phrases.clone(),
                source,
            })?;
            let targets = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| TargetPhrase::new(l, suffix))
                .collect::<Result<Vec<_>, _>>()?;
            // Timed runs must not share cores.
            let single = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot start bench worker: {e}")))?;
            let bench = single.install(|| bench_speedup(&audios, &targets, &model, &params, lambda, &cfg))?;
            append_jsonl(&report, &bench.rows)?;
            let mut m = RunManifest::new("bench", json!({ "attack": cfg, "lambda": lambda, "suffix": suffix }))?
                .with_model(&m_path)?;
            m.seeds.push(seed);
            m.inputs.extend([corpus, phrases]);
            m.outputs.push(report.clone());
            m.write(&manifest_path_for(&report))?;
            println!("{:>5} {:<12} {:>6} {:>9} {:>9} {:>8} {:>8}", "audio", "phrase", "ratio", "faag_s", "base_s", "speedup", "op_ratio");
            for r in &bench.rows {
                println!(
                    "{:>5} {:<12} {:>6.3} {:>9.3} {:>9.3} {:>8.3} {:>8.3}",
                    r.audio_index, r.phrase, r.ratio_frames, r.faag_seconds, r.baseline_seconds, r.speedup, r.op_ratio
                );
            }
            println!(
                "mean speedup {:.3}  total speedup {:.3}  mean op ratio {:.3}",
                bench.mean_speedup(),
                bench.total_speedup(),
                bench.mean_op_ratio()
            );
        }
    }
    Ok(())
}

fn target_json(t: &TargetArgs) -> serde_json::Value {
    json!({
        "wav": t.wav,
        "phrase": t.phrase,
        "position": t.position,
        "suffix": t.suffix,
    })
}

fn print_result(r: &faag_core::attack::AttackResult) {
    println!(
        "lambda {} success {:.3} distortion {:.2} dB ratio {:.3} time {:.2}s transcript {:?}",
        r.lambda, r.success_rate, r.distortion_db, r.ratio_frames, r.wall_time_seconds, r.transcript
    );
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn with_output_crc(mut m: RunManifest, model_out: &Path) -> Result<RunManifest, Error> {
    let bytes = fs::read(model_out).map_err(|source| Error::Io {
        path: model_out.to_path_buf(),
        source,
    })?;
    m.model_crc32 = Some(format!("{:08x}", crc32fast::hash(&bytes)));
    Ok(m)
}

fn remove_if_exists(path: &Path) -> Result<(), Error> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}
