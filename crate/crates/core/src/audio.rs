//! Waveform container, 16-bit PCM WAV I/O and the max-sample loudness metrics.
//!
//! Samples live in `[-1, 1]`. Conversion to int16 happens only at file
//! boundaries and inside the dB metrics, which are computed on the int16
//! magnitude scale `|sample| * 32767`.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Full-scale int16 magnitude used by the writer and the dB metrics.
pub const INT16_SCALE: f64 = 32767.0;

/// Divisor applied when decoding int16 samples read from disk.
pub const READ_SCALE: f64 = 32768.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform must hold at least one sample".into()));
        }
        if let Some(pos) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "sample {pos} = {} lies outside [-1, 1]",
                samples[pos]
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// Builds a waveform after clamping every sample into `[-1, 1]`.
    pub fn from_clamped(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Waveform::new(
            samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate,
        )
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Copies out `range` as a new waveform.
    pub fn slice(&self, range: Range<usize>) -> Result<Waveform> {
        if range.start >= range.end || range.end > self.samples.len() {
            return Err(Error::InvalidInput(format!(
                "slice {}..{} is empty or exceeds {} samples",
                range.start,
                range.end,
                self.samples.len()
            )));
        }
        Ok(Waveform {
            samples: self.samples[range].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    /// Splits into `[0, index)` and `[index, len)`; both halves must be non-empty.
    pub fn split_at(&self, index: usize) -> Result<(Waveform, Waveform)> {
        Ok((self.slice(0..index)?, self.slice(index..self.len())?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loudness {
    pub db: f64,
}

/// `max_i 20 log10(|s_i| * 32767)`; `-inf` for an all-zero slice.
pub fn peak_db(samples: &[f64]) -> f64 {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    20.0 * (peak * INT16_SCALE).log10()
}

pub fn loudness_db(w: &Waveform) -> Result<Loudness> {
    let db = peak_db(&w.samples);
    if db == f64::NEG_INFINITY {
        return Err(Error::SilentAudio);
    }
    Ok(Loudness { db })
}

/// `dB(adversarial) - dB(original)`. Positive when the adversarial peak is louder.
pub fn distortion_db(original: &Waveform, adversarial: &Waveform) -> Result<Loudness> {
    if original.len() != adversarial.len() {
        return Err(Error::LengthMismatch {
            left: original.len(),
            right: adversarial.len(),
        });
    }
    if original.sample_rate != adversarial.sample_rate {
        return Err(Error::RateMismatch {
            left: original.sample_rate,
            right: adversarial.sample_rate,
        });
    }
    let db = loudness_db(adversarial)?.db - loudness_db(original)?.db;
    Ok(Loudness { db })
}

pub fn concat(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::RateMismatch {
            left: a.sample_rate,
            right: b.sample_rate,
        });
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("cannot concatenate an empty waveform".into()));
    }
    let mut samples = Vec::with_capacity(a.len() + b.len());
    samples.extend_from_slice(&a.samples);
    samples.extend_from_slice(&b.samples);
    Ok(Waveform {
        samples,
        sample_rate: a.sample_rate,
    })
}

/// Maps a normalized sample to the int16 grid used on disk.
pub fn to_int16(sample: f64) -> i16 {
    (sample.clamp(-1.0, 1.0) * INT16_SCALE).round() as i16
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&to_int16(s).to_le_bytes());
    }
    out
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let corrupt = |msg: &str| Error::InvalidInput(format!("corrupt WAV: {msg}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("chunk extends past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(corrupt("fmt chunk too short"));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    format.ok_or_else(|| corrupt("data chunk before fmt chunk"))?;
                if tag != 1 {
                    return Err(Error::UnsupportedFormat(format!("format tag {tag}, expected PCM (1)")));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!("{bits} bits per sample, expected 16")));
                }
                if body.len() % 2 != 0 {
                    return Err(corrupt("odd data chunk length"));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / READ_SCALE)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }
    Err(corrupt("no data chunk"))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_wav(w))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav(samples: &[f64]) -> Waveform {
        Waveform::new(samples.to_vec(), DEFAULT_SAMPLE_RATE).unwrap()
    }

    fn raw_wav(channels: u16, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000 * channels as u32 * bits as u32 / 8).to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn reads_int16_scaled_by_32768() {
        let mut data = Vec::new();
        data.extend_from_slice(&0i16.to_le_bytes());
        data.extend_from_slice(&16384i16.to_le_bytes());
        let w = decode_wav(&raw_wav(1, 16, &data)).unwrap();
        assert_eq!(w.samples(), &[0.0, 0.5]);
        assert_eq!(w.sample_rate(), 16000);
    }

    #[test]
    fn rejects_stereo_and_8_bit() {
        let stereo = raw_wav(2, 16, &[0, 0, 0, 0]);
        assert!(matches!(decode_wav(&stereo), Err(Error::UnsupportedFormat(_))));
        let eight = raw_wav(1, 8, &[0, 0]);
        assert!(matches!(decode_wav(&eight), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_wav("/nonexistent/definitely/missing.wav").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn truncated_data_chunk_is_rejected() {
        let mut bytes = encode_wav(&wav(&[0.1, 0.2, 0.3]));
        bytes.truncate(bytes.len() - 3);
        assert!(decode_wav(&bytes).is_err());
    }

    #[test]
    fn writer_maps_full_scale_symmetrically() {
        assert_eq!(to_int16(1.0), 32767);
        assert_eq!(to_int16(-1.0), -32767);
        assert_eq!(to_int16(0.25), 8192);
        let bytes = encode_wav(&wav(&[1.0, -1.0, 0.25]));
        let body = &bytes[44..];
        let ints: Vec<i16> = body
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        assert_eq!(ints, vec![32767, -32767, 8192]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = wav(&[0.0, 0.123, -0.9, 1.0, -1.0]);
        write_wav(&w, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in w.samples().iter().zip(back.samples()) {
            // Writer scales by 32767 and reader divides by 32768.
            assert!((a - b).abs() <= (a.abs() + 0.5) / 32768.0 + 1e-12, "{a} vs {b}");
            if a.abs() <= 0.5 {
                assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }

    #[test]
    fn loudness_examples() {
        let mut s = vec![0.0; 10];
        s[3] = 1.0;
        let db = loudness_db(&wav(&s)).unwrap().db;
        assert!((db - 90.308_733_622_833_98).abs() < 1e-9, "{db}");
        let db = loudness_db(&wav(&[0.0, 1.0 / 32767.0])).unwrap().db;
        assert!(db.abs() < 1e-9);
        assert!(matches!(loudness_db(&wav(&[0.0, 0.0])), Err(Error::SilentAudio)));
    }

    #[test]
    fn distortion_examples() {
        let x = wav(&[0.1, -0.3, 0.2]);
        assert_eq!(distortion_db(&x, &x).unwrap().db, 0.0);
        let doubled = wav(&[0.1, -0.6, 0.2]);
        let d = distortion_db(&x, &doubled).unwrap().db;
        assert!((d - 6.020_599_913_279_624).abs() < 1e-9, "{d}");
        let short = wav(&[0.1, 0.2]);
        assert!(matches!(
            distortion_db(&x, &short),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn concat_and_rate_mismatch() {
        let a = wav(&[0.1, 0.2]);
        let b = wav(&[0.3]);
        assert_eq!(concat(&a, &b).unwrap().samples(), &[0.1, 0.2, 0.3]);
        let c = Waveform::new(vec![0.3], 8000).unwrap();
        assert!(matches!(concat(&a, &c), Err(Error::RateMismatch { .. })));
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![1.5], 16000).is_err());
        assert!(Waveform::new(vec![0.5], 0).is_err());
    }

    proptest! {
        #[test]
        fn int16_grid_round_trips_exactly(ints in proptest::collection::vec(-32767i16..=32767, 1..64)) {
            let samples: Vec<f64> = ints.iter().map(|&i| i as f64 / INT16_SCALE).collect();
            let w = wav(&samples);
            let back = decode_wav(&encode_wav(&w)).unwrap();
            let back_ints: Vec<i16> = back.samples().iter().map(|s| (s * READ_SCALE) as i16).collect();
            prop_assert_eq!(back_ints, ints);
        }

        #[test]
        fn loudness_scales_by_20_log10_k(
            samples in proptest::collection::vec(-0.09f64..0.09, 1..32),
            k in 0.01f64..10.0,
        ) {
            prop_assume!(samples.iter().any(|s| s.abs() > 1e-6));
            let w = wav(&samples);
            let scaled = wav(&samples.iter().map(|s| s * k).collect::<Vec<_>>());
            let d = loudness_db(&scaled).unwrap().db - loudness_db(&w).unwrap().db;
            prop_assert!((d - 20.0 * k.log10()).abs() < 1e-9);
        }

        #[test]
        fn split_then_concat_is_identity(
            samples in proptest::collection::vec(-1.0f64..=1.0, 2..128),
            frac in 0.0f64..1.0,
        ) {
            let w = wav(&samples);
            let idx = 1 + ((w.len() - 1) as f64 * frac) as usize;
            let idx = idx.min(w.len() - 1);
            let (a, b) = w.split_at(idx).unwrap();
            prop_assert_eq!(concat(&a, &b).unwrap(), w);
        }
    }
}
