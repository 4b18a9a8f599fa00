//! Toy end-to-end recognizer: MFCC rows -> tanh recurrence -> per-window
//! character logits, with exact backpropagation through time and greedy CTC
//! decoding.
//!
//! Parameters are held as `f64` but always lie on the `f32` grid, so the
//! on-disk `f32` format round-trips bit-exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::TargetLabels;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Mfcc};

pub const MODEL_MAGIC: &[u8; 8] = b"FAAGMDL1";
pub const DEFAULT_HIDDEN: usize = 128;

/// `a`-`z` then space; the blank is index 27.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut symbols: Vec<char> = ('a'..='z').collect();
        symbols.push(' ');
        Alphabet { symbols }
    }
}

impl Alphabet {
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn encode(&self, text: &str) -> Result<TargetLabels> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(Error::UnknownSymbol(c)))
            .collect::<Result<Vec<_>>>()
            .map(TargetLabels)
    }

    pub fn decode_labels(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter_map(|&l| self.symbols.get(l))
            .collect()
    }
}

/// `T x 28` pre-softmax scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix(pub Array2<f64>);

impl LogitMatrix {
    pub fn windows(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// Hidden states `h_1..h_T`, retained for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    pub hidden: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub b_rec: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Same shapes as the model's parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub b_rec: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl ModelGrads {
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w_in.as_slice().unwrap(),
            self.w_rec.as_slice().unwrap(),
            self.b_rec.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

pub const NUM_CLASSES: usize = 28;

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub fn init_model(input_dim: usize, hidden_dim: usize, seed: u64) -> Result<AcousticModel> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::InvalidDim(format!(
            "input_dim = {input_dim}, hidden_dim = {hidden_dim}; both must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| quantize(rng.gen_range(-bound..=bound)))
    };
    let w_in = uniform(hidden_dim, input_dim, input_dim);
    let w_rec = uniform(hidden_dim, hidden_dim, hidden_dim);
    let w_out = uniform(NUM_CLASSES, hidden_dim, hidden_dim);
    Ok(AcousticModel {
        input_dim,
        hidden_dim,
        seed,
        w_in,
        w_rec,
        b_rec: Array1::zeros(hidden_dim),
        w_out,
        b_out: Array1::zeros(NUM_CLASSES),
    })
}

impl AcousticModel {
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w_in.as_slice().unwrap(),
            self.w_rec.as_slice().unwrap(),
            self.b_rec.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_in.as_slice_mut().unwrap(),
            self.w_rec.as_slice_mut().unwrap(),
            self.b_rec.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Snaps every parameter onto the `f32` grid.
    pub fn quantize(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = quantize(*v));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden_dim;
        let ok = self.w_in.dim() == (h, self.input_dim)
            && self.w_rec.dim() == (h, h)
            && self.b_rec.len() == h
            && self.w_out.dim() == (NUM_CLASSES, h)
            && self.b_out.len() == NUM_CLASSES;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDim("parameter tensors have inconsistent shapes".into()))
        }
    }
}

/// `h_t = tanh(W_in f_t + W_rec h_{t-1} + b_rec)`, `logits_t = W_out h_t + b_out`.
pub fn forward(m: &AcousticModel, f: &FeatureMatrix) -> Result<(LogitMatrix, Trace)> {
    if f.dim() != m.input_dim {
        return Err(Error::DimMismatch {
            expected: m.input_dim,
            got: f.dim(),
        });
    }
    let t_len = f.windows();
    // Input projections for every window at once.
    let projected = f.0.dot(&m.w_in.t());
    let mut hidden = Array2::zeros((t_len, m.hidden_dim));
    let mut prev = Array1::<f64>::zeros(m.hidden_dim);
    for t in 0..t_len {
        let mut pre = m.w_rec.dot(&prev);
        pre += &projected.row(t);
        pre += &m.b_rec;
        pre.mapv_inplace(f64::tanh);
        hidden.row_mut(t).assign(&pre);
        prev = pre;
    }
    let mut logits = hidden.dot(&m.w_out.t());
    logits += &m.b_out;
    Ok((LogitMatrix(logits), Trace { hidden }))
}

/// Backpropagation through time. Returns parameter gradients and the
/// gradient with respect to the input features.
pub fn backward(
    m: &AcousticModel,
    f: &FeatureMatrix,
    trace: &Trace,
    grad_logits: ArrayView2<'_, f64>,
) -> Result<(ModelGrads, FeatureMatrix)> {
    let t_len = f.windows();
    let expected = (t_len, NUM_CLASSES);
    if grad_logits.dim() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            got: grad_logits.dim(),
        });
    }
    if trace.hidden.dim() != (t_len, m.hidden_dim) {
        return Err(Error::ShapeMismatch {
            expected: (t_len, m.hidden_dim),
            got: trace.hidden.dim(),
        });
    }
    if f.dim() != m.input_dim {
        return Err(Error::DimMismatch {
            expected: m.input_dim,
            got: f.dim(),
        });
    }
    let h = &trace.hidden;
    let w_out = grad_logits.t().dot(h);
    let b_out = grad_logits.sum_axis(Axis(0));
    // d loss / d h_t from the output layer, for all t.
    let from_out = grad_logits.dot(&m.w_out);

    let mut grad_pre = Array2::<f64>::zeros((t_len, m.hidden_dim));
    let mut carry = Array1::<f64>::zeros(m.hidden_dim);
    for t in (0..t_len).rev() {
        let mut dh = from_out.row(t).to_owned();
        dh += &carry;
        let ht = h.row(t);
        let da = ndarray::Zip::from(&dh)
            .and(&ht)
            .map_collect(|&g, &hv| g * (1.0 - hv * hv));
        carry = m.w_rec.t().dot(&da);
        grad_pre.row_mut(t).assign(&da);
    }
    let w_in = grad_pre.t().dot(&f.0);
    let b_rec = grad_pre.sum_axis(Axis(0));
    // h_{t-1} for t = 0 is the zero state.
    let mut w_rec = Array2::zeros((m.hidden_dim, m.hidden_dim));
    if t_len > 1 {
        let later = grad_pre.slice(ndarray::s![1.., ..]);
        let earlier = h.slice(ndarray::s![..t_len - 1, ..]);
        w_rec = later.t().dot(&earlier);
    }
    let input_grad = grad_pre.dot(&m.w_in);
    Ok((
        ModelGrads {
            w_in,
            w_rec,
            b_rec,
            w_out,
            b_out,
        },
        FeatureMatrix(input_grad),
    ))
}

/// Per-row argmax, ties to the lowest index.
pub fn argmax_path(l: &LogitMatrix) -> Vec<usize> {
    l.0.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode(l: &LogitMatrix, a: &Alphabet) -> String {
    let labels = crate::ctc::collapse_path(&argmax_path(l), a.blank_index());
    a.decode_labels(&labels)
}

/// Runs the full pipeline on raw samples and returns the greedy transcript
/// together with the window count.
pub fn transcribe(m: &AcousticModel, mfcc: &Mfcc, samples: &[f64]) -> Result<(String, usize)> {
    let (features, _) = mfcc.forward(samples)?;
    let (logits, _) = forward(m, &features)?;
    Ok((greedy_decode(&logits, &Alphabet::default()), logits.windows()))
}

pub fn encode_model(m: &AcousticModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * m.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(m.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.hidden_dim as u32).to_le_bytes());
    out.extend_from_slice(&m.seed.to_le_bytes());
    for tensor in m.tensors() {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<AcousticModel> {
    const HEADER: usize = 24;
    if bytes.len() < HEADER || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::FormatVersionMismatch(
            "missing FAAGMDL1 magic header".into(),
        ));
    }
    let input_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hidden_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let mut m = init_model(input_dim.max(1), hidden_dim.max(1), 0)?;
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::FormatVersionMismatch(format!(
            "invalid dimensions {input_dim} x {hidden_dim}"
        )));
    }
    let expected = HEADER + 4 * m.parameter_count() + 4;
    if bytes.len() != expected {
        return Err(Error::FormatVersionMismatch(format!(
            "file holds {} bytes, dimensions {input_dim} x {hidden_dim} require {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    m.seed = seed;
    let mut floats = body[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for tensor in m.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = floats.next().expect("length checked above");
        }
    }
    m.check_shapes()?;
    Ok(m)
}

pub fn save_model(m: &AcousticModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AcousticModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss;

    fn random_features(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix(Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0)))
    }

    fn logits_from_path(path: &[usize]) -> LogitMatrix {
        let mut l = Array2::zeros((path.len(), NUM_CLASSES));
        for (t, &p) in path.iter().enumerate() {
            l[[t, p]] = 1.0;
        }
        LogitMatrix(l)
    }

    /// Scalar loss `sum(logits * g)` used by the finite-difference checks.
    fn probe(m: &AcousticModel, f: &FeatureMatrix, g: &Array2<f64>) -> f64 {
        (&forward(m, f).unwrap().0 .0 * g).sum()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_model(13, 16, 4).unwrap();
        let b = init_model(13, 16, 4).unwrap();
        let c = init_model(13, 16, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(init_model(13, 0, 1), Err(Error::InvalidDim(_))));
        let bound = 1.0 / 13f64.sqrt();
        assert!(a.w_in.iter().all(|v| v.abs() <= bound));
        assert!(a.b_rec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_zero_weights() {
        let mut m = init_model(3, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_features(&mut rng, 1, 3);
        assert_eq!(forward(&m, &f).unwrap().0.windows(), 1);
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        m.b_out[5] = 2.5;
        let f = random_features(&mut rng, 4, 3);
        let (l, _) = forward(&m, &f).unwrap();
        for row in l.0.rows() {
            assert_eq!(row, m.b_out.view());
        }
        let wrong = random_features(&mut rng, 4, 2);
        assert!(matches!(forward(&m, &wrong), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = init_model(13, 32, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(&mut rng, 9, 13);
        assert_eq!(forward(&m, &f).unwrap().0, forward(&m, &f).unwrap().0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = init_model(5, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, 4, 5);
        let (_, trace) = forward(&m, &f).unwrap();
        let (g, gi) = backward(&m, &f, &trace, Array2::zeros((4, NUM_CLASSES)).view()).unwrap();
        assert!(g.is_zero());
        assert!(gi.0.iter().all(|&v| v == 0.0));
        assert!(matches!(
            backward(&m, &f, &trace, Array2::zeros((3, NUM_CLASSES)).view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        const H: f64 = 1e-5;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t_len = rng.gen_range(1..=5);
            let hidden = rng.gen_range(1..=8);
            let input = rng.gen_range(1..=4);
            let mut m = init_model(input, hidden, seed).unwrap();
            for v in m.b_rec.iter_mut().chain(m.b_out.iter_mut()) {
                *v = rng.gen_range(-0.5..0.5);
            }
            let f = random_features(&mut rng, t_len, input);
            let g = Array2::from_shape_fn((t_len, NUM_CLASSES), |_| rng.gen_range(-1.0..1.0));
            let (_, trace) = forward(&m, &f).unwrap();
            let (grads, input_grad) = backward(&m, &f, &trace, g.view()).unwrap();

            for (ti, analytic) in grads.tensors().iter().enumerate() {
                for i in 0..analytic.len() {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    plus.tensors_mut()[ti][i] += H;
                    minus.tensors_mut()[ti][i] -= H;
                    let fd = (probe(&plus, &f, &g) - probe(&minus, &f, &g)) / (2.0 * H);
                    let a = analytic[i];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
                    assert!(rel < 1e-4, "seed {seed} tensor {ti}[{i}]: fd {fd} vs {a}");
                }
            }
            for t in 0..t_len {
                for d in 0..input {
                    let mut plus = f.clone();
                    let mut minus = f.clone();
                    plus.0[[t, d]] += H;
                    minus.0[[t, d]] -= H;
                    let fd = (probe(&m, &plus, &g) - probe(&m, &minus, &g)) / (2.0 * H);
                    let a = input_grad.0[[t, d]];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
                    assert!(rel < 1e-4, "seed {seed} input [{t},{d}]: fd {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn ctc_through_model_gradient() {
        let m = init_model(4, 6, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_features(&mut rng, 5, 4);
        let target = TargetLabels(vec![0, 1]);
        let (l, trace) = forward(&m, &f).unwrap();
        let loss = ctc_loss(l.view(), &target).unwrap();
        let (grads, _) = backward(&m, &f, &trace, loss.grad_logits.view()).unwrap();
        let h = 1e-5;
        let mut plus = m.clone();
        let mut minus = m.clone();
        plus.w_rec[[2, 3]] += h;
        minus.w_rec[[2, 3]] -= h;
        let lp = ctc_loss(forward(&plus, &f).unwrap().0.view(), &target).unwrap().loss;
        let lm = ctc_loss(forward(&minus, &f).unwrap().0.view(), &target).unwrap().loss;
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - grads.w_rec[[2, 3]]).abs() < 1e-7);
    }

    #[test]
    fn greedy_decode_examples() {
        let a = Alphabet::default();
        let blank = a.blank_index();
        assert_eq!(blank, 27);
        assert_eq!(a.num_classes(), NUM_CLASSES);
        assert_eq!(greedy_decode(&logits_from_path(&[0, 0, blank, 1]), &a), "ab");
        assert_eq!(greedy_decode(&logits_from_path(&[blank, blank]), &a), "");
        assert_eq!(greedy_decode(&logits_from_path(&[0, blank, 0]), &a), "aa");
        // Ties go to the lowest index.
        assert_eq!(greedy_decode(&LogitMatrix(Array2::zeros((3, NUM_CLASSES))), &a), "a");
    }

    #[test]
    fn alphabet_encoding() {
        let a = Alphabet::default();
        assert_eq!(a.encode("ab z").unwrap().0, vec![0, 1, 26, 25]);
        assert!(matches!(a.encode("A"), Err(Error::UnknownSymbol('A'))));
        assert_eq!(a.decode_labels(&[7, 8]), "hi");
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let m = init_model(13, 16, 42).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..8], b"FAAGMDL1");
        assert_eq!(decode_model(&bytes).unwrap(), m);

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 10);
        assert!(matches!(
            decode_model(&truncated),
            Err(Error::FormatVersionMismatch(_) | Error::ChecksumMismatch { .. })
        ));

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            decode_model(&wrong_magic),
            Err(Error::FormatVersionMismatch(_))
        ));

        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(
            decode_model(&flipped),
            Err(Error::ChecksumMismatch { .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.faag");
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}
