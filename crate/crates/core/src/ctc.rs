//! Connectionist Temporal Classification loss.
//!
//! Logits are `T x K` pre-softmax scores; the blank is always the last class
//! (`K - 1`). The loss is the negative log of the summed probability of every
//! frame-level path that collapses (merge repeats, drop blanks) to the target.
//! Forward and backward variables are kept in log space.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label indices of a target transcription; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLabels(pub Vec<usize>);

impl TargetLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames that can emit this target: one per label plus a blank
    /// between every pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_inputs(logits: ArrayView2<'_, f64>, target: &TargetLabels) -> Result<usize> {
    let (t, k) = logits.dim();
    if t == 0 || k == 0 {
        return Err(Error::EmptyLogits);
    }
    if k < 2 {
        return Err(Error::InvalidInput("need at least one label class plus blank".into()));
    }
    let blank = k - 1;
    if let Some(&bad) = target.0.iter().find(|&&l| l >= blank) {
        return Err(Error::InvalidInput(format!(
            "target label {bad} is the blank or out of range for {k} classes"
        )));
    }
    let needed = target.min_frames();
    if t < needed {
        return Err(Error::Unalignable {
            target_len: target.len(),
            needed,
            windows: t,
        });
    }
    Ok(blank)
}

/// Loss and exact gradient with respect to the logits.
pub fn ctc_loss(logits: ArrayView2<'_, f64>, target: &TargetLabels) -> Result<CtcLoss> {
    let blank = check_inputs(logits, target)?;
    let (t_len, k) = logits.dim();
    let logp = log_softmax(logits);

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.0.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((t_len, s_len), neg);
    alpha[[0, 0]] = logp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = logp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_sum_exp2(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                acc = log_sum_exp2(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != neg {
                alpha[[t, s]] = acc + logp[[t, ext[s]]];
            }
        }
    }

    let mut beta = Array2::from_elem((t_len, s_len), neg);
    beta[[t_len - 1, s_len - 1]] = logp[[t_len - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = logp[[t_len - 1, ext[s_len - 2]]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_sum_exp2(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_sum_exp2(acc, beta[[t + 1, s + 2]]);
            }
            if acc != neg {
                beta[[t, s]] = acc + logp[[t, ext[s]]];
            }
        }
    }

    let mut log_total = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        log_total = log_sum_exp2(log_total, alpha[[t_len - 1, s_len - 2]]);
    }
    if !log_total.is_finite() {
        return Err(Error::Unalignable {
            target_len: target.len(),
            needed: target.min_frames(),
            windows: t_len,
        });
    }

    // d(-ln P)/d u_tk = y_tk - (1 / (P y_tk)) sum_{s: ext_s = k} alpha_ts beta_ts.
    // alpha and beta both include the emission at t, hence the extra -logp below.
    let mut grad = Array2::zeros((t_len, k));
    let mut occupancy = vec![neg; k];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = neg);
        for s in 0..s_len {
            let ab = alpha[[t, s]] + beta[[t, s]];
            occupancy[ext[s]] = log_sum_exp2(occupancy[ext[s]], ab);
        }
        for c in 0..k {
            let prob = logp[[t, c]].exp();
            let posterior = if occupancy[c] == neg {
                0.0
            } else {
                (occupancy[c] - logp[[t, c]] - log_total).exp()
            };
            grad[[t, c]] = prob - posterior;
        }
    }

    Ok(CtcLoss {
        loss: -log_total,
        grad_logits: grad,
    })
}

/// Collapses a frame path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive enumeration of all `K^T` frame paths. Test oracle for [`ctc_loss`].
pub fn ctc_loss_bruteforce(logits: ArrayView2<'_, f64>, target: &TargetLabels) -> Result<f64> {
    let (t_len, k) = logits.dim();
    if t_len > 8 || k > 6 {
        return Err(Error::TooLarge(format!("T = {t_len}, classes = {k}")));
    }
    let blank = check_inputs(logits, target)?;
    let logp = log_softmax(logits);
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    let n_paths = k.pow(t_len as u32);
    for code in 0..n_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        if collapse_path(&path, blank) == target.0 {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &p)| logp[[t, p]])
                .sum::<f64>()
                .exp();
        }
    }
    if total == 0.0 {
        return Err(Error::Unalignable {
            target_len: target.len(),
            needed: target.min_frames(),
            windows: t_len,
        });
    }
    Ok(-total.ln())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Central-difference check of [`ctc_loss`]'s gradient on random small instances.
pub fn ctc_grad_check(seed: u64) -> GradCheckReport {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut instances = 0;
    while instances < 20 {
        let t_len = rng.gen_range(1..=8);
        let k = rng.gen_range(2..=6);
        let tgt_len = rng.gen_range(0..=t_len.min(4));
        let target = TargetLabels((0..tgt_len).map(|_| rng.gen_range(0..k - 1)).collect());
        if target.min_frames() > t_len {
            continue;
        }
        let logits = Array2::from_shape_fn((t_len, k), |_| rng.gen_range(-3.0..3.0));
        let analytic = ctc_loss(logits.view(), &target).expect("alignable").grad_logits;
        for t in 0..t_len {
            for c in 0..k {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[[t, c]] += H;
                minus[[t, c]] -= H;
                let lp = ctc_loss(plus.view(), &target).unwrap().loss;
                let lm = ctc_loss(minus.view(), &target).unwrap().loss;
                let fd = (lp - lm) / (2.0 * H);
                let a = analytic[[t, c]];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
        instances += 1;
    }
    GradCheckReport {
        seed,
        instances,
        max_rel_error: max_rel,
    }
}
