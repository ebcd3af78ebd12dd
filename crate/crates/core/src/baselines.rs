//! Published comparison methods: pairwise comparison through the constant-sum
//! identity, and forward loss correction. Also reliability diagnostics.

use std::cell::Cell;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::OrdinaryDataset;
use crate::error::{Error, Result};
use crate::losses::{BinaryLoss, ComplementaryLoss, TransitionMatrix};
use crate::model::{argmax, Model, ScoreEvaluation, ScoreObjective};
use crate::risk::{corollary2_risk, ClassPartitionedSample};
use crate::scalar::{log_sum_exp, softmax, Scalar};

/// Floor applied to the corrected probability before taking its log.
pub const FORWARD_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum BaselineSpec<T> {
    Pc(BinaryLoss),
    Forward(TransitionMatrix<T>),
}

impl<T: Scalar> BaselineSpec<T> {
    pub fn pc_ramp() -> Self {
        Self::Pc(BinaryLoss::Ramp)
    }

    pub fn forward(classes: usize) -> Result<Self> {
        Ok(Self::Forward(TransitionMatrix::uniform(classes)?))
    }
}

/// `(K-1) · mean ℓ̄_PC(ȳ_i, g(x_i)) - K(K-1)/2 + (K-1)`.
pub fn pc_objective<T: Scalar>(sample: &ClassPartitionedSample<T>, binary: &BinaryLoss, model: &Model<T>) -> Result<T> {
    corollary2_risk(sample, &ComplementaryLoss::PairwiseComparison(*binary), model)
}

/// Mean of `-log q_ȳ(x)` with `q = Tᵀ softmax(g(x))` for the uniform `T`.
pub struct ForwardObjective<'a> {
    pub comp_labels: &'a [usize],
    clamped: Cell<usize>,
}

impl<'a> ForwardObjective<'a> {
    pub fn new(comp_labels: &'a [usize]) -> Self {
        Self {
            comp_labels,
            clamped: Cell::new(0),
        }
    }

    /// Number of samples whose `q_ȳ` fell below [`FORWARD_CLAMP`] in the last evaluation.
    pub fn clamped(&self) -> usize {
        self.clamped.get()
    }
}

/// `-log q_ȳ` for one score vector; also returns the gradient and whether it clamped.
pub fn forward_loss<T: Scalar>(comp_label: usize, scores: &[T]) -> Result<(T, Vec<T>, bool)> {
    let k = scores.len();
    if k < 2 || comp_label >= k {
        return Err(Error::Dimension(format!("label {} for {k} scores", comp_label + 1)));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("model output contains a non-finite score".into()));
    }
    let lse = log_sum_exp(scores.iter().copied());
    let lse_rest = log_sum_exp(
        scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != comp_label)
            .map(|(_, &s)| s),
    );
    let ln_km1 = T::from_usize_lossy(k - 1).ln();
    // log q_ȳ = lse_{j≠ȳ} - lse - ln(K-1)
    let log_q = lse_rest - lse - ln_km1;
    let floor = T::lit(FORWARD_CLAMP).ln();
    if log_q < floor {
        return Ok((-floor, vec![T::zero(); k], true));
    }
    let grad = scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let p = (s - lse).exp();
            if j == comp_label {
                p
            } else {
                p - (s - lse_rest).exp()
            }
        })
        .collect();
    Ok((-log_q, grad, false))
}

impl<T: Scalar> ScoreObjective<T> for ForwardObjective<'_> {
    fn evaluate(&self, scores: ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>> {
        let (n, k) = scores.dim();
        if n == 0 || n != self.comp_labels.len() {
            return Err(Error::Dimension(format!(
                "{n} score rows for {} labels",
                self.comp_labels.len()
            )));
        }
        let inv_n = T::one() / T::from_usize_lossy(n);
        let floor = T::lit(FORWARD_CLAMP).ln();
        let mut total = T::zero();
        let mut clamped = 0;
        let mut kink = T::infinity();
        let mut grad = Array2::zeros((n, k));
        for (i, row) in scores.rows().into_iter().enumerate() {
            let s = row.as_slice().expect("standard layout");
            let (v, g, c) = forward_loss(self.comp_labels[i], s)?;
            total += v;
            clamped += usize::from(c);
            kink = kink.min((-v - floor).abs());
            for (dst, gj) in grad.row_mut(i).iter_mut().zip(g) {
                *dst = gj * inv_n;
            }
        }
        self.clamped.set(clamped);
        Ok(ScoreEvaluation {
            value: total * inv_n,
            grad,
            kink,
            per_class: None,
        })
    }
}

/// Mean forward-corrected loss of `model` on a complementary sample.
pub fn forward_objective<T: Scalar>(sample: &ClassPartitionedSample<T>, model: &Model<T>) -> Result<T> {
    let scores = model.forward_batch(sample.features())?;
    ForwardObjective::new(sample.comp_labels())
        .evaluate(scores.view())
        .map(|e| e.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    /// Count-weighted mean of `|accuracy - mean_confidence|` over non-empty bins.
    pub ece: f64,
    pub accuracy: f64,
}

impl CalibrationReport {
    /// `bin_low,bin_high,count,accuracy` with an empty field for empty bins.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,accuracy\n");
        for b in &self.bins {
            let acc = b.accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", b.bin_low, b.bin_high, b.count, acc);
        }
        out
    }
}

/// Reliability table from `(confidence, correct)` pairs with `bins` equal-width bins on [0, 1].
pub fn reliability(pairs: impl IntoIterator<Item = (f64, bool)>, bins: usize) -> Result<CalibrationReport> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut n = 0usize;
    for (c, ok) in pairs {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        correct[b] += usize::from(ok);
        conf[b] += c;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("calibration needs at least one sample".into()));
    }
    let mut ece = 0.0;
    let bins_out = (0..bins)
        .map(|b| {
            let (accuracy, mean_confidence) = if count[b] == 0 {
                (None, None)
            } else {
                let acc = correct[b] as f64 / count[b] as f64;
                let mc = conf[b] / count[b] as f64;
                ece += count[b] as f64 / n as f64 * (acc - mc).abs();
                (Some(acc), Some(mc))
            };
            CalibrationBin {
                bin_low: b as f64 / bins as f64,
                bin_high: (b + 1) as f64 / bins as f64,
                count: count[b],
                accuracy,
                mean_confidence,
            }
        })
        .collect();
    Ok(CalibrationReport {
        bins: bins_out,
        ece,
        accuracy: correct.iter().sum::<usize>() as f64 / n as f64,
    })
}

/// Buckets test samples by their maximum softmax probability.
pub fn calibration_report<T: Scalar>(
    model: &Model<T>,
    test: &OrdinaryDataset<T>,
    bins: usize,
) -> Result<CalibrationReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let scores = model.forward_batch(test.features())?;
    let pairs: Vec<(f64, bool)> = scores
        .rows()
        .into_iter()
        .zip(test.labels())
        .map(|(row, &y)| {
            let s = row.as_slice().expect("standard layout");
            let p = softmax(s);
            let pred = argmax(&p);
            (p[pred].as_f64(), pred == y)
        })
        .collect();
    reliability(pairs, bins)
}
