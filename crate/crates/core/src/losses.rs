//! Ordinary multi-class losses, symmetric binary losses and the complementary
//! loss transform.
//!
//! Class indices are 0-based here. Every loss is exposed in two shapes: a scalar
//! `ℓ(k, g)` for a single class and a full loss vector `[ℓ(1, g), ..., ℓ(K, g)]`
//! together with its vector-Jacobian product, which is what the risk estimators
//! differentiate through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Grid on which binary-loss symmetry is probed: z ∈ {-10, -9.75, ..., 10}.
const SYMMETRY_PROBE_STEP: f64 = 0.25;
const SYMMETRY_PROBE_LIMIT: f64 = 10.0;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

fn check_scores<T: Scalar>(scores: &[T]) -> Result<()> {
    if scores.len() < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", scores.len())));
    }
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("model output score {pos} is {}", scores[pos])));
    }
    Ok(())
}

fn check_class(k: usize, classes: usize) -> Result<()> {
    if k >= classes {
        return Err(Error::Config(format!(
            "class index {k} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Vector of the K ordinary losses `ℓ(k, g(x))` for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector<T>(Vec<T>);

impl<T: Scalar> LossVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config(format!(
                "loss vector needs K >= 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::Config(format!(
                "ordinary loss entries must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// Output of [`complement_transform`]; entries may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementaryLossVector<T>(Vec<T>);

impl<T: Scalar> ComplementaryLossVector<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// `ℓ̄ = (-(K-1) I + 1 1ᵀ) ℓ`, i.e. `ℓ̄(k) = -(K-1) ℓ(k) + Σ_j ℓ(j)`.
pub fn complement_transform<T: Scalar>(ell: &LossVector<T>) -> Result<ComplementaryLossVector<T>> {
    let k = ell.classes();
    if k < 2 {
        return Err(Error::Config(format!("complement transform needs K >= 2, got {k}")));
    }
    Ok(ComplementaryLossVector(complement_slice(ell.values())))
}

/// Unchecked slice form of [`complement_transform`], used on hot paths.
pub(crate) fn complement_slice<T: Scalar>(ell: &[T]) -> Vec<T> {
    let km1 = T::from_usize_lossy(ell.len() - 1);
    let total: T = ell.iter().copied().sum();
    ell.iter().map(|&l| total - km1 * l).collect()
}

/// The uniform complementary transition matrix: 0 on the diagonal, `1/(K-1)` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix<T> {
    classes: usize,
    off_diagonal: T,
}

impl<T: Scalar> TransitionMatrix<T> {
    pub fn uniform(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("transition matrix needs K >= 2, got {classes}")));
        }
        Ok(Self {
            classes,
            off_diagonal: T::one() / T::from_usize_lossy(classes - 1),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn entry(&self, row: usize, col: usize) -> T {
        if row == col {
            T::zero()
        } else {
            self.off_diagonal
        }
    }

    /// `η̄ = T η`.
    pub fn apply(&self, eta: &[T]) -> Result<Vec<T>> {
        if eta.len() != self.classes {
            return Err(Error::Dimension(format!(
                "vector of length {} against {}x{} transition matrix",
                eta.len(),
                self.classes,
                self.classes
            )));
        }
        let total: T = eta.iter().copied().sum();
        Ok(eta.iter().map(|&e| (total - e) * self.off_diagonal).collect())
    }
}

/// Recovers the ordinary class posterior from the complementary one:
/// `η = -(K-1) η̄ + 1`.
pub fn eta_from_etabar<T: Scalar>(etabar: &[T]) -> Result<Vec<T>> {
    let k = etabar.len();
    if k < 2 {
        return Err(Error::Config(format!("need K >= 2 classes, got {k}")));
    }
    let tol = T::lit(1e-9);
    let total: T = etabar.iter().copied().sum();
    if etabar.iter().any(|e| !e.is_finite() || *e < -tol) || (total - T::one()).abs() > tol {
        return Err(Error::NotUniformComplementary(
            "complementary posterior is not on the probability simplex".into(),
        ));
    }
    let km1 = T::from_usize_lossy(k - 1);
    let eta: Vec<T> = etabar.iter().map(|&e| T::one() - km1 * e).collect();
    if let Some(bad) = eta.iter().find(|e| **e < -tol || **e > T::one() + tol) {
        return Err(Error::NotUniformComplementary(format!(
            "recovered class probability {bad} lies outside [0, 1]"
        )));
    }
    Ok(eta)
}

/// Which symmetric binary loss backs an OVA or PC loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLossKind {
    /// `s(z) = max(0, min(2, 1 - z)) / 2`
    Ramp,
    /// `s(z) = 1 / (1 + e^z)`
    Sigmoid,
}

/// Custom binary loss evaluated in `f64`.
#[derive(Clone, Copy, Debug)]
pub struct CustomBinaryLoss {
    pub name: &'static str,
    pub value: fn(f64) -> f64,
    pub derivative: fn(f64) -> f64,
}

/// A binary loss `s` with `s(z) + s(-z) = 1`, verified on construction.
#[derive(Clone, Copy, Debug)]
pub enum BinaryLoss {
    Ramp,
    Sigmoid,
    Custom(CustomBinaryLoss),
}

impl BinaryLoss {
    pub fn new(kind: BinaryLossKind) -> Self {
        match kind {
            BinaryLossKind::Ramp => BinaryLoss::Ramp,
            BinaryLossKind::Sigmoid => BinaryLoss::Sigmoid,
        }
    }

    /// Wraps a user-supplied loss, rejecting it unless it is symmetric on the probe grid.
    pub fn custom(custom: CustomBinaryLoss) -> Result<Self> {
        let loss = BinaryLoss::Custom(custom);
        loss.check_symmetry()?;
        Ok(loss)
    }

    pub fn name(&self) -> &'static str {
        match self {
            BinaryLoss::Ramp => "ramp",
            BinaryLoss::Sigmoid => "sigmoid",
            BinaryLoss::Custom(c) => c.name,
        }
    }

    /// Probes `s(z) + s(-z) = 1` on z ∈ {-10, ..., 10} with step 0.25.
    pub fn check_symmetry(&self) -> Result<()> {
        let steps = (2.0 * SYMMETRY_PROBE_LIMIT / SYMMETRY_PROBE_STEP).round() as i32;
        for i in 0..=steps {
            let z = -SYMMETRY_PROBE_LIMIT + f64::from(i) * SYMMETRY_PROBE_STEP;
            let deviation = (self.value(z) + self.value(-z) - 1.0).abs();
            if deviation.is_nan() || deviation > SYMMETRY_TOLERANCE {
                return Err(Error::AsymmetricBinaryLoss {
                    name: self.name().to_string(),
                    z,
                    deviation,
                });
            }
        }
        Ok(())
    }

    pub fn value<T: Scalar>(&self, z: T) -> T {
        match self {
            BinaryLoss::Ramp => {
                let half = T::lit(0.5);
                half * (T::one() - z).min(T::lit(2.0)).max(T::zero())
            }
            BinaryLoss::Sigmoid => {
                if z >= T::zero() {
                    let e = (-z).exp();
                    e / (T::one() + e)
                } else {
                    T::one() / (T::one() + z.exp())
                }
            }
            BinaryLoss::Custom(c) => T::lit((c.value)(z.as_f64())),
        }
    }

    /// `s'(z)`; the ramp takes the zero branch at its kinks `z = ±1`.
    pub fn derivative<T: Scalar>(&self, z: T) -> T {
        match self {
            BinaryLoss::Ramp => {
                if z > -T::one() && z < T::one() {
                    T::lit(-0.5)
                } else {
                    T::zero()
                }
            }
            BinaryLoss::Sigmoid => {
                let s = self.value(z);
                -s * (T::one() - s)
            }
            BinaryLoss::Custom(c) => T::lit((c.derivative)(z.as_f64())),
        }
    }

    /// Distance from `z` to the nearest point where `s` is not differentiable.
    pub fn kink_distance<T: Scalar>(&self, z: T) -> T {
        match self {
            BinaryLoss::Ramp => (z.abs() - T::one()).abs(),
            _ => T::infinity(),
        }
    }
}

impl PartialEq for BinaryLoss {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

/// `-log softmax(scores)_k`, via a max-shifted log-sum-exp.
pub fn softmax_cross_entropy<T: Scalar>(k: usize, scores: &[T]) -> Result<T> {
    check_scores(scores)?;
    check_class(k, scores.len())?;
    Ok(log_sum_exp(scores.iter().copied()) - scores[k])
}

/// `s(g_k) + (1/(K-1)) Σ_{k'≠k} s(-g_k')`.
pub fn ova_loss<T: Scalar>(k: usize, scores: &[T], s: &BinaryLoss) -> Result<T> {
    check_scores(scores)?;
    check_class(k, scores.len())?;
    let km1 = T::from_usize_lossy(scores.len() - 1);
    let rest: T = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &g)| s.value(-g))
        .sum();
    Ok(s.value(scores[k]) + rest / km1)
}

/// `Σ_{k'≠k} s(g_k - g_k')`.
pub fn pc_loss<T: Scalar>(k: usize, scores: &[T], s: &BinaryLoss) -> Result<T> {
    check_scores(scores)?;
    check_class(k, scores.len())?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &g)| s.value(scores[k] - g))
        .sum())
}

/// `ℓ̄_OVA(k̄) = (1/(K-1)) Σ_{k≠k̄} s(g_k) + s(-g_k̄)`.
pub fn complementary_ova<T: Scalar>(kbar: usize, scores: &[T], s: &BinaryLoss) -> Result<T> {
    check_scores(scores)?;
    check_class(kbar, scores.len())?;
    let km1 = T::from_usize_lossy(scores.len() - 1);
    let rest: T = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != kbar)
        .map(|(_, &g)| s.value(g))
        .sum();
    Ok(rest / km1 + s.value(-scores[kbar]))
}

/// `ℓ̄_PC(k̄) = Σ_{k'≠k̄} s(g_k' - g_k̄)`: every other class score against the complementary one.
pub fn complementary_pc<T: Scalar>(kbar: usize, scores: &[T], s: &BinaryLoss) -> Result<T> {
    check_scores(scores)?;
    check_class(kbar, scores.len())?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != kbar)
        .map(|(_, &g)| s.value(g - scores[kbar]))
        .sum())
}

/// Named ordinary loss choice, as it appears in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    OvaRamp,
    OvaSigmoid,
    PcRamp,
    PcSigmoid,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::SoftmaxCe,
        LossKind::OvaRamp,
        LossKind::OvaSigmoid,
        LossKind::PcRamp,
        LossKind::PcSigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::OvaRamp => "ova_ramp",
            LossKind::OvaSigmoid => "ova_sigmoid",
            LossKind::PcRamp => "pc_ramp",
            LossKind::PcSigmoid => "pc_sigmoid",
        }
    }
}

/// An ordinary multi-class loss `ℓ: [K] × ℝ^K → ℝ₊`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    SoftmaxCrossEntropy,
    OneVersusAll(BinaryLoss),
    PairwiseComparison(BinaryLoss),
}

impl From<LossKind> for Loss {
    fn from(kind: LossKind) -> Self {
        match kind {
            LossKind::SoftmaxCe => Loss::SoftmaxCrossEntropy,
            LossKind::OvaRamp => Loss::OneVersusAll(BinaryLoss::Ramp),
            LossKind::OvaSigmoid => Loss::OneVersusAll(BinaryLoss::Sigmoid),
            LossKind::PcRamp => Loss::PairwiseComparison(BinaryLoss::Ramp),
            LossKind::PcSigmoid => Loss::PairwiseComparison(BinaryLoss::Sigmoid),
        }
    }
}

impl Loss {
    pub fn name(&self) -> String {
        match self {
            Loss::SoftmaxCrossEntropy => "softmax_ce".into(),
            Loss::OneVersusAll(s) => format!("ova_{}", s.name()),
            Loss::PairwiseComparison(s) => format!("pc_{}", s.name()),
        }
    }

    pub fn value<T: Scalar>(&self, k: usize, scores: &[T]) -> Result<T> {
        match self {
            Loss::SoftmaxCrossEntropy => softmax_cross_entropy(k, scores),
            Loss::OneVersusAll(s) => ova_loss(k, scores, s),
            Loss::PairwiseComparison(s) => pc_loss(k, scores, s),
        }
    }

    /// All K losses at once.
    pub fn vector<T: Scalar>(&self, scores: &[T]) -> Result<LossVector<T>> {
        check_scores(scores)?;
        Ok(LossVector(self.vector_unchecked(scores)))
    }

    pub(crate) fn vector_unchecked<T: Scalar>(&self, scores: &[T]) -> Vec<T> {
        let k = scores.len();
        match self {
            Loss::SoftmaxCrossEntropy => {
                let lse = log_sum_exp(scores.iter().copied());
                scores.iter().map(|&g| lse - g).collect()
            }
            Loss::OneVersusAll(s) => {
                let km1 = T::from_usize_lossy(k - 1);
                let neg: Vec<T> = scores.iter().map(|&g| s.value(-g)).collect();
                let neg_total: T = neg.iter().copied().sum();
                scores
                    .iter()
                    .zip(&neg)
                    .map(|(&g, &n)| s.value(g) + (neg_total - n) / km1)
                    .collect()
            }
            Loss::PairwiseComparison(s) => (0..k)
                .map(|a| (0..k).filter(|&b| b != a).map(|b| s.value(scores[a] - scores[b])).sum())
                .collect(),
        }
    }

    /// `Σ_k w_k ∂ℓ(k, g)/∂g`, the gradient of `wᵀ ℓ(g)` with respect to the scores.
    pub fn vector_jacobian_product<T: Scalar>(&self, scores: &[T], weights: &[T]) -> Vec<T> {
        let k = scores.len();
        debug_assert_eq!(weights.len(), k);
        match self {
            Loss::SoftmaxCrossEntropy => {
                let lse = log_sum_exp(scores.iter().copied());
                let wsum: T = weights.iter().copied().sum();
                scores
                    .iter()
                    .zip(weights)
                    .map(|(&g, &w)| wsum * (g - lse).exp() - w)
                    .collect()
            }
            Loss::OneVersusAll(s) => {
                let km1 = T::from_usize_lossy(k - 1);
                let wsum: T = weights.iter().copied().sum();
                scores
                    .iter()
                    .zip(weights)
                    .map(|(&g, &w)| w * s.derivative(g) - (wsum - w) / km1 * s.derivative(-g))
                    .collect()
            }
            Loss::PairwiseComparison(s) => {
                let mut grad = vec![T::zero(); k];
                for a in 0..k {
                    for b in 0..k {
                        if a == b {
                            continue;
                        }
                        let d = weights[a] * s.derivative(scores[a] - scores[b]);
                        grad[a] += d;
                        grad[b] -= d;
                    }
                }
                grad
            }
        }
    }

    /// Distance (in score-difference units) to the nearest non-differentiable point.
    pub fn kink_distance<T: Scalar>(&self, scores: &[T]) -> T {
        match self {
            Loss::SoftmaxCrossEntropy => T::infinity(),
            Loss::OneVersusAll(s) => scores.iter().map(|&g| s.kink_distance(g)).fold(T::infinity(), T::min),
            Loss::PairwiseComparison(s) => {
                let mut m = T::infinity();
                for (a, &ga) in scores.iter().enumerate() {
                    for &gb in &scores[a + 1..] {
                        m = m.min(s.kink_distance(ga - gb));
                    }
                }
                m
            }
        }
    }
}

/// Complementary OVA / PC losses with their Corollary-2 constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComplementaryLoss {
    OneVersusAll(BinaryLoss),
    PairwiseComparison(BinaryLoss),
}

impl ComplementaryLoss {
    /// Builds the complementary counterpart of an ordinary OVA/PC loss. Softmax
    /// cross-entropy has no constant-sum counterpart and is rejected.
    pub fn counterpart_of(loss: &Loss) -> Result<Self> {
        let c = match loss {
            Loss::OneVersusAll(s) => ComplementaryLoss::OneVersusAll(*s),
            Loss::PairwiseComparison(s) => ComplementaryLoss::PairwiseComparison(*s),
            Loss::SoftmaxCrossEntropy => {
                return Err(Error::Config(
                    "softmax cross-entropy has no registered (M1, M2) constants".into(),
                ))
            }
        };
        c.binary().check_symmetry()?;
        Ok(c)
    }

    pub fn binary(&self) -> &BinaryLoss {
        match self {
            ComplementaryLoss::OneVersusAll(s) | ComplementaryLoss::PairwiseComparison(s) => s,
        }
    }

    /// The ordinary loss whose complementary version this is.
    pub fn ordinary(&self) -> Loss {
        match *self {
            ComplementaryLoss::OneVersusAll(s) => Loss::OneVersusAll(s),
            ComplementaryLoss::PairwiseComparison(s) => Loss::PairwiseComparison(s),
        }
    }

    /// `(M1, M2)`: `Σ_k̄ ℓ̄(k̄) = M1` and `ℓ̄(k) + ℓ(k) = M2`.
    pub fn constants<T: Scalar>(&self, classes: usize) -> (T, T) {
        let k = T::from_usize_lossy(classes);
        match self {
            ComplementaryLoss::OneVersusAll(_) => (k, T::lit(2.0)),
            ComplementaryLoss::PairwiseComparison(_) => (k * (k - T::one()) / T::lit(2.0), k - T::one()),
        }
    }

    pub fn value<T: Scalar>(&self, kbar: usize, scores: &[T]) -> Result<T> {
        match self {
            ComplementaryLoss::OneVersusAll(s) => complementary_ova(kbar, scores, s),
            ComplementaryLoss::PairwiseComparison(s) => complementary_pc(kbar, scores, s),
        }
    }

    /// `∂ℓ̄(k̄, g)/∂g`.
    pub fn gradient<T: Scalar>(&self, kbar: usize, scores: &[T]) -> Vec<T> {
        let k = scores.len();
        let mut grad = vec![T::zero(); k];
        match self {
            ComplementaryLoss::OneVersusAll(s) => {
                let km1 = T::from_usize_lossy(k - 1);
                for (m, g) in grad.iter_mut().enumerate() {
                    *g = if m == kbar {
                        -s.derivative(-scores[kbar])
                    } else {
                        s.derivative(scores[m]) / km1
                    };
                }
            }
            ComplementaryLoss::PairwiseComparison(s) => {
                for m in (0..k).filter(|&m| m != kbar) {
                    let d = s.derivative(scores[m] - scores[kbar]);
                    grad[m] += d;
                    grad[kbar] -= d;
                }
            }
        }
        grad
    }

    pub fn kink_distance<T: Scalar>(&self, kbar: usize, scores: &[T]) -> T {
        match self {
            ComplementaryLoss::OneVersusAll(s) => {
                scores.iter().map(|&g| s.kink_distance(g)).fold(T::infinity(), T::min)
            }
            ComplementaryLoss::PairwiseComparison(s) => scores
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != kbar)
                .map(|(_, &g)| s.kink_distance(g - scores[kbar]))
                .fold(T::infinity(), T::min),
        }
    }
}
