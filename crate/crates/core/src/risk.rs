//! Empirical classification-risk estimators over complementarily labeled data.
//!
//! Every estimator is built from the class-decomposed terms
//!
//! ```text
//! r_k = -(K-1) π̄_k Ê_{X_k}[ℓ(k, g)] + Σ_j π̄_j Ê_{X_j}[ℓ(k, g)]
//! ```
//!
//! which are linear in the per-sample loss matrix `L[i, k] = ℓ(k, g(x_i))`:
//! `r_k = Σ_i w_i (1 - (K-1)[ȳ_i = k]) L[i, k]` with `w_i = π̄_{ȳ_i} / |X_{ȳ_i}|`.
//! The free estimator sums them, the non-negative one clamps each at zero,
//! and the gradient-ascent variant squashes them at `-β`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{ComplementaryDataset, OrdinaryDataset};
use crate::error::{Error, Result};
use crate::losses::{ComplementaryLoss, Loss};
use crate::model::{Model, OrdinaryObjective, ScoreEvaluation, ScoreObjective};
use crate::scalar::Scalar;

/// How the complementary class priors π̄ are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// `|X_k| / n` from the sample itself.
    #[default]
    Empirical,
    /// The known uniform `1/K`.
    Uniform,
}

/// A complementary sample grouped by complementary label, with class priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPartitionedSample<T> {
    features: Array2<T>,
    comp_labels: Vec<usize>,
    groups: Vec<Vec<usize>>,
    priors: Vec<T>,
}

fn group_rows(comp_labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); classes];
    for (i, &l) in comp_labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

impl<T: Scalar> ClassPartitionedSample<T> {
    pub fn new(features: Array2<T>, comp_labels: Vec<usize>, classes: usize, mode: PriorMode) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need K >= 2 classes, got {classes}")));
        }
        if comp_labels.is_empty() {
            return Err(Error::Empty("complementary sample has no rows".into()));
        }
        let n = T::from_usize_lossy(comp_labels.len());
        let priors = match mode {
            PriorMode::Empirical => {
                let mut counts = vec![0usize; classes];
                for &l in &comp_labels {
                    if l >= classes {
                        return Err(Error::Config(format!("label {} outside 1..={classes}", l + 1)));
                    }
                    counts[l] += 1;
                }
                counts.into_iter().map(|c| T::from_usize_lossy(c) / n).collect()
            }
            PriorMode::Uniform => vec![T::one() / T::from_usize_lossy(classes); classes],
        };
        Self::with_priors(features, comp_labels, priors)
    }

    /// Uses externally supplied priors, which must form a distribution.
    pub fn with_priors(features: Array2<T>, comp_labels: Vec<usize>, priors: Vec<T>) -> Result<Self> {
        let classes = priors.len();
        if features.nrows() != comp_labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                comp_labels.len()
            )));
        }
        if let Some(&l) = comp_labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {} outside 1..={classes}", l + 1)));
        }
        let total: T = priors.iter().copied().sum();
        if priors.iter().any(|p| *p < T::zero()) || (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::Config("class priors must be a probability vector".into()));
        }
        Ok(Self {
            groups: group_rows(&comp_labels, classes),
            features,
            comp_labels,
            priors,
        })
    }

    pub fn from_dataset(ds: &ComplementaryDataset<T>, mode: PriorMode) -> Result<Self> {
        Self::new(ds.features().to_owned(), ds.comp_labels().to_vec(), ds.classes(), mode)
    }

    pub fn into_dataset_parts(ds: ComplementaryDataset<T>, mode: PriorMode) -> Result<Self> {
        let (features, labels, classes) = ds.into_parts();
        Self::new(features, labels, classes, mode)
    }

    /// Rows `rows` as a minibatch; keeps the full-sample priors.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let comp_labels: Vec<usize> = rows.iter().map(|&i| self.comp_labels[i]).collect();
        Self {
            features: self.features.select(ndarray::Axis(0), rows),
            groups: group_rows(&comp_labels, self.classes()),
            comp_labels,
            priors: self.priors.clone(),
        }
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn comp_labels(&self) -> &[usize] {
        &self.comp_labels
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn priors(&self) -> &[T] {
        &self.priors
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    pub fn len(&self) -> usize {
        self.comp_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comp_labels.is_empty()
    }

    /// `w_i = π̄_{ȳ_i} / |X_{ȳ_i}|`. In strict mode a class with positive
    /// prior but no samples is an error; otherwise it simply contributes nothing.
    pub fn sample_weights(&self, strict: bool) -> Result<Vec<T>> {
        if strict {
            if let Some(k) = (0..self.classes()).find(|&k| self.groups[k].is_empty() && self.priors[k] > T::zero()) {
                return Err(Error::EstimatorUndefined(format!(
                    "complementary class {} has prior {} but no samples",
                    k + 1,
                    self.priors[k]
                )));
            }
        }
        let per_group: Vec<T> = self
            .groups
            .iter()
            .zip(&self.priors)
            .map(|(g, &p)| {
                if g.is_empty() {
                    T::zero()
                } else {
                    p / T::from_usize_lossy(g.len())
                }
            })
            .collect();
        Ok(self.comp_labels.iter().map(|&l| per_group[l]).collect())
    }
}

/// Which estimator produced a [`RiskReport`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskVariant {
    Free,
    Nonneg,
    Maxop,
}

/// Class-decomposed risk terms and their reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport<T> {
    pub variant: RiskVariant,
    pub total: T,
    pub per_class: Vec<T>,
}

impl<T: Scalar> RiskReport<T> {
    fn new(variant: RiskVariant, per_class: Vec<T>) -> Self {
        let total = match variant {
            RiskVariant::Free => per_class.iter().copied().sum(),
            RiskVariant::Nonneg | RiskVariant::Maxop => per_class.iter().map(|&r| r.max(T::zero())).sum(),
        };
        Self {
            variant,
            total,
            per_class,
        }
    }
}

/// How the class-decomposed terms are turned into a training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `Σ_k r_k`
    Free,
    /// `Σ_k max{0, r_k}`
    NonNegative,
    /// `Σ_k r_k` while `min_k r_k >= -β`, otherwise `Σ_k min{-β, r_k}` (to be ascended).
    GradientAscent { beta: f64 },
}

/// `true` when the batch must take the ascent branch: some `r_k < -β`.
/// At exactly `-β` the batch descends.
pub fn needs_ascent<T: Scalar>(per_class: &[T], beta: f64) -> bool {
    let neg_beta = -T::lit(beta);
    per_class.iter().any(|&r| r < neg_beta)
}

fn check_finite_scores<T: Scalar>(scores: &ArrayView2<'_, T>) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("model output contains a non-finite score".into()));
    }
    Ok(())
}

/// The loss matrix `L[i, k] = ℓ(k, g(x_i))`.
pub fn loss_matrix<T: Scalar>(loss: &Loss, scores: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_finite_scores(&scores)?;
    let (n, k) = scores.dim();
    let mut out = Array2::zeros((n, k));
    for (mut dst, row) in out.rows_mut().into_iter().zip(scores.rows()) {
        let v = loss.vector_unchecked(row.as_slice().expect("standard layout"));
        dst.assign(&Array1::from(v));
    }
    Ok(out)
}

/// `r_k` for every class, accumulated in ascending sample order.
pub fn class_terms<T: Scalar>(losses: ArrayView2<'_, T>, comp_labels: &[usize], weights: &[T]) -> Vec<T> {
    let k = losses.ncols();
    let km1 = T::from_usize_lossy(k - 1);
    let mut r = vec![T::zero(); k];
    for ((row, &l), &w) in losses.rows().into_iter().zip(comp_labels).zip(weights) {
        if w == T::zero() {
            continue;
        }
        for (rk, &v) in r.iter_mut().zip(row.iter()) {
            *rk += w * v;
        }
        r[l] -= km1 * w * row[l];
    }
    r
}

/// Class-decomposed complementary risk of the score matrix, reduced per [`Reduction`].
pub struct ClassRiskObjective<'a, T> {
    pub loss: Loss,
    pub comp_labels: &'a [usize],
    pub weights: Vec<T>,
    pub reduction: Reduction,
}

impl<'a, T: Scalar> ClassRiskObjective<'a, T> {
    /// Strict sample weights (errors on an empty class with positive prior).
    pub fn for_sample(sample: &'a ClassPartitionedSample<T>, loss: Loss, reduction: Reduction) -> Result<Self> {
        Ok(Self {
            loss,
            comp_labels: sample.comp_labels(),
            weights: sample.sample_weights(true)?,
            reduction,
        })
    }

    /// Minibatch weights: full-sample priors, empty per-batch groups contribute nothing.
    pub fn for_batch(batch: &'a ClassPartitionedSample<T>, loss: Loss, reduction: Reduction) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("minibatch has no rows".into()));
        }
        Ok(Self {
            loss,
            comp_labels: batch.comp_labels(),
            weights: batch.sample_weights(false)?,
            reduction,
        })
    }
}

impl<T: Scalar> ScoreObjective<T> for ClassRiskObjective<'_, T> {
    fn evaluate(&self, scores: ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>> {
        let (n, k) = scores.dim();
        if n != self.comp_labels.len() {
            return Err(Error::Dimension(format!(
                "{n} score rows for {} labels",
                self.comp_labels.len()
            )));
        }
        let losses = loss_matrix(&self.loss, scores)?;
        let r = class_terms(losses.view(), self.comp_labels, &self.weights);
        let zero = T::zero();
        let mut kink = T::infinity();
        let (value, coef): (T, Vec<T>) = match self.reduction {
            Reduction::Free => (r.iter().copied().sum(), vec![T::one(); k]),
            Reduction::NonNegative => {
                kink = r.iter().fold(kink, |m, v| m.min(v.abs()));
                (
                    r.iter().map(|&v| v.max(zero)).sum(),
                    r.iter().map(|&v| if v > zero { T::one() } else { zero }).collect(),
                )
            }
            Reduction::GradientAscent { beta } => {
                let neg_beta = -T::lit(beta);
                kink = r.iter().fold(kink, |m, &v| m.min((v - neg_beta).abs()));
                if needs_ascent(&r, beta) {
                    (
                        r.iter().map(|&v| v.min(neg_beta)).sum(),
                        r.iter().map(|&v| if v < neg_beta { T::one() } else { zero }).collect(),
                    )
                } else {
                    (r.iter().copied().sum(), vec![T::one(); k])
                }
            }
        };
        let km1 = T::from_usize_lossy(k - 1);
        let mut grad = Array2::zeros((n, k));
        let mut dl = vec![zero; k];
        for (i, row) in scores.rows().into_iter().enumerate() {
            let s = row.as_slice().expect("standard layout");
            kink = kink.min(self.loss.kink_distance(s));
            let w = self.weights[i];
            if w == zero {
                continue;
            }
            for (d, &c) in dl.iter_mut().zip(&coef) {
                *d = c * w;
            }
            let l = self.comp_labels[i];
            dl[l] -= coef[l] * w * km1;
            grad.row_mut(i)
                .assign(&Array1::from(self.loss.vector_jacobian_product(s, &dl)));
        }
        Ok(ScoreEvaluation {
            value,
            grad,
            kink,
            per_class: Some(r),
        })
    }
}

/// `(K-1) · mean_i ℓ̄(ȳ_i, g(x_i)) - M1 + M2` for a complementary OVA/PC loss.
pub struct Corollary2Objective<'a> {
    pub comp_loss: ComplementaryLoss,
    pub comp_labels: &'a [usize],
}

impl<T: Scalar> ScoreObjective<T> for Corollary2Objective<'_> {
    fn evaluate(&self, scores: ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>> {
        check_finite_scores(&scores)?;
        let (n, k) = scores.dim();
        if n == 0 || n != self.comp_labels.len() {
            return Err(Error::Dimension(format!(
                "{n} score rows for {} labels",
                self.comp_labels.len()
            )));
        }
        let (m1, m2): (T, T) = self.comp_loss.constants(k);
        let scale = T::from_usize_lossy(k - 1) / T::from_usize_lossy(n);
        let mut sum = T::zero();
        let mut kink = T::infinity();
        let mut grad = Array2::zeros((n, k));
        for (i, row) in scores.rows().into_iter().enumerate() {
            let s = row.as_slice().expect("standard layout");
            let kbar = self.comp_labels[i];
            sum += self.comp_loss.value(kbar, s)?;
            kink = kink.min(self.comp_loss.kink_distance(kbar, s));
            let g = self.comp_loss.gradient(kbar, s);
            grad.row_mut(i)
                .assign(&Array1::from_iter(g.into_iter().map(|v| v * scale)));
        }
        Ok(ScoreEvaluation {
            value: sum * scale - m1 + m2,
            grad,
            kink,
            per_class: None,
        })
    }
}

fn report<T: Scalar>(
    sample: &ClassPartitionedSample<T>,
    loss: &Loss,
    model: &Model<T>,
    variant: RiskVariant,
) -> Result<RiskReport<T>> {
    let weights = sample.sample_weights(true)?;
    let scores = model.forward_batch(sample.features())?;
    let losses = loss_matrix(loss, scores.view())?;
    Ok(RiskReport::new(
        variant,
        class_terms(losses.view(), sample.comp_labels(), &weights),
    ))
}

/// The unbiased estimator `Σ_k r_k`.
pub fn free_risk<T: Scalar>(
    sample: &ClassPartitionedSample<T>,
    loss: &Loss,
    model: &Model<T>,
) -> Result<RiskReport<T>> {
    report(sample, loss, model, RiskVariant::Free)
}

/// The non-negative estimator `Σ_k max{0, r_k}`.
pub fn nonneg_risk<T: Scalar>(
    sample: &ClassPartitionedSample<T>,
    loss: &Loss,
    model: &Model<T>,
) -> Result<RiskReport<T>> {
    report(sample, loss, model, RiskVariant::Nonneg)
}

/// Upper bound `(1/B) Σ_b Σ_k max{0, r_k^b}` over minibatches. Each batch is a
/// [`ClassPartitionedSample::subset`] carrying the full-sample priors.
pub fn maxop_batched_risk<T: Scalar>(
    batches: &[ClassPartitionedSample<T>],
    loss: &Loss,
    model: &Model<T>,
) -> Result<T> {
    if batches.is_empty() {
        return Err(Error::Empty("no minibatches".into()));
    }
    let mut total = T::zero();
    for batch in batches {
        if batch.is_empty() {
            return Err(Error::Empty("minibatch has no rows".into()));
        }
        let weights = batch.sample_weights(false)?;
        let scores = model.forward_batch(batch.features())?;
        let losses = loss_matrix(loss, scores.view())?;
        let r = class_terms(losses.view(), batch.comp_labels(), &weights);
        total += r.into_iter().map(|v| v.max(T::zero())).sum::<T>();
    }
    Ok(total / T::from_usize_lossy(batches.len()))
}

/// Value, parameter gradient and kink distance of [`maxop_batched_risk`].
pub fn maxop_batched_gradient<T: Scalar>(
    batches: &[ClassPartitionedSample<T>],
    loss: &Loss,
    model: &Model<T>,
) -> Result<(T, Vec<T>, T)> {
    if batches.is_empty() {
        return Err(Error::Empty("no minibatches".into()));
    }
    let inv_b = T::one() / T::from_usize_lossy(batches.len());
    let mut value = T::zero();
    let mut grad = vec![T::zero(); model.params().len()];
    let mut kink = T::infinity();
    for batch in batches {
        let obj = ClassRiskObjective::for_batch(batch, *loss, Reduction::NonNegative)?;
        let g = model.gradient(batch.features(), &obj)?;
        value += g.evaluation.value;
        kink = kink.min(g.kink);
        for (acc, v) in grad.iter_mut().zip(&g.grad) {
            *acc += *v * inv_b;
        }
    }
    Ok((value * inv_b, grad, kink))
}

/// Risk written through a constant-sum complementary loss.
pub fn corollary2_risk<T: Scalar>(
    sample: &ClassPartitionedSample<T>,
    comp_loss: &ComplementaryLoss,
    model: &Model<T>,
) -> Result<T> {
    comp_loss.binary().check_symmetry()?;
    let scores = model.forward_batch(sample.features())?;
    let obj = Corollary2Objective {
        comp_loss: *comp_loss,
        comp_labels: sample.comp_labels(),
    };
    Ok(obj.evaluate(scores.view())?.value)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `α · (complementary free risk) + (1 - α) · (ordinary empirical risk)`.
pub fn combined_risk<T: Scalar>(
    ordinary: &OrdinaryDataset<T>,
    comp: &ClassPartitionedSample<T>,
    alpha: f64,
    loss: &Loss,
    model: &Model<T>,
) -> Result<T> {
    Ok(combined_risk_gradient(ordinary, comp, alpha, loss, model)?.0)
}

/// Value, parameter gradient and kink distance of [`combined_risk`].
pub fn combined_risk_gradient<T: Scalar>(
    ordinary: &OrdinaryDataset<T>,
    comp: &ClassPartitionedSample<T>,
    alpha: f64,
    loss: &Loss,
    model: &Model<T>,
) -> Result<(T, Vec<T>, T)> {
    check_alpha(alpha)?;
    let a = T::lit(alpha);
    let b = T::one() - a;
    let comp_obj = ClassRiskObjective::for_sample(comp, *loss, Reduction::Free)?;
    let gc = model.gradient(comp.features(), &comp_obj)?;
    let ord_obj = OrdinaryObjective {
        loss: *loss,
        labels: ordinary.labels(),
    };
    let go = model.gradient(ordinary.features(), &ord_obj)?;
    let grad = gc.grad.iter().zip(&go.grad).map(|(&c, &o)| a * c + b * o).collect();
    Ok((
        a * gc.evaluation.value + b * go.evaluation.value,
        grad,
        gc.kink.min(go.kink),
    ))
}
