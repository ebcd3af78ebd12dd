//! Self-checks of the estimator identities, runnable from the command line.
//!
//! Each check reports the largest deviation it observed against a tolerance.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::ForwardObjective;
use crate::data::OrdinaryDataset;
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradient, GradCheckConfig};
use crate::losses::{
    complement_transform, eta_from_etabar, BinaryLoss, ComplementaryLoss, Loss, LossKind, LossVector, TransitionMatrix,
};
use crate::model::{Dims, Model, ModelKind};
use crate::risk::{
    combined_risk, combined_risk_gradient, corollary2_risk, free_risk, maxop_batched_gradient, maxop_batched_risk,
    nonneg_risk, ClassPartitionedSample, ClassRiskObjective, Corollary2Objective, PriorMode, Reduction,
};
use crate::seed;

/// Agreement tolerance for exact identities.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Unbiasedness,
    Gradients,
    Corollary2,
    Bounds,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Unbiasedness, Suite::Gradients, Suite::Corollary2, Suite::Bounds];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Unbiasedness => "unbiasedness",
            Suite::Gradients => "gradients",
            Suite::Corollary2 => "corollary2",
            Suite::Bounds => "bounds",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    /// Number of random instances examined.
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<12} {:<40} cases={:<6} max_dev={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.cases,
            self.max_deviation,
            self.tolerance
        )
    }
}

/// Accumulates deviations for one named check.
struct Tracker {
    suite: Suite,
    name: String,
    cases: usize,
    max: f64,
    tol: f64,
    broken: bool,
}

impl Tracker {
    fn new(suite: Suite, name: impl Into<String>, tol: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            cases: 0,
            max: 0.0,
            tol,
            broken: false,
        }
    }

    fn record(&mut self, deviation: f64) {
        self.cases += 1;
        if deviation.is_nan() {
            self.broken = true;
        }
        self.max = self.max.max(deviation);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            suite: self.suite,
            passed: !self.broken && self.cases > 0 && self.max <= self.tol,
            name: self.name,
            cases: self.cases,
            max_deviation: self.max,
            tolerance: self.tol,
        }
    }
}

/// Options for [`run_suite`].
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Replace the complement transform by a deliberately wrong one (negative control).
    pub mutate: bool,
}

pub fn run_suite(suite: Suite, opts: CheckOptions) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Unbiasedness => unbiasedness(opts),
        Suite::Gradients => gradients(opts),
        Suite::Corollary2 => corollary2(opts),
        Suite::Bounds => bounds(opts),
    }
}

fn random_model(kind: ModelKind, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    let dims = match kind {
        ModelKind::Linear => Dims::linear(d, k),
        ModelKind::Mlp => Dims::mlp(d, 4, k),
    };
    let n = Model::<f64>::param_count(kind, dims);
    let params = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Model::from_params(kind, dims, 0, params)
}

fn random_features(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
}

/// A finite instance space with rational marginal `a_x / A` and class
/// posteriors `b_k(x) / B` (common denominator `B` for every `x`).
pub struct FiniteWorld {
    pub classes: usize,
    pub features: Array2<f64>,
    pub marginal_weights: Vec<u64>,
    pub posterior_counts: Vec<Vec<u64>>,
    pub denominator: u64,
}

impl FiniteWorld {
    pub fn random(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let classes = rng.random_range(2..=5);
        let size = rng.random_range(1..=6);
        let denominator = 12u64;
        let posterior_counts = (0..size)
            .map(|_| {
                let mut b = vec![0u64; classes];
                for _ in 0..denominator {
                    b[rng.random_range(0..classes)] += 1;
                }
                b
            })
            .collect();
        Self {
            classes,
            features: random_features(size, dim, rng),
            marginal_weights: (0..size).map(|_| rng.random_range(1..=5)).collect(),
            posterior_counts,
            denominator,
        }
    }

    pub fn size(&self) -> usize {
        self.marginal_weights.len()
    }

    pub fn marginal(&self, x: usize) -> f64 {
        self.marginal_weights[x] as f64 / self.marginal_weights.iter().sum::<u64>() as f64
    }

    pub fn eta(&self, x: usize) -> Vec<f64> {
        self.posterior_counts[x]
            .iter()
            .map(|&b| b as f64 / self.denominator as f64)
            .collect()
    }

    /// `R(g; ℓ) = Σ_x M(x) Σ_k η_k(x) ℓ(k, g(x))`.
    pub fn ordinary_risk(&self, loss: &Loss, model: &Model<f64>) -> Result<f64> {
        let scores = model.forward_batch(self.features.view())?;
        let mut total = 0.0;
        for x in 0..self.size() {
            let l = loss.vector(scores.row(x).as_slice().expect("row"))?;
            let inner: f64 = self.eta(x).iter().zip(l.values()).map(|(e, v)| e * v).sum();
            total += self.marginal(x) * inner;
        }
        Ok(total)
    }

    /// Every `(x, ȳ)` pair repeated in proportion to `M(x) η̄_ȳ(x)`.
    pub fn complementary_population(&self) -> Result<ClassPartitionedSample<f64>> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for x in 0..self.size() {
            for ybar in 0..self.classes {
                let count = self.marginal_weights[x] * (self.denominator - self.posterior_counts[x][ybar]);
                for _ in 0..count {
                    rows.push(x);
                    labels.push(ybar);
                }
            }
        }
        let features = self.features.select(ndarray::Axis(0), &rows);
        ClassPartitionedSample::new(features, labels, self.classes, PriorMode::Empirical)
    }

    /// Every `(x, y)` pair repeated in proportion to `M(x) η_y(x)`.
    pub fn ordinary_population(&self) -> Result<OrdinaryDataset<f64>> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for x in 0..self.size() {
            for y in 0..self.classes {
                for _ in 0..self.marginal_weights[x] * self.posterior_counts[x][y] {
                    rows.push(x);
                    labels.push(y);
                }
            }
        }
        OrdinaryDataset::new(self.features.select(ndarray::Axis(0), &rows), labels, self.classes)
    }
}

fn transform(ell: &LossVector<f64>, mutate: bool) -> Result<Vec<f64>> {
    if mutate {
        let k = ell.classes() as f64;
        let sum: f64 = ell.values().iter().sum();
        return Ok(ell.values().iter().map(|v| -k * v + sum).collect());
    }
    Ok(complement_transform(ell)?.into_inner())
}

const MODEL_KINDS: [ModelKind; 2] = [ModelKind::Linear, ModelKind::Mlp];

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Linear => "linear",
        ModelKind::Mlp => "mlp",
    }
}

fn unbiasedness(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = seed::rng(opts.seed, "check-unbiasedness");
    let worlds: Vec<FiniteWorld> = (0..25).map(|_| FiniteWorld::random(&mut rng, 3)).collect();
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let loss = Loss::from(kind);
        for mk in MODEL_KINDS {
            let tag = format!("{}/{}", kind.name(), model_name(mk));
            let mut analytic = Tracker::new(Suite::Unbiasedness, format!("expectation/{tag}"), IDENTITY_TOL);
            let mut replicated = Tracker::new(Suite::Unbiasedness, format!("population/{tag}"), IDENTITY_TOL);
            let mut combined = Tracker::new(Suite::Unbiasedness, format!("combined/{tag}"), IDENTITY_TOL);
            for w in &worlds {
                let model = random_model(mk, 3, w.classes, &mut rng)?;
                let exact = w.ordinary_risk(&loss, &model)?;
                let tmat = TransitionMatrix::<f64>::uniform(w.classes)?;
                let scores = model.forward_batch(w.features.view())?;
                let mut expectation = 0.0;
                for x in 0..w.size() {
                    let etabar = tmat.apply(&w.eta(x))?;
                    let lbar = transform(&loss.vector(scores.row(x).as_slice().expect("row"))?, opts.mutate)?;
                    expectation += w.marginal(x) * etabar.iter().zip(&lbar).map(|(p, l)| p * l).sum::<f64>();
                }
                analytic.record((expectation - exact).abs());
                let pop = w.complementary_population()?;
                replicated.record((free_risk(&pop, &loss, &model)?.total - exact).abs());
                let ord = w.ordinary_population()?;
                combined.record((combined_risk(&ord, &pop, 0.5, &loss, &model)? - exact).abs());
            }
            out.extend([analytic.finish(), replicated.finish(), combined.finish()]);
        }
    }
    Ok(out)
}

/// A small random complementary sample with every class present.
fn small_sample(rng: &mut ChaCha8Rng, d: usize) -> Result<ClassPartitionedSample<f64>> {
    let k = rng.random_range(2..=4);
    let n = rng.random_range(k..=3 * k + 2);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for l in labels.iter_mut().skip(k) {
        *l = rng.random_range(0..k);
    }
    ClassPartitionedSample::new(random_features(n, d, rng), labels, k, PriorMode::Empirical)
}

fn gradients(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    let cfg = GradCheckConfig::default();
    let mut rng = seed::rng(opts.seed, "check-gradients");
    let names = ["free", "maxop", "corollary2_pc", "forward", "combined"];
    let mut out = Vec::new();
    for (oi, name) in names.iter().enumerate() {
        let mut t = Tracker::new(Suite::Gradients, name.to_string(), cfg.tolerance);
        let mut attempts = 0;
        while t.cases < 60 && attempts < 600 {
            attempts += 1;
            let d = 3;
            let sample = small_sample(&mut rng, d)?;
            let k = sample.classes();
            let mk = MODEL_KINDS[attempts % 2];
            let model = random_model(mk, d, k, &mut rng)?;
            let loss = Loss::from(LossKind::ALL[rng.random_range(0..LossKind::ALL.len())]);
            let ord = OrdinaryDataset::new(
                random_features(sample.len(), d, &mut rng),
                (0..sample.len()).map(|_| rng.random_range(0..k)).collect(),
                k,
            )?;
            let half = sample.len() / 2;
            let rows: Vec<usize> = (0..sample.len()).collect();
            let batches = [sample.subset(&rows[..half.max(1)]), sample.subset(&rows[half.max(1)..])];
            let batches: Vec<_> = batches.into_iter().filter(|b| !b.is_empty()).collect();
            let eval = |m: &Model<f64>| -> Result<(f64, Vec<f64>, f64)> {
                let x = sample.features();
                match oi {
                    0 => {
                        let obj = ClassRiskObjective::for_sample(&sample, loss, Reduction::Free)?;
                        let g = m.gradient(x, &obj)?;
                        Ok((g.evaluation.value, g.grad, g.kink))
                    }
                    1 => maxop_batched_gradient(&batches, &loss, m),
                    2 => {
                        let obj = Corollary2Objective {
                            comp_loss: ComplementaryLoss::PairwiseComparison(BinaryLoss::Sigmoid),
                            comp_labels: sample.comp_labels(),
                        };
                        let g = m.gradient(x, &obj)?;
                        Ok((g.evaluation.value, g.grad, g.kink))
                    }
                    3 => {
                        let obj = ForwardObjective::new(sample.comp_labels());
                        let g = m.gradient(x, &obj)?;
                        Ok((g.evaluation.value, g.grad, g.kink))
                    }
                    _ => combined_risk_gradient(&ord, &sample, 0.3, &loss, m),
                }
            };
            let (_, grad, kink) = eval(&model)?;
            if kink < cfg.kink_margin {
                continue;
            }
            let rep = check_gradient(
                model.params(),
                &grad,
                |theta| {
                    let mut m = model.clone();
                    m.set_params(theta)?;
                    Ok(eval(&m)?.0)
                },
                &cfg,
            )?;
            t.record(rep.relative_error);
        }
        out.push(t.finish());
    }
    Ok(out)
}

fn corollary2(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = seed::rng(opts.seed, "check-corollary2");
    let mut out = Vec::new();
    for binary in [BinaryLoss::Ramp, BinaryLoss::Sigmoid] {
        for comp in [
            ComplementaryLoss::OneVersusAll(binary),
            ComplementaryLoss::PairwiseComparison(binary),
        ] {
            let ordinary = comp.ordinary();
            let mut risk = Tracker::new(Suite::Corollary2, format!("risk/{}", ordinary.name()), IDENTITY_TOL);
            let mut sums = Tracker::new(
                Suite::Corollary2,
                format!("constants/{}", ordinary.name()),
                IDENTITY_TOL,
            );
            for _ in 0..1000 {
                let sample = small_sample(&mut rng, 2)?;
                let k = sample.classes();
                let model = random_model(ModelKind::Linear, 2, k, &mut rng)?;
                let free = free_risk(&sample, &ordinary, &model)?.total;
                risk.record((free - corollary2_risk(&sample, &comp, &model)?).abs());

                let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
                let (m1, m2): (f64, f64) = comp.constants(k);
                let mut total = 0.0;
                for kb in 0..k {
                    let lbar = comp.value(kb, &z)?;
                    total += lbar;
                    sums.record((lbar + ordinary.value(kb, &z)? - m2).abs());
                }
                sums.record((total - m1).abs());
            }
            out.extend([risk.finish(), sums.finish()]);
        }
    }
    Ok(out)
}

fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn bounds(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = seed::rng(opts.seed, "check-bounds");
    let mut nonneg = Tracker::new(Suite::Bounds, "nonneg_at_least_zero", 0.0);
    let mut over_free = Tracker::new(Suite::Bounds, "nonneg_at_least_free", 0.0);
    for _ in 0..10_000 {
        let sample = small_sample(&mut rng, 2)?;
        let model = random_model(ModelKind::Linear, 2, sample.classes(), &mut rng)?;
        let loss = Loss::from(LossKind::ALL[rng.random_range(0..LossKind::ALL.len())]);
        let nn = nonneg_risk(&sample, &loss, &model)?.total;
        let free = free_risk(&sample, &loss, &model)?.total;
        nonneg.record((-nn).max(0.0));
        over_free.record((free - nn).max(0.0));
    }

    let mut maxop = Tracker::new(Suite::Bounds, "maxop_at_least_pooled_nonneg", 0.0);
    for _ in 0..100 {
        let k = 3;
        let b = 4;
        // Class-balanced partition: each batch holds |X_k| / B samples of class k,
        // so the pooled class terms are exactly the batch average.
        let per_class: Vec<usize> = (0..k).map(|_| b * rng.random_range(1..=3)).collect();
        let labels: Vec<usize> = per_class.iter().enumerate().flat_map(|(c, &m)| vec![c; m]).collect();
        let n = labels.len();
        let sample = ClassPartitionedSample::new(random_features(n, 2, &mut rng), labels, k, PriorMode::Empirical)?;
        let model = random_model(ModelKind::Mlp, 2, k, &mut rng)?;
        let mut batches_rows = vec![Vec::new(); b];
        for group in sample.groups() {
            let mut g = group.clone();
            rand::seq::SliceRandom::shuffle(g.as_mut_slice(), &mut rng);
            for (j, i) in g.into_iter().enumerate() {
                batches_rows[j % b].push(i);
            }
        }
        let batches: Vec<_> = batches_rows.iter().map(|r| sample.subset(r)).collect();
        let loss = Loss::from(LossKind::ALL[rng.random_range(0..LossKind::ALL.len())]);
        let m = maxop_batched_risk(&batches, &loss, &model)?;
        let pooled = nonneg_risk(&sample, &loss, &model)?.total;
        maxop.record((pooled - m - 1e-12).max(0.0));
    }

    let mut inversion = Tracker::new(Suite::Bounds, "eta_inversion", IDENTITY_TOL);
    for i in 0..1000 {
        let k = 2 + i % 9;
        let eta = random_simplex(k, &mut rng);
        let etabar = TransitionMatrix::<f64>::uniform(k)?.apply(&eta)?;
        let back = eta_from_etabar(&etabar)?;
        inversion.record(back.iter().zip(&eta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(vec![
        nonneg.finish(),
        over_free.finish(),
        maxop.finish(),
        inversion.finish(),
    ])
}

/// Runs every suite in order.
pub fn run_all(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s, opts)?);
    }
    if out.is_empty() {
        return Err(Error::Empty("no checks ran".into()));
    }
    Ok(out)
}
