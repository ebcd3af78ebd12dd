//! Minibatch training, metric emission and model selection.

mod config;
mod sweep;

pub use config::{Estimator, TrainerConfig, FIELDS as CONFIG_FIELDS};
pub use sweep::{select_hyperparameters, CandidateOutcome, SweepResult};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::ForwardObjective;
use crate::data::{ComplementaryDataset, OrdinaryDataset};
use crate::error::{Error, Result};
use crate::losses::{BinaryLoss, ComplementaryLoss};
use crate::model::{Dims, Gradient, Model};
use crate::optim::{halved_lr, Optimizer, StepConfig};
use crate::risk::{
    free_risk, needs_ascent, ClassPartitionedSample, ClassRiskObjective, Corollary2Objective, Reduction,
};
use crate::scalar::Scalar;
use crate::seed;

/// One record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training objective over the epoch's minibatches (before each update).
    pub objective: f64,
    pub train_free_risk: f64,
    pub train_per_class: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_free_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    pub lr: f64,
    pub ascent_steps: usize,
    pub batches: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub forward_clamped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_secs: Option<f64>,
}

/// Final summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_risk: Option<f64>,
    /// Test accuracy of the returned model (best checkpoint when validating, final otherwise).
    pub test_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub epoch: usize,
    pub valid_free_risk: T,
    pub model: Model<T>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub final_model: Model<T>,
    /// Lowest validation free-risk checkpoint (earliest epoch on ties).
    pub best: Option<Checkpoint<T>>,
    pub metrics: Vec<EpochMetrics>,
    pub summary: Summary,
}

impl<T: Scalar> TrainOutcome<T> {
    /// The best checkpoint when validation data was supplied, else the final model.
    pub fn selected_model(&self) -> &Model<T> {
        self.best.as_ref().map_or(&self.final_model, |c| &c.model)
    }
}

/// Fraction of correctly classified samples.
pub fn evaluate_accuracy<T: Scalar>(model: &Model<T>, test: &OrdinaryDataset<T>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let pred = model.predict_batch(test.features())?;
    let hits = pred.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Minibatches for one epoch: a Fisher–Yates shuffle of all rows, then the
/// shuffled rows of each complementary class are dealt round-robin over the
/// batches so every batch sees every class whenever its size allows.
pub fn epoch_batches(
    comp_labels: &[usize],
    classes: usize,
    batch_size: usize,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<usize>> {
    let n = comp_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let batches = n.div_ceil(batch_size.max(1)).max(1);
    let mut by_class = vec![Vec::new(); classes];
    for i in order {
        by_class[comp_labels[i]].push(i);
    }
    let mut out = vec![Vec::with_capacity(batch_size); batches];
    for (slot, i) in by_class.into_iter().flatten().enumerate() {
        out[slot % batches].push(i);
    }
    out
}

fn model_for<T: Scalar>(cfg: &TrainerConfig, input: usize, classes: usize) -> Result<Model<T>> {
    let dims = match cfg.model {
        crate::model::ModelKind::Linear => Dims::linear(input, classes),
        crate::model::ModelKind::Mlp => Dims::mlp(input, cfg.hidden, classes),
    };
    Model::new(cfg.model, dims, seed::derive(cfg.seed, "model-init"))
}

/// Gradient of the configured objective on one batch, and whether to ascend.
fn batch_gradient<T: Scalar>(
    cfg: &TrainerConfig,
    model: &Model<T>,
    batch: &ClassPartitionedSample<T>,
    clamped: &mut usize,
) -> Result<(Gradient<T>, bool)> {
    let x = batch.features();
    match cfg.estimator {
        Estimator::Free | Estimator::Maxop | Estimator::GradientAscent => {
            let reduction = match cfg.estimator {
                Estimator::Free => Reduction::Free,
                Estimator::Maxop => Reduction::NonNegative,
                _ => Reduction::GradientAscent { beta: cfg.beta },
            };
            let obj = ClassRiskObjective::for_batch(batch, cfg.loss.into(), reduction)?;
            let g = model.gradient(x, &obj)?;
            let ascend = cfg.estimator == Estimator::GradientAscent
                && g.evaluation
                    .per_class
                    .as_deref()
                    .is_some_and(|r| needs_ascent(r, cfg.beta));
            Ok((g, ascend))
        }
        Estimator::PcBaseline => {
            let obj = Corollary2Objective {
                comp_loss: ComplementaryLoss::PairwiseComparison(BinaryLoss::new(cfg.pc_binary)),
                comp_labels: batch.comp_labels(),
            };
            Ok((model.gradient(x, &obj)?, false))
        }
        Estimator::ForwardBaseline => {
            let obj = ForwardObjective::new(batch.comp_labels());
            let g = model.gradient(x, &obj)?;
            *clamped += obj.clamped();
            Ok((g, false))
        }
    }
}

/// Runs `cfg.epochs` epochs of minibatch training. `on_epoch` sees each record as it is produced.
pub fn train<T: Scalar>(
    cfg: &TrainerConfig,
    train: &ComplementaryDataset<T>,
    valid: Option<&ComplementaryDataset<T>>,
    test: Option<&OrdinaryDataset<T>>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let classes = train.classes();
    for (name, d) in [
        ("validation", valid.map(|v| (v.dim(), v.classes()))),
        ("test", test.map(|t| (t.dim(), t.classes()))),
    ] {
        if let Some((dim, k)) = d {
            if dim != train.dim() || k != classes {
                return Err(Error::Dimension(format!(
                    "{name} set has d={dim}, K={k}; training set has d={}, K={classes}",
                    train.dim()
                )));
            }
        }
    }
    let sample = ClassPartitionedSample::from_dataset(train, cfg.priors)?;
    let valid_sample = valid
        .map(|v| ClassPartitionedSample::from_dataset(v, cfg.priors))
        .transpose()?;
    let eval_loss = cfg.evaluation_loss();

    let mut model = model_for::<T>(cfg, train.dim(), classes)?;
    let mask = model.weight_mask();
    let mut opt = Optimizer::new(cfg.optimizer, model.params().len(), cfg.momentum);
    let mut rng = seed::rng(cfg.seed, "minibatch-shuffle");
    let start = Instant::now();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint<T>> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let lr = halved_lr(cfg.lr, cfg.lr_halving, epoch);
        let batches = epoch_batches(sample.comp_labels(), classes, cfg.batch_size, &mut rng);
        let mut objective = T::zero();
        let mut ascent_steps = 0;
        let mut clamped = 0;
        for rows in &batches {
            let batch = sample.subset(rows);
            let (g, ascend) = batch_gradient(cfg, &model, &batch, &mut clamped)?;
            let value = g.evaluation.value;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("objective at epoch {epoch}")));
            }
            objective += value;
            let (grad, step_lr) = if ascend {
                ascent_steps += 1;
                (g.grad.iter().map(|&v| -v).collect::<Vec<T>>(), cfg.gamma * lr)
            } else {
                (g.grad, lr)
            };
            let step = StepConfig {
                lr: step_lr,
                weight_decay: cfg.weight_decay,
                decoupled: cfg.decoupled_weight_decay,
            };
            opt.step(model.params_mut(), &grad, Some(&mask), &step)?;
        }

        let train_report = free_risk(&sample, &eval_loss, &model)?;
        let valid_risk = valid_sample
            .as_ref()
            .map(|v| free_risk(v, &eval_loss, &model).map(|r| r.total))
            .transpose()?;
        let test_accuracy = test.map(|t| evaluate_accuracy(&model, t)).transpose()?;
        let record = EpochMetrics {
            epoch,
            objective: (objective / T::from_usize_lossy(batches.len())).as_f64(),
            train_free_risk: train_report.total.as_f64(),
            train_per_class: train_report.per_class.iter().map(|v| v.as_f64()).collect(),
            valid_free_risk: valid_risk.map(|v| v.as_f64()),
            test_accuracy,
            lr,
            ascent_steps,
            batches: batches.len(),
            forward_clamped: (cfg.estimator == Estimator::ForwardBaseline).then_some(clamped),
            wall_clock_secs: cfg.record_wall_clock.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record)?;
        metrics.push(record);

        if let Some(v) = valid_risk {
            if best.as_ref().is_none_or(|b| v < b.valid_free_risk) {
                best = Some(Checkpoint {
                    epoch,
                    valid_free_risk: v,
                    model: model.clone(),
                });
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }

    let final_test_accuracy = metrics.last().and_then(|m| m.test_accuracy);
    let test_accuracy = match (&best, test) {
        (Some(b), Some(t)) => Some(evaluate_accuracy(&b.model, t)?),
        _ => final_test_accuracy,
    };
    let summary = Summary {
        epochs_run: metrics.len(),
        best_epoch: best.as_ref().map(|b| b.epoch),
        best_valid_risk: best.as_ref().map(|b| b.valid_free_risk.as_f64()),
        test_accuracy,
        final_test_accuracy,
    };
    Ok(TrainOutcome {
        final_model: model,
        best,
        metrics,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_complementary, synth_gaussians};
    use crate::model::ModelKind;

    fn synth(seed: u64, n: usize) -> (ComplementaryDataset<f64>, OrdinaryDataset<f64>) {
        let ds = synth_gaussians::<f64>(3, n, 2, 4.0, seed).unwrap();
        let comp = generate_complementary(&ds, seed + 1).unwrap();
        (comp, ds)
    }

    fn small_cfg(estimator: Estimator) -> TrainerConfig {
        TrainerConfig {
            estimator,
            model: ModelKind::Linear,
            lr: 0.05,
            batch_size: 64,
            epochs: 10,
            seed: 5,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn batches_cover_rows_and_are_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let mut rng = seed::rng(1, "t");
        let b = epoch_batches(&labels, 4, 16, &mut rng);
        assert_eq!(b.len(), 7);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.len() >= 14 && batch.len() <= 15);
            for k in 0..4 {
                assert!(batch.iter().any(|&i| labels[i] == k));
            }
        }
    }

    #[test]
    fn accuracy_fixture() {
        let x = ndarray::array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let ds = OrdinaryDataset::new(x, vec![0, 1, 1, 1, 0], 2).unwrap();
        let m = Model::from_params(
            ModelKind::Linear,
            Dims::linear(2, 2),
            0,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        // predictions: 0, 1, 0, 1, 0 (tie -> lowest index)
        assert_eq!(evaluate_accuracy(&m, &ds).unwrap(), 0.8);
    }

    #[test]
    fn one_record_per_epoch_and_deterministic() {
        let (comp, ds) = synth(1, 600);
        for est in [
            Estimator::Free,
            Estimator::Maxop,
            Estimator::GradientAscent,
            Estimator::PcBaseline,
            Estimator::ForwardBaseline,
        ] {
            let cfg = small_cfg(est);
            let mut seen = 0;
            let a = train(&cfg, &comp, Some(&comp), Some(&ds), |_| {
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, cfg.epochs);
            let b = train(&cfg, &comp, Some(&comp), Some(&ds), |_| Ok(())).unwrap();
            assert_eq!(a.metrics, b.metrics, "{est:?}");
            assert_eq!(a.final_model, b.final_model);
            assert!(a.summary.test_accuracy.unwrap() > 0.8, "{est:?}: {:?}", a.summary);
        }
    }

    #[test]
    fn free_training_loss_decreases_early() {
        let (comp, _) = synth(3, 900);
        let cfg = small_cfg(Estimator::Free);
        let out = train(&cfg, &comp, None, None, |_| Ok(())).unwrap();
        let r: Vec<f64> = out.metrics.iter().map(|m| m.train_free_risk).collect();
        assert!(r[9] < r[0], "{r:?}");
        assert!(out.best.is_none());
    }

    #[test]
    fn ascent_update_does_not_decrease_squashed_objective() {
        let (comp, _) = synth(4, 120);
        let sample = ClassPartitionedSample::from_dataset(&comp, Default::default()).unwrap();
        let mut checked = 0;
        for seed in 0..40u64 {
            let m = Model::<f64>::new(ModelKind::Mlp, Dims::mlp(2, 8, 3), seed).unwrap();
            let mut rng = seed::rng(seed, "batch");
            let rows = &epoch_batches(sample.comp_labels(), 3, 12, &mut rng)[0];
            let batch = sample.subset(rows);
            let cfg = TrainerConfig {
                estimator: Estimator::GradientAscent,
                ..TrainerConfig::default()
            };
            let (g, ascend) = batch_gradient(&cfg, &m, &batch, &mut 0).unwrap();
            if !ascend {
                continue;
            }
            let before = g.evaluation.value;
            let mut moved = m.clone();
            let theta: Vec<f64> = m.params().iter().zip(&g.grad).map(|(t, d)| t + 1e-4 * d).collect();
            moved.set_params(&theta).unwrap();
            let obj = ClassRiskObjective::for_batch(&batch, cfg.loss.into(), Reduction::GradientAscent { beta: 0.0 })
                .unwrap();
            let after = moved.gradient(batch.features(), &obj).unwrap();
            let r = after.evaluation.per_class.unwrap();
            let squashed: f64 = r.iter().map(|v| v.min(0.0)).sum();
            assert!(squashed >= before - 1e-15, "seed {seed}: {before} -> {squashed}");
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn patience_stops_early() {
        let (comp, _) = synth(6, 300);
        let (valid, _) = synth(16, 30);
        let cfg = TrainerConfig {
            epochs: 200,
            lr: 0.5,
            patience: Some(3),
            ..small_cfg(Estimator::Maxop)
        };
        let out = train(&cfg, &comp, Some(&valid), None, |_| Ok(())).unwrap();
        assert!(out.metrics.len() < 200);
        let best = out.summary.best_epoch.unwrap();
        assert_eq!(out.metrics.len(), best + 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (comp, _) = synth(7, 60);
        let bad = TrainerConfig {
            lr: 0.0,
            ..small_cfg(Estimator::Free)
        };
        assert!(matches!(
            train(&bad, &comp, None, None, |_| Ok(())),
            Err(Error::ConfigFields(_))
        ));
        let other = generate_complementary(&synth_gaussians::<f64>(3, 30, 4, 1.0, 1).unwrap(), 1).unwrap();
        assert!(train(&small_cfg(Estimator::Free), &comp, Some(&other), None, |_| Ok(())).is_err());
    }

    #[test]
    fn f32_training_runs() {
        let ds = synth_gaussians::<f32>(3, 600, 2, 4.0, 2).unwrap();
        let comp = generate_complementary(&ds, 3).unwrap();
        let cfg = TrainerConfig {
            epochs: 30,
            ..small_cfg(Estimator::GradientAscent)
        };
        let out = train(&cfg, &comp, None, Some(&ds), |_| Ok(())).unwrap();
        assert!(out.summary.test_accuracy.unwrap() > 0.8, "{:?}", out.summary);
    }
}
