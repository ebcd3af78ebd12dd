use rayon::prelude::*;
use serde::Serialize;

use super::{train, Checkpoint, TrainerConfig};
use crate::data::{ComplementaryDataset, OrdinaryDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// What happened to one grid candidate.
#[derive(Clone, Debug, Serialize)]
pub struct CandidateOutcome {
    pub index: usize,
    pub config: TrainerConfig,
    pub best_epoch: Option<usize>,
    pub valid_free_risk: Option<f64>,
    /// Test accuracy of the candidate's best checkpoint.
    pub test_accuracy: Option<f64>,
    /// Training error message when the candidate failed.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepResult<T> {
    pub candidates: Vec<CandidateOutcome>,
    /// Grid index of the selected candidate.
    pub selected: usize,
    pub checkpoint: Checkpoint<T>,
    /// Spearman correlation between validation free-risk and test error across
    /// successful candidates; `None` without test labels or with fewer than two candidates.
    pub rank_correlation: Option<f64>,
}

/// Trains every candidate and returns the global minimizer of validation
/// free-risk over all epochs of all candidates. Ties go to the earlier epoch,
/// then to the lower grid index. Failing candidates are recorded and skipped.
pub fn select_hyperparameters<T: Scalar>(
    grid: &[TrainerConfig],
    train_set: &ComplementaryDataset<T>,
    valid: &ComplementaryDataset<T>,
    test: Option<&OrdinaryDataset<T>>,
    jobs: usize,
) -> Result<SweepResult<T>> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let run = |cfg: &TrainerConfig| train(cfg, train_set, Some(valid), test, |_| Ok(()));
    let results: Vec<_> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| grid.par_iter().map(run).collect())
    } else {
        grid.iter().map(run).collect()
    };

    let mut candidates = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, Checkpoint<T>)> = None;
    for (index, (cfg, res)) in grid.iter().zip(results).enumerate() {
        let mut row = CandidateOutcome {
            index,
            config: cfg.clone(),
            best_epoch: None,
            valid_free_risk: None,
            test_accuracy: None,
            error: None,
        };
        match res {
            Ok(out) => {
                row.best_epoch = out.summary.best_epoch;
                row.valid_free_risk = out.summary.best_valid_risk;
                row.test_accuracy = out.summary.test_accuracy;
                if let Some(ck) = out.best {
                    let better = best.as_ref().is_none_or(|(_, b)| {
                        ck.valid_free_risk < b.valid_free_risk
                            || (ck.valid_free_risk == b.valid_free_risk && ck.epoch < b.epoch)
                    });
                    if better {
                        best = Some((index, ck));
                    }
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        candidates.push(row);
    }
    let Some((selected, checkpoint)) = best else {
        return Err(Error::Config("every grid candidate failed".into()));
    };

    let pairs: Vec<(f64, f64)> = candidates
        .iter()
        .filter_map(|c| Some((c.valid_free_risk?, 1.0 - c.test_accuracy?)))
        .collect();
    let rank_correlation = (pairs.len() >= 2).then(|| {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        spearman(&a, &b)
    });
    Ok(SweepResult {
        candidates,
        selected,
        checkpoint,
        rank_correlation,
    })
}

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = mean;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
