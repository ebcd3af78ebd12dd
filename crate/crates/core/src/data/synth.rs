use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::OrdinaryDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

/// Cluster centres with every pair of (adjacent) centres `separation` apart.
///
/// With `d >= K-1` the centres are the vertices of a regular simplex. With
/// `2 <= d < K-1` they sit on a regular polygon in the first two coordinates,
/// and with `d = 1` on an evenly spaced line.
pub fn gaussian_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut means = vec![vec![0.0; dim]; classes];
    if classes < 2 || dim == 0 {
        return means;
    }
    if dim + 1 >= classes {
        // Helmert basis of the hyperplane orthogonal to 1; vertex k is e_k
        // expressed in that basis, scaled so that |e_a - e_b| = sqrt(2) -> separation.
        let scale = separation / 2f64.sqrt();
        for j in 1..classes {
            let norm = ((j * (j + 1)) as f64).sqrt();
            for (k, mean) in means.iter_mut().enumerate() {
                let coord = match k.cmp(&j) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => -(j as f64),
                    std::cmp::Ordering::Greater => 0.0,
                };
                mean[j - 1] = scale * coord / norm;
            }
        }
    } else if dim >= 2 {
        let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
        for (k, mean) in means.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            mean[0] = radius * angle.cos();
            mean[1] = radius * angle.sin();
        }
    } else {
        let mid = (classes - 1) as f64 / 2.0;
        for (k, mean) in means.iter_mut().enumerate() {
            mean[0] = (k as f64 - mid) * separation;
        }
    }
    means
}

/// `n` samples from K unit-variance spherical Gaussians with equal priors.
///
/// Labels are balanced (`n / K` per class, remainder spread over the first
/// classes) and shuffled.
pub fn synth_gaussians<T: Scalar>(
    classes: usize,
    n: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<OrdinaryDataset<T>> {
    if classes < 1 || n < 1 || dim < 1 {
        return Err(Error::Config(format!(
            "synthetic data needs K, n, d >= 1 (got K={classes}, n={n}, d={dim})"
        )));
    }
    let means = gaussian_means(classes, dim, separation);
    let mut rng = seed::rng(seed, "synth-gaussians");
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Array2::<T>::zeros((n, dim));
    for (mut row, &y) in features.rows_mut().into_iter().zip(&labels) {
        for (v, &m) in row.iter_mut().zip(&means[y]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::lit(m + z);
        }
    }
    // A one-class dataset is still valid input for this generator; the
    // dataset type itself insists on K >= 2, so pad the class count.
    OrdinaryDataset::new(features, labels, classes.max(2))
}
