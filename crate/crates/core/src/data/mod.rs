//! Datasets, complementary-label synthesis and splitting.
//!
//! Class labels are 0-based inside the library. Files on disk use 1..=K; the
//! conversion happens only in the loaders and writers.

mod csv_io;
mod idx;
mod synth;

pub use csv_io::{
    load_csv, read_complementary_csv, write_complementary_csv, write_ordinary_csv, CsvSchema, LabelColumn,
};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synth::{gaussian_means, synth_gaussians};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

fn validate_features<T: Scalar>(features: &Array2<T>, rows: usize) -> Result<()> {
    if features.nrows() != rows {
        return Err(Error::Dimension(format!(
            "{} feature rows but {rows} labels",
            features.nrows()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dataset contains a non-finite feature".into()));
    }
    Ok(())
}

fn validate_labels(labels: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("need K >= 2 classes, got {classes}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {} outside 1..={classes}", bad + 1)));
    }
    Ok(())
}

fn hash_content<T: Scalar>(features: &Array2<T>, labels: &[usize], classes: usize) -> String {
    let mut h = Sha256::new();
    h.update((features.nrows() as u64).to_le_bytes());
    h.update((features.ncols() as u64).to_le_bytes());
    h.update((classes as u64).to_le_bytes());
    for v in features.iter() {
        h.update(v.as_f64().to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Patterns with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinaryDataset<T> {
    features: Array2<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> OrdinaryDataset<T> {
    /// `labels` are 0-based.
    pub fn new(features: Array2<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        validate_features(&features, labels.len())?;
        validate_labels(&labels, classes)?;
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// SHA-256 over dimensions, features (as f64) and labels.
    pub fn content_hash(&self) -> String {
        hash_content(&self.features, &self.labels, self.classes)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Where a complementary dataset came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Content hash of the ordinary dataset the labels were drawn from.
    pub source_hash: String,
    pub seed: u64,
}

/// Patterns each carrying one class they do *not* belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementaryDataset<T> {
    features: Array2<T>,
    comp_labels: Vec<usize>,
    classes: usize,
    provenance: Provenance,
}

impl<T: Scalar> ComplementaryDataset<T> {
    pub fn new(features: Array2<T>, comp_labels: Vec<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        validate_features(&features, comp_labels.len())?;
        validate_labels(&comp_labels, classes)?;
        Ok(Self {
            features,
            comp_labels,
            classes,
            provenance,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn comp_labels(&self) -> &[usize] {
        &self.comp_labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.comp_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comp_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn content_hash(&self) -> String {
        hash_content(&self.features, &self.comp_labels, self.classes)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            comp_labels: rows.iter().map(|&i| self.comp_labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    pub(crate) fn into_parts(self) -> (Array2<T>, Vec<usize>, usize) {
        (self.features, self.comp_labels, self.classes)
    }
}

/// Draws one complementary label per pattern uniformly from the K-1 wrong classes.
///
/// Pattern `i` uses ChaCha stream `i` of a key derived from `seed`, so each
/// label depends only on `(seed, i, y_i)`.
pub fn generate_complementary<T: Scalar>(ds: &OrdinaryDataset<T>, seed: u64) -> Result<ComplementaryDataset<T>> {
    let k = ds.classes();
    if k < 2 {
        return Err(Error::Config(format!("need K >= 2 classes, got {k}")));
    }
    let key = seed::derive(seed, "complementary-labels");
    let comp_labels = ds
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(i as u64);
            let r = rng.random_range(0..k - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        })
        .collect();
    ComplementaryDataset::new(
        ds.features.clone(),
        comp_labels,
        k,
        Provenance {
            source_hash: ds.content_hash(),
            seed,
        },
    )
}

/// Row selection shared by both dataset kinds.
pub trait Rows: Sized {
    fn row_count(&self) -> usize;
    fn select_rows(&self, rows: &[usize]) -> Self;
}

impl<T: Scalar> Rows for OrdinaryDataset<T> {
    fn row_count(&self) -> usize {
        self.len()
    }
    fn select_rows(&self, rows: &[usize]) -> Self {
        self.select(rows)
    }
}

impl<T: Scalar> Rows for ComplementaryDataset<T> {
    fn row_count(&self) -> usize {
        self.len()
    }
    fn select_rows(&self, rows: &[usize]) -> Self {
        self.select(rows)
    }
}

/// Index sets of a seeded shuffled split: the first `round(ratio * n)` shuffled
/// indices form the first part.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, "split"));
    let cut = (ratio * n as f64).round() as usize;
    let second = idx.split_off(cut.min(n));
    Ok((idx, second))
}

/// Deterministic shuffled split into `(train, validation)`.
pub fn split<D: Rows>(ds: &D, ratio: f64, seed: u64) -> Result<(D, D)> {
    let (a, b) = split_indices(ds.row_count(), ratio, seed)?;
    Ok((ds.select_rows(&a), ds.select_rows(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy(n: usize, classes: usize) -> OrdinaryDataset<f64> {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        OrdinaryDataset::new(features, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn binary_complement_is_the_other_class() {
        let ds = toy(50, 2);
        let comp = generate_complementary(&ds, 3).unwrap();
        for (y, yb) in ds.labels().iter().zip(comp.comp_labels()) {
            assert_eq!(*yb, 1 - y);
        }
    }

    #[test]
    fn complementary_is_deterministic_and_never_true() {
        let ds = toy(500, 5);
        let a = generate_complementary(&ds, 11).unwrap();
        let b = generate_complementary(&ds, 11).unwrap();
        let c = generate_complementary(&ds, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.comp_labels(), c.comp_labels());
        assert!(ds.labels().iter().zip(a.comp_labels()).all(|(y, yb)| y != yb));
        assert_eq!(a.provenance().source_hash, ds.content_hash());
    }

    /// Pearson χ² over the (y, ȳ) table of 10⁶ draws; 8 degrees of freedom,
    /// rejected above the 0.999 quantile.
    #[test]
    fn complementary_labels_are_uniform_over_wrong_classes() {
        const K: usize = 4;
        const N: usize = 1_000_000;
        let labels: Vec<usize> = (0..N).map(|i| i % K).collect();
        let ds = OrdinaryDataset::new(Array2::<f32>::zeros((N, 1)), labels, K).unwrap();
        let comp = generate_complementary(&ds, 2024).unwrap();
        let mut table = [[0usize; K]; K];
        for (&y, &yb) in ds.labels().iter().zip(comp.comp_labels()) {
            table[y][yb] += 1;
        }
        let expected = (N / K) as f64 / (K - 1) as f64;
        let mut chi2 = 0.0;
        for (y, row) in table.iter().enumerate() {
            assert_eq!(row[y], 0);
            for (_, &c) in row.iter().enumerate().filter(|&(yb, _)| yb != y) {
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        assert!(chi2 < 26.12, "chi-square {chi2}");
    }

    #[test]
    fn label_validation() {
        let f = Array2::<f64>::zeros((2, 1));
        assert!(OrdinaryDataset::new(f.clone(), vec![0, 3], 3).is_err());
        assert!(OrdinaryDataset::new(f.clone(), vec![0], 3).is_err());
        assert!(OrdinaryDataset::new(f, vec![0, 0], 1).is_err());
        let nan = Array2::from_elem((1, 1), f64::NAN);
        assert!(OrdinaryDataset::new(nan, vec![0], 2).is_err());
    }

    #[test]
    fn split_examples() {
        let ds = toy(100, 3);
        let (a, b) = split(&ds, 0.9, 5).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        let (a2, _) = split(&ds, 0.9, 5).unwrap();
        assert_eq!(a, a2);
        let (ia, ib) = split_indices(100, 0.9, 5).unwrap();
        let mut all: Vec<usize> = ia.iter().chain(&ib).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split(&ds, 1.0, 5).is_err());
        assert!(split(&ds, 0.0, 5).is_err());
    }

    #[test]
    fn complementary_split_keeps_provenance() {
        let comp = generate_complementary(&toy(40, 4), 9).unwrap();
        let (a, b) = split(&comp, 0.75, 1).unwrap();
        assert_eq!(a.provenance(), comp.provenance());
        assert_eq!(b.provenance(), comp.provenance());
        assert_eq!(a.len() + b.len(), 40);
    }
}
