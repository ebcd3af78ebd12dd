//! CSV ingestion and the complementary-dataset CSV container.
//!
//! A complementary dataset file starts with one metadata line, followed by an
//! ordinary CSV header and one row per pattern:
//!
//! ```text
//! # complementary classes=10 seed=42 source=<sha256 of the ordinary dataset>
//! comp_label,x1,x2,...,xd
//! 3,0.0,0.5,...
//! ```
//!
//! Labels are 1-based on disk. Feature values are written with the shortest
//! representation that round-trips exactly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;

use super::{ComplementaryDataset, OrdinaryDataset, Provenance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const COMP_MAGIC: &str = "# complementary";

/// Which column holds the (1-based) class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Layout of an ordinary CSV dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub delimiter: u8,
    pub has_header: bool,
    pub label_column: LabelColumn,
    /// Number of classes; inferred as the largest label when absent.
    pub classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
            label_column: LabelColumn::Index(0),
            classes: None,
        }
    }
}

fn csv_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_label(cell: &str, path: &Path, line: u64) -> Result<usize> {
    let label: usize = cell
        .trim()
        .parse()
        .map_err(|_| csv_err(path, line, format!("label `{cell}` is not a positive integer")))?;
    if label == 0 {
        return Err(csv_err(path, line, "labels are 1-based; found 0"));
    }
    Ok(label - 1)
}

struct Table {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

fn read_table<R: std::io::Read>(
    reader: R,
    path: &Path,
    delimiter: u8,
    has_header: bool,
    label_column: &LabelColumn,
    line_offset: u64,
) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .from_reader(reader);
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(csv_err(
                    path,
                    line_offset + 1,
                    "label column by name needs a header row",
                ));
            }
            let headers = rdr
                .headers()
                .map_err(|e| csv_err(path, line_offset + 1, e.to_string()))?;
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| csv_err(path, line_offset + 1, format!("no column named `{name}`")))?
        }
    };
    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, line_offset + 1, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line()) + line_offset;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(csv_err(
                    path,
                    line,
                    format!("ragged row: {} fields, expected {w}", record.len()),
                ))
            }
            _ => {}
        }
        if label_idx >= record.len() {
            return Err(csv_err(path, line, format!("no label column {label_idx}")));
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                labels.push(parse_label(cell, path, line)?);
            } else {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| csv_err(path, line, format!("non-numeric cell `{cell}`")))?;
                if !v.is_finite() {
                    return Err(csv_err(path, line, format!("non-finite cell `{cell}`")));
                }
                features.push(v);
            }
        }
    }
    let Some(width) = width else {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    };
    Ok(Table {
        features,
        labels,
        dim: width - 1,
    })
}

fn to_matrix<T: Scalar>(t: &Table) -> Result<Array2<T>> {
    Array2::from_shape_vec((t.labels.len(), t.dim), t.features.iter().map(|&v| T::lit(v)).collect())
        .map_err(|e| Error::Dimension(e.to_string()))
}

/// Loads an ordinarily labeled dataset from CSV.
pub fn load_csv<T: Scalar>(path: &Path, schema: &CsvSchema) -> Result<OrdinaryDataset<T>> {
    let file = fs::File::open(path)?;
    let first = if schema.has_header { 2 } else { 1 };
    let table = read_table(file, path, schema.delimiter, schema.has_header, &schema.label_column, 0)?;
    let max_label = table.labels.iter().max().map_or(0, |m| m + 1);
    let classes = schema.classes.unwrap_or(max_label);
    if let Some(pos) = table.labels.iter().position(|&l| l >= classes) {
        return Err(csv_err(
            path,
            (pos + first as usize) as u64,
            format!("label {} outside 1..={classes}", table.labels[pos] + 1),
        ));
    }
    OrdinaryDataset::new(to_matrix(&table)?, table.labels, classes)
}

fn write_rows<T: Scalar, W: Write>(
    out: &mut W,
    label_name: &str,
    labels: &[usize],
    features: ndarray::ArrayView2<'_, T>,
) -> Result<()> {
    write!(out, "{label_name}")?;
    for j in 0..features.ncols() {
        write!(out, ",x{}", j + 1)?;
    }
    writeln!(out)?;
    for (row, &l) in features.rows().into_iter().zip(labels) {
        write!(out, "{}", l + 1)?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Writes `label,x1,...,xd` with 1-based labels; readable by [`load_csv`] with the default schema.
pub fn write_ordinary_csv<T: Scalar>(path: &Path, ds: &OrdinaryDataset<T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_rows(&mut out, "label", ds.labels(), ds.features())?;
    out.flush()?;
    Ok(())
}

pub fn write_complementary_csv<T: Scalar>(path: &Path, ds: &ComplementaryDataset<T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let p = ds.provenance();
    writeln!(
        out,
        "{COMP_MAGIC} classes={} seed={} source={}",
        ds.classes(),
        p.seed,
        p.source_hash
    )?;
    write_rows(&mut out, "comp_label", ds.comp_labels(), ds.features())?;
    out.flush()?;
    Ok(())
}

pub fn read_complementary_csv<T: Scalar>(path: &Path) -> Result<ComplementaryDataset<T>> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut meta = String::new();
    reader.read_line(&mut meta)?;
    let rest = meta
        .trim_end()
        .strip_prefix(COMP_MAGIC)
        .ok_or_else(|| csv_err(path, 1, format!("missing `{COMP_MAGIC}` metadata line")))?;
    let (mut classes, mut seed, mut source) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| csv_err(path, 1, format!("bad metadata field `{field}`")))?;
        match key {
            "classes" => classes = value.parse::<usize>().ok(),
            "seed" => seed = value.parse::<u64>().ok(),
            "source" => source = Some(value.to_string()),
            _ => return Err(csv_err(path, 1, format!("unknown metadata key `{key}`"))),
        }
    }
    let (Some(classes), Some(seed), Some(source_hash)) = (classes, seed, source) else {
        return Err(csv_err(path, 1, "metadata needs classes=, seed= and source="));
    };
    let table = read_table(reader, path, b',', true, &LabelColumn::Index(0), 1)?;
    if let Some(pos) = table.labels.iter().position(|&l| l >= classes) {
        return Err(csv_err(
            path,
            (pos + 3) as u64,
            format!("label {} outside 1..={classes}", table.labels[pos] + 1),
        ));
    }
    ComplementaryDataset::new(
        to_matrix(&table)?,
        table.labels,
        classes,
        Provenance { source_hash, seed },
    )
}
