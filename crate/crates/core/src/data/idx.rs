//! Big-endian IDX files as used by MNIST, Fashion-MNIST and Kuzushiji-MNIST.
//! Gzipped files are detected by their magic bytes and decompressed transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;

use super::OrdinaryDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_CLASSES: usize = 10;

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| idx_err(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| idx_err(path, "truncated header"))
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(idx_err(path, format!("magic 0x{found:08x}, expected 0x{expected:08x}")));
    }
    Ok(())
}

/// Raw image bytes: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    check_magic(be_u32(&bytes, 0, path)?, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() != expected {
        return Err(idx_err(
            path,
            format!("{} pixel bytes, header promises {expected}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    check_magic(be_u32(&bytes, 0, path)?, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(idx_err(
            path,
            format!("{} label bytes, header promises {n}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads an image/label IDX pair. Pixels are scaled to [0, 1]; digit labels
/// 0..=9 become classes 1..=10 (0-based internally).
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<OrdinaryDataset<T>> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(idx_err(labels_path, format!("{} labels for {n} images", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= IDX_CLASSES) {
        return Err(idx_err(labels_path, format!("label {bad} outside 0..=9")));
    }
    let scale = T::lit(255.0);
    let features = Array2::from_shape_vec(
        (n, rows * cols),
        pixels
            .iter()
            .map(|&p| T::from_u8(p).expect("u8 fits") / scale)
            .collect(),
    )
    .map_err(|e| Error::Dimension(e.to_string()))?;
    OrdinaryDataset::new(features, labels.into_iter().map(usize::from).collect(), IDX_CLASSES)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Dimension(format!(
            "{} pixels is not a multiple of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    write_bytes(path, &bytes)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("img.idx");
        let labels = dir.join("lbl.idx");
        let pixels: Vec<u8> = (0..8).map(|i| (i * 36) as u8).collect();
        write_idx_images(&images, 2, 2, &pixels).unwrap();
        write_idx_labels(&labels, &[7, 0]).unwrap();
        (images, labels)
    }

    #[test]
    fn two_image_golden_round_trip() {
        let dir = tempdir().unwrap();
        let (images, labels) = fixture(dir.path());
        // Hand-built header bytes.
        let raw = fs::read(&images).unwrap();
        assert_eq!(&raw[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]);
        let ds: OrdinaryDataset<f64> = load_idx(&images, &labels).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (2, 4, 10));
        assert_eq!(ds.labels(), &[7, 0]);
        assert_eq!(ds.row(1)[3], 252.0 / 255.0);
        assert_eq!(ds.row(0)[0], 0.0);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("img.idx.gz");
        let labels = dir.path().join("lbl.idx.gz");
        write_idx_images(&images, 1, 3, &[0, 255, 51, 1, 2, 3]).unwrap();
        write_idx_labels(&labels, &[9, 4]).unwrap();
        let ds: OrdinaryDataset<f32> = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.row(0)[1], 1.0);
        assert_eq!(ds.row(0)[2], 0.2);
    }

    #[test]
    fn wrong_magic_is_a_typed_error() {
        let dir = tempdir().unwrap();
        let (images, _) = fixture(dir.path());
        let err = load_idx::<f64>(&images, &images).unwrap_err();
        assert!(matches!(err, Error::Idx { ref reason, .. } if reason.contains("magic 0x00000803")));
    }

    #[test]
    fn truncated_and_mismatched_files_are_rejected() {
        let dir = tempdir().unwrap();
        let (images, labels) = fixture(dir.path());
        let mut raw = fs::read(&images).unwrap();
        raw.pop();
        let cut = dir.path().join("cut.idx");
        fs::write(&cut, &raw).unwrap();
        assert!(matches!(load_idx::<f64>(&cut, &labels), Err(Error::Idx { .. })));

        fs::write(&cut, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx::<f64>(&cut, &labels), Err(Error::Idx { .. })));

        let three = dir.path().join("three.idx");
        write_idx_labels(&three, &[1, 2, 3]).unwrap();
        assert!(matches!(load_idx::<f64>(&images, &three), Err(Error::Idx { .. })));

        let bad = dir.path().join("bad.idx");
        write_idx_labels(&bad, &[1, 12]).unwrap();
        assert!(matches!(load_idx::<f64>(&images, &bad), Err(Error::Idx { .. })));
    }
}
