//! JSON model checkpoints. Parameters are stored as little-endian `f64`
//! bytes in base64 so that a round trip is exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, Model, ModelKind};
use crate::scalar::Scalar;

pub const FORMAT: &str = "complabel-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    kind: ModelKind,
    dims: Dims,
    seed: u64,
    theta: String,
}

pub fn to_json<T: Scalar>(model: &Model<T>) -> String {
    let bytes: Vec<u8> = model.params().iter().flat_map(|p| p.as_f64().to_le_bytes()).collect();
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        kind: model.kind(),
        dims: model.dims(),
        seed: model.seed(),
        theta: STANDARD.encode(bytes),
    };
    serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
}

pub fn from_json<T: Scalar>(text: &str) -> Result<Model<T>> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if doc.format != FORMAT || doc.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?} version {}",
            doc.format, doc.version
        )));
    }
    let bytes = STANDARD
        .decode(doc.theta.as_bytes())
        .map_err(|e| Error::Checkpoint(format!("theta: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("theta is not a whole number of f64 values".into()));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Model::from_params(doc.kind, doc.dims, doc.seed, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Model::<f64>::new(ModelKind::Mlp, Dims::mlp(5, 4, 3), 77).unwrap();
        let back: Model<f64> = from_json(&to_json(&m)).unwrap();
        assert_eq!(back, m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save(&m, &p).unwrap();
        assert_eq!(load::<f64>(&p).unwrap(), m);
    }

    #[test]
    fn rejects_malformed() {
        let m = Model::<f64>::new(ModelKind::Linear, Dims::linear(2, 2), 1).unwrap();
        let good = to_json(&m);
        assert!(from_json::<f64>(&good.replace(FORMAT, "other")).is_err());
        assert!(from_json::<f64>("{").is_err());
        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["theta"] = "AAAA".into();
        assert!(matches!(from_json::<f64>(&v.to_string()), Err(Error::Checkpoint(_))));
    }
}
