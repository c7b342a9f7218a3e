//! Structured-text parameter checkpoints.
//!
//! Layout (JSON):
//! `{"format": "dsr-checkpoint", "version": 1, "meta": {..}, "params": [{"name", "shape", "values"}]}`.
//! `meta` is an opaque document owned by the model (its configuration).
//! f64 values are written in shortest round-trip form, so save/load is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "dsr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub meta: serde_json::Value,
    params: Vec<Entry>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            meta,
            params,
        }
    }

    /// Copies the stored values into `store`, which must have been built
    /// from the same configuration (same names, order and shapes).
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, entry) in ids.into_iter().zip(&self.params) {
            if store.name(id) != entry.name {
                return Err(Error::Checkpoint(format!(
                    "expected parameter {:?}, found {:?}",
                    store.name(id),
                    entry.name
                )));
            }
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())?;
            store
                .assign(id, t)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![0.1, -3.0e-17]).unwrap());
        s.add("b", Tensor::new(vec![1, 2], vec![1.0 / 3.0, 7.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let ck = Checkpoint::capture(&s, serde_json::json!({"k": 3}));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let mut target = store();
        target.fill(0.0);
        back.restore(&mut target).unwrap();
        assert_eq!(target, s);
        assert_eq!(back.meta["k"], 3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = Checkpoint::capture(&store(), serde_json::Value::Null);
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(vec![3]));
        other.add("b", Tensor::zeros(vec![1, 2]));
        assert!(ck.restore(&mut other).is_err());
    }

    #[test]
    fn wrong_format_is_rejected() {
        let text = r#"{"format":"other","version":1,"meta":null,"params":[]}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
