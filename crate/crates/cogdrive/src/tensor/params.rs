//! Named parameter storage and checkpoint serialization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::tensor::{Tape, TensorRef};
use crate::util::atomic_write;

pub const WEIGHTS_FORMAT: &str = "cogdrive-weights/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    params: Vec<ParamEntry>,
}

/// Flat map of named f64 parameter tensors. Iteration order is the
/// lexicographic name order (BTreeMap), which keeps optimizer sweeps and
/// serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|(_, d)| d.len()).sum()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter '{name}' data length must match shape"
        );
        self.entries.insert(name.to_string(), (shape, data));
    }

    /// Insert a parameter with uniform Kaiming-style init in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_init(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, shape, data);
    }

    /// Insert an all-constant parameter.
    pub fn insert_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n]);
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name).map(|(_, d)| d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries
            .iter()
            .map(|(n, (s, d))| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.entries.iter_mut().map(|(n, (_, d))| (n.as_str(), d))
    }

    /// Push a parameter onto a tape as a grad-requiring leaf. Errors if the
    /// name is unknown.
    pub fn leaf(&self, tape: &Tape, name: &str) -> Result<TensorRef> {
        let (shape, data) = self.get(name).ok_or_else(|| CogError::CheckpointMismatch {
            name: name.to_string(),
            expected: vec![],
            found: vec![],
        })?;
        Ok(tape.leaf(shape.to_vec(), data.to_vec(), true))
    }

    /// Check that this store has exactly the names and shapes of `expected`.
    pub fn validate_against(&self, expected: &ParamStore) -> Result<()> {
        for (name, (shape, _)) in &expected.entries {
            match self.entries.get(name) {
                None => {
                    return Err(CogError::CheckpointMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: vec![],
                    })
                }
                Some((found, _)) if found != shape => {
                    return Err(CogError::CheckpointMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: found.clone(),
                    })
                }
                _ => {}
            }
        }
        for (name, (shape, _)) in &self.entries {
            if !expected.entries.contains_key(name) {
                return Err(CogError::CheckpointMismatch {
                    name: name.clone(),
                    expected: vec![],
                    found: shape.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn save_weights(path: &Path, store: &ParamStore) -> Result<()> {
    let file = WeightsFile {
        format: WEIGHTS_FORMAT.to_string(),
        params: store
            .iter()
            .map(|(name, shape, data)| ParamEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: None,
        msg: e.to_string(),
    })?;
    text.push('\n');
    atomic_write(path, &text)
}

pub fn load_weights(path: &Path) -> Result<ParamStore> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    let file: WeightsFile = serde_json::from_str(&text).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: Some(format!("line {}, column {}", e.line(), e.column())),
        msg: e.to_string(),
    })?;
    if file.format != WEIGHTS_FORMAT {
        return Err(CogError::Parse {
            path: path.display().to_string(),
            context: None,
            msg: format!(
                "unsupported format '{}', expected '{WEIGHTS_FORMAT}'",
                file.format
            ),
        });
    }
    let mut store = ParamStore::new();
    for p in file.params {
        if p.data.len() != p.shape.iter().product::<usize>() {
            return Err(CogError::Parse {
                path: path.display().to_string(),
                context: Some(format!("parameter '{}'", p.name)),
                msg: format!(
                    "data length {} does not match shape {:?}",
                    p.data.len(),
                    p.shape
                ),
            });
        }
        if !p.data.iter().all(|v| v.is_finite()) {
            return Err(CogError::Parse {
                path: path.display().to_string(),
                context: Some(format!("parameter '{}'", p.name)),
                msg: "non-finite value".into(),
            });
        }
        store.insert(&p.name, p.shape, p.data);
    }
    Ok(store)
}
