use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

/// Parameters registered as leaves on one tape.
pub struct ParamLeaves<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> ParamLeaves<'t> {
        ParamLeaves {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &ParamStore) -> Result<(), AutodiffError> {
        for (name, t) in &mut self.params {
            let o = other
                .params
                .get(name)
                .ok_or_else(|| AutodiffError::MissingParam(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "accumulate",
                    shapes: vec![t.shape().to_vec(), o.shape().to_vec()],
                });
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn to_json(&self) -> String {
        let snap: IndexMap<&str, Snapshot<'_>> = self
            .params
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str(),
                    Snapshot {
                        shape: v.shape().to_vec(),
                        values: std::borrow::Cow::Borrowed(v.data()),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&snap).expect("parameter snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AutodiffError> {
        let snap: IndexMap<String, Snapshot<'static>> =
            serde_json::from_str(text).map_err(|e| AutodiffError::Snapshot(e.to_string()))?;
        let mut store = Self::new();
        for (k, s) in snap {
            store.insert(k, Tensor::new(s.shape, s.values.into_owned())?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| AutodiffError::Snapshot(e.to_string()))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot<'a> {
    shape: Vec<usize>,
    values: std::borrow::Cow<'a, [f64]>,
}

impl<'t> ParamLeaves<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, AutodiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    /// Collects the gradient of every parameter into a store.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        ParamStore {
            params: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.take(*v)))
                .collect(),
        }
    }
}
