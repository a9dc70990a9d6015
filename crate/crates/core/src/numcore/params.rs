use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with a contiguous flat view.
///
/// Registration order fixes both the flat layout and the order in which
/// optimizers and gradient checks visit parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    offsets: Vec<usize>,
    lookup: HashMap<String, ParamId>,
    total: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.offsets.push(self.total);
        self.total += value.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar parameters across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.total
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Offset of the parameter's first scalar in the flat view.
    pub fn offset(&self, id: ParamId) -> usize {
        self.offsets[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total {
            return Err(Error::Shape {
                op: "set_flat",
                left: vec![self.total],
                right: vec![flat.len()],
            });
        }
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
        }
        Ok(())
    }

    /// Overwrites every tensor with the same-named tensor of `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let src = other
                .id(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            let src = other.get(src);
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "load_from",
                    left: self.tensors[i].shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// Affine layer `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` (uniform in ±1/√fan_in) and `{name}.bias` (zeros).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = if fan_in == 0 {
            0.0
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::matrix(fan_out, fan_in, w))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}
