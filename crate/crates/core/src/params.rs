//! Named parameter tensors and their binding onto tapes.
//!
//! Parameters live outside any tape in a sorted map, so iteration order (and
//! therefore checkpoint bytes and update order) is deterministic. A forward
//! pass binds the parameters it uses as tape leaves through a [`Binding`],
//! which afterwards routes tape gradients back into the per-parameter
//! accumulators.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Gradient accumulator; cleared by [`ParamSet::zero_grad`].
    pub grad: Vec<f64>,
    /// SGD momentum buffer.
    pub velocity: Vec<f64>,
}

impl Param {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        Param {
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.map.insert(name.into(), Param::new(shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Deterministic (sorted) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.map.values_mut() {
            p.grad.fill(0.0);
        }
    }
}

/// Records which tape leaf represents which named parameter for one forward
/// pass, so gradients can be read back after `Tape::backward`.
#[derive(Default)]
pub struct Binding {
    pairs: Vec<(String, TensorId)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert `name` as a gradient-tracked leaf on `tape`.
    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, name: &str) -> Result<TensorId> {
        let p = params.get(name)?;
        let id = tape.leaf(p.data.clone(), &p.shape, true)?;
        self.pairs.push((name.to_string(), id));
        Ok(id)
    }

    pub fn pairs(&self) -> &[(String, TensorId)] {
        &self.pairs
    }

    /// Add tape gradients into the parameter accumulators, scaled by `scale`
    /// (batch averaging uses 1/batch_size).
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ParamSet, scale: f64) -> Result<()> {
        for (name, id) in &self.pairs {
            if let Some(g) = tape.grad(*id) {
                let p = params.get_mut(name)?;
                for (acc, gi) in p.grad.iter_mut().zip(g) {
                    *acc += gi * scale;
                }
            }
        }
        Ok(())
    }

    /// Collect this pass's analytic gradients per parameter name.
    pub fn grads_by_name(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, id) in &self.pairs {
            let g = tape
                .grad(*id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.numel(*id)]);
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
