//! Differentiable computation over named parameter blocks.
//!
//! Values live in a [`ParamStore`]; objectives are recorded on a [`Tape`]
//! whose reverse pass accumulates exact gradients back into the store.
//! [`AdamState`] updates unfrozen blocks and [`check_gradients`] compares
//! the analytic gradients with central finite differences.

mod adam;
mod gradcheck;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, BlockGradCheck};
pub use tape::{backward, bounded_value, kl_gamma_grad, kl_gamma_value, Gradients, Tape, Var};

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DpmsError, Result};

/// Handle to a block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, learnable 2-D array with a same-shape gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamBlock {
    name: String,
    values: Array2<f64>,
    grad: Array2<f64>,
    frozen: bool,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, values: Array2<f64>) -> Self {
        let grad = Array2::zeros(values.raw_dim());
        Self {
            name: name.into(),
            values,
            grad,
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn grad(&self) -> &Array2<f64> {
        &self.grad
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Owns every learnable block of a problem.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new block. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, values: Array2<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DpmsError::Invalid(format!("duplicate parameter block `{name}`")));
        }
        let id = ParamId(self.blocks.len());
        self.index.insert(name.clone(), id);
        self.blocks.push(ParamBlock::new(name, values));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DpmsError::UnknownBlock(name.to_string()))
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn blocks(&self) -> impl Iterator<Item = (ParamId, &ParamBlock)> {
        self.blocks.iter().enumerate().map(|(i, b)| (ParamId(i), b))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &Array2<f64> {
        &self.blocks[id.0].values
    }

    /// Mutable access to values. Shape changes are not allowed.
    pub fn values_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.blocks[id.0].values
    }

    pub fn set_values(&mut self, id: ParamId, values: Array2<f64>) -> Result<()> {
        let block = &mut self.blocks[id.0];
        if values.dim() != block.values.dim() {
            let (r, c) = block.values.dim();
            let (vr, vc) = values.dim();
            return Err(DpmsError::shape(format!("set_values({})", block.name), &[r, c], &[vr, vc]));
        }
        block.values = values;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.blocks[id.0].grad
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.blocks[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.blocks[id.0].frozen
    }

    pub fn zero_grads(&mut self) {
        for block in &mut self.blocks {
            block.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let block = self
                .blocks
                .get_mut(id.0)
                .ok_or_else(|| DpmsError::UnknownBlock(format!("#{}", id.0)))?;
            if g.dim() != block.grad.dim() {
                let (r, c) = block.grad.dim();
                let (gr, gc) = g.dim();
                return Err(DpmsError::shape(format!("gradient of {}", block.name), &[r, c], &[gr, gc]));
            }
            block.grad += g;
        }
        Ok(())
    }

    /// Copies every value array (used for in-memory snapshots).
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.blocks.iter().map(|b| b.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Array2<f64>]) -> Result<()> {
        if snapshot.len() != self.blocks.len() {
            return Err(DpmsError::Invalid(format!(
                "snapshot has {} blocks, store has {}",
                snapshot.len(),
                self.blocks.len()
            )));
        }
        for (block, values) in self.blocks.iter_mut().zip(snapshot) {
            if block.values.dim() != values.dim() {
                return Err(DpmsError::Invalid(format!("snapshot shape differs for {}", block.name)));
            }
            block.values.assign(values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_grads_clears_every_entry() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 2.0]]).unwrap();
        let mut g = Gradients::default();
        g.insert(a, array![[3.0, -4.0]]);
        store.accumulate(&g).unwrap();
        assert_eq!(store.grad(a), &array![[3.0, -4.0]]);
        store.zero_grads();
        assert!(store.grad(a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", array![[1.0]]).unwrap();
        assert!(store.add("a", array![[1.0]]).is_err());
    }

    #[test]
    fn set_values_checks_shape() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 2.0]]).unwrap();
        assert!(store.set_values(a, array![[1.0], [2.0]]).is_err());
    }
}
