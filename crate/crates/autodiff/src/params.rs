use std::collections::HashMap;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Named, ordered collection of trainable tensors.
///
/// Gradients live next to their parameter and are accumulated (`+=`) by
/// every backward pass that touches it. Frozen parameters refuse gradient
/// writes.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        if frozen {
            p.grad = None;
        }
    }

    /// Replace a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(AdError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// `grad += delta`; creates the accumulator on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(AdError::Frozen(p.name.clone()));
        }
        if p.value.shape() != delta.shape() {
            return Err(AdError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(g) => g.add_assign(delta),
            None => p.grad = Some(delta.clone()),
        }
        Ok(())
    }

    /// Sets every non-frozen gradient to zeros of the right shape.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if !p.frozen {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn zero_grads_of(&mut self, ids: &[ParamId]) {
        for &id in ids {
            let p = &mut self.params[id.0];
            if !p.frozen {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar entries across the given parameters.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.len()).sum()
    }

    pub fn flatten_values(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.params[id.0].value.data().iter().copied())
            .collect()
    }

    /// Gradients concatenated in `ids` order; missing gradients read as zero.
    pub fn flatten_grads(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel(ids));
        for &id in ids {
            let p = &self.params[id.0];
            match &p.grad {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
            }
        }
        out
    }

    pub fn assign_flat(&mut self, ids: &[ParamId], flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(ids));
        let mut off = 0;
        for &id in ids {
            let v = self.params[id.0].value.data_mut();
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Values are bit-identical (NaN-safe comparison on the raw bits).
    pub fn values_bit_equal(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_rejects_gradient_writes() {
        let mut ps = ParamSet::new();
        let id = ps.add("prior.w", Tensor::zeros(&[2]));
        ps.set_frozen(id, true);
        let err = ps.accumulate_grad(id, &Tensor::ones(&[2])).unwrap_err();
        assert_eq!(err, AdError::Frozen("prior.w".into()));
    }

    #[test]
    fn accumulation_adds() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(&[2]));
        ps.accumulate_grad(id, &Tensor::ones(&[2])).unwrap();
        ps.accumulate_grad(id, &Tensor::ones(&[2])).unwrap();
        assert_eq!(ps.grad(id).unwrap().data(), &[2.0, 2.0]);
    }
}
