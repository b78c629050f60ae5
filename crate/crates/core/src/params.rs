//! Flat parameter store shared by every network module.
//!
//! Module structs (chart, attention, stencil, ...) hold `ParamId` handles
//! into one `ParamSet`, which keeps optimizer, checkpointing and tape
//! binding trivial: everything walks the same canonical parameter order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::{Parameter, Tensor};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamSet<F: Scalar> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, tensor));
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn all(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn all_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Place every parameter on a tape as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &mut Tape<F>) -> Result<Binding> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(tape.leaf(p.tensor.clone())?);
        }
        Ok(Binding { vars })
    }

    /// Accumulate a backward pass's gradients into the parameter buffers,
    /// scaled by `scale` (batch averaging).
    pub fn accumulate_grads(
        &mut self,
        binding: &Binding,
        grads: &crate::tape::Gradients<F>,
        scale: F,
    ) {
        for (p, &var) in self.params.iter_mut().zip(&binding.vars) {
            p.tensor.alloc_grad();
            if let Some(g) = grads.get(var) {
                let buf = p.tensor.grad.as_mut().unwrap();
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b * scale;
                }
            }
        }
    }
}

/// Tape variables of one binding pass, in canonical parameter order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<VarId>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[VarId] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(ps.add("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn binding_and_accumulation_round_trip() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let binding = ps.bind(&mut tape).unwrap();
        let sq = tape.square(binding.var(w)).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        ps.accumulate_grads(&binding, &grads, 0.5);
        assert_eq!(ps.get(w).tensor.grad.as_deref().unwrap(), &[1.0, 2.0]);
    }
}
