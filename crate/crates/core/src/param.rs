//! Named trainable parameters.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Arc<Tensor>,
    pub trainable: bool,
}

/// Ordered parameter collection with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert_with(name.into(), tensor, true)
    }

    /// Stored and checkpointed like any parameter, but excluded from optimization.
    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert_with(name.into(), tensor, false)
    }

    fn insert_with(&mut self, name: String, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: Arc::new(tensor),
            trainable,
        });
        Ok(id)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Mutable access to a parameter's values; copies only if a tape still shares them.
    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.params[id].tensor).data_mut()
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} expects shape {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Binds every parameter to `tape`, in id order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, p)| tape.param(id, Arc::clone(&p.tensor), p.trainable))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.zeros("a.w", &[2]).unwrap();
        assert!(s.zeros("a.w", &[3]).is_err());
        assert_eq!(s.id("a.w"), Some(0));
        assert_eq!(s.scalar_count(), 2);
    }

    #[test]
    fn bound_parameters_receive_gradients() {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let unused = s.zeros("q", &[2]).unwrap();
        let tape = Tape::new();
        let vars = s.bind(&tape);
        let loss = vars[id].mul(vars[id]).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(id).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(g.param(unused).is_none());
    }
}
