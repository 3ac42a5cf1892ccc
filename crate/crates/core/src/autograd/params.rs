use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub struct Parameter<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named registry of model parameters, in registration order.
#[derive(Debug, Default)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<T>, shape: &[usize], trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let value = if trainable {
            Tensor::param(data, shape)?
        } else {
            Tensor::from_vec(data, shape)?
        };
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, trainable });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.value.zero_grad();
        }
    }

    /// Replaces a parameter's value with a fresh leaf; the old gradient is dropped.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        let shape = p.value.shape().to_vec();
        p.value = if p.trainable {
            Tensor::param(data, &shape)?
        } else {
            Tensor::from_vec(data, &shape)?
        };
        Ok(())
    }

    /// Copies values from a store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let src = other
                .lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let src = other.get(src);
            if src.shape() != self.params[i].value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            self.set_data(ParamId(i), src.to_vec())?;
        }
        Ok(())
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Deep copy: fresh leaves, no shared gradient buffers.
    fn clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| {
                let value = if p.trainable {
                    Tensor::param(p.value.to_vec(), p.value.shape())
                } else {
                    Tensor::from_vec(p.value.to_vec(), p.value.shape())
                }
                .expect("consistent shape");
                Parameter {
                    name: p.name.clone(),
                    value,
                    trainable: p.trainable,
                }
            })
            .collect();
        Self {
            params,
            by_name: self.by_name.clone(),
        }
    }
}
