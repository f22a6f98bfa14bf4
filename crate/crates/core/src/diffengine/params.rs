use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors. Names are unique and shapes fixed once inserted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replace the values of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {}, refusing {}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.tensors
            .get_mut(name)
            .map(|t| t.data_mut())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.data().len()).sum()
    }

    /// Glorot-uniform weight `name.w` of `[fan_in, fan_out]` and zero bias `name.b`.
    pub fn init_linear(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(format!("{name}.w"), Tensor::new(Shape::new(fan_in, fan_out), w)?)?;
        self.insert(format!("{name}.b"), Tensor::zeros(Shape::new(1, fan_out)))
    }

    /// Record every parameter as a named leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(k.clone(), v.clone())))
            .collect();
        Bound { vars }
    }

    /// Record every parameter as a constant (no gradient flows to it).
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter name → tape leaf for one recording.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_unique_and_shapes_fixed() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(Shape::new(2, 2))).unwrap();
        assert!(p.insert("a", Tensor::zeros(Shape::new(2, 2))).is_err());
        assert!(p.set("a", Tensor::zeros(Shape::new(1, 4))).is_err());
        p.set("a", Tensor::filled(Shape::new(2, 2), 1.0)).unwrap();
        assert!(p.set("missing", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn linear_init_is_seeded() {
        let mk = || {
            let mut p = ParamSet::new();
            p.init_linear(&mut ChaCha8Rng::seed_from_u64(3), "l", 4, 5).unwrap();
            p
        };
        assert_eq!(mk(), mk());
        assert_eq!(mk().get("l.b").unwrap().shape(), Shape::new(1, 5));
    }
}
