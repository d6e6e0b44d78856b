//! Named parameter storage and initialization.

use std::collections::HashMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters recorded as leaves on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect() }
    }

    /// Gradients of the bound parameters (zeros where none reached them).
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites parameters from checkpoint entries; every name present in
    /// `entries` must exist here with the same shape. Returns the number of
    /// parameters loaded.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in entries {
            let i = *self
                .by_name
                .get(name)
                .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name} in checkpoint")))?;
            if self.values[i].shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_entries",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.values[i] = t.clone();
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Seeded source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal samples with standard deviation `std`, redrawn outside ±2σ.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = normal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::from_f64(z * std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let t: Tensor<f64> = Init::new(3).trunc_normal(&[10_000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let std = (t.data().iter().map(|v| v * v).sum::<f64>() / 10_000.0).sqrt();
        // std of a unit normal truncated at ±2 is ≈ 0.88
        assert!((std / 0.02 - 0.88).abs() < 0.03, "{std}");
    }

    #[test]
    fn load_entries_checks_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.load_entries(&[("w".into(), Tensor::zeros(&[4]))]).is_err());
        assert!(s.load_entries(&[("v".into(), Tensor::zeros(&[2, 2]))]).is_err());
        assert_eq!(s.load_entries(&[("w".into(), Tensor::ones(&[2, 2]))]).unwrap(), 1);
        assert_eq!(s.get(s.id("w").unwrap()).data(), &[1.0; 4]);
    }
}
