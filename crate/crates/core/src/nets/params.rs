use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, Tape, Var};
use crate::scalar::Scalar;

/// Ordered, named parameter arrays of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Params { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Scalar> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Array<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { names: self.names.clone(), values: self.values.iter().map(Array::cast).collect() }
    }

    /// Records every parameter on `tape`, in order.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect()
    }
}

pub(crate) fn normal<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Array<T> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Array::new(shape, data).expect("shape matches data")
}

/// He-normal initialisation for a conv kernel `[out, in, k, k]`.
pub(crate) fn conv_kernel<T: Scalar>(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Array<T> {
    normal(rng, vec![c_out, c_in, k, k], (2.0 / (c_in * k * k) as f64).sqrt())
}

pub(crate) fn dense<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array<T> {
    normal(rng, vec![fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
}
