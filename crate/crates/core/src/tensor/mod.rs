//! Dense tensors, a reverse-mode computation tape, and optimizers.
//!
//! Everything is 64-bit floating point. A [`Tensor`] is a flat row-major
//! array with a shape of rank 1 or 2. Gradients are computed by recording
//! primitive operations on a [`Tape`] and replaying it backward; parameters
//! live in named [`ParamSet`]s that are bound onto a tape per forward pass.

mod gradcheck;
mod nn;
mod optim;
mod tape;

pub use gradcheck::{fd_grads, max_rel_error};
pub use nn::{
    add_gru, add_linear, gru_cell, init_bias, init_embedding, init_matrix, linear, param_rng,
    GruRefs,
};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{BoundParams, Tape, TensorRef};

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Dense tensor of rank 1 or 2, row-major.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape(format!("rank must be 1 or 2, got {:?}", shape)));
        }
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("tensor construction"));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v], requires_grad: false, grad: None }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.values.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.values.len());
        self.grad = Some(g);
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }
}

static NEXT_SET_UID: AtomicU64 = AtomicU64::new(1);

/// Ordered collection of named, trainable tensors.
///
/// Insertion order is the canonical order for binding onto tapes, optimizer
/// moment slots, and checkpoint layout.
#[derive(Clone, Debug)]
pub struct ParamSet {
    name: String,
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(name: impl Into<String>) -> Self {
        ParamSet {
            name: name.into(),
            uid: NEXT_SET_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::contract(format!("unknown param {}.{}", self.name, name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::contract(format!("unknown param {}.{}", self.name, name))),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Deep copy with a fresh identity; used for target networks.
    pub fn clone_as(&self, name: impl Into<String>) -> ParamSet {
        let mut out = ParamSet::new(name);
        for (n, t) in self.iter() {
            let mut c = t.clone();
            c.clear_grad();
            out.insert(n.to_string(), c);
        }
        out
    }

    /// Overwrite values from a set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// Polyak update: self <- (1 - tau) * self + tau * other.
    pub fn soft_update_from(&mut self, other: &ParamSet, tau: f64) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, s) in dst.values.iter_mut().zip(&src.values) {
                *d = (1.0 - tau) * *d + tau * *s;
            }
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::incompatible(format!(
                "param sets {} and {} have different entries",
                self.name, other.name
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape != b.shape {
                return Err(Error::incompatible(format!(
                    "param sets {} and {} have different shapes",
                    self.name, other.name
                )));
            }
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn param_set_roundtrip() {
        let mut set = ParamSet::new("test");
        set.insert("a", Tensor::vector(vec![1.0, 2.0]));
        set.insert("b", Tensor::scalar(3.0));
        assert_eq!(set.len(), 2);
        assert_eq!(set.get("a").unwrap().values(), &[1.0, 2.0]);
        assert!(set.get("missing").is_err());
        let names: Vec<&str> = set.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn soft_update_moves_towards_source() {
        let mut a = ParamSet::new("a");
        a.insert("w", Tensor::vector(vec![0.0]));
        let mut b = ParamSet::new("b");
        b.insert("w", Tensor::vector(vec![10.0]));
        // layouts must match by names: rebuild with same name
        let mut a2 = ParamSet::new("t");
        a2.insert("w", Tensor::vector(vec![0.0]));
        let mut b2 = ParamSet::new("t");
        b2.insert("w", Tensor::vector(vec![10.0]));
        a2.soft_update_from(&b2, 0.1).unwrap();
        assert!((a2.get("w").unwrap().values()[0] - 1.0).abs() < 1e-12);
        b2.copy_values_from(&a2).unwrap();
        assert_eq!(b2.get("w").unwrap().values()[0], a2.get("w").unwrap().values()[0]);
        let _ = (a, b);
    }
}
