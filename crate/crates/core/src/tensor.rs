//! Dense row-major tensors and named parameter collections.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor data", n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }
}

/// A collection of trainable tensors with stable, hierarchical names.
pub trait ParamSet<F: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>);

    fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.fill(F::zero());
        }
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Element-wise `self += other`; both sides must have the same layout.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named();
        for ((_, dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
