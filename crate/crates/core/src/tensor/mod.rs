//! Dense f64 tensors and a reverse-mode tape.
//!
//! Training math runs in f64 end to end; checkpoints round to f32 on save.
//! The op set is closed: everything the model needs is built from the
//! primitives in [`tape`], each of which carries a finite-difference-tested
//! backward rule.

pub mod gradcheck;
pub mod tape;

pub use tape::{Mark, Tape, TensorId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major dense tensor. `grad` is populated by [`Tape::backward`] for
/// tensors staged with `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a 2-D tensor; 1-D is treated as a single row.
    pub fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::InvalidShape {
                op: "rows_cols",
                msg: format!("expected 1-D or 2-D, got {:?}", self.shape),
            }),
        }
    }

    /// Accumulate `other` into the grad buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, other: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        debug_assert_eq!(g.len(), other.len());
        for (gi, oi) in g.iter_mut().zip(other) {
            *gi += *oi;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Squared L2 norm of a slice.
pub fn sq_norm(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum()
}

/// Mean squared difference of two equally long slices.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
