//! Small differentiable kernels with hand-written reverse passes.
//!
//! Activations are [`Mat`]s with channels as rows and time as columns.
//! Parameters live in [`ParamTensor`]s; per-call gradients are collected in a
//! [`Grads`] buffer aligned with a parameter list so that many sequences can
//! be differentiated in parallel and reduced afterwards.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;

use std::cell::Cell;

use rand::Rng;

use crate::error::{Result, TrfError};

pub use adam::{Adam, AdamConfig};
pub use gradcheck::finite_diff_grad;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TrfError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// A named parameter with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(name, shape);
        for v in &mut t.values {
            *v = rng.random_range(-scale..=scale);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Gradient buffer aligned with a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(params: &[ParamTensor]) -> Self {
        Self(params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    /// Copies this buffer into the tensors' `grad` fields.
    pub fn store_into(&self, params: &mut [ParamTensor]) {
        for (p, g) in params.iter_mut().zip(&self.0) {
            p.grad.copy_from_slice(g);
        }
    }
}

thread_local! {
    static VOCAB_NORMALIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of vocabulary-sized normalisations (log-sum-exp over the whole
/// vocabulary) performed on the current thread.
pub fn vocab_normalizations() -> u64 {
    VOCAB_NORMALIZATIONS.with(Cell::get)
}

pub(crate) fn count_vocab_normalization() {
    VOCAB_NORMALIZATIONS.with(|c| c.set(c.get() + 1));
}

/// Max-shifted log-sum-exp. Returns -inf for an empty slice or all -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// log-sum-exp over logits spanning the vocabulary; counted as one
/// vocabulary-sized normalisation.
pub fn vocab_log_normalizer(logits: &[f64]) -> f64 {
    count_vocab_normalization();
    log_sum_exp(logits)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
    }

    #[test]
    fn clip_norm_caps_global_norm() {
        let mut g = Grads(vec![vec![3.0], vec![4.0]]);
        assert_eq!(g.clip_norm(1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
    }
}
