//! Uniform access to the trainable tensors of a model.
//!
//! Optimizers, the gradient checker and the binary parameter container all
//! work through [`ParamSet`], so gradients are represented by the same type as
//! the parameters they belong to.

use crate::error::{Error, Result};

/// Scale of the uniform initializer, entries are drawn from `[-INIT_SCALE, INIT_SCALE]`.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

pub trait ParamSet: Clone {
    /// Tensors in a fixed order; the order defines the serialization layout.
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Mutable views in the same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| (t.rows, t.cols)).collect()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`
    fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        check_same_shape(self, other)?;
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub fn check_same_shape<P: ParamSet>(a: &P, b: &P) -> Result<()> {
    let (sa, sb) = (a.shapes(), b.shapes());
    if sa != sb {
        return Err(Error::Dimension(format!(
            "parameter shapes differ: {sa:?} vs {sb:?}"
        )));
    }
    Ok(())
}

/// Rescales `grads` so its global l2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
