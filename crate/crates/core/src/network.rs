//! Behaviour shared by the MPS and TTN classifiers.

use crate::contractor::{Contractor, Exact};
use crate::embedding::EmbeddedJet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores and per-tensor gradients of `<upstream, forward(x)>`.
pub struct ForwardGrad {
    pub scores: Vec<f64>,
    pub grads: Vec<Tensor>,
}

pub trait TensorNetwork: Clone + Send + Sync {
    fn n_sites(&self) -> usize;
    fn phys_dim(&self) -> usize;
    fn n_classes(&self) -> usize;

    /// All weight tensors in checkpoint order.
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];

    /// Run the hardware inference schedule, issuing each pairwise
    /// contraction through `contractor`.
    fn forward_with(&self, x: &EmbeddedJet, contractor: &mut dyn Contractor) -> Result<Vec<f64>>;

    /// Forward pass, then gradients for the upstream vector computed from the
    /// scores by `upstream`.
    fn forward_grad(
        &self,
        x: &EmbeddedJet,
        upstream: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<ForwardGrad>;

    fn forward(&self, x: &EmbeddedJet) -> Result<Vec<f64>> {
        self.forward_with(x, &mut Exact)
    }

    fn grad(&self, x: &EmbeddedJet, upstream: &[f64]) -> Result<Vec<Tensor>> {
        Ok(self.forward_grad(x, &mut |_| upstream.to_vec())?.grads)
    }

    /// Values whose argmax is the predicted class.
    fn decision_values(&self, raw: &[f64]) -> Vec<f64> {
        raw.to_vec()
    }

    /// Equivalent model whose weights and intermediate values of the
    /// inference schedule sit comfortably inside the fixed-point range.
    /// `calibration` jets may be used to size intermediate values. Predicted
    /// classes are unchanged.
    fn fixed_point_form(&self, _calibration: &[EmbeddedJet]) -> Result<Self> {
        Ok(self.clone())
    }

    /// Gauge fix applied around training epochs. Must not change outputs.
    fn regauge(&mut self) -> Result<()> {
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(Tensor::len).sum()
    }

    fn check_input(&self, x: &EmbeddedJet) -> Result<()> {
        if x.n_sites() != self.n_sites() {
            return Err(Error::DimensionMismatch {
                what: "number of sites".into(),
                expected: self.n_sites(),
                found: x.n_sites(),
            });
        }
        if let Some(bad) = x.sites.iter().find(|s| s.len() != self.phys_dim()) {
            return Err(Error::DimensionMismatch {
                what: "site dimension".into(),
                expected: self.phys_dim(),
                found: bad.len(),
            });
        }
        Ok(())
    }
}

/// `min(base^exp, cap)` without overflow.
pub(crate) fn capped_pow(base: usize, exp: usize, cap: usize) -> usize {
    let mut v = 1usize;
    for _ in 0..exp {
        v = v.saturating_mul(base);
        if v >= cap {
            return cap;
        }
    }
    v.min(cap)
}

/// Outer product of vectors, as a tensor of shape `(len(v0), len(v1), ...)`.
pub(crate) fn outer(vectors: &[&[f64]]) -> Tensor {
    let shape: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
    let mut data = vec![1.0];
    for v in vectors {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &a in &data {
            for &b in v.iter() {
                next.push(a * b);
            }
        }
        data = next;
    }
    Tensor::new(shape, data).expect("outer product shape")
}
