//! Pluggable executor for the pairwise contractions of an inference schedule.
//!
//! Forward passes issue every pairwise contraction through a [`Contractor`],
//! so the same schedule can run in full precision, re-quantize after each
//! step, or be instrumented for operation counting.

use crate::error::Result;
use crate::tensor::{contract, ContractionSpec, Tensor};

pub trait Contractor {
    fn contract(&mut self, a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor>;
}

/// Plain 64-bit contraction.
#[derive(Clone, Copy, Debug, Default)]
pub struct Exact;

impl Contractor for Exact {
    fn contract(&mut self, a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor> {
        contract(a, b, spec)
    }
}

impl<C: Contractor + ?Sized> Contractor for &mut C {
    fn contract(&mut self, a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor> {
        (**self).contract(a, b, spec)
    }
}
