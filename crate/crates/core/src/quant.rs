//! Post-training quantization to signed Q2.FB fixed point and emulation of
//! quantized inference.
//!
//! Two integer bits include the sign, so a value occupies `2 + FB` bits and
//! the representable range is `[-2, 2 - 2^-FB]`. In `fpop` mode only weights
//! and inputs are on the grid; in `qop` mode the result of every pairwise
//! contraction in the inference schedule is rounded back onto the grid as
//! well. Accumulation inside one contraction is exact.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contractor::{Contractor, Exact};
use crate::embedding::EmbeddedJet;
use crate::error::{Error, Result};
use crate::network::TensorNetwork;
use crate::tensor::{matricize, ContractionSpec, Tensor};
use crate::train::{accuracy_of, LabeledJets};

pub const INT_BITS: u32 = 2;
/// Largest fractional width accepted (used as a near-float limit in tests).
pub const MAX_FRAC_BITS: u32 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    frac_bits: u32,
}

impl FxpFormat {
    pub fn new(frac_bits: u32) -> Result<Self> {
        if frac_bits == 0 || frac_bits > MAX_FRAC_BITS {
            return Err(Error::InvalidConfig(format!(
                "fractional bits must be in 1..={MAX_FRAC_BITS}, got {frac_bits}"
            )));
        }
        Ok(Self { frac_bits })
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    /// Total word width, sign included.
    pub fn word_bits(self) -> u32 {
        INT_BITS + self.frac_bits
    }

    pub fn resolution(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        -2.0
    }

    pub fn max_value(self) -> f64 {
        2.0 - self.resolution()
    }

    /// Integer code range `[-2^(FB+1), 2^(FB+1) - 1]`.
    pub fn code_range(self) -> (i64, i64) {
        let half = 1i64 << (self.frac_bits + 1);
        (-half, half - 1)
    }
}

/// Round half to even onto the `2^-FB` grid, then saturate.
pub fn quantize_value(x: f64, f: FxpFormat) -> f64 {
    let scale = (f.frac_bits as f64).exp2();
    let (lo, hi) = f.code_range();
    let code = (x * scale).round_ties_even().clamp(lo as f64, hi as f64);
    code / scale
}

pub fn quantize_tensor(t: &Tensor, f: FxpFormat) -> Tensor {
    t.map(|x| quantize_value(x, f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpMode {
    /// Quantized weights, full-precision contractions.
    Fpop,
    /// Quantized weights, every contraction result re-quantized.
    Qop,
}

impl fmt::Display for OpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpMode::Fpop => "fpop",
            OpMode::Qop => "qop",
        })
    }
}

impl FromStr for OpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpop" => Ok(OpMode::Fpop),
            "qop" => Ok(OpMode::Qop),
            _ => Err(Error::InvalidConfig(format!("unknown op mode {s:?}"))),
        }
    }
}

/// Where `qop` rounding happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// Round each pairwise contraction result.
    #[default]
    PerContraction,
    /// Round every product and every partial sum (sensitivity studies).
    PerMac,
}

/// Contractor that rounds results onto a fixed-point grid.
#[derive(Clone, Copy, Debug)]
pub struct QuantizingContractor {
    pub format: FxpFormat,
    pub granularity: Granularity,
}

impl Contractor for QuantizingContractor {
    fn contract(&mut self, a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor> {
        let f = self.format;
        match self.granularity {
            Granularity::PerContraction => Ok(quantize_tensor(&crate::tensor::contract(a, b, spec)?, f)),
            Granularity::PerMac => {
                let mats = matricize(a, b, spec)?;
                let (m, k, n) = (mats.m, mats.k, mats.n);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..k {
                            let prod = quantize_value(mats.left[i * k + p] * mats.right[p * n + j], f);
                            acc = quantize_value(acc + prod, f);
                        }
                        out[i * n + j] = acc;
                    }
                }
                Ok(mats.finish(out))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<N> {
    pub base: N,
    pub format: FxpFormat,
    pub mode: OpMode,
    pub granularity: Granularity,
}

/// Element-wise quantization of every weight; mode defaults to `qop`.
pub fn quantize_model<N: TensorNetwork>(m: &N, f: FxpFormat) -> QuantizedModel<N> {
    let mut base = m.clone();
    for t in base.tensors_mut() {
        *t = quantize_tensor(t, f);
    }
    QuantizedModel {
        base,
        format: f,
        mode: OpMode::Qop,
        granularity: Granularity::PerContraction,
    }
}

impl<N: TensorNetwork> QuantizedModel<N> {
    pub fn with_mode(mut self, mode: OpMode) -> Self {
        self.mode = mode;
        self
    }

    /// Fraction of weights that hit a saturation bound.
    pub fn saturated_fraction(&self) -> f64 {
        let (lo, hi) = (self.format.min_value(), self.format.max_value());
        let mut total = 0usize;
        let mut sat = 0usize;
        for t in self.base.tensors() {
            total += t.len();
            sat += t.data().iter().filter(|&&w| w == lo || w == hi).count();
        }
        sat as f64 / total.max(1) as f64
    }

    /// Inputs are quantized to the weight format before either mode runs.
    pub fn forward(&self, x: &EmbeddedJet) -> Result<Vec<f64>> {
        let xq = x.map_values(|v| quantize_value(v, self.format));
        match self.mode {
            OpMode::Fpop => self.base.forward_with(&xq, &mut Exact),
            OpMode::Qop => self.base.forward_with(
                &xq,
                &mut QuantizingContractor {
                    format: self.format,
                    granularity: self.granularity,
                },
            ),
        }
    }

    pub fn predict_scores(&self, data: &LabeledJets) -> Result<Vec<Vec<f64>>> {
        data.jets.par_iter().map(|x| self.forward(x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frac_bits: u32,
    pub mode: OpMode,
    pub accuracy: f64,
    /// Accuracy at the largest swept FB of the same mode minus this accuracy.
    pub drop_from_plateau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub float_accuracy: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn accuracy(&self, frac_bits: u32, mode: OpMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.frac_bits == frac_bits && r.mode == mode)
            .map(|r| r.accuracy)
    }

    /// Largest FB whose accuracy sits more than `threshold` below the
    /// plateau, or `None` when no FB does.
    pub fn knee(&self, mode: OpMode, threshold: f64) -> Option<u32> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode && r.drop_from_plateau > threshold)
            .map(|r| r.frac_bits)
            .max()
    }

    /// CSV with columns `arch,N,FB,mode,accuracy`.
    pub fn to_csv(&self, arch: &str, n: usize) -> String {
        let mut out = String::from("arch,N,FB,mode,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{arch},{n},{},{},{:.6}\n", r.frac_bits, r.mode, r.accuracy));
        }
        out
    }
}

fn decide<N: TensorNetwork>(model: &N, scores: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    scores.iter().map(|s| model.decision_values(s)).collect()
}

/// Accuracy of every `(FB, mode)` cell, sorted by mode then descending FB.
/// With `calibration` the model is first brought into its range-bounded
/// equivalent (see [`TensorNetwork::fixed_point_form`]); the float accuracy
/// always refers to the model as given.
pub fn ptq_sweep<N: TensorNetwork>(
    model: &N,
    data: &LabeledJets,
    fb_list: &[u32],
    modes: &[OpMode],
    calibration: Option<&[EmbeddedJet]>,
) -> Result<SweepTable> {
    let float_scores = crate::train::predict_scores(model, data)?;
    let prepared = match calibration {
        Some(c) => model.fixed_point_form(c)?,
        None => model.clone(),
    };
    let model = &prepared;
    let float_accuracy = accuracy_of(&decide(model, float_scores), &data.labels);

    let mut cells: Vec<(OpMode, u32)> = Vec::new();
    for &mode in modes {
        let mut fbs = fb_list.to_vec();
        fbs.sort_unstable_by(|a, b| b.cmp(a));
        fbs.dedup();
        cells.extend(fbs.into_iter().map(|fb| (mode, fb)));
    }
    let accs: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(mode, fb)| {
            let qm = quantize_model(model, FxpFormat::new(fb)?).with_mode(mode);
            Ok(accuracy_of(&decide(model, qm.predict_scores(data)?), &data.labels))
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    for (&(mode, fb), acc) in cells.iter().zip(accs) {
        rows.push(SweepRow {
            frac_bits: fb,
            mode,
            accuracy: acc?,
            drop_from_plateau: 0.0,
        });
    }
    for &mode in modes {
        let plateau = rows.iter().filter(|r| r.mode == mode).map(|r| r.accuracy).next();
        if let Some(p) = plateau {
            for r in rows.iter_mut().filter(|r| r.mode == mode) {
                r.drop_from_plateau = p - r.accuracy;
            }
        }
    }
    Ok(SweepTable { float_accuracy, rows })
}
