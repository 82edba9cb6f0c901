//! JTN1 jet files, robust feature scaling and fixed-size batches.
//!
//! JTN1 layout (all integers little-endian):
//!
//! ```text
//! "JTN1" | u32 jet count | u16 max constituents | u16 feature count
//! per jet: u8 label | u16 constituent count | count * features * f32 (row-major)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"JTN1";
pub const N_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["g", "q", "W", "Z", "t"];
pub const RAW_FEATURES: usize = 16;
/// Features kept per constituent: (p_T, E_rel, ΔR).
pub const KEPT_FEATURES: usize = 3;

/// Column positions of the kept features among the raw constituent columns.
///
/// The default follows the column order of the public hls4ml constituent
/// table: `px py pz e erel pt ptrel eta etarel etarot phi phirel phirot
/// deltaR costheta costhetarel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumns {
    pub pt: usize,
    pub e_rel: usize,
    pub delta_r: usize,
}

impl FeatureColumns {
    pub const HLS4ML: FeatureColumns = FeatureColumns {
        pt: 5,
        e_rel: 4,
        delta_r: 13,
    };

    pub fn as_array(&self) -> [usize; KEPT_FEATURES] {
        [self.pt, self.e_rel, self.delta_r]
    }
}

impl Default for FeatureColumns {
    fn default() -> Self {
        Self::HLS4ML
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetRecord {
    /// Row-major `n_constituents x n_features`.
    pub constituents: Vec<f32>,
    pub n_features: usize,
    pub label: u8,
}

impl JetRecord {
    pub fn n_constituents(&self) -> usize {
        if self.n_features == 0 {
            0
        } else {
            self.constituents.len() / self.n_features
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.constituents[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Stable sort of rows by descending value of column `pt`.
    pub fn sort_by_pt(&mut self, pt: usize) {
        let nf = self.n_features;
        let mut rows: Vec<&[f32]> = self.constituents.chunks(nf).collect();
        rows.sort_by(|a, b| b[pt].total_cmp(&a[pt]));
        self.constituents = rows.concat();
    }
}

/// Serialize records to JTN1 bytes.
pub fn encode_dataset(records: &[JetRecord], n_features: usize) -> Result<Vec<u8>> {
    let max_const = records.iter().map(JetRecord::n_constituents).max().unwrap_or(0);
    if max_const > u16::MAX as usize || n_features > u16::MAX as usize {
        return Err(Error::InvalidConfig("dimensions exceed u16".into()));
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::InvalidConfig("more than u32::MAX jets".into()))?;
    let mut out = Vec::with_capacity(12 + records.iter().map(|r| 3 + 4 * r.constituents.len()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(max_const as u16).to_le_bytes());
    out.extend_from_slice(&(n_features as u16).to_le_bytes());
    for r in records {
        if r.n_features != n_features {
            return Err(Error::InvalidConfig(format!(
                "record has {} features, file declares {n_features}",
                r.n_features
            )));
        }
        if r.label as usize >= N_CLASSES {
            return Err(Error::LabelOutOfRange {
                offset: out.len(),
                label: r.label,
            });
        }
        out.push(r.label);
        out.extend_from_slice(&(r.n_constituents() as u16).to_le_bytes());
        for v in &r.constituents {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[JetRecord], n_features: usize) -> Result<()> {
    let bytes = encode_dataset(records, n_features)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Header fields of a JTN1 file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetHeader {
    pub n_jets: u32,
    pub max_constituents: u16,
    pub n_features: u16,
}

/// Parse JTN1 bytes. Constituent rows are re-sorted by descending p_T
/// (stable, so already sorted input is untouched).
pub fn decode_dataset(bytes: &[u8], columns: &FeatureColumns) -> Result<(DatasetHeader, Vec<JetRecord>)> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic = rd.take(4).map_err(|_| Error::MalformedHeader {
        offset: 0,
        reason: "file shorter than magic".into(),
    })?;
    if magic != MAGIC {
        return Err(Error::MalformedHeader {
            offset: 0,
            reason: format!("bad magic {magic:02X?}"),
        });
    }
    let header_err = |offset: usize| move |_| Error::MalformedHeader {
        offset,
        reason: "header truncated".into(),
    };
    let n_jets = rd.u32().map_err(header_err(4))?;
    let max_constituents = rd.u16().map_err(header_err(8))?;
    let n_features = rd.u16().map_err(header_err(10))?;
    let nf = n_features as usize;
    if columns.as_array().iter().any(|&c| c >= nf) {
        return Err(Error::MalformedHeader {
            offset: 10,
            reason: format!("feature count {nf} too small for columns {columns:?}"),
        });
    }

    let mut records = Vec::with_capacity(n_jets as usize);
    for _ in 0..n_jets {
        let offset = rd.pos;
        let label = rd.u8()?;
        if label as usize >= N_CLASSES {
            return Err(Error::LabelOutOfRange { offset, label });
        }
        let count_offset = rd.pos;
        let count = rd.u16()?;
        if count > max_constituents {
            return Err(Error::MalformedHeader {
                offset: count_offset,
                reason: format!("jet has {count} constituents, header max is {max_constituents}"),
            });
        }
        let raw = rd.take(count as usize * nf * 4)?;
        let constituents = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut rec = JetRecord {
            constituents,
            n_features: nf,
            label,
        };
        rec.sort_by_pt(columns.pt);
        records.push(rec);
    }
    if rd.pos != bytes.len() {
        return Err(Error::MalformedHeader {
            offset: rd.pos,
            reason: format!("{} trailing bytes after {n_jets} jets", bytes.len() - rd.pos),
        });
    }
    Ok((
        DatasetHeader {
            n_jets,
            max_constituents,
            n_features,
        },
        records,
    ))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<JetRecord>> {
    load_dataset_with(path, &FeatureColumns::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, columns: &FeatureColumns) -> Result<Vec<JetRecord>> {
    let bytes = fs::read(path)?;
    Ok(decode_dataset(&bytes, columns)?.1)
}

/// Per-feature 5th/95th percentiles of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    /// Raw column index of each scaled feature.
    pub columns: Vec<usize>,
    pub q5: Vec<f64>,
    pub q95: Vec<f64>,
}

impl ScalerParams {
    /// `(x - q5) / (q95 - q5)`; values outside the range are not clipped.
    pub fn scale(&self, feature: usize, x: f64) -> f64 {
        (x - self.q5[feature]) / (self.q95[feature] - self.q5[feature])
    }
}

/// Percentile `p` in `[0, 1]` of sorted data with linear interpolation
/// between order statistics.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn fit_scaler(train: &[JetRecord], feature_columns: &[usize]) -> Result<ScalerParams> {
    if train.is_empty() {
        return Err(Error::Empty("training split has no jets".into()));
    }
    let mut q5 = Vec::with_capacity(feature_columns.len());
    let mut q95 = Vec::with_capacity(feature_columns.len());
    for &col in feature_columns {
        let mut values: Vec<f64> = train
            .iter()
            .flat_map(|r| (0..r.n_constituents()).map(move |i| r.row(i)[col] as f64))
            .collect();
        if values.is_empty() {
            return Err(Error::Empty("training split has no constituents".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature column {col}")));
        }
        values.sort_by(f64::total_cmp);
        let lo = percentile_sorted(&values, 0.05);
        let hi = percentile_sorted(&values, 0.95);
        if hi <= lo {
            return Err(Error::ConstantFeature {
                feature: col,
                value: lo,
            });
        }
        q5.push(lo);
        q95.push(hi);
    }
    Ok(ScalerParams {
        columns: feature_columns.to_vec(),
        q5,
        q95,
    })
}

/// Fixed-size scaled jets, `features` is row-major `B x N x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct JetBatch {
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub n_constituents: usize,
}

impl JetBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `N x 3` slice for jet `i`.
    pub fn jet(&self, i: usize) -> &[f64] {
        let stride = self.n_constituents * KEPT_FEATURES;
        &self.features[i * stride..(i + 1) * stride]
    }

    pub fn subset(&self, indices: &[usize]) -> JetBatch {
        let mut features = Vec::with_capacity(indices.len() * self.n_constituents * KEPT_FEATURES);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.jet(i));
            labels.push(self.labels[i]);
        }
        JetBatch {
            features,
            labels,
            n_constituents: self.n_constituents,
        }
    }
}

/// Keep the `n` highest-p_T constituents, scale them, and zero-pad.
/// Records must already be sorted by descending p_T (as loaded).
pub fn make_batch(records: &[JetRecord], scaler: &ScalerParams, n: usize) -> Result<JetBatch> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidConfig(format!("n = {n} is not a power of two")));
    }
    if scaler.columns.len() != KEPT_FEATURES {
        return Err(Error::InvalidConfig(format!(
            "scaler has {} features, batches need {KEPT_FEATURES}",
            scaler.columns.len()
        )));
    }
    let mut features = vec![0.0; records.len() * n * KEPT_FEATURES];
    let mut labels = Vec::with_capacity(records.len());
    for (j, rec) in records.iter().enumerate() {
        let base = j * n * KEPT_FEATURES;
        for i in 0..rec.n_constituents().min(n) {
            let row = rec.row(i);
            for (f, &col) in scaler.columns.iter().enumerate() {
                features[base + i * KEPT_FEATURES + f] = scaler.scale(f, row[col] as f64);
            }
        }
        labels.push(rec.label);
    }
    Ok(JetBatch {
        features,
        labels,
        n_constituents: n,
    })
}
