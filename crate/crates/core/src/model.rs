//! A trained classifier: network, input embedding and feature scaler, plus
//! the `MPSC` / `TTNC` checkpoint files.
//!
//! Checkpoints are little-endian: 4-byte magic, `u32` version, the network
//! header, the embedding block, an optional scaler block, a `u32` tensor
//! count, then every tensor as `f64` values in declared order. Shapes are
//! implied by the header.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_jet, pt_first_permutation, site_labels, EmbeddedJet, Layout};
use crate::error::{Error, Result};
use crate::hwmodel::{Arch, Topology};
use crate::ingest::{make_batch, JetBatch, JetRecord, ScalerParams, KEPT_FEATURES};
use crate::mps::MpsModel;
use crate::network::TensorNetwork;
use crate::tensor::Tensor;
use crate::train::LabeledJets;
use crate::ttn::TtnModel;

pub const MPS_MAGIC: [u8; 4] = *b"MPSC";
pub const TTN_MAGIC: [u8; 4] = *b"TTNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Mps(MpsModel),
    Ttn(TtnModel),
}

impl Network {
    pub fn arch(&self) -> Arch {
        match self {
            Network::Mps(_) => Arch::Mps,
            Network::Ttn(_) => Arch::Ttn,
        }
    }

    pub fn topology(&self) -> Topology {
        match self {
            Network::Mps(m) => Topology::from(m),
            Network::Ttn(m) => Topology::from(m),
        }
    }

    pub fn n_sites(&self) -> usize {
        match self {
            Network::Mps(m) => m.n_sites(),
            Network::Ttn(m) => m.n_sites(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Network::Mps(m) => m.param_count(),
            Network::Ttn(m) => m.param_count(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Network::Mps(m) => m.seed(),
            Network::Ttn(m) => m.seed(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        match self {
            Network::Mps(m) => m.tensors(),
            Network::Ttn(m) => m.tensors(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub layout: Layout,
    /// Reorder per-feature sites so all p_T sites precede all ΔR sites.
    pub pt_first: bool,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            layout: Layout::PerParticle,
            pt_first: false,
        }
    }
}

impl EmbeddingSpec {
    pub fn permutation(&self, n_particles: usize) -> Option<Vec<usize>> {
        (self.pt_first && self.layout == Layout::PerFeature).then(|| pt_first_permutation(n_particles))
    }

    /// Number of particles feeding `n_sites` sites.
    pub fn n_particles(&self, n_sites: usize) -> Result<usize> {
        let per = self.layout.sites_per_particle();
        if !n_sites.is_multiple_of(per) {
            return Err(Error::InvalidConfig(format!(
                "{n_sites} sites cannot hold whole particles with {per} sites each"
            )));
        }
        Ok(n_sites / per)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub network: Network,
    pub embedding: EmbeddingSpec,
    pub scaler: Option<ScalerParams>,
}

impl Classifier {
    pub fn new(network: Network, embedding: EmbeddingSpec, scaler: Option<ScalerParams>) -> Result<Self> {
        let c = Self {
            network,
            embedding,
            scaler,
        };
        c.embedding.n_particles(c.network.n_sites())?;
        let d = match &c.network {
            Network::Mps(m) => m.phys_dim(),
            Network::Ttn(m) => m.phys_dim(),
        };
        if d != c.embedding.layout.phys_dim() {
            return Err(Error::DimensionMismatch {
                what: "physical dimension".into(),
                expected: c.embedding.layout.phys_dim(),
                found: d,
            });
        }
        Ok(c)
    }

    pub fn n_particles(&self) -> usize {
        self.embedding
            .n_particles(self.network.n_sites())
            .expect("checked at construction")
    }

    pub fn site_labels(&self) -> Vec<String> {
        let n = self.n_particles();
        site_labels(self.embedding.layout, n, self.embedding.permutation(n).as_deref())
    }

    /// Embed already-scaled `N x 3` rows.
    pub fn embed_rows(&self, rows: &[f64]) -> Result<EmbeddedJet> {
        let perm = self.embedding.permutation(self.n_particles());
        embed_jet(rows, self.embedding.layout, perm.as_deref())
    }

    pub fn embed_batch(&self, batch: &JetBatch) -> Result<Vec<EmbeddedJet>> {
        if batch.n_constituents != self.n_particles() {
            return Err(Error::DimensionMismatch {
                what: "constituents per jet".into(),
                expected: self.n_particles(),
                found: batch.n_constituents,
            });
        }
        (0..batch.len()).into_par_iter().map(|i| self.embed_rows(batch.jet(i))).collect()
    }

    /// Truncate, scale with the stored scaler and embed.
    pub fn prepare(&self, records: &[JetRecord]) -> Result<LabeledJets> {
        let scaler = self
            .scaler
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("classifier has no feature scaler".into()))?;
        let batch = make_batch(records, scaler, self.n_particles())?;
        Ok(LabeledJets {
            jets: self.embed_batch(&batch)?,
            labels: batch.labels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        match &self.network {
            Network::Mps(m) => {
                w.bytes(&MPS_MAGIC);
                w.u32(CHECKPOINT_VERSION);
                for v in [m.n_sites(), m.phys_dim(), m.bond_cap(), m.n_classes(), m.label_site()] {
                    w.u32(v as u32);
                }
                w.u64(m.seed());
            }
            Network::Ttn(m) => {
                w.bytes(&TTN_MAGIC);
                w.u32(CHECKPOINT_VERSION);
                for v in [m.n_sites(), m.phys_dim(), m.chi(), m.n_classes()] {
                    w.u32(v as u32);
                }
                w.u64(m.seed());
            }
        }
        w.u8(match self.embedding.layout {
            Layout::PerParticle => 0,
            Layout::PerFeature => 1,
        });
        w.u8(self.embedding.pt_first as u8);
        match &self.scaler {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u32(s.columns.len() as u32);
                for i in 0..s.columns.len() {
                    w.u32(s.columns[i] as u32);
                    w.f64(s.q5[i]);
                    w.f64(s.q95[i]);
                }
            }
        }
        let tensors = self.network.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        let is_mps = match magic {
            m if m == MPS_MAGIC => true,
            m if m == TTN_MAGIC => false,
            _ => return Err(r.err(0, format!("unknown magic {magic:?}"))),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let header_at = r.pos;
        let shapes: Vec<Vec<usize>>;
        let build: Box<dyn Fn(Vec<Tensor>) -> Result<Network>>;
        if is_mps {
            let (n, d, cap, c, label) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
            let seed = r.u64()?;
            if n == 0 || d == 0 || cap == 0 || c == 0 || label >= n {
                return Err(r.err(header_at, format!("invalid MPS header n={n} d={d} D={cap} C={c} label={label}")));
            }
            shapes = MpsModel::shapes(n, d, cap, c, label);
            build = Box::new(move |t| Ok(Network::Mps(MpsModel::from_parts(n, d, cap, c, label, seed, t)?)));
        } else {
            let (n, d, chi, c) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
            let seed = r.u64()?;
            shapes = TtnModel::shapes(n, d, chi, c)
                .map_err(|e| r.err(header_at, e.to_string()))?
                .iter()
                .map(|s| s.to_vec())
                .collect();
            build = Box::new(move |t| Ok(Network::Ttn(TtnModel::from_parts(n, d, chi, c, seed, t)?)));
        }
        let layout_at = r.pos;
        let layout = match r.u8()? {
            0 => Layout::PerParticle,
            1 => Layout::PerFeature,
            v => return Err(r.err(layout_at, format!("unknown layout code {v}"))),
        };
        let pt_first = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(r.err(layout_at + 1, format!("invalid pt_first flag {v}"))),
        };
        let scaler_at = r.pos;
        let scaler = match r.u8()? {
            0 => None,
            1 => {
                let k = r.usize()?;
                if k != KEPT_FEATURES {
                    return Err(r.err(scaler_at + 1, format!("scaler with {k} features")));
                }
                let (mut columns, mut q5, mut q95) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..k {
                    columns.push(r.usize()?);
                    q5.push(r.f64()?);
                    q95.push(r.f64()?);
                }
                Some(ScalerParams { columns, q5, q95 })
            }
            v => return Err(r.err(scaler_at, format!("invalid scaler flag {v}"))),
        };
        let count_at = r.pos;
        let count = r.usize()?;
        if count != shapes.len() {
            return Err(r.err(count_at, format!("{count} tensors, header implies {}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for s in &shapes {
            let len: usize = s.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64()?);
            }
            tensors.push(Tensor::new(s.clone(), data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Classifier::new(build(tensors)?, EmbeddingSpec { layout, pt_first }, scaler)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, reason: String) -> Error {
        Error::Checkpoint { offset, reason }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
