//! Polynomial feature maps turning scaled constituents into unit-norm site
//! vectors. The product state over all sites is never materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::KEPT_FEATURES;

pub const PARTICLE_DIM: usize = 7;
pub const FEATURE_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// One 7-dim site per constituent: `[1, pT, Erel, dR, pT², Erel², dR²]`.
    PerParticle,
    /// Two 3-dim sites per constituent (p_T then ΔR): `[1, v, v²]`.
    PerFeature,
}

impl Layout {
    pub fn phys_dim(self) -> usize {
        match self {
            Layout::PerParticle => PARTICLE_DIM,
            Layout::PerFeature => FEATURE_DIM,
        }
    }

    pub fn sites_per_particle(self) -> usize {
        match self {
            Layout::PerParticle => 1,
            Layout::PerFeature => 2,
        }
    }

    pub fn n_sites(self, n_particles: usize) -> usize {
        n_particles * self.sites_per_particle()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairFeature {
    Pt,
    DeltaR,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedJet {
    pub sites: Vec<Vec<f64>>,
    pub layout: Layout,
}

impl EmbeddedJet {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn phys_dim(&self) -> usize {
        self.layout.phys_dim()
    }

    /// Site `i` of the result is site `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        validate_permutation(perm, self.sites.len())?;
        Ok(Self {
            sites: perm.iter().map(|&p| self.sites[p].clone()).collect(),
            layout: self.layout,
        })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            sites: self
                .sites
                .iter()
                .map(|s| s.iter().map(|&v| f(v)).collect())
                .collect(),
            layout: self.layout,
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let c = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= c);
    v
}

pub fn embed_particle(x: [f64; KEPT_FEATURES]) -> Result<[f64; PARTICLE_DIM]> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("particle features {x:?}")));
    }
    let [pt, e, dr] = x;
    let v = normalized(vec![1.0, pt, e, dr, pt * pt, e * e, dr * dr]);
    Ok(v.try_into().unwrap())
}

pub fn embed_feature_pair(x: [f64; KEPT_FEATURES], which: PairFeature) -> Result<[f64; FEATURE_DIM]> {
    let v = match which {
        PairFeature::Pt => x[0],
        PairFeature::DeltaR => x[2],
    };
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{which:?} = {v}")));
    }
    Ok(normalized(vec![1.0, v, v * v]).try_into().unwrap())
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for {n} sites",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!("{perm:?} is not a bijection")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Site order placing every p_T site first and every ΔR site second, for the
/// [`Layout::PerFeature`] interleaved order `[pT₁, ΔR₁, pT₂, ΔR₂, ...]`.
pub fn pt_first_permutation(n_particles: usize) -> Vec<usize> {
    (0..n_particles)
        .map(|i| 2 * i)
        .chain((0..n_particles).map(|i| 2 * i + 1))
        .collect()
}

/// `rows` is `N x 3` (p_T, E_rel, ΔR). Sites are built in layout order and
/// then reordered by `permutation` when given.
pub fn embed_jet(rows: &[f64], layout: Layout, permutation: Option<&[usize]>) -> Result<EmbeddedJet> {
    if !rows.len().is_multiple_of(KEPT_FEATURES) {
        return Err(Error::DimensionMismatch {
            what: "jet rows".into(),
            expected: KEPT_FEATURES,
            found: rows.len() % KEPT_FEATURES,
        });
    }
    let mut sites = Vec::with_capacity(layout.n_sites(rows.len() / KEPT_FEATURES));
    for row in rows.chunks_exact(KEPT_FEATURES) {
        let x = [row[0], row[1], row[2]];
        match layout {
            Layout::PerParticle => sites.push(embed_particle(x)?.to_vec()),
            Layout::PerFeature => {
                sites.push(embed_feature_pair(x, PairFeature::Pt)?.to_vec());
                sites.push(embed_feature_pair(x, PairFeature::DeltaR)?.to_vec());
            }
        }
    }
    let jet = EmbeddedJet { sites, layout };
    match permutation {
        Some(p) => jet.permuted(p),
        None => Ok(jet),
    }
}

/// Human-readable names for each site after `permutation`.
pub fn site_labels(layout: Layout, n_particles: usize, permutation: Option<&[usize]>) -> Vec<String> {
    let base: Vec<String> = match layout {
        Layout::PerParticle => (0..n_particles).map(|i| format!("p{i}")).collect(),
        Layout::PerFeature => (0..n_particles)
            .flat_map(|i| [format!("pT{i}"), format!("dR{i}")])
            .collect(),
    };
    match permutation {
        Some(p) => p.iter().map(|&i| base[i].clone()).collect(),
        None => base,
    }
}
