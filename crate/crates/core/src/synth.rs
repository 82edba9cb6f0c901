//! Synthetic five-class jets written in the hls4ml 16-feature column order.
//!
//! Each jet is a set of prongs (one for g/q, two for W/Z, three for t) whose
//! opening angle follows `ΔR ≈ m / (p_T √(z(1-z)))`. Constituents share each
//! prong's momentum with gamma-distributed weights and scatter around the
//! prong axis with a class-dependent width. The generator is a stand-in for
//! the real dataset; class separability is comparable in kind, not in value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FeatureColumns, JetRecord, N_CLASSES, RAW_FEATURES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_jets: usize,
    pub seed: u64,
    pub max_constituents: usize,
    pub jet_pt: f64,
    pub jet_pt_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_jets: 10_000,
            seed: 0,
            max_constituents: 64,
            jet_pt: 1000.0,
            jet_pt_spread: 100.0,
        }
    }
}

struct ClassShape {
    /// Prong masses: one value per split (empty for single-prong jets).
    mass: &'static [f64],
    multiplicity: f64,
    width: f64,
    /// Gamma shape of constituent momentum weights; small means a harder
    /// leading particle.
    frag_shape: f64,
}

const CLASSES: [ClassShape; N_CLASSES] = [
    // g
    ClassShape {
        mass: &[],
        multiplicity: 40.0,
        width: 0.09,
        frag_shape: 1.2,
    },
    // q
    ClassShape {
        mass: &[],
        multiplicity: 22.0,
        width: 0.045,
        frag_shape: 0.45,
    },
    // W
    ClassShape {
        mass: &[80.4],
        multiplicity: 30.0,
        width: 0.025,
        frag_shape: 0.7,
    },
    // Z
    ClassShape {
        mass: &[91.2],
        multiplicity: 34.0,
        width: 0.03,
        frag_shape: 0.9,
    },
    // t: b + W, then W -> qq
    ClassShape {
        mass: &[173.0, 80.4],
        multiplicity: 48.0,
        width: 0.03,
        frag_shape: 0.8,
    },
];

struct Prong {
    frac: f64,
    eta: f64,
    phi: f64,
}

/// Split a prong of momentum fraction `frac` at the origin of its own axis
/// into two with an opening angle set by `mass`.
fn split<R: Rng>(p: Prong, mass: f64, pt: f64, rng: &mut R) -> (Prong, Prong) {
    let z: f64 = rng.gen_range(0.2..0.8);
    let dr = (mass / (pt * p.frac * (z * (1.0 - z)).sqrt())).min(0.8);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    (
        Prong {
            frac: p.frac * z,
            eta: p.eta + (1.0 - z) * dr * ux,
            phi: p.phi + (1.0 - z) * dr * uy,
        },
        Prong {
            frac: p.frac * (1.0 - z),
            eta: p.eta - z * dr * ux,
            phi: p.phi - z * dr * uy,
        },
    )
}

fn generate_jet(cfg: &SynthConfig, index: usize) -> JetRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let label = rng.gen_range(0..N_CLASSES);
    let shape = &CLASSES[label];

    let jet_pt = Normal::new(cfg.jet_pt, cfg.jet_pt_spread)
        .unwrap()
        .sample(&mut rng)
        .max(0.2 * cfg.jet_pt);
    let jet_eta: f64 = rng.gen_range(-1.0..1.0);
    let jet_phi: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);

    let mut prongs = vec![Prong {
        frac: 1.0,
        eta: 0.0,
        phi: 0.0,
    }];
    for &m in shape.mass {
        // the last prong is the one that splits again (W inside a top)
        let p = prongs.pop().unwrap();
        let (a, b) = split(p, m, jet_pt, &mut rng);
        prongs.push(a);
        prongs.push(b);
    }

    let total = Poisson::new(shape.multiplicity)
        .unwrap()
        .sample(&mut rng)
        .max(prongs.len() as f64 + 1.0) as usize;
    let gamma = Gamma::new(shape.frag_shape, 1.0).unwrap();
    let spread = Normal::new(0.0, shape.width).unwrap();

    // (pt, deta, dphi) relative to the generator axis
    let mut parts: Vec<(f64, f64, f64)> = Vec::with_capacity(total);
    for p in &prongs {
        let n = ((total as f64 * p.frac).round() as usize).max(1);
        let w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng) + 1e-9).collect();
        let sum: f64 = w.iter().sum();
        for wi in w {
            let pt = jet_pt * p.frac * wi / sum;
            // softer particles spread wider
            let scale = 1.0 + 0.5 * (1.0 - (wi / sum)).max(0.0);
            parts.push((pt, p.eta + scale * spread.sample(&mut rng), p.phi + scale * spread.sample(&mut rng)));
        }
    }

    let pt_sum: f64 = parts.iter().map(|p| p.0).sum();
    let axis_eta = parts.iter().map(|p| p.0 * p.1).sum::<f64>() / pt_sum;
    let axis_phi = parts.iter().map(|p| p.0 * p.2).sum::<f64>() / pt_sum;
    let e_sum: f64 = parts.iter().map(|p| p.0 * (jet_eta + p.1).cosh()).sum();

    parts.sort_by(|a, b| b.0.total_cmp(&a.0));
    parts.truncate(cfg.max_constituents);

    let mut constituents = Vec::with_capacity(parts.len() * RAW_FEATURES);
    for &(pt, deta, dphi) in &parts {
        let eta = jet_eta + deta;
        let phi = jet_phi + dphi;
        let e = pt * eta.cosh();
        let etarel = deta - axis_eta;
        let phirel = dphi - axis_phi;
        let row = [
            pt * phi.cos(),
            pt * phi.sin(),
            pt * eta.sinh(),
            e,
            e / e_sum,
            pt,
            pt / pt_sum,
            eta,
            etarel,
            etarel,
            phi,
            phirel,
            phirel,
            (etarel * etarel + phirel * phirel).sqrt(),
            eta.tanh(),
            etarel.tanh(),
        ];
        constituents.extend(row.iter().map(|&v| v as f32));
    }
    JetRecord {
        constituents,
        n_features: RAW_FEATURES,
        label: label as u8,
    }
}

/// Jets are independent streams of one seed, so output does not depend on
/// the thread count.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<JetRecord>> {
    if cfg.max_constituents == 0 || cfg.max_constituents > u16::MAX as usize {
        return Err(Error::InvalidConfig(format!(
            "max constituents must be in 1..=65535, got {}",
            cfg.max_constituents
        )));
    }
    if !(cfg.jet_pt > 0.0 && cfg.jet_pt_spread >= 0.0) {
        return Err(Error::InvalidConfig("jet pT must be positive".into()));
    }
    let cols = FeatureColumns::HLS4ML;
    Ok((0..cfg.n_jets)
        .into_par_iter()
        .map(|i| {
            let mut r = generate_jet(cfg, i);
            r.sort_by_pt(cols.pt);
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{decode_dataset, encode_dataset};

    #[test]
    fn deterministic_and_sorted() {
        let cfg = SynthConfig {
            n_jets: 200,
            seed: 4,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let pt = FeatureColumns::HLS4ML.pt;
        for r in &a {
            assert!(r.n_constituents() >= 2);
            for i in 1..r.n_constituents() {
                assert!(r.row(i - 1)[pt] >= r.row(i)[pt]);
            }
            assert!(r.constituents.iter().all(|v| v.is_finite()));
        }
        let other = generate(&SynthConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn all_classes_and_jtn1_round_trip() {
        let recs = generate(&SynthConfig {
            n_jets: 300,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let mut seen = [0usize; N_CLASSES];
        for r in &recs {
            seen[r.label as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 30));
        let bytes = encode_dataset(&recs, RAW_FEATURES).unwrap();
        let (_, back) = decode_dataset(&bytes, &FeatureColumns::HLS4ML).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn leading_particle_is_harder_for_quarks() {
        let recs = generate(&SynthConfig {
            n_jets: 2000,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let ptrel = 6;
        let mean = |label: u8| {
            let v: Vec<f64> = recs.iter().filter(|r| r.label == label).map(|r| r.row(0)[ptrel] as f64).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) > mean(0));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig {
            max_constituents: 0,
            ..Default::default()
        })
        .is_err());
    }
}
