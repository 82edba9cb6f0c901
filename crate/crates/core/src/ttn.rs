//! Binary tree tensor network classifier.
//!
//! Layers are numbered from the root (`l = 0`) down to the leaves
//! (`l = L - 1`, `L = log2 N`). Node `[l, j]` is a rank-3 tensor
//! `(child, child, parent)`: leaf children have the physical dimension `d`,
//! interior children have `min(d^(2^(L-l-1)), chi)`, and the parent leg of
//! the root is the class axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contractor::{Contractor, Exact};
use crate::embedding::EmbeddedJet;
use crate::error::{Error, Result};
use crate::network::{capped_pow, outer, ForwardGrad, TensorNetwork};
use crate::tensor::{contract, qr_split, ContractionSpec, Tensor};

pub const ROOT_INIT_STD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct TtnModel {
    n_leaves: usize,
    phys_dim: usize,
    chi: usize,
    n_classes: usize,
    seed: u64,
    /// Layer-major: `[0,0], [1,0], [1,1], [2,0], ...`.
    tensors: Vec<Tensor>,
}

/// Flat position of node `[layer, j]`.
pub fn node_index(layer: usize, j: usize) -> usize {
    (1 << layer) - 1 + j
}

/// Dimension of the two child legs of every node in `layer`.
pub fn child_dim(n_layers: usize, layer: usize, d: usize, chi: usize) -> usize {
    if layer + 1 == n_layers {
        d
    } else {
        capped_pow(d, 1 << (n_layers - layer - 1), chi)
    }
}

pub fn layer_shape(n_layers: usize, layer: usize, d: usize, chi: usize, n_classes: usize) -> [usize; 3] {
    let c = child_dim(n_layers, layer, d, chi);
    let p = if layer == 0 {
        n_classes
    } else {
        child_dim(n_layers, layer - 1, d, chi)
    };
    [c, c, p]
}

impl TtnModel {
    pub fn shapes(n: usize, d: usize, chi: usize, n_classes: usize) -> Result<Vec<[usize; 3]>> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "TTN needs a power-of-two number of leaves >= 2, got {n}"
            )));
        }
        if d == 0 || chi == 0 || n_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "TTN dimensions must be positive (d={d}, chi={chi}, C={n_classes})"
            )));
        }
        let layers = n.trailing_zeros() as usize;
        Ok((0..layers)
            .flat_map(|l| std::iter::repeat_n(layer_shape(layers, l, d, chi, n_classes), 1 << l))
            .collect())
    }

    /// Isometric non-root tensors (QR of a Gaussian with the child legs as
    /// rows) and a small Gaussian root.
    pub fn new(n: usize, d: usize, chi: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes(n, d, chi, n_classes)?;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            if i == 0 {
                tensors.push(Tensor::random_normal(shape, ROOT_INIT_STD, &mut rng));
            } else {
                let g = Tensor::random_normal(shape, 1.0, &mut rng);
                let (q, _) = qr_split(&g, &[0, 1], &[2])?;
                tensors.push(q);
            }
        }
        Self::from_parts(n, d, chi, n_classes, seed, tensors)
    }

    pub fn with_init(
        n: usize,
        d: usize,
        chi: usize,
        n_classes: usize,
        seed: u64,
        mut init: impl FnMut(&[usize]) -> Tensor,
    ) -> Result<Self> {
        let tensors = Self::shapes(n, d, chi, n_classes)?.iter().map(|s| init(s)).collect();
        Self::from_parts(n, d, chi, n_classes, seed, tensors)
    }

    pub fn from_parts(
        n: usize,
        d: usize,
        chi: usize,
        n_classes: usize,
        seed: u64,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let shapes = Self::shapes(n, d, chi, n_classes)?;
        if tensors.len() != shapes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} tensors for a TTN with {} nodes",
                tensors.len(),
                shapes.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s {
                return Err(Error::InvalidConfig(format!(
                    "node {i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            n_leaves: n,
            phys_dim: d,
            chi,
            n_classes,
            seed,
            tensors,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_leaves.trailing_zeros() as usize
    }

    pub fn chi(&self) -> usize {
        self.chi
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn node(&self, layer: usize, j: usize) -> &Tensor {
        &self.tensors[node_index(layer, j)]
    }

    /// Make every non-root node an isometry from its child legs to its
    /// parent leg by pushing QR factors upward. Outputs are unchanged.
    pub fn canonicalize(&self) -> Result<Self> {
        let mut t = self.tensors.clone();
        for l in (1..self.n_layers()).rev() {
            for j in 0..(1 << l) {
                let (q, r) = qr_split(&t[node_index(l, j)], &[0, 1], &[2])?;
                t[node_index(l, j)] = q;
                let pi = node_index(l - 1, j / 2);
                t[pi] = if j % 2 == 0 {
                    contract(&r, &t[pi], &ContractionSpec::pair(1, 0))?
                } else {
                    contract(&t[pi], &r, &ContractionSpec::pair(1, 1))?.permute(&[0, 2, 1])?
                };
            }
        }
        Ok(Self {
            tensors: t,
            ..self.clone()
        })
    }

    /// Largest deviation from the identity of `T†T` over non-root nodes,
    /// contracting both child legs.
    pub fn isometry_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for t in &self.tensors[1..] {
            let g = contract(t, t, &ContractionSpec::new(vec![0, 1], vec![0, 1]))?;
            let n = g.shape()[0];
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((g.data()[i * n + j] - target).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Messages leaving every node, bottom-up; `msgs[node_index(l, j)]`.
    fn messages(&self, x: &EmbeddedJet, c: &mut dyn Contractor) -> Result<Vec<Tensor>> {
        let layers = self.n_layers();
        let mut msgs = vec![Tensor::scalar(0.0); self.tensors.len()];
        for l in (0..layers).rev() {
            for j in 0..(1 << l) {
                let (a, b) = if l + 1 == layers {
                    (
                        Tensor::vector(x.sites[2 * j].clone()),
                        Tensor::vector(x.sites[2 * j + 1].clone()),
                    )
                } else {
                    (
                        msgs[node_index(l + 1, 2 * j)].clone(),
                        msgs[node_index(l + 1, 2 * j + 1)].clone(),
                    )
                };
                let t = &self.tensors[node_index(l, j)];
                let half = c.contract(t, &a, &ContractionSpec::pair(0, 0))?;
                msgs[node_index(l, j)] = c.contract(&half, &b, &ContractionSpec::pair(0, 0))?;
            }
        }
        Ok(msgs)
    }
}

/// `p_c = o_c² / Σ o_k²`.
pub fn probabilities(overlaps: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = overlaps.iter().map(|o| o * o).sum();
    if total == 0.0 {
        return Err(Error::AllZeroOverlaps);
    }
    Ok(overlaps.iter().map(|o| o * o / total).collect())
}

impl TensorNetwork for TtnModel {
    fn n_sites(&self) -> usize {
        self.n_leaves
    }

    fn phys_dim(&self) -> usize {
        self.phys_dim
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Canonical form with a unit-norm root, then each layer is scaled by a
    /// power of two so the largest message over `calibration` lies in
    /// `(0.5, 1]`, as long as its weights stay below 1.5. Probabilities only
    /// depend on overlap ratios and are unchanged.
    fn fixed_point_form(&self, calibration: &[EmbeddedJet]) -> Result<Self> {
        let mut m = self.canonicalize()?;
        let norm = m.tensors[0].norm();
        if norm > 0.0 {
            m.tensors[0] = m.tensors[0].scale(1.0 / norm);
        }
        if calibration.is_empty() {
            return Ok(m);
        }
        for x in calibration {
            m.check_input(x)?;
        }
        for l in (0..m.n_layers()).rev() {
            let nodes = node_index(l, 0)..node_index(l + 1, 0);
            let mut peak = 0.0f64;
            for x in calibration {
                let msgs = m.messages(x, &mut Exact)?;
                for t in &msgs[nodes.clone()] {
                    peak = t.data().iter().fold(peak, |p, v| p.max(v.abs()));
                }
            }
            let wmax = m.tensors[nodes.clone()]
                .iter()
                .flat_map(|t| t.data())
                .fold(0.0f64, |p, v| p.max(v.abs()));
            if peak == 0.0 || wmax == 0.0 {
                continue;
            }
            let k = (1.0 / peak).log2().floor().min((1.5 / wmax).log2().floor());
            if k != 0.0 {
                let f = k.exp2();
                for t in &mut m.tensors[nodes.clone()] {
                    *t = t.scale(f);
                }
            }
        }
        Ok(m)
    }

    /// Classes are ranked by squared overlap.
    fn decision_values(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|o| o * o).collect()
    }

    fn forward_with(&self, x: &EmbeddedJet, c: &mut dyn Contractor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut msgs = self.messages(x, c)?;
        Ok(msgs.swap_remove(0).into_data())
    }

    fn forward_grad(
        &self,
        x: &EmbeddedJet,
        upstream: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<ForwardGrad> {
        self.check_input(x)?;
        let layers = self.n_layers();
        let msgs = self.messages(x, &mut Exact)?;
        let scores = msgs[0].data().to_vec();
        let u = upstream(&scores);
        if u.len() != self.n_classes {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient".into(),
                expected: self.n_classes,
                found: u.len(),
            });
        }

        // envs[i]: gradient of <u, out> with respect to the message leaving node i
        let mut envs = vec![Tensor::scalar(0.0); self.tensors.len()];
        envs[0] = Tensor::vector(u);
        let mut grads = vec![Tensor::scalar(0.0); self.tensors.len()];
        for l in 0..layers {
            for j in 0..(1 << l) {
                let i = node_index(l, j);
                let (a, b) = if l + 1 == layers {
                    (x.sites[2 * j].clone(), x.sites[2 * j + 1].clone())
                } else {
                    (
                        msgs[node_index(l + 1, 2 * j)].data().to_vec(),
                        msgs[node_index(l + 1, 2 * j + 1)].data().to_vec(),
                    )
                };
                let env = &envs[i];
                grads[i] = outer(&[&a, &b, env.data()]);
                if l + 1 < layers {
                    let t = &self.tensors[i];
                    // (c, c, p) . env -> (c, c)
                    let te = contract(t, env, &ContractionSpec::pair(2, 0))?;
                    let a_t = Tensor::vector(a);
                    let b_t = Tensor::vector(b);
                    envs[node_index(l + 1, 2 * j)] = contract(&te, &b_t, &ContractionSpec::pair(1, 0))?;
                    envs[node_index(l + 1, 2 * j + 1)] = contract(&a_t, &te, &ContractionSpec::pair(0, 0))?;
                }
            }
        }
        Ok(ForwardGrad { scores, grads })
    }
}
