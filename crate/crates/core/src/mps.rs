//! Matrix product state classifier.
//!
//! Site `k` holds a tensor shaped `(b[k], d, b[k+1])`; the label site carries
//! an extra trailing class axis `(b[k], d, b[k+1], C)`. Bond dimensions are
//! capped at both boundaries, `b[k] = min(d^k, d^(N-k), D)`.
//!
//! Inference follows the hardware schedule: every site vector is absorbed
//! into its tensor first, then a left chain and a right chain advance toward
//! the label site and are merged there.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contractor::Contractor;
use crate::embedding::EmbeddedJet;
use crate::error::{Error, Result};
use crate::network::{capped_pow, outer, ForwardGrad, TensorNetwork};
use crate::tensor::{contract, qr_split, ContractionSpec, Tensor};

pub const INIT_STD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct MpsModel {
    n_sites: usize,
    phys_dim: usize,
    bond_cap: usize,
    n_classes: usize,
    label_site: usize,
    seed: u64,
    tensors: Vec<Tensor>,
}

/// `b[0..=n]` with `b[k] = min(d^k, d^(n-k), cap)`.
pub fn bond_dims(n: usize, d: usize, cap: usize) -> Vec<usize> {
    (0..=n)
        .map(|k| capped_pow(d, k, cap).min(capped_pow(d, n - k, cap)))
        .collect()
}

/// Default label position: the middle of the chain.
pub fn default_label_site(n: usize) -> usize {
    n / 2
}

impl MpsModel {
    pub fn shapes(n: usize, d: usize, bond_cap: usize, n_classes: usize, label_site: usize) -> Vec<Vec<usize>> {
        let b = bond_dims(n, d, bond_cap);
        (0..n)
            .map(|k| {
                let mut s = vec![b[k], d, b[k + 1]];
                if k == label_site {
                    s.push(n_classes);
                }
                s
            })
            .collect()
    }

    /// Random model, entries i.i.d. normal with standard deviation [`INIT_STD`].
    pub fn new(
        n: usize,
        d: usize,
        bond_cap: usize,
        n_classes: usize,
        label_site: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(n, d, bond_cap, n_classes, label_site, seed, |shape| {
            Tensor::random_normal(shape, INIT_STD, &mut rng)
        })
    }

    pub fn with_init(
        n: usize,
        d: usize,
        bond_cap: usize,
        n_classes: usize,
        label_site: usize,
        seed: u64,
        mut init: impl FnMut(&[usize]) -> Tensor,
    ) -> Result<Self> {
        if n == 0 || d == 0 || bond_cap == 0 || n_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "MPS dimensions must be positive (n={n}, d={d}, D={bond_cap}, C={n_classes})"
            )));
        }
        if label_site >= n {
            return Err(Error::InvalidConfig(format!(
                "label site {label_site} outside chain of {n}"
            )));
        }
        let tensors = Self::shapes(n, d, bond_cap, n_classes, label_site)
            .iter()
            .map(|s| init(s))
            .collect();
        Ok(Self {
            n_sites: n,
            phys_dim: d,
            bond_cap,
            n_classes,
            label_site,
            seed,
            tensors,
        })
    }

    /// Rebuild from stored tensors, checking every shape.
    pub fn from_parts(
        n: usize,
        d: usize,
        bond_cap: usize,
        n_classes: usize,
        label_site: usize,
        seed: u64,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let mut it = tensors.into_iter();
        let m = Self::with_init(n, d, bond_cap, n_classes, label_site, seed, |_| {
            it.next().unwrap_or_else(|| Tensor::zeros(&[0]))
        })?;
        if it.next().is_some() {
            return Err(Error::InvalidConfig("too many tensors for MPS".into()));
        }
        let want = Self::shapes(n, d, bond_cap, n_classes, label_site);
        for (k, (t, s)) in m.tensors.iter().zip(&want).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "site {k} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(m)
    }

    pub fn bond_cap(&self) -> usize {
        self.bond_cap
    }

    pub fn label_site(&self) -> usize {
        self.label_site
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bonds(&self) -> Vec<usize> {
        bond_dims(self.n_sites, self.phys_dim, self.bond_cap)
    }

    /// Bring every non-label tensor into isometric form pointing at the label
    /// site, via QR sweeps from both ends. Outputs are unchanged.
    pub fn canonicalize(&self) -> Result<Self> {
        let mut t = self.tensors.clone();
        let l = self.label_site;
        for k in 0..l {
            let (q, r) = qr_split(&t[k], &[0, 1], &[2])?;
            t[k] = q;
            t[k + 1] = contract(&r, &t[k + 1], &ContractionSpec::pair(1, 0))?;
        }
        for k in (l + 1..self.n_sites).rev() {
            // Q: (d, right, r), R: (r, left)
            let (q, r) = qr_split(&t[k], &[1, 2], &[0])?;
            t[k] = q.permute(&[2, 0, 1])?;
            let merged = contract(&t[k - 1], &r, &ContractionSpec::pair(2, 1))?;
            t[k - 1] = if k - 1 == l {
                merged.permute(&[0, 1, 3, 2])?
            } else {
                merged
            };
        }
        Ok(Self {
            tensors: t,
            ..self.clone()
        })
    }

    /// Largest deviation from the identity of `A†A` over all non-label
    /// tensors, contracting every axis except the bond toward the label.
    pub fn isometry_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (k, a) in self.tensors.iter().enumerate() {
            let spec = if k < self.label_site {
                ContractionSpec::new(vec![0, 1], vec![0, 1])
            } else if k > self.label_site {
                ContractionSpec::new(vec![1, 2], vec![1, 2])
            } else {
                continue;
            };
            let g = contract(a, a, &spec)?;
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

    /// Absorb each site vector into its tensor: `(b, b')`, or `(b, b', C)` at
    /// the label site.
    fn site_matrices(&self, x: &EmbeddedJet, c: &mut dyn Contractor) -> Result<Vec<Tensor>> {
        self.tensors
            .iter()
            .zip(&x.sites)
            .map(|(t, s)| c.contract(t, &Tensor::vector(s.clone()), &ContractionSpec::pair(1, 0)))
            .collect()
    }
}

impl TensorNetwork for MpsModel {
    fn n_sites(&self) -> usize {
        self.n_sites
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

    fn regauge(&mut self) -> Result<()> {
        *self = self.canonicalize()?;
        Ok(())
    }

    /// Canonical form, then the label tensor is scaled so no class slice has
    /// norm above one. Scores shrink by a common positive factor.
    fn fixed_point_form(&self, _calibration: &[EmbeddedJet]) -> Result<Self> {
        let mut m = self.canonicalize()?;
        let label = &m.tensors[m.label_site];
        let c = m.n_classes;
        let mut worst = 0.0f64;
        for k in 0..c {
            let s: f64 = label.data().iter().skip(k).step_by(c).map(|v| v * v).sum();
            worst = worst.max(s.sqrt());
        }
        if worst > 0.0 {
            m.tensors[m.label_site] = label.scale(1.0 / worst);
        }
        Ok(m)
    }

    fn forward_with(&self, x: &EmbeddedJet, c: &mut dyn Contractor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let m = self.site_matrices(x, c)?;
        let l = self.label_site;
        let mut left = Tensor::vector(vec![1.0]);
        for mk in &m[..l] {
            left = c.contract(&left, mk, &ContractionSpec::pair(0, 0))?;
        }
        let mut right = Tensor::vector(vec![1.0]);
        for mk in m[l + 1..].iter().rev() {
            right = c.contract(mk, &right, &ContractionSpec::pair(1, 0))?;
        }
        let merged = c.contract(&left, &m[l], &ContractionSpec::pair(0, 0))?;
        let out = c.contract(&merged, &right, &ContractionSpec::pair(0, 0))?;
        Ok(out.into_data())
    }

    fn forward_grad(
        &self,
        x: &EmbeddedJet,
        upstream: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<ForwardGrad> {
        self.check_input(x)?;
        let n = self.n_sites;
        let l = self.label_site;
        let m = self.site_matrices(x, &mut crate::contractor::Exact)?;

        // lefts[k]: product of m[0..k], k = 0..=l
        let mut lefts = Vec::with_capacity(l + 1);
        lefts.push(Tensor::vector(vec![1.0]));
        for k in 0..l {
            let next = contract(&lefts[k], &m[k], &ContractionSpec::pair(0, 0))?;
            lefts.push(next);
        }
        // rights[k - l - 1]: product of m[k..n], k = l+1..=n
        let mut rights = vec![Tensor::vector(vec![1.0]); n - l];
        for k in (l + 1..n).rev() {
            rights[k - l - 1] = contract(&m[k], &rights[k - l], &ContractionSpec::pair(1, 0))?;
        }
        let right_of_label = &rights[0];
        let merged = contract(&lefts[l], &m[l], &ContractionSpec::pair(0, 0))?;
        let scores = contract(&merged, right_of_label, &ContractionSpec::pair(0, 0))?.into_data();

        let u = upstream(&scores);
        if u.len() != self.n_classes {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient".into(),
                expected: self.n_classes,
                found: u.len(),
            });
        }
        let u_t = Tensor::vector(u.clone());
        let mut grads = vec![Tensor::scalar(0.0); n];
        grads[l] = outer(&[lefts[l].data(), &x.sites[l], right_of_label.data(), &u]);

        // label matrix with the upstream folded into the class axis
        let g = contract(&m[l], &u_t, &ContractionSpec::pair(2, 0))?;

        let mut h = contract(&g, right_of_label, &ContractionSpec::pair(1, 0))?;
        for k in (0..l).rev() {
            grads[k] = outer(&[lefts[k].data(), &x.sites[k], h.data()]);
            h = contract(&m[k], &h, &ContractionSpec::pair(1, 0))?;
        }
        let mut e = contract(&lefts[l], &g, &ContractionSpec::pair(0, 0))?;
        for k in l + 1..n {
            grads[k] = outer(&[e.data(), &x.sites[k], rights[k - l].data()]);
            e = contract(&e, &m[k], &ContractionSpec::pair(0, 0))?;
        }
        Ok(ForwardGrad { scores, grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contractor::Exact;
    use crate::embedding::Layout;
    use crate::tensor::relative_error;
    use rand::Rng;

    fn random_jet(n: usize, d: usize, seed: u64) -> EmbeddedJet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddedJet {
            sites: (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            layout: Layout::PerParticle,
        }
    }

    fn unit_model(n: usize, d: usize, bond: usize, seed: u64) -> MpsModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MpsModel::with_init(n, d, bond, 5, n / 2, seed, |s| Tensor::random_normal(s, 1.0, &mut rng)).unwrap()
    }

    /// Brute-force oracle: materialize every entry of the global tensor by
    /// walking all basis tuples, then contract with the Kronecker product.
    pub(crate) fn dense_scores(m: &MpsModel, x: &EmbeddedJet) -> Vec<f64> {
        let n = m.n_sites();
        let d = m.phys_dim();
        let l = m.label_site();
        let c = m.n_classes();
        let total = d.pow(n as u32);
        let mut scores = vec![0.0; c];
        for idx in 0..total {
            let digits: Vec<usize> = (0..n).map(|k| (idx / d.pow((n - 1 - k) as u32)) % d).collect();
            let kron: f64 = digits.iter().enumerate().map(|(k, &s)| x.sites[k][s]).product();
            for (cls, score) in scores.iter_mut().enumerate() {
                let mut v = vec![1.0];
                for (k, t) in m.tensors().iter().enumerate() {
                    let sh = t.shape();
                    let mut next = vec![0.0; sh[2]];
                    for (a, va) in v.iter().enumerate() {
                        for (b, nb) in next.iter_mut().enumerate() {
                            let entry = if k == l {
                                t.get(&[a, digits[k], b, cls])
                            } else {
                                t.get(&[a, digits[k], b])
                            };
                            *nb += va * entry;
                        }
                    }
                    v = next;
                }
                *score += v[0] * kron;
            }
        }
        scores
    }

    #[test]
    fn table_param_counts() {
        for (n, want) in [(8, 6678), (16, 12278), (32, 23478)] {
            let m = MpsModel::new(n, 7, 10, 5, default_label_site(n), 0).unwrap();
            let loop_sum: usize = MpsModel::shapes(n, 7, 10, 5, n / 2)
                .iter()
                .map(|s| s.iter().product::<usize>())
                .sum();
            assert_eq!(loop_sum, want);
            assert_eq!(m.param_count(), want);
        }
    }

    #[test]
    fn tiny_param_count() {
        let m = MpsModel::new(2, 2, 1, 1, 1, 0).unwrap();
        assert_eq!(m.param_count(), 4);
        let m = MpsModel::new(4, 3, 5, 5, 2, 0).unwrap();
        let want: usize = m.tensors().iter().map(|t| t.shape().iter().product::<usize>()).sum();
        // b = [1, 3, 5, 3, 1]; label tensor (5, 3, 3, 5)
        assert_eq!(want, 9 + 45 + 225 + 9);
        assert_eq!(m.param_count(), want);
    }

    #[test]
    fn invalid_dims() {
        assert!(MpsModel::new(0, 7, 10, 5, 0, 0).is_err());
        assert!(MpsModel::new(4, 7, 0, 5, 0, 0).is_err());
        assert!(MpsModel::new(4, 7, 10, 5, 4, 0).is_err());
    }

    #[test]
    fn deterministic_init() {
        let a = MpsModel::new(8, 7, 10, 5, 4, 42).unwrap();
        let b = MpsModel::new(8, 7, 10, 5, 4, 42).unwrap();
        assert_eq!(a, b);
        let std = {
            let v: Vec<f64> = a.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
            (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!((std - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn zero_model_gives_zero() {
        let m = MpsModel::with_init(4, 2, 2, 5, 2, 0, Tensor::zeros).unwrap();
        assert!(m.forward(&random_jet(4, 2, 1)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_oracle() {
        let m = unit_model(4, 2, 2, 3);
        let x = random_jet(4, 2, 4);
        let got = m.forward(&x).unwrap();
        let want = dense_scores(&m, &x);
        let got_t = Tensor::vector(got);
        assert!(relative_error(&got_t, &Tensor::vector(want)) < 1e-10);
    }

    #[test]
    fn site_scaling_is_linear() {
        let m = unit_model(5, 3, 4, 5);
        let x = random_jet(5, 3, 6);
        let base = m.forward(&x).unwrap();
        let mut y = x.clone();
        y.sites[3].iter_mut().for_each(|v| *v *= -2.5);
        let scaled = m.forward(&y).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a * -2.5 - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = unit_model(4, 2, 2, 0);
        assert!(m.forward(&random_jet(3, 2, 0)).is_err());
        assert!(m.forward(&random_jet(4, 3, 0)).is_err());
    }

    #[test]
    fn canonical_form_preserves_scores() {
        let m = unit_model(8, 3, 6, 7);
        let c = m.canonicalize().unwrap();
        assert!(c.isometry_error().unwrap() < 1e-8);
        for seed in 0..5 {
            let x = random_jet(8, 3, seed);
            let a = Tensor::vector(m.forward(&x).unwrap());
            let b = Tensor::vector(c.forward(&x).unwrap());
            assert!(relative_error(&b, &a) < 1e-8);
        }
        let cc = c.canonicalize().unwrap();
        let x = random_jet(8, 3, 99);
        let a = Tensor::vector(c.forward(&x).unwrap());
        let b = Tensor::vector(cc.forward(&x).unwrap());
        assert!(relative_error(&b, &a) < 1e-10);
    }

    #[test]
    fn fixed_point_form_is_a_positive_rescale() {
        let m = unit_model(8, 3, 6, 2);
        let f = m.fixed_point_form(&[]).unwrap();
        let mut ratio = None;
        for seed in 0..10 {
            let mut x = random_jet(8, 3, seed);
            for s in &mut x.sites {
                let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                s.iter_mut().for_each(|v| *v /= n);
            }
            let (a, b) = (m.forward(&x).unwrap(), f.forward(&x).unwrap());
            let r = a[0] / b[0];
            assert!(r > 0.0);
            let r0 = *ratio.get_or_insert(r);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - r0 * q).abs() <= 1e-9 * p.abs().max(1.0));
                assert!(q.abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn canonicalize_label_at_ends() {
        for label in [0, 5] {
            let mut rng = ChaCha8Rng::seed_from_u64(label as u64);
            let m = MpsModel::with_init(6, 2, 3, 5, label, 0, |s| Tensor::random_normal(s, 1.0, &mut rng)).unwrap();
            let c = m.canonicalize().unwrap();
            assert!(c.isometry_error().unwrap() < 1e-8);
            let x = random_jet(6, 2, 1);
            let a = Tensor::vector(m.forward(&x).unwrap());
            let b = Tensor::vector(c.forward(&x).unwrap());
            assert!(relative_error(&b, &a) < 1e-8);
        }
    }

    fn fd_check(m: &MpsModel, x: &EmbeddedJet, u: &[f64]) {
        let grads = m.grad(x, u).unwrap();
        let h = 1e-5;
        let f = |mm: &MpsModel| -> f64 {
            mm.forward(x).unwrap().iter().zip(u).map(|(a, b)| a * b).sum()
        };
        for (ti, g) in grads.iter().enumerate() {
            assert_eq!(g.shape(), m.tensors()[ti].shape());
            for e in 0..g.len() {
                let mut p = m.clone();
                p.tensors_mut()[ti].data_mut()[e] += h;
                let mut q = m.clone();
                q.tensors_mut()[ti].data_mut()[e] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                let an = g.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "tensor {ti} entry {e}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = unit_model(4, 2, 2, 11);
        let x = random_jet(4, 2, 12);
        fd_check(&m, &x, &[0.3, -1.0, 0.5, 2.0, -0.7]);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let m = unit_model(4, 2, 2, 1);
        let g = m.grad(&random_jet(4, 2, 2), &[0.0; 5]).unwrap();
        assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn label_gradient_is_outer_product() {
        // one-site environment on each side
        let m = unit_model(3, 2, 2, 8);
        let x = random_jet(3, 2, 9);
        let u = [1.0, 0.5, -0.25, 0.0, 2.0];
        let g = m.grad(&x, &u).unwrap();
        let t = m.tensors();
        let left = contract(&t[0], &Tensor::vector(x.sites[0].clone()), &ContractionSpec::pair(1, 0)).unwrap();
        let right = contract(&t[2], &Tensor::vector(x.sites[2].clone()), &ContractionSpec::pair(1, 0)).unwrap();
        let (lv, rv) = (left.data(), right.data()); // (1, b1) and (b2, 1)
        for a in 0..2 {
            for s in 0..2 {
                for b in 0..2 {
                    for c in 0..5 {
                        let want = lv[a] * x.sites[1][s] * rv[b] * u[c];
                        assert!((g[1].get(&[a, s, b, c]) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_grad_scores_match_forward() {
        let m = unit_model(6, 3, 4, 2);
        let x = random_jet(6, 3, 3);
        let fg = m.forward_grad(&x, &mut |_| vec![1.0; 5]).unwrap();
        let f = m.forward_with(&x, &mut Exact).unwrap();
        for (a, b) in fg.scores.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }
}
