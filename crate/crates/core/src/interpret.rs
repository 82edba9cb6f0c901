//! Quantum mutual information between input sites of a trained network.
//!
//! The class leg is traced out: the analyzed state is
//! `rho = sum_c |psi_c><psi_c| / sum_c <psi_c|psi_c>`, where `psi_c` is the
//! network with its class index fixed to `c`. Entropies are in nats.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mps::MpsModel;
use crate::network::TensorNetwork;
use crate::tensor::Tensor;
use crate::ttn::{node_index, TtnModel};

const EIGEN_FLOOR: f64 = 1e-12;
const NEGATIVE_TOL: f64 = 1e-8;
const TRACE_TOL: f64 = 1e-8;

/// Doubled (ket ⊗ bra) environment. One `dim × dim` matrix per value of the
/// open physical indices `(s1, s1', s2, s2', ...)`, outermost first.
#[derive(Clone, Debug)]
struct Env {
    dim: usize,
    mats: Vec<Vec<f64>>,
}

impl Env {
    fn unit() -> Self {
        Self { dim: 1, mats: vec![vec![1.0]] }
    }

    fn identity(d: usize) -> Self {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        Self { dim: d, mats: vec![m] }
    }

    /// `|s><s'|` for every pair, i.e. an open leaf.
    fn open_leaf(d: usize) -> Self {
        let mut mats = Vec::with_capacity(d * d);
        for s in 0..d {
            for t in 0..d {
                let mut m = vec![0.0; d * d];
                m[s * d + t] = 1.0;
                mats.push(m);
            }
        }
        Self { dim: d, mats }
    }

    /// Divide by the largest entry so long chains neither underflow nor
    /// overflow; the scale cancels in the final normalization.
    fn rescale(&mut self) {
        let peak = self.mats.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 && peak.is_finite() {
            for v in self.mats.iter_mut().flatten() {
                *v /= peak;
            }
        }
    }
}

/// Push `env` through one MPS site viewed as `(bl, d, br, c)`.
fn mps_transfer(env: &Env, a: &[f64], bl: usize, d: usize, br: usize, c: usize, open: bool) -> Env {
    let inner = d * br * c;
    let mut mats = Vec::with_capacity(env.mats.len() * if open { d * d } else { 1 });
    for m in &env.mats {
        // x[i', s, j, c] = sum_i m[i, i'] a[i, s, j, c]
        let mut x = vec![0.0; bl * inner];
        for i in 0..bl {
            for ip in 0..bl {
                let w = m[i * bl + ip];
                if w == 0.0 {
                    continue;
                }
                let src = &a[i * inner..(i + 1) * inner];
                let dst = &mut x[ip * inner..(ip + 1) * inner];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let block = |s: usize, sp: usize, out: &mut [f64]| {
            for ip in 0..bl {
                for j in 0..br {
                    for jp in 0..br {
                        let mut acc = 0.0;
                        for cc in 0..c {
                            acc += x[ip * inner + (s * br + j) * c + cc] * a[ip * inner + (sp * br + jp) * c + cc];
                        }
                        out[j * br + jp] += acc;
                    }
                }
            }
        };
        if open {
            for s in 0..d {
                for sp in 0..d {
                    let mut out = vec![0.0; br * br];
                    block(s, sp, &mut out);
                    mats.push(out);
                }
            }
        } else {
            let mut out = vec![0.0; br * br];
            for s in 0..d {
                block(s, s, &mut out);
            }
            mats.push(out);
        }
    }
    let mut e = Env { dim: br, mats };
    e.rescale();
    e
}

/// Combine two child environments through a TTN node `(cl, cr, p)`.
fn ttn_combine(left: &Env, right: &Env, t: &[f64], cl: usize, cr: usize, p: usize) -> Env {
    let mut mats = Vec::with_capacity(left.mats.len() * right.mats.len());
    for gl in &left.mats {
        // y[a', b, j] = sum_a gl[a, a'] t[a, b, j]
        let mut y = vec![0.0; cl * cr * p];
        for a in 0..cl {
            for ap in 0..cl {
                let w = gl[a * cl + ap];
                if w == 0.0 {
                    continue;
                }
                for k in 0..cr * p {
                    y[ap * cr * p + k] += w * t[a * cr * p + k];
                }
            }
        }
        for gr in &right.mats {
            // z[a', b', j] = sum_b gr[b, b'] y[a', b, j]
            let mut z = vec![0.0; cl * cr * p];
            for ap in 0..cl {
                for b in 0..cr {
                    for bp in 0..cr {
                        let w = gr[b * cr + bp];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            z[(ap * cr + bp) * p + j] += w * y[(ap * cr + b) * p + j];
                        }
                    }
                }
            }
            let mut g = vec![0.0; p * p];
            for k in 0..cl * cr {
                for j in 0..p {
                    let zj = z[k * p + j];
                    if zj == 0.0 {
                        continue;
                    }
                    for jp in 0..p {
                        g[j * p + jp] += zj * t[k * p + jp];
                    }
                }
            }
            mats.push(g);
        }
    }
    let mut e = Env { dim: p, mats };
    e.rescale();
    e
}

/// Turn closed-off values `(s1, s1', s2, s2', ...)` into a unit-trace matrix
/// with row index `(s1, s2, ...)` and column index `(s1', s2', ...)`.
fn assemble(values: Vec<f64>, d: usize, n_open: usize) -> Result<Tensor> {
    let raw = Tensor::new(vec![d; 2 * n_open], values)?;
    let axes: Vec<usize> = (0..n_open).map(|k| 2 * k).chain((0..n_open).map(|k| 2 * k + 1)).collect();
    let dim = d.pow(n_open as u32);
    let rho = raw.permute(&axes)?.reshape(&[dim, dim])?;
    let trace: f64 = (0..dim).map(|i| rho.get(&[i, i])).sum();
    if trace <= 0.0 || !trace.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(rho.scale(1.0 / trace))
}

fn check_sites(sites: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut s = sites.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() || s.len() > 2 || s.len() != sites.len() {
        return Err(Error::InvalidConfig(format!(
            "reduced density needs one or two distinct sites, got {sites:?}"
        )));
    }
    if let Some(&bad) = s.iter().find(|&&k| k >= n) {
        return Err(Error::InvalidConfig(format!("site {bad} outside {n} sites")));
    }
    Ok(s)
}

/// Models whose input sites can be analyzed by reduced density matrices.
pub trait ReducedDensity: TensorNetwork {
    /// Cached state reused across many site subsets.
    type Cache: Sync;

    fn density_cache(&self) -> Result<Self::Cache>;

    fn reduced_density_cached(&self, cache: &Self::Cache, sites: &[usize]) -> Result<Tensor>;

    fn reduced_density(&self, sites: &[usize]) -> Result<Tensor> {
        self.reduced_density_cached(&self.density_cache()?, sites)
    }
}

pub struct MpsEnvs {
    left: Vec<Env>,
    right: Vec<Env>,
}

impl MpsModel {
    fn site_view(&self, k: usize) -> (usize, usize, usize, usize) {
        let s = self.tensors()[k].shape();
        (s[0], s[1], s[2], if s.len() == 4 { s[3] } else { 1 })
    }

    fn transfer(&self, env: &Env, k: usize, open: bool) -> Env {
        let (bl, d, br, c) = self.site_view(k);
        mps_transfer(env, self.tensors()[k].data(), bl, d, br, c, open)
    }
}

impl ReducedDensity for MpsModel {
    type Cache = MpsEnvs;

    fn density_cache(&self) -> Result<MpsEnvs> {
        let n = self.n_sites();
        let mut left = vec![Env::unit()];
        for k in 0..n {
            let next = self.transfer(&left[k], k, false);
            left.push(next);
        }
        // right[k] is the environment to the right of site k - 1
        let mut right = vec![Env::unit(); n + 1];
        for k in (0..n).rev() {
            let (bl, _, br, _) = self.site_view(k);
            let r = &right[k + 1];
            let a = self.tensors()[k].data();
            let inner = a.len() / bl;
            let (d, c) = (self.phys_dim(), inner / (self.phys_dim() * br));
            let mut m = vec![0.0; bl * bl];
            for i in 0..bl {
                for ip in 0..bl {
                    let mut acc = 0.0;
                    for s in 0..d {
                        for j in 0..br {
                            for jp in 0..br {
                                let w = r.mats[0][j * br + jp];
                                for cc in 0..c {
                                    acc += w
                                        * a[i * inner + (s * br + j) * c + cc]
                                        * a[ip * inner + (s * br + jp) * c + cc];
                                }
                            }
                        }
                    }
                    m[i * bl + ip] = acc;
                }
            }
            let mut e = Env { dim: bl, mats: vec![m] };
            e.rescale();
            right[k] = e;
        }
        if left[n].mats[0][0] == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(MpsEnvs { left, right })
    }

    fn reduced_density_cached(&self, cache: &MpsEnvs, sites: &[usize]) -> Result<Tensor> {
        let s = check_sites(sites, self.n_sites())?;
        let (first, last) = (s[0], *s.last().unwrap());
        let mut env = cache.left[first].clone();
        for k in first..=last {
            env = self.transfer(&env, k, s.contains(&k));
        }
        let r = &cache.right[last + 1].mats[0];
        let values = env
            .mats
            .iter()
            .map(|m| m.iter().zip(r).map(|(x, y)| x * y).sum())
            .collect();
        assemble(values, self.phys_dim(), s.len())
    }
}

pub struct TtnEnvs {
    traced: Vec<Env>,
}

impl TtnModel {
    fn node_env(&self, layer: usize, j: usize, left: &Env, right: &Env) -> Env {
        let t = self.node(layer, j);
        let s = t.shape();
        ttn_combine(left, right, t.data(), s[0], s[1], s[2])
    }

    /// Environment of node `[layer, j]` with `open` leaves left open.
    fn open_env(&self, cache: &TtnEnvs, layer: usize, j: usize, open: &[usize]) -> Env {
        let layers = self.n_layers();
        let span = self.n_sites() >> layer;
        let (lo, hi) = (j * span, (j + 1) * span);
        if !open.iter().any(|&k| k >= lo && k < hi) {
            return cache.traced[node_index(layer, j)].clone();
        }
        let (l, r) = if layer + 1 == layers {
            let leaf = |k: usize| {
                if open.contains(&k) {
                    Env::open_leaf(self.phys_dim())
                } else {
                    Env::identity(self.phys_dim())
                }
            };
            (leaf(2 * j), leaf(2 * j + 1))
        } else {
            (
                self.open_env(cache, layer + 1, 2 * j, open),
                self.open_env(cache, layer + 1, 2 * j + 1, open),
            )
        };
        self.node_env(layer, j, &l, &r)
    }
}

impl ReducedDensity for TtnModel {
    type Cache = TtnEnvs;

    fn density_cache(&self) -> Result<TtnEnvs> {
        let layers = self.n_layers();
        let mut traced = vec![Env::unit(); self.tensors().len()];
        let leaf = Env::identity(self.phys_dim());
        for l in (0..layers).rev() {
            for j in 0..(1 << l) {
                let e = if l + 1 == layers {
                    self.node_env(l, j, &leaf, &leaf)
                } else {
                    self.node_env(l, j, &traced[node_index(l + 1, 2 * j)], &traced[node_index(l + 1, 2 * j + 1)])
                };
                traced[node_index(l, j)] = e;
            }
        }
        let root = &traced[0];
        let z: f64 = (0..root.dim).map(|c| root.mats[0][c * root.dim + c]).sum();
        if z <= 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(TtnEnvs { traced })
    }

    fn reduced_density_cached(&self, cache: &TtnEnvs, sites: &[usize]) -> Result<Tensor> {
        let s = check_sites(sites, self.n_sites())?;
        let root = self.open_env(cache, 0, 0, &s);
        let values = root
            .mats
            .iter()
            .map(|m| (0..root.dim).map(|c| m[c * root.dim + c]).sum())
            .collect();
        assemble(values, self.phys_dim(), s.len())
    }
}

/// `-sum λ ln λ` over the eigenvalues of a symmetric unit-trace matrix.
pub fn von_neumann_entropy(rho: &Tensor) -> Result<f64> {
    let sh = rho.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::InvalidConfig(format!("density matrix must be square, got {sh:?}")));
    }
    let n = sh[0];
    let m = DMatrix::from_row_slice(n, n, rho.data());
    let asym = (&m - m.transpose()).abs().max();
    if asym > TRACE_TOL {
        return Err(Error::NonPhysical(asym));
    }
    let trace = m.trace();
    if (trace - 1.0).abs() > TRACE_TOL {
        return Err(Error::NonPhysical(trace));
    }
    let eig = SymmetricEigen::new(m);
    let mut s = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < -NEGATIVE_TOL {
            return Err(Error::NonPhysical(l));
        }
        if l > EIGEN_FLOOR {
            s -= l * l.ln();
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmiMatrix {
    /// Row-major `S × S`.
    pub values: Vec<f64>,
    pub site_labels: Vec<String>,
    /// Single-site entropies.
    pub entropies: Vec<f64>,
}

impl QmiMatrix {
    pub fn n_sites(&self) -> usize {
        self.site_labels.len()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n_sites() + b]
    }

    /// Labeled square CSV: header row of labels, then one row per site.
    pub fn to_csv(&self) -> String {
        let n = self.n_sites();
        let mut out = String::from("site");
        for l in &self.site_labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for a in 0..n {
            out.push_str(&self.site_labels[a]);
            for b in 0..n {
                out.push_str(&format!(",{:.10e}", self.get(a, b)));
            }
            out.push('\n');
        }
        out
    }

    /// Mean QMI over off-diagonal pairs in the same group and in different
    /// groups; `None` where a category is empty.
    pub fn group_means(&self, groups: &[usize]) -> (Option<f64>, Option<f64>) {
        let n = self.n_sites();
        let (mut same, mut ns, mut mixed, mut nm) = (0.0, 0usize, 0.0, 0usize);
        for a in 0..n {
            for b in a + 1..n {
                if groups[a] == groups[b] {
                    same += self.get(a, b);
                    ns += 1;
                } else {
                    mixed += self.get(a, b);
                    nm += 1;
                }
            }
        }
        let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
        (mean(same, ns), mean(mixed, nm))
    }
}

/// `I(a:b) = S(a) + S(b) - S(ab)` for every pair of sites.
pub fn qmi_matrix<M: ReducedDensity>(model: &M, site_labels: Vec<String>) -> Result<QmiMatrix> {
    let n = model.n_sites();
    if site_labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "site labels".into(),
            expected: n,
            found: site_labels.len(),
        });
    }
    let cache = model.density_cache()?;
    let entropies: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| von_neumann_entropy(&model.reduced_density_cached(&cache, &[k])?))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let joint: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| von_neumann_entropy(&model.reduced_density_cached(&cache, &[a, b])?))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * n];
    for (&(a, b), s_ab) in pairs.iter().zip(joint) {
        let i = entropies[a] + entropies[b] - s_ab;
        values[a * n + b] = i;
        values[b * n + a] = i;
    }
    Ok(QmiMatrix {
        values,
        site_labels,
        entropies,
    })
}
