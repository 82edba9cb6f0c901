//! Dense row-major tensors and the pairwise contraction / QR primitives every
//! model is built from.
//!
//! Contraction permutes both operands so the contracted axes are adjacent,
//! then runs a single matrix product. The output axes are always the free
//! axes of the left operand followed by the free axes of the right operand,
//! each in their original order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    labels: Option<Vec<String>>,
}

/// Pairs of axes to sum over: `left_axes[i]` of the first operand against
/// `right_axes[i]` of the second.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionSpec {
    pub left_axes: Vec<usize>,
    pub right_axes: Vec<usize>,
}

impl ContractionSpec {
    pub fn new(left_axes: Vec<usize>, right_axes: Vec<usize>) -> Self {
        Self {
            left_axes,
            right_axes,
        }
    }

    /// Contract a single axis pair.
    pub fn pair(left: usize, right: usize) -> Self {
        Self::new(vec![left], vec![right])
    }

    /// No contracted axes: the result is the outer product.
    pub fn outer() -> Self {
        Self::new(Vec::new(), Vec::new())
    }

    fn validate(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        if self.left_axes.len() != self.right_axes.len() {
            return Err(Error::InvalidSpec(format!(
                "{} left axes vs {} right axes",
                self.left_axes.len(),
                self.right_axes.len()
            )));
        }
        check_axes(&self.left_axes, a.rank(), "left")?;
        check_axes(&self.right_axes, b.rank(), "right")?;
        for (&la, &ra) in self.left_axes.iter().zip(&self.right_axes) {
            if a.shape[la] != b.shape[ra] {
                return Err(Error::ShapeMismatch {
                    left_axis: la,
                    right_axis: ra,
                    left_len: a.shape[la],
                    right_len: b.shape[ra],
                });
            }
        }
        Ok(())
    }
}

fn check_axes(axes: &[usize], rank: usize, side: &str) -> Result<()> {
    let mut seen = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::InvalidSpec(format!(
                "{side} axis {ax} out of range for rank {rank}"
            )));
        }
        if seen[ax] {
            return Err(Error::InvalidSpec(format!("duplicate {side} axis {ax}")));
        }
        seen[ax] = true;
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            labels: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            labels: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            labels: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            labels: None,
        }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. `Normal(0, std^2)` entries.
    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| dist.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rank() {
            return Err(Error::InvalidConfig(format!(
                "{} axis labels for a rank-{} tensor",
                labels.len(),
                self.rank()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.rank());
        let offset: usize = index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum();
        self.data[offset]
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// New tensor whose axis `i` is axis `axes[i]` of `self`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::InvalidPermutation(format!(
                "{} axes given for rank {rank}",
                axes.len()
            )));
        }
        check_axes(axes, rank, "permuted").map_err(|e| Error::InvalidPermutation(e.to_string()))?;
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let old_strides = self.strides();
        let src_strides: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[offset]);
            // odometer increment over the new shape
            for ax in (0..rank).rev() {
                index[ax] += 1;
                offset += src_strides[ax];
                if index[ax] < new_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * new_shape[ax];
                index[ax] = 0;
            }
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| axes.iter().map(|&a| l[a].clone()).collect());
        Ok(Self {
            shape: new_shape,
            data,
            labels,
        })
    }

    /// Element-wise sum; shapes must be equal.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::InvalidConfig(format!(
                "cannot add shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            labels: self.labels.clone(),
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `C = A * B` for row-major `m x k` and `k x n` slices.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    c
}

/// Both operands of a contraction laid out as row-major matrices:
/// `left` is `m x k` (free axes, then contracted) and `right` is `k x n`.
pub struct Matricized {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    out_labels: Option<Vec<String>>,
}

impl Matricized {
    /// Wrap an `m x n` result buffer as the contraction output.
    pub fn finish(self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.m * self.n);
        Tensor {
            shape: self.out_shape,
            data,
            labels: self.out_labels,
        }
    }
}

pub fn matricize(a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Matricized> {
    spec.validate(a, b)?;
    let free_a: Vec<usize> = (0..a.rank()).filter(|i| !spec.left_axes.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|i| !spec.right_axes.contains(i)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(&spec.left_axes).copied().collect();
    let perm_b: Vec<usize> = spec.right_axes.iter().chain(&free_b).copied().collect();
    let a_p = a.permute(&perm_a)?;
    let b_p = b.permute(&perm_b)?;

    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    let out_labels = match (&a.labels, &b.labels) {
        (Some(la), Some(lb)) => Some(
            free_a
                .iter()
                .map(|&i| la[i].clone())
                .chain(free_b.iter().map(|&i| lb[i].clone()))
                .collect(),
        ),
        _ => None,
    };
    Ok(Matricized {
        left: a_p.data,
        right: b_p.data,
        m: free_a.iter().map(|&i| a.shape[i]).product(),
        k: spec.left_axes.iter().map(|&i| a.shape[i]).product(),
        n: free_b.iter().map(|&i| b.shape[i]).product(),
        out_shape,
        out_labels,
    })
}

/// Sum over the paired axes of `spec`. Output axes are the free axes of `a`
/// followed by the free axes of `b`.
pub fn contract(a: &Tensor, b: &Tensor, spec: &ContractionSpec) -> Result<Tensor> {
    let mats = matricize(a, b, spec)?;
    let data = matmul(&mats.left, &mats.right, mats.m, mats.k, mats.n);
    Ok(mats.finish(data))
}

/// Multiplications and additions a single pairwise contraction performs:
/// `F * K` and `F * (K - 1)` where `F` is the product of free sizes and `K`
/// the product of contracted sizes.
pub fn contraction_cost(a: &[usize], b: &[usize], spec: &ContractionSpec) -> (u64, u64) {
    let k: u64 = spec.left_axes.iter().map(|&i| a[i] as u64).product();
    let fa: u64 = (0..a.len())
        .filter(|i| !spec.left_axes.contains(i))
        .map(|i| a[i] as u64)
        .product();
    let fb: u64 = (0..b.len())
        .filter(|i| !spec.right_axes.contains(i))
        .map(|i| b[i] as u64)
        .product();
    let f = fa * fb;
    (f * k, f * k.saturating_sub(1))
}

/// Thin QR of `t` viewed as a matrix with `row_axes` as rows and `col_axes`
/// as columns. `Q` has shape `(row dims.., k)` and `R` has `(k, col dims..)`
/// with `k = min(rows, cols)`.
pub fn qr_split(t: &Tensor, row_axes: &[usize], col_axes: &[usize]) -> Result<(Tensor, Tensor)> {
    let rank = t.rank();
    let partition_err = || Error::InvalidPartition {
        rows: row_axes.to_vec(),
        cols: col_axes.to_vec(),
        rank,
    };
    if row_axes.len() + col_axes.len() != rank {
        return Err(partition_err());
    }
    let mut seen = vec![false; rank];
    for &ax in row_axes.iter().chain(col_axes) {
        if ax >= rank || seen[ax] {
            return Err(partition_err());
        }
        seen[ax] = true;
    }

    let perm: Vec<usize> = row_axes.iter().chain(col_axes).copied().collect();
    let mat = t.permute(&perm)?;
    let m: usize = row_axes.iter().map(|&i| t.shape[i]).product();
    let n: usize = col_axes.iter().map(|&i| t.shape[i]).product();
    let (q, r, k) = householder_qr(&mat.data, m, n);

    let mut q_shape: Vec<usize> = row_axes.iter().map(|&i| t.shape[i]).collect();
    q_shape.push(k);
    let mut r_shape = vec![k];
    r_shape.extend(col_axes.iter().map(|&i| t.shape[i]));
    Ok((Tensor::new(q_shape, q)?, Tensor::new(r_shape, r)?))
}

/// Householder QR of a row-major `m x n` matrix. Returns `(Q: m x k, R: k x n, k)`.
fn householder_qr(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let k = m.min(n);
    let mut work = a.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);

    for j in 0..k {
        let norm_x: f64 = (j..m).map(|i| work[i * n + j].powi(2)).sum::<f64>().sqrt();
        let mut v = vec![0.0; m];
        if norm_x > 0.0 {
            let x0 = work[j * n + j];
            let alpha = if x0 >= 0.0 { -norm_x } else { norm_x };
            for i in j..m {
                v[i] = work[i * n + j];
            }
            v[j] -= alpha;
            let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
            if vnorm2 > 0.0 {
                for col in j..n {
                    let dot: f64 = (j..m).map(|i| v[i] * work[i * n + col]).sum();
                    let f = 2.0 * dot / vnorm2;
                    for i in j..m {
                        work[i * n + col] -= f * v[i];
                    }
                }
                let scale = vnorm2.sqrt();
                v.iter_mut().for_each(|x| *x /= scale);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        reflectors.push(v);
    }

    let mut r = vec![0.0; k * n];
    for i in 0..k {
        for col in i..n {
            r[i * n + col] = work[i * n + col];
        }
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I_m
    let mut q = vec![0.0; m * k];
    for i in 0..k {
        q[i * k + i] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        for col in 0..k {
            let dot: f64 = (j..m).map(|i| v[i] * q[i * k + col]).sum();
            if dot != 0.0 {
                for i in j..m {
                    q[i * k + col] -= 2.0 * dot * v[i];
                }
            }
        }
    }
    (q, r, k)
}

/// Relative Frobenius distance `|a - b| / max(|b|, tiny)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error on different shapes");
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / b.norm().max(f64::MIN_POSITIVE)
}
