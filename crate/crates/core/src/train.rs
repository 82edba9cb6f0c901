//! Mini-batch Adam training, losses and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedJet;
use crate::error::{Error, Result};
use crate::network::TensorNetwork;
use crate::tensor::Tensor;
use crate::ttn::probabilities;

/// Samples per gradient chunk. Chunks are summed in index order, so batch
/// gradients do not depend on the worker count.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    /// Softmax cross-entropy on raw scores.
    CrossEntropy,
    /// Mean squared error between squared-overlap probabilities and one-hot.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: Loss,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-3,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: Loss::CrossEntropy,
            folds: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {b} outside (0, 1)")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("learning rate and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Embedded jets with class labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledJets {
    pub jets: Vec<EmbeddedJet>,
    pub labels: Vec<u8>,
}

impl LabeledJets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            jets: idx.iter().map(|&i| self.jets[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// One-vs-rest AUC per class; `None` when the class is absent from (or
    /// is the whole of) the evaluation set.
    pub auc: Vec<Option<f64>>,
    pub loss_curve: Vec<f64>,
}

/// Softmax cross-entropy with max-subtraction.
pub fn softmax_ce(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (scores[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(c, e)| e / z - if c == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `(1/C) Σ (p - onehot)²` and its gradient with respect to `probs`.
pub fn mse_loss(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let c = probs.len() as f64;
    let diff: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, p)| p - if k == label { 1.0 } else { 0.0 })
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / c;
    (loss, diff.iter().map(|d| 2.0 * d / c).collect())
}

/// MSE on squared-overlap probabilities, differentiated back to the overlaps.
pub fn mse_on_overlaps(overlaps: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let probs = probabilities(overlaps)?;
    let (loss, g) = mse_loss(&probs, label);
    let s: f64 = overlaps.iter().map(|o| o * o).sum();
    let gp: f64 = g.iter().zip(&probs).map(|(a, b)| a * b).sum();
    let grad = overlaps
        .iter()
        .zip(&g)
        .map(|(o, gk)| 2.0 * o / s * (gk - gp))
        .collect();
    Ok((loss, grad))
}

impl Loss {
    pub fn evaluate(self, scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        match self {
            Loss::CrossEntropy => Ok(softmax_ce(scores, label)),
            Loss::Mse => mse_on_overlaps(scores, label),
        }
    }

    /// Class probabilities implied by raw network outputs.
    pub fn probabilities(self, scores: &[f64]) -> Vec<f64> {
        match self {
            Loss::CrossEntropy => softmax(scores),
            Loss::Mse => probabilities(scores).unwrap_or_else(|_| vec![1.0 / scores.len() as f64; scores.len()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Trapezoidal one-vs-rest ROC AUC per class, computed from tie-averaged
/// ranks (Mann-Whitney U). `scores` is `B x C` row-major.
pub fn auc_ovr(scores: &[f64], labels: &[u8], n_classes: usize) -> Result<Vec<f64>> {
    (0..n_classes)
        .map(|c| auc_one(scores, labels, n_classes, c).ok_or(Error::DegenerateSplit { class: c }))
        .collect()
}

fn auc_one(scores: &[f64], labels: &[u8], n_classes: usize, class: usize) -> Option<f64> {
    let b = labels.len();
    let mut idx: Vec<usize> = (0..b).collect();
    let s = |i: usize| scores[i * n_classes + class];
    idx.sort_by(|&i, &j| s(i).total_cmp(&s(j)));
    let mut ranks = vec![0.0; b];
    let mut i = 0;
    while i < b {
        let mut j = i;
        while j + 1 < b && s(idx[j + 1]) == s(idx[i]) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l as usize == class).count();
    let n_neg = b - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = (0..b).filter(|&k| labels[k] as usize == class).map(|k| ranks[k]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Raw outputs for every jet, computed in parallel.
pub fn predict_scores<N: TensorNetwork>(model: &N, data: &LabeledJets) -> Result<Vec<Vec<f64>>> {
    data.jets.par_iter().map(|x| model.forward(x)).collect()
}

pub fn accuracy_of(scores: &[Vec<f64>], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s) == l as usize)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate<N: TensorNetwork>(model: &N, data: &LabeledJets, loss: Loss) -> Result<(f64, Vec<Option<f64>>)> {
    let scores = predict_scores(model, data)?;
    let decisions: Vec<Vec<f64>> = scores.iter().map(|s| model.decision_values(s)).collect();
    let acc = accuracy_of(&decisions, &data.labels);
    let c = model.n_classes();
    let probs: Vec<f64> = scores.iter().flat_map(|s| loss.probabilities(s)).collect();
    let auc = (0..c).map(|k| auc_one(&probs, &data.labels, c, k)).collect();
    Ok((acc, auc))
}

/// Shuffle order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Mean loss and mean gradient over `idx`, reduced in a fixed order.
pub fn batch_gradient<N: TensorNetwork>(
    model: &N,
    data: &LabeledJets,
    idx: &[usize],
    loss: Loss,
) -> Result<(f64, Vec<Tensor>)> {
    let partials: Vec<Result<(f64, Vec<Tensor>)>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut total = 0.0;
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let label = data.labels[i] as usize;
                let mut err = None;
                let mut sample_loss = 0.0;
                let fg = model.forward_grad(&data.jets[i], &mut |scores| match loss.evaluate(scores, label) {
                    Ok((l, g)) => {
                        sample_loss = l;
                        g
                    }
                    Err(e) => {
                        err = Some(e);
                        vec![0.0; scores.len()]
                    }
                })?;
                if let Some(e) = err {
                    return Err(e);
                }
                total += sample_loss;
                acc = Some(match acc {
                    None => fg.grads,
                    Some(mut a) => {
                        for (x, g) in a.iter_mut().zip(&fg.grads) {
                            x.data_mut().iter_mut().zip(g.data()).for_each(|(p, q)| *p += q);
                        }
                        a
                    }
                });
            }
            Ok((total, acc.expect("non-empty chunk")))
        })
        .collect();

    let scale = 1.0 / idx.len() as f64;
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for part in partials {
        let (l, g) = part?;
        total += l;
        grads = Some(match grads {
            None => g,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                }
                a
            }
        });
    }
    let grads = grads
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(scale))
        .collect();
    Ok((total * scale, grads))
}

/// Shuffled mini-batch Adam for `cfg.epochs` epochs. The loss curve holds
/// the mean training loss of each epoch; accuracy and AUC are measured on
/// `test`. Models that need a gauge fix (MPS) are re-canonicalized before the
/// first and after every epoch.
pub fn train_model<N: TensorNetwork>(
    model: N,
    train: &LabeledJets,
    test: &LabeledJets,
    cfg: &TrainConfig,
) -> Result<(N, Metrics)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut model = model;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    if cfg.epochs > 0 {
        model.regauge()?;
    }
    let mut adam = AdamState::new(model.tensors());
    for epoch in 0..cfg.epochs {
        let order = epoch_permutation(train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradient(&model, train, idx, cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            epoch_loss += loss * idx.len() as f64;
            adam_step(model.tensors_mut(), &grads, &mut adam, cfg);
        }
        model.regauge()?;
        loss_curve.push(epoch_loss / train.len() as f64);
    }
    let (accuracy, auc) = if test.is_empty() {
        (0.0, vec![None; model.n_classes()])
    } else {
        evaluate(&model, test, cfg.loss)?
    };
    Ok((
        model,
        Metrics {
            accuracy,
            auc,
            loss_curve,
        },
    ))
}

/// k-fold cross-validation over contiguous shards of one seeded shuffle.
/// `make_model(fold)` builds the untrained model for each fold.
pub fn cross_validate<N: TensorNetwork>(
    data: &LabeledJets,
    cfg: &TrainConfig,
    mut make_model: impl FnMut(usize) -> Result<N>,
) -> Result<Vec<Metrics>> {
    if cfg.folds < 2 || cfg.folds > data.len() {
        return Err(Error::InvalidConfig(format!(
            "{} folds for {} samples",
            cfg.folds,
            data.len()
        )));
    }
    let order = epoch_permutation(data.len(), cfg.seed, usize::MAX - 1);
    let fold_bounds: Vec<usize> = (0..=cfg.folds).map(|f| f * data.len() / cfg.folds).collect();
    (0..cfg.folds)
        .map(|f| {
            let (lo, hi) = (fold_bounds[f], fold_bounds[f + 1]);
            let test_idx = &order[lo..hi];
            let train_idx: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            let model = make_model(f)?;
            let (_, metrics) = train_model(model, &data.subset(&train_idx), &data.subset(test_idx), cfg)?;
            Ok(metrics)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut q = x.to_vec();
                p[i] += h;
                q[i] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn ce_uniform_is_ln5() {
        let (l, _) = softmax_ce(&[0.3; 5], 2);
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_vanishes_with_dominant_label() {
        let (l, _) = softmax_ce(&[1e3, 0.0, 0.0, 0.0, 0.0], 0);
        assert!(l < 1e-12);
        let (l, g) = softmax_ce(&[1e308, 0.0, -1e308, 0.0, 0.0], 0);
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ce_gradient_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, g) = softmax_ce(&s, 3);
        let fd = fd_grad(|x| softmax_ce(x, 3).0, &s);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[0.0, 1.0, 0.0, 0.0, 0.0], 1).0, 0.0);
        assert!((mse_loss(&[0.2; 5], 4).0 - 0.16).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, g) = mse_loss(&p, 0);
        let fd = fd_grad(|x| mse_loss(x, 0).0, &p);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_overlap_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = mse_on_overlaps(&o, 2).unwrap();
        let fd = fd_grad(|x| mse_on_overlaps(x, 2).unwrap().0, &o);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// Scalar Adam written out longhand.
    fn reference_adam(g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        -lr * m_hat / (v_hat.sqrt() + eps)
    }

    #[test]
    fn adam_single_step() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, &cfg);
        let want = reference_adam(1.0, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p[0].data()[0], want);
        assert!((want + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg);
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].data()[0];
            adam_step(&mut p, &[Tensor::scalar(-3.0)], &mut st, &cfg);
            last = p[0].data()[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6);
    }

    /// O(B²) pairwise oracle: P(score_pos > score_neg) + ½ P(tie).
    fn pairwise_auc(scores: &[f64], labels: &[u8], c: usize, class: usize) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] as usize == class && labels[j] as usize != class {
                    let (a, b) = (scores[i * c + class], scores[j * c + class]);
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    den += 1.0;
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_cases() {
        let labels = [0u8, 0, 1, 1];
        let perfect = [0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.3, 0.7];
        let auc = auc_ovr(&perfect, &labels, 2).unwrap();
        assert_eq!(auc, vec![1.0, 1.0]);
        let flat = [0.5; 8];
        assert_eq!(auc_ovr(&flat, &labels, 2).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(auc_ovr(&flat[..4], &[0, 0], 2), Err(Error::DegenerateSplit { class: 0 })));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<u8> = (0..100).map(|_| rng.gen_range(0..5)).collect();
        // coarse scores to force ties
        let scores: Vec<f64> = (0..500).map(|_| (rng.gen_range(0.0..1.0f64) * 10.0).floor()).collect();
        let auc = auc_ovr(&scores, &labels, 5).unwrap();
        for c in 0..5 {
            assert!((auc[c] - pairwise_auc(&scores, &labels, 5, c)).abs() < 1e-12);
        }
        // invariant under strictly monotone maps
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() - 7.0).collect();
        assert_eq!(auc_ovr(&warped, &labels, 5).unwrap(), auc);
    }

    #[test]
    fn permutation_depends_on_seed_and_epoch_only() {
        assert_eq!(epoch_permutation(50, 7, 3), epoch_permutation(50, 7, 3));
        assert_ne!(epoch_permutation(50, 7, 3), epoch_permutation(50, 7, 4));
        assert_ne!(epoch_permutation(50, 7, 3), epoch_permutation(50, 8, 3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
