//! Training objectives: pace cross-entropy, the same-context and same-pace
//! contrastive losses, and their weighted sum. Every loss returns its value
//! together with the gradient with respect to its input.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensornet::{Scalar, Tensor};

/// Weights of the joint objective `cls * L_cls + ctr * L_ctr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub ctr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, ctr: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.cls >= 0.0 && self.ctr >= 0.0) {
            return Err(Error::config("train.lambda", "loss weights must be non-negative"));
        }
        if self.cls == 0.0 && self.ctr == 0.0 {
            return Err(Error::config("train.lambda", "loss weights cannot both be zero"));
        }
        Ok(())
    }
}

pub fn joint_loss(cls: f64, ctr: f64, weights: &LossWeights) -> f64 {
    weights.cls * cls + weights.ctr * ctr
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`; the
/// gradient is `(softmax - onehot) / B`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() || d[0] == 0 {
        return Err(Error::Shape(format!(
            "logits {d:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, m) = (d[0], d[1]);
    if let Some(bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Argument(format!("label {bad} out of range for {m} classes")));
    }
    let inv_b = S::one() / S::of(b as f64);
    let mut grad = Tensor::zeros(d);
    let mut total = S::zero();
    for i in 0..b {
        let row = logits.row(i);
        let mx = row.iter().fold(S::neg_infinity(), |a, &x| a.max(x));
        let sum: S = row.iter().map(|&x| (x - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += lse - row[labels[i]];
        let g = grad.row_mut(i);
        for j in 0..m {
            g[j] = (row[j] - lse).exp() * inv_b;
        }
        g[labels[i]] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// How embeddings are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Dot product of L2-normalized vectors (cosine similarity).
    #[default]
    Normalized,
    /// Plain dot product.
    RawDot,
}

const NORM_FLOOR: f64 = 1e-12;

pub fn similarity<S: Scalar>(a: &[S], b: &[S], mode: SimilarityMode) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "similarity of vectors with {} and {} dims",
            a.len(),
            b.len()
        )));
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok(match mode {
        SimilarityMode::RawDot => dot,
        SimilarityMode::Normalized => {
            let floor = S::of(NORM_FLOOR);
            let na = a.iter().map(|&x| x * x).sum::<S>().sqrt().max(floor);
            let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt().max(floor);
            dot / (na * nb)
        }
    })
}

/// Embeddings plus the metadata that defines positives and negatives.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<'a, S> {
    /// `[B, D]`.
    pub z: &'a Tensor<S>,
    pub video_ids: &'a [usize],
    pub pace_labels: &'a [usize],
    pub mode: SimilarityMode,
}

impl<'a, S: Scalar> EmbeddingBatch<'a, S> {
    pub fn new(z: &'a Tensor<S>, video_ids: &'a [usize], pace_labels: &'a [usize], mode: SimilarityMode) -> Result<Self> {
        let d = z.dims();
        if d.len() != 2 || d[0] != video_ids.len() || d[0] != pace_labels.len() {
            return Err(Error::Shape(format!(
                "embeddings {d:?} with {} video ids and {} pace labels",
                video_ids.len(),
                pace_labels.len()
            )));
        }
        if d[0] < 2 {
            return Err(Error::Argument("contrastive losses need at least two rows".into()));
        }
        Ok(Self {
            z,
            video_ids,
            pace_labels,
            mode,
        })
    }

    pub fn rows(&self) -> usize {
        self.z.dims()[0]
    }

    /// Rows used inside the similarity (normalized when requested) and
    /// their original norms.
    fn prepared(&self) -> (Vec<Vec<S>>, Vec<S>) {
        let floor = S::of(NORM_FLOOR);
        (0..self.rows())
            .map(|i| {
                let r = self.z.row(i);
                match self.mode {
                    SimilarityMode::RawDot => (r.to_vec(), S::one()),
                    SimilarityMode::Normalized => {
                        let n = r.iter().map(|&x| x * x).sum::<S>().sqrt().max(floor);
                        (r.iter().map(|&x| x / n).collect(), n)
                    }
                }
            })
            .unzip()
    }

    /// Maps `dL/dS` (similarity matrix gradient) back to `dL/dz`.
    fn grad_from_similarity(&self, u: &[Vec<S>], norms: &[S], gs: &[Vec<S>]) -> Tensor<S> {
        let b = self.rows();
        let dim = self.z.dims()[1];
        let mut grad = Tensor::zeros(self.z.dims());
        for i in 0..b {
            let mut du = vec![S::zero(); dim];
            for j in 0..b {
                let w = gs[i][j] + gs[j][i];
                if w != S::zero() {
                    for (acc, &x) in du.iter_mut().zip(&u[j]) {
                        *acc += w * x;
                    }
                }
            }
            let g = grad.row_mut(i);
            match self.mode {
                SimilarityMode::RawDot => g.copy_from_slice(&du),
                SimilarityMode::Normalized => {
                    let proj: S = du.iter().zip(&u[i]).map(|(&a, &b)| a * b).sum();
                    for k in 0..dim {
                        g[k] = (du[k] - u[i][k] * proj) / norms[i];
                    }
                }
            }
        }
        grad
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `log sum exp` over `values` and the softmax weights.
fn log_softmax_terms<S: Scalar>(values: &[S]) -> (S, Vec<S>) {
    let mx = values.iter().fold(S::neg_infinity(), |a, &x| a.max(x));
    let exps: Vec<S> = values.iter().map(|&x| (x - mx).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    (mx + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Contrastive loss where the two clips of the same video are positives and
/// clips of every other video are negatives. Each anchor's denominator holds
/// its positive and its negatives; the loss is averaged over all `2N` anchors.
pub fn ctr_same_context<S: Scalar>(batch: &EmbeddingBatch<'_, S>) -> Result<(S, Tensor<S>)> {
    let b = batch.rows();
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &v) in batch.video_ids.iter().enumerate() {
        groups.entry(v).or_default().push(i);
    }
    let mut partner = vec![0usize; b];
    for (v, rows) in &groups {
        if rows.len() != 2 {
            return Err(Error::Argument(format!(
                "video {v} appears {} times; same-context batches need exactly 2 clips per video",
                rows.len()
            )));
        }
        partner[rows[0]] = rows[1];
        partner[rows[1]] = rows[0];
    }
    let (u, norms) = batch.prepared();
    let inv_b = S::one() / S::of(b as f64);
    let mut gs = vec![vec![S::zero(); b]; b];
    let mut total = S::zero();
    for i in 0..b {
        let p = partner[i];
        // Candidates: the positive first, then all rows of other videos.
        let mut cols = vec![p];
        cols.extend((0..b).filter(|&j| batch.video_ids[j] != batch.video_ids[i]));
        let sims: Vec<S> = cols.iter().map(|&j| dot(&u[i], &u[j])).collect();
        let (lse, soft) = log_softmax_terms(&sims);
        total += lse - sims[0];
        for (k, &j) in cols.iter().enumerate() {
            gs[i][j] += soft[k] * inv_b;
        }
        gs[i][p] -= inv_b;
    }
    Ok((total * inv_b, batch.grad_from_similarity(&u, &norms, &gs)))
}

/// Contrastive loss where clips sharing a pace label are positives. Each
/// (anchor, positive) pair contributes `-log(exp(s_ij) / sum_{k != i} exp(s_ik))`;
/// the loss is the mean over all such pairs. Anchors without positives are
/// skipped; a batch with no pairs at all is an error.
pub fn ctr_same_pace<S: Scalar>(batch: &EmbeddingBatch<'_, S>) -> Result<(S, Tensor<S>)> {
    let b = batch.rows();
    let labels = batch.pace_labels;
    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect())
        .collect();
    let pairs: usize = positives.iter().map(Vec::len).sum();
    if pairs == 0 {
        return Err(Error::DegenerateBatch(
            "no two rows share a pace label; same-pace loss is undefined".into(),
        ));
    }
    let (u, norms) = batch.prepared();
    let inv_pairs = S::one() / S::of(pairs as f64);
    let mut gs = vec![vec![S::zero(); b]; b];
    let mut total = S::zero();
    for i in 0..b {
        if positives[i].is_empty() {
            continue;
        }
        let cols: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let sims: Vec<S> = cols.iter().map(|&j| dot(&u[i], &u[j])).collect();
        let (lse, soft) = log_softmax_terms(&sims);
        let np = S::of(positives[i].len() as f64);
        for (k, &j) in cols.iter().enumerate() {
            gs[i][j] += np * soft[k] * inv_pairs;
            if labels[j] == labels[i] {
                total += lse - sims[k];
                gs[i][j] -= inv_pairs;
            }
        }
    }
    Ok((total * inv_pairs, batch.grad_from_similarity(&u, &norms, &gs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::tensornet::gradcheck::check_function;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    /// Literal pair enumeration without log-sum-exp tricks.
    fn brute_same_context(z: &Tensor<f64>, vids: &[usize], mode: SimilarityMode) -> f64 {
        let b = vids.len();
        let mut total = 0.0;
        for i in 0..b {
            let p = (0..b).find(|&j| j != i && vids[j] == vids[i]).unwrap();
            let pos = similarity(z.row(i), z.row(p), mode).unwrap().exp();
            let mut denom = pos;
            for j in 0..b {
                if vids[j] != vids[i] {
                    denom += similarity(z.row(i), z.row(j), mode).unwrap().exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / b as f64
    }

    fn brute_same_pace(z: &Tensor<f64>, labels: &[usize], mode: SimilarityMode) -> f64 {
        let b = labels.len();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..b {
            for j in 0..b {
                if j == i || labels[j] != labels[i] {
                    continue;
                }
                let num = similarity(z.row(i), z.row(j), mode).unwrap().exp();
                let mut denom = 0.0;
                for k in 0..b {
                    if k != i {
                        denom += similarity(z.row(i), z.row(k), mode).unwrap().exp();
                    }
                }
                total += -(num / denom).ln();
                pairs += 1;
            }
        }
        total / pairs as f64
    }

    #[test]
    fn cross_entropy_values() {
        let (l, _) = cross_entropy(&t(1, 4, vec![0.0; 4]), &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&t(1, 3, vec![30.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(l < 1e-9);
        let (l, _) = cross_entropy(&t(1, 3, vec![1.0, 2.0, 3.0]), &[2]).unwrap();
        let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.4076).abs() < 1e-4);
        assert!(matches!(cross_entropy(&t(1, 3, vec![0.0; 3]), &[3]), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_gradient_and_shift() {
        let mut rng = StreamRng::new(4);
        let logits: Vec<f64> = (0..12).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let labels = [0, 3, 1];
        let (l, g) = cross_entropy(&t(3, 4, logits.clone()), &labels).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + 7.5).collect();
        assert!((cross_entropy(&t(3, 4, shifted), &labels).unwrap().0 - l).abs() < 1e-12);
        let mut x = logits.clone();
        let err = check_function(&mut x, |v| cross_entropy(&t(3, 4, v.to_vec()), &labels).unwrap().0, g.data(), 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn similarity_basics() {
        let a = [0.6f64, 0.8];
        assert!((similarity(&a, &a, SimilarityMode::Normalized).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 2.0], SimilarityMode::RawDot).unwrap(), 0.0);
        let s1 = similarity(&[1.0f64, 2.0], &[3.0, -1.0], SimilarityMode::Normalized).unwrap();
        let s2 = similarity(&[4.0f64, 8.0], &[3.0, -1.0], SimilarityMode::Normalized).unwrap();
        assert!((s1 - s2).abs() < 1e-15);
        assert!(similarity(&[1.0], &[1.0, 2.0], SimilarityMode::RawDot).is_err());
    }

    #[test]
    fn same_context_closed_forms() {
        let z = t(4, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        let batch = EmbeddingBatch::new(&z, &[0, 1, 0, 1], &[0; 4], SimilarityMode::Normalized).unwrap();
        let (l, _): (f64, _) = ctr_same_context(&batch).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);

        // Positives at similarity 1, negatives at -1.
        let z = t(4, 2, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let batch = EmbeddingBatch::new(&z, &[0, 1, 0, 1], &[0; 4], SimilarityMode::Normalized).unwrap();
        let (l, _): (f64, _) = ctr_same_context(&batch).unwrap();
        let e = 1f64.exp();
        let expected = -(e / (e + 2.0 / e)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.23954).abs() < 1e-5);
    }

    #[test]
    fn same_context_rejects_bad_groups() {
        let z = t(3, 2, vec![1.0; 6]);
        let batch = EmbeddingBatch::new(&z, &[0, 0, 0], &[0; 3], SimilarityMode::Normalized).unwrap();
        assert!(matches!(ctr_same_context(&batch), Err(Error::Argument(_))));
    }

    #[test]
    fn same_pace_closed_forms() {
        let z = t(2, 2, vec![0.6, 0.8, 0.6, 0.8]);
        let batch = EmbeddingBatch::new(&z, &[0, 1], &[1, 1], SimilarityMode::Normalized).unwrap();
        assert!(ctr_same_pace::<f64>(&batch).unwrap().0.abs() < 1e-15);

        let z = t(3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        let batch = EmbeddingBatch::new(&z, &[0, 1, 2], &[4, 4, 7], SimilarityMode::Normalized).unwrap();
        assert!((ctr_same_pace(&batch).unwrap().0 - 2f64.ln()).abs() < 1e-12);

        let batch = EmbeddingBatch::new(&z, &[0, 1, 2], &[0, 1, 2], SimilarityMode::Normalized).unwrap();
        assert!(matches!(ctr_same_pace(&batch), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn joint_weights() {
        let w = LossWeights::default();
        assert!((joint_loss(2.0, 3.0, &w) - 2.3).abs() < 1e-15);
        assert_eq!(joint_loss(2.0, 3.0, &LossWeights { cls: 1.0, ctr: 0.0 }), 2.0);
        assert_eq!(joint_loss(2.0, 3.0, &LossWeights { cls: 0.0, ctr: 0.5 }), 1.5);
        assert!(LossWeights { cls: 0.0, ctr: 0.0 }.validate().is_err());
    }

    fn random_batch(rng: &mut StreamRng, n_videos: usize, dim: usize, scale: f64) -> (Tensor<f64>, Vec<usize>, Vec<usize>) {
        let b = 2 * n_videos;
        let z = Tensor::from_fn(&[b, dim], |_| scale * rng.uniform_range(-1.0, 1.0));
        let vids: Vec<usize> = (0..b).map(|i| i % n_videos).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
        (z, vids, labels)
    }

    #[test]
    fn oracles_and_gradients_on_random_batches() {
        let mut rng = StreamRng::new(99);
        for trial in 0..40 {
            let mode = if trial % 2 == 0 { SimilarityMode::Normalized } else { SimilarityMode::RawDot };
            let (z, vids, labels) = random_batch(&mut rng, 2 + trial % 4, 5, 0.7);
            let (b, d) = (z.dims()[0], z.dims()[1]);
            let batch = EmbeddingBatch::new(&z, &vids, &labels, mode).unwrap();
            let (l, g) = ctr_same_context(&batch).unwrap();
            assert!((l - brute_same_context(&z, &vids, mode)).abs() < 1e-10);
            let f = |v: &[f64]| {
                let zz = t(b, d, v.to_vec());
                ctr_same_context(&EmbeddingBatch::new(&zz, &vids, &labels, mode).unwrap()).unwrap().0
            };
            assert!(check_function(&mut z.data().to_vec(), f, g.data(), 1e-5) < 1e-4);

            if let Ok((l, g)) = ctr_same_pace(&batch) {
                assert!((l - brute_same_pace(&z, &labels, mode)).abs() < 1e-10);
                let f = |v: &[f64]| {
                    let zz = t(b, d, v.to_vec());
                    ctr_same_pace(&EmbeddingBatch::new(&zz, &vids, &labels, mode).unwrap()).unwrap().0
                };
                assert!(check_function(&mut z.data().to_vec(), f, g.data(), 1e-5) < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_and_scale_invariance(seed in any::<u64>(), n in 2usize..5, alpha in 0.1f64..10.0) {
            let mut rng = StreamRng::new(seed);
            let (z, vids, labels) = random_batch(&mut rng, n, 4, 1.0);
            let b = z.dims()[0];
            let mode = SimilarityMode::Normalized;
            let base = EmbeddingBatch::new(&z, &vids, &labels, mode).unwrap();
            let (lc, _) = ctr_same_context(&base).unwrap();
            let lp = ctr_same_pace(&base).ok().map(|r| r.0);

            let mut perm: Vec<usize> = (0..b).collect();
            rng.shuffle(&mut perm);
            let mut pz = Vec::new();
            for &i in &perm { pz.extend_from_slice(z.row(i)); }
            let pz = t(b, 4, pz);
            let pv: Vec<usize> = perm.iter().map(|&i| vids[i]).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let permuted = EmbeddingBatch::new(&pz, &pv, &pl, mode).unwrap();
            prop_assert!((ctr_same_context(&permuted).unwrap().0 - lc).abs() < 1e-12);
            if let Some(lp) = lp {
                prop_assert!((ctr_same_pace(&permuted).unwrap().0 - lp).abs() < 1e-12);
            }

            let mut scaled = z.clone();
            let row = rng.below(b);
            for x in scaled.row_mut(row) { *x *= alpha; }
            let sb = EmbeddingBatch::new(&scaled, &vids, &labels, mode).unwrap();
            prop_assert!((ctr_same_context(&sb).unwrap().0 - lc).abs() < 1e-12);
            prop_assert!(lc >= 0.0);
        }
    }
}
