//! Classifier heads: prototypes with Euclidean distance, class-conditional
//! Gaussian statistics with Mahalanobis distance, and the generated linear
//! head.
//!
//! Class aggregation is expressed as a matmul against a constant indicator
//! matrix, so gradients flow into the feature rows automatically and the
//! aggregation is permutation-invariant by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::episode::class_counts;
use crate::error::Result;
use crate::params::{BoundParams, InitSpec, ParamStore};
use crate::real::Real;
use crate::rng::EngineRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `[way, rows]` indicator with `weight(c)` at `(label[r], r)`.
fn indicator<R: Real>(labels: &[usize], way: usize, weight: impl Fn(usize) -> R) -> Tensor<R> {
    let rows = labels.len();
    let mut data = vec![R::zero(); way * rows];
    for (r, &y) in labels.iter().enumerate() {
        data[y * rows + r] = weight(y);
    }
    Tensor::from_parts(vec![way, rows], data, None)
}

/// Per-class sums of feature rows: `[C, d]`.
pub fn class_sums<R: Real>(
    tape: &mut Tape<R>,
    features: &Tensor<R>,
    labels: &[usize],
    way: usize,
) -> Result<Tensor<R>> {
    let ind = indicator(labels, way, |_| R::one());
    tape.matmul(&ind, features)
}

/// Class prototypes: row c is the mean of class-c feature rows.
pub fn compute_prototypes<R: Real>(
    tape: &mut Tape<R>,
    features: &Tensor<R>,
    labels: &[usize],
    way: usize,
) -> Result<Tensor<R>> {
    let counts = class_counts(labels, way)?;
    let ind = indicator(labels, way, |c| R::one() / R::from_f64(counts[c] as f64));
    tape.matmul(&ind, features)
}

/// Scale row c of a `[C, d]` matrix by `weights[c]` (constant weights).
pub fn scale_rows<R: Real>(
    tape: &mut Tape<R>,
    matrix: &Tensor<R>,
    weights: &[R],
) -> Result<Tensor<R>> {
    let c = weights.len();
    let mut diag = vec![R::zero(); c * c];
    for (i, &w) in weights.iter().enumerate() {
        diag[i * c + i] = w;
    }
    let diag = Tensor::from_parts(vec![c, c], diag, None);
    tape.matmul(&diag, matrix)
}

/// Row c of a `[C, d]` matrix as `[1, d]`, differentiable.
pub fn select_row<R: Real>(tape: &mut Tape<R>, matrix: &Tensor<R>, row: usize) -> Result<Tensor<R>> {
    let c = matrix.shape()[0];
    let mut sel = vec![R::zero(); c];
    sel[row] = R::one();
    let sel = Tensor::from_parts(vec![1, c], sel, None);
    tape.matmul(&sel, matrix)
}

/// `logit[m,c] = -||q_m - p_c||^2`; softmax over c gives class probabilities.
pub fn euclidean_logits<R: Real>(
    tape: &mut Tape<R>,
    prototypes: &Tensor<R>,
    query_features: &Tensor<R>,
) -> Result<Tensor<R>> {
    let d = tape.euclidean_sq_dist(query_features, prototypes)?;
    tape.scale(&d, -R::one())
}

/// Class-conditional Gaussian sufficient statistics, as tape tensors.
pub struct ClassStats<R: Real> {
    /// `[C, d]` class means.
    pub mu: Tensor<R>,
    /// Per-class covariance `[d, d]`.
    pub sigma: Vec<Tensor<R>>,
    /// Task-level covariance across all support features.
    pub sigma_task: Tensor<R>,
    pub counts: Vec<usize>,
}

/// Build means and covariances from per-class sufficient statistics:
/// `s1[c] = sum of class-c rows`, `s2[c] = sum of x x^T over class-c rows`.
///
/// `sigma_c = s2_c / k_c - mu_c mu_c^T`, and the task covariance pools every
/// class's statistics.
pub fn class_stats_from_sums<R: Real>(
    tape: &mut Tape<R>,
    s1: &Tensor<R>,
    s2: &[Tensor<R>],
    counts: &[usize],
) -> Result<ClassStats<R>> {
    let way = counts.len();
    let n: usize = counts.iter().sum();
    let inv_counts: Vec<R> = counts.iter().map(|&k| R::one() / R::from_f64(k as f64)).collect();
    let mu = scale_rows(tape, s1, &inv_counts)?;

    let mut sigma = Vec::with_capacity(way);
    for c in 0..way {
        let second = tape.scale(&s2[c], inv_counts[c])?;
        let mu_row = select_row(tape, &mu, c)?;
        let mu_col = tape.transpose(&mu_row)?;
        let outer = tape.matmul(&mu_col, &mu_row)?;
        sigma.push(tape.sub(&second, &outer)?);
    }

    // Task-level statistics pooled over all classes.
    let ones = Tensor::from_parts(vec![1, way], vec![R::one(); way], None);
    let s1_task = tape.matmul(&ones, s1)?;
    let mu_task = tape.scale(&s1_task, R::one() / R::from_f64(n as f64))?;
    let mut s2_task = s2[0].clone();
    for block in &s2[1..] {
        s2_task = tape.add(&s2_task, block)?;
    }
    let second_task = tape.scale(&s2_task, R::one() / R::from_f64(n as f64))?;
    let mu_task_col = tape.transpose(&mu_task)?;
    let outer_task = tape.matmul(&mu_task_col, &mu_task)?;
    let sigma_task = tape.sub(&second_task, &outer_task)?;

    Ok(ClassStats { mu, sigma, sigma_task, counts: counts.to_vec() })
}

/// Blend class and task covariances and add the ridge term:
/// `lambda_c * sigma_c + (1 - lambda_c) * sigma_task + eps * I` with
/// `lambda_c = k_c / (k_c + 1)`, stacked to `[C, d, d]`.
pub fn regularize_covariances<R: Real>(
    tape: &mut Tape<R>,
    stats: &ClassStats<R>,
    eps: f64,
) -> Result<Tensor<R>> {
    let d = stats.sigma_task.shape()[0];
    let eps_eye = Tensor::eye(d, R::from_f64(eps));
    let mut blocks = Vec::with_capacity(stats.sigma.len());
    for (c, sigma_c) in stats.sigma.iter().enumerate() {
        let k = stats.counts[c] as f64;
        let lambda = R::from_f64(k / (k + 1.0));
        let own = tape.scale(sigma_c, lambda)?;
        let shared = tape.scale(&stats.sigma_task, R::one() - lambda)?;
        let blended = tape.add(&own, &shared)?;
        let ridged = tape.add(&blended, &eps_eye)?;
        blocks.push(tape.reshape(&ridged, vec![1, d, d])?);
    }
    let refs: Vec<&Tensor<R>> = blocks.iter().collect();
    tape.concat(&refs, 0)
}

/// `logit[m,c] = -(q_m - mu_c)^T sigma_c^{-1} (q_m - mu_c)` on regularized
/// covariances.
pub fn mahalanobis_logits<R: Real>(
    tape: &mut Tape<R>,
    mu: &Tensor<R>,
    sigmas_reg: &Tensor<R>,
    query_features: &Tensor<R>,
) -> Result<Tensor<R>> {
    let d = tape.mahalanobis_sq_dist(query_features, mu, sigmas_reg)?;
    tape.scale(&d, -R::one())
}

/// Shared 2-layer network that maps a class's pooled feature to that class's
/// linear-classifier row, so any way is supported by weight sharing.
#[derive(Clone, Debug)]
pub struct LinearHeadSpec {
    pub feat_dim: usize,
    pub hidden: usize,
}

impl LinearHeadSpec {
    pub fn register(&self, store: &mut ParamStore<impl Real>, prefix: &str, rng: &mut EngineRng) {
        store.register(
            &format!("{prefix}.w1"),
            &[self.feat_dim, self.hidden],
            InitSpec::HeNormal { fan_in: self.feat_dim },
            true,
            rng,
        );
        store.register(&format!("{prefix}.b1"), &[self.hidden], InitSpec::Zeros, true, rng);
        store.register(
            &format!("{prefix}.w2"),
            &[self.hidden, self.feat_dim + 1],
            InitSpec::HeNormal { fan_in: self.hidden },
            true,
            rng,
        );
        store.register(&format!("{prefix}.b2"), &[self.feat_dim + 1], InitSpec::Zeros, true, rng);
    }

    /// Per-class weights `[C, d]` and biases `[1, C]` from `[C, d]` pooled
    /// class features.
    pub fn generate<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams<R>,
        prefix: &str,
        pooled: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        let h = tape.matmul(pooled, bound.get(&format!("{prefix}.w1"))?)?;
        let h = tape.add(&h, bound.get(&format!("{prefix}.b1"))?)?;
        let h = tape.relu(&h)?;
        let out = tape.matmul(&h, bound.get(&format!("{prefix}.w2"))?)?;
        let out = tape.add(&out, bound.get(&format!("{prefix}.b2"))?)?;
        // Split [C, d+1] into weight rows and the bias column.
        let d = self.feat_dim;
        let mut sel_w = vec![R::zero(); (d + 1) * d];
        for i in 0..d {
            sel_w[i * d + i] = R::one();
        }
        let sel_w = Tensor::from_parts(vec![d + 1, d], sel_w, None);
        let mut sel_b = vec![R::zero(); d + 1];
        sel_b[d] = R::one();
        let sel_b = Tensor::from_parts(vec![d + 1, 1], sel_b, None);
        let w = tape.matmul(&out, &sel_w)?;
        let b_col = tape.matmul(&out, &sel_b)?;
        let b_row = tape.transpose(&b_col)?;
        Ok((w, b_row))
    }
}

/// `logits = q W^T + b` for a generated linear head.
pub fn linear_head_logits<R: Real>(
    tape: &mut Tape<R>,
    w: &Tensor<R>,
    b: &Tensor<R>,
    query_features: &Tensor<R>,
) -> Result<Tensor<R>> {
    let wt = tape.transpose(w)?;
    let scores = tape.matmul(query_features, &wt)?;
    tape.add(&scores, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::ops::softmax_rows;
    use crate::rng::{normal_vec, rng_from_seed};

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn single_shot_prototypes_equal_features() {
        let mut tape = Tape::<f64>::new();
        let f = tensor(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = compute_prototypes(&mut tape, &f, &[0, 1, 2], 3).unwrap();
        assert!(p.bits_eq(&f));
    }

    #[test]
    fn prototype_is_class_mean() {
        let mut tape = Tape::<f64>::new();
        let f = tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = compute_prototypes(&mut tape, &f, &[0, 0], 1).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn prototypes_are_permutation_invariant() {
        let mut tape = Tape::<f64>::new();
        let f = tensor(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let labels = [0, 1, 0, 1];
        let p1 = compute_prototypes(&mut tape, &f, &labels, 2).unwrap();
        // Shuffle rows and labels together.
        let shuffled = tensor(vec![4, 2], vec![5.0, 6.0, 1.0, 2.0, 7.0, 8.0, 3.0, 4.0]);
        let p2 = compute_prototypes(&mut tape, &shuffled, &[0, 0, 1, 1], 2).unwrap();
        assert!(p1.max_abs_diff(&p2) < 1e-9);
    }

    #[test]
    fn missing_class_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let f = tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            compute_prototypes(&mut tape, &f, &[0, 0], 2).unwrap_err(),
            Error::EmptyClass { class: 1 }
        );
    }

    #[test]
    fn query_on_prototype_wins_and_equidistant_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let protos = tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let queries = tensor(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]);
        let logits = euclidean_logits(&mut tape, &protos, &queries).unwrap();
        // Query 0 sits on prototype 0.
        assert!(logits.data()[0] > logits.data()[1]);
        assert_eq!(logits.data()[0], 0.0);
        // Query 1 is equidistant: uniform softmax.
        let probs = softmax_rows(&logits);
        assert!((probs.data()[2] - 0.5).abs() < 1e-12);
        assert!((probs.data()[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_way_unit_vector_logits_match_hand_distances() {
        let mut tape = Tape::<f64>::new();
        let protos = tensor(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let q = tensor(vec![1, 3], vec![1.0, 0.0, 0.0]);
        let logits = euclidean_logits(&mut tape, &protos, &q).unwrap();
        // ||e1-e1||^2 = 0, ||e1-e2||^2 = ||e1-e3||^2 = 2.
        assert_eq!(logits.data(), &[0.0, -2.0, -2.0]);
    }

    #[test]
    fn identity_covariance_mahalanobis_equals_euclidean_exactly() {
        let mut tape = Tape::<f64>::new();
        let mut rng = rng_from_seed(17);
        let mu = tensor(vec![3, 4], normal_vec(&mut rng, 12, 1.0));
        let q = tensor(vec![5, 4], normal_vec(&mut rng, 20, 1.0));
        let eye_block: Vec<f64> = Tensor::<f64>::eye(4, 1.0).data().to_vec();
        let mut sig = Vec::new();
        for _ in 0..3 {
            sig.extend_from_slice(&eye_block);
        }
        let sig = tensor(vec![3, 4, 4], sig);
        let maha = mahalanobis_logits(&mut tape, &mu, &sig, &q).unwrap();
        let eucl = euclidean_logits(&mut tape, &mu, &q).unwrap();
        assert_eq!(maha.data(), eucl.data());
    }

    #[test]
    fn scalar_mahalanobis_distance_ratio() {
        // d=1, equal means, variances 1 and 4, query at distance 2:
        // distances 4/1 = 4 and 4/4 = 1, a 4:1 ratio.
        let mut tape = Tape::<f64>::new();
        let mu = tensor(vec![2, 1], vec![0.0, 0.0]);
        let sig = tensor(vec![2, 1, 1], vec![1.0, 4.0]);
        let q = tensor(vec![1, 1], vec![2.0]);
        let d = tape.mahalanobis_sq_dist(&q, &mu, &sig).unwrap();
        assert_eq!(d.data(), &[4.0, 1.0]);
    }

    #[test]
    fn argmax_invariant_to_common_logit_rescaling() {
        let mut tape = Tape::<f64>::new();
        let logits = tensor(vec![2, 3], vec![-1.0, -5.0, -2.0, -0.5, -0.1, -9.0]);
        let scaled = tape.scale(&logits, 3.5).unwrap();
        assert_eq!(crate::ops::argmax_rows(&logits), crate::ops::argmax_rows(&scaled));
    }

    #[test]
    fn class_stats_match_direct_computation() {
        let mut tape = Tape::<f64>::new();
        // Two classes, 2-d features.
        let f = tensor(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 1.0]);
        let labels = [0, 0, 1, 1];
        let counts = class_counts(&labels, 2).unwrap();
        let s1 = class_sums(&mut tape, &f, &labels, 2).unwrap();
        let mut s2 = Vec::new();
        for c in 0..2 {
            let mut block = vec![0.0; 4];
            for (r, &y) in labels.iter().enumerate() {
                if y == c {
                    let row = f.row(r);
                    for i in 0..2 {
                        for j in 0..2 {
                            block[i * 2 + j] += row[i] * row[j];
                        }
                    }
                }
            }
            s2.push(tensor(vec![2, 2], block));
        }
        let stats = class_stats_from_sums(&mut tape, &s1, &s2, &counts).unwrap();
        assert_eq!(stats.mu.data(), &[2.0, 3.0, 0.0, 0.5]);
        // Class 0: points (1,2),(3,4); covariance [[1,1],[1,1]].
        assert!(stats.sigma[0].max_abs_diff(&tensor(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0])) < 1e-12);
        // Regularized covariances are positive definite and usable.
        let reg = regularize_covariances(&mut tape, &stats, 1e-3).unwrap();
        assert_eq!(reg.shape(), &[2, 2, 2]);
        let q = tensor(vec![1, 2], vec![0.0, 0.0]);
        assert!(mahalanobis_logits(&mut tape, &stats.mu, &reg, &q).is_ok());
    }

    #[test]
    fn linear_head_shares_weights_across_classes() {
        let mut rng = rng_from_seed(19);
        let spec = LinearHeadSpec { feat_dim: 3, hidden: 4 };
        let mut store = ParamStore::<f64>::new();
        spec.register(&mut store, "head", &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);

        // Identical pooled features for two classes give identical rows.
        let pooled = tensor(vec![2, 3], vec![0.5, -0.2, 0.8, 0.5, -0.2, 0.8]);
        let (w, b) = spec.generate(&mut tape, &bound, "head", &pooled).unwrap();
        assert_eq!(w.row(0), w.row(1));
        assert_eq!(b.data()[0], b.data()[1]);

        // Permuting class order permutes rows identically.
        let p1 = tensor(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let p2 = tensor(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let (w1, b1) = spec.generate(&mut tape, &bound, "head", &p1).unwrap();
        let (w2, b2) = spec.generate(&mut tape, &bound, "head", &p2).unwrap();
        assert_eq!(w1.row(0), w2.row(1));
        assert_eq!(w1.row(1), w2.row(0));
        assert_eq!(b1.data()[0], b2.data()[1]);

        // Fixed-seed forward matches a straight-line reimplementation.
        let w1p = store.value("head.w1").unwrap();
        let b1p = store.value("head.b1").unwrap();
        let w2p = store.value("head.w2").unwrap();
        let b2p = store.value("head.b2").unwrap();
        let x = p1.row(0);
        let mut hidden = vec![0.0f64; 4];
        for j in 0..4 {
            let mut acc = b1p.data()[j];
            for i in 0..3 {
                acc += x[i] * w1p.data()[i * 4 + j];
            }
            hidden[j] = acc.max(0.0);
        }
        // out = hidden . w2 + b2; first 3 columns are the weight row, the
        // last is the bias.
        for col in 0..4usize {
            let mut acc = b2p.data()[col];
            for i in 0..4 {
                acc += hidden[i] * w2p.data()[i * 4 + col];
            }
            if col < 3 {
                assert!((w1.data()[col] - acc).abs() < 1e-12);
            } else {
                assert!((b1.data()[0] - acc).abs() < 1e-12);
            }
        }
    }
}
