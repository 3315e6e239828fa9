//! Property tests for the engine's structural invariants.

use proptest::prelude::*;

use lite_core::episode::{split_query_batches, Episode};
use lite_core::lite::{sample_backprop_indices, SamplingMode};
use lite_core::model::heads::compute_prototypes;
use lite_core::rng::rng_from_seed;
use lite_core::{Tape, Tensor};

fn episode_with_queries(m: usize, dim: usize) -> Episode<f64> {
    let way = 2;
    Episode {
        support_x: Tensor::new(vec![2, dim], vec![0.25; 2 * dim]).unwrap(),
        support_y: vec![0, 1],
        query_x: Tensor::new(vec![m, dim], (0..m * dim).map(|i| i as f64).collect()).unwrap(),
        query_y: (0..m).map(|i| i % way).collect(),
        way,
        task_id: 0,
        rng_seed: 0,
    }
}

proptest! {
    /// Straight-through output shares the full value's bits for any data,
    /// shape, and scale.
    #[test]
    fn straight_through_value_equals_full_value(
        rows in 1usize..6,
        cols in 1usize..6,
        scale in prop::num::f64::NORMAL,
        values in prop::collection::vec(-1e12f64..1e12, 36),
    ) {
        let numel = rows * cols;
        let full = Tensor::new(vec![rows, cols], values[..numel].to_vec()).unwrap();
        let mut tape = Tape::new();
        let tracked_src = Tensor::<f64>::ones(vec![rows, cols]);
        let leaf = tape.leaf(&tracked_src);
        let out = tape.straight_through_scaled(&full, &leaf, scale).unwrap();
        prop_assert!(out.bits_eq(&full));
    }

    /// Query batching covers the set exactly: ceil(M/M_b) batches whose
    /// concatenation restores the original order.
    #[test]
    fn query_batches_partition_the_query_set(m in 1usize..40, m_b in 1usize..50) {
        let episode = episode_with_queries(m, 3);
        let batches = split_query_batches(&episode, m_b).unwrap();
        prop_assert_eq!(batches.len(), m.div_ceil(m_b));
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in &batches {
            prop_assert!(b.y.len() <= m_b);
            data.extend_from_slice(b.x.data());
            labels.extend_from_slice(&b.y);
        }
        prop_assert_eq!(data.as_slice(), episode.query_x.data());
        prop_assert_eq!(labels, episode.query_y);
    }

    /// Backprop index sampling: ascending, in range, distinct without
    /// replacement, exactly H entries.
    #[test]
    fn backprop_indices_are_well_formed(n in 1usize..60, h_frac in 0usize..100, seed in 0u64..1000) {
        let h = (h_frac * n) / 100;
        let mut rng = rng_from_seed(seed);
        for mode in [SamplingMode::WithoutReplacement, SamplingMode::WithReplacement] {
            let idx = sample_backprop_indices(n, h, mode, &mut rng).unwrap();
            prop_assert_eq!(idx.len(), h);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
            if mode == SamplingMode::WithoutReplacement {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]), "distinct indices");
            }
        }
    }

    /// Prototypes are invariant to jointly permuting features and labels.
    #[test]
    fn prototypes_are_permutation_invariant(seed in 0u64..500) {
        let mut rng = rng_from_seed(seed);
        let n = 8;
        let d = 3;
        let way = 2;
        let values = lite_core::rng::normal_vec::<f64>(&mut rng, n * d, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i % way).collect();
        let feats = Tensor::new(vec![n, d], values.clone()).unwrap();
        let mut tape = Tape::new();
        let base = compute_prototypes(&mut tape, &feats, &labels, way).unwrap();

        // Deterministic permutation derived from the seed (Fisher-Yates via
        // the uniform index sampler; sample_distinct returns sorted output,
        // so shuffle manually).
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = lite_core::rng::sample_distinct(&mut rng, i + 1, 1)[0];
            perm.swap(i, j);
        }
        let mut shuffled = vec![0.0; n * d];
        let mut shuffled_labels = vec![0usize; n];
        for (to, &from) in perm.iter().enumerate() {
            shuffled[to * d..(to + 1) * d].copy_from_slice(&values[from * d..(from + 1) * d]);
            shuffled_labels[to] = labels[from];
        }
        let feats2 = Tensor::new(vec![n, d], shuffled).unwrap();
        let other = compute_prototypes(&mut tape, &feats2, &shuffled_labels, way).unwrap();
        prop_assert!(base.max_abs_diff(&other) < 1e-9);
    }
}
