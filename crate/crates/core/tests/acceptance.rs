//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities. Criterion 9 (command reproducibility) lives in
//! the CLI crate's acceptance suite.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use lite_core::episode::{
    generate_synthetic_class_bank, ClassBank, Episode, EpisodeSampler, EpisodeSamplerConfig,
    SyntheticGenerator, SyntheticSpec,
};
use lite_core::gradcheck::{
    exact_gradient, finite_difference_gradient, max_rel_error, run_bias_variance_experiment,
    ExperimentArm, GradExperimentConfig,
};
use lite_core::lite::{
    lite_support_forward, predict_logits, sample_backprop_indices, support_forward, task_step,
    LiteConfig, SamplingMode, SupportPlan, TrainMode,
};
use lite_core::model::{build_model, FeatureExtractorSpec, MetaModel, ModelConfig, ModelFamily};
use lite_core::rng::{derive_seed, rng_from_seed};
use lite_core::stats::{linear_r2, relative_l2};
use lite_core::train::{evaluate, meta_train, SerialExecutor, TrainLoopConfig};
use lite_core::{Tape, Tensor};

fn protonets_model(input_dim: usize, widths: Vec<usize>, seed: u64) -> MetaModel<f64> {
    build_model(
        ModelConfig {
            family: ModelFamily::ProtoNets,
            extractor: FeatureExtractorSpec::mlp(input_dim, widths, false, false),
            encoder: None,
            film_hidden: 0,
            film_identity_init: true,
            head_hidden: 0,
            maha_eps: 1e-3,
        },
        seed,
    )
    .unwrap()
}

fn amortized_model(family: ModelFamily, channels: Vec<usize>, identity_film: bool, seed: u64) -> MetaModel<f64> {
    build_model(
        ModelConfig {
            family,
            extractor: FeatureExtractorSpec::small_convnet(
                vec![1, 8, 8],
                channels.clone(),
                true,
                true,
            ),
            encoder: Some(FeatureExtractorSpec::small_convnet(
                vec![1, 8, 8],
                channels,
                false,
                false,
            )),
            film_hidden: 8,
            film_identity_init: identity_film,
            head_hidden: 8,
            maha_eps: 1e-3,
        },
        seed,
    )
    .unwrap()
}

fn gaussian_bank(dim: usize, classes: usize, per_class: usize, separation: f64, noise: f64, seed: u64) -> ClassBank<f64> {
    let spec = SyntheticSpec {
        generator: SyntheticGenerator::GaussianClusters,
        input_shape: vec![dim],
        separation,
        noise,
    };
    let mut rng = rng_from_seed(seed);
    generate_synthetic_class_bank(&spec, classes, per_class, &mut rng).unwrap()
}

fn image_bank(classes: usize, per_class: usize, seed: u64) -> ClassBank<f64> {
    let spec = SyntheticSpec {
        generator: SyntheticGenerator::PatternedImages,
        input_shape: vec![1, 8, 8],
        separation: 1.5,
        noise: 0.4,
    };
    let mut rng = rng_from_seed(seed);
    generate_synthetic_class_bank(&spec, classes, per_class, &mut rng).unwrap()
}

/// Fixed seeded 10-way 10-shot (N=100) measurement task, metric-based model.
///
/// ProtoNets aggregates the support set through one level of sums, which is
/// the regime where the subset estimator is exactly unbiased; the criterion-4
/// statistics are measured here, on the earliest convolution weights.
fn unbiasedness_fixture() -> (MetaModel<f64>, Episode<f64>) {
    let model = build_model(
        ModelConfig {
            family: ModelFamily::ProtoNets,
            extractor: FeatureExtractorSpec::small_convnet(vec![1, 8, 8], vec![4, 8], false, false),
            encoder: None,
            film_hidden: 0,
            film_identity_init: true,
            head_hidden: 0,
            maha_eps: 1e-3,
        },
        3,
    )
    .unwrap();
    let bank = image_bank(12, 24, 5);
    let sampler = EpisodeSampler::new(bank, EpisodeSamplerConfig::fixed(10, 10, 5, 5));
    (model, sampler.sample_indexed(0).unwrap())
}

/// Fixed seeded 10-way 10-shot (N=100) measurement task, amortization model
/// with a live (non-identity) generator, Simple CNAPs head, and the set
/// encoder's earliest convolution as the measured parameter. Criterion-5
/// RMSE ordering is measured here; this matches the experiment-command
/// defaults (seed 2).
fn ordering_fixture() -> (MetaModel<f64>, Episode<f64>) {
    let model = amortized_model(ModelFamily::SimpleCnaps, vec![4, 8], false, derive_seed(2, 0x4d4f_4445));
    let bank = image_bank(12, 24, 1);
    let sampler =
        EpisodeSampler::new(bank, EpisodeSamplerConfig::fixed(10, 10, 5, derive_seed(2, 0x4752_4144)));
    (model, sampler.sample_indexed(0).unwrap())
}

fn episode_from(bank: &ClassBank<f64>, way: usize, shot: usize, query: usize, seed: u64) -> Episode<f64> {
    let sampler = EpisodeSampler::new(bank.clone(), EpisodeSamplerConfig::fixed(way, shot, query, seed));
    sampler.sample_indexed(0).unwrap()
}

/// Criterion 1: backward gradients match central finite differences
/// (max relative error < 1e-4, 64-bit) for the full ProtoNets and
/// Simple-CNAPs forward graphs. Per-primitive-op checks live in the ops unit
/// suite; this exercises the composed graphs end to end.
#[test]
fn criterion_1_autodiff_matches_finite_differences() {
    let mut worst: f64 = 0.0;

    // ProtoNets graph (1072 trainable parameters).
    let protonets = protonets_model(16, vec![32, 16], 11);
    let bank = gaussian_bank(16, 8, 12, 3.0, 0.6, 111);
    let episode = episode_from(&bank, 4, 3, 3, 112);
    worst = worst.max(fd_check_model(&protonets, &episode));

    // Simple-CNAPs graph (frozen extractor; encoder + generators trained).
    let simple = amortized_model(ModelFamily::SimpleCnaps, vec![4, 8], false, 13);
    let bank = image_bank(8, 12, 131);
    let episode = episode_from(&bank, 4, 3, 2, 132);
    worst = worst.max(fd_check_model(&simple, &episode));

    assert!(worst < 1e-4, "max relative error {worst}");
    println!("criterion 1 PASS: full-graph gradients match finite differences (max rel err {worst:.3e})");
}

fn fd_check_model(model: &MetaModel<f64>, episode: &Episode<f64>) -> f64 {
    let total: usize = model.params.trainable_scalars();
    assert!(total <= 10_000, "fixture exceeds the 1e4-parameter budget: {total}");
    let mut lite_cfg = LiteConfig::new(0);
    lite_cfg.query_batch = episode.n_query();
    let mut rng = rng_from_seed(0);
    let analytic = task_step(model, episode, &TrainMode::FullBackprop, &lite_cfg, &mut rng)
        .unwrap()
        .grads;
    let loss_fn = |ps: &lite_core::ParamStore<f64>| {
        let probe = MetaModel { config: model.config.clone(), params: ps.clone() };
        let mut tape = Tape::new();
        let bound = probe.params.bind(&mut tape);
        let state = support_forward(&mut tape, &probe, &bound, episode, SupportPlan::Full)?;
        let logits = predict_logits(&mut tape, &probe, &bound, &state, &episode.query_x)?;
        Ok(tape.softmax_cross_entropy(&logits, &episode.query_y)?.item())
    };
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let fd = finite_difference_gradient(&model.params, &name, 1e-5, loss_fn).unwrap();
        let err = max_rel_error(analytic.get(&name).unwrap(), &fd);
        assert!(err < 1e-4, "{name}: rel err {err}");
        worst = worst.max(err);
    }
    worst
}

/// Criterion 2: on 50 random (episode, parameters, H) triples, LITE-mode loss
/// and query predictions equal full-backprop values exactly
/// (max abs diff < 1e-12).
#[test]
fn criterion_2_value_invariance_over_random_triples() {
    let vec_bank = gaussian_bank(8, 10, 16, 3.0, 0.6, 21);
    let img_bank = image_bank(10, 16, 22);
    let mut max_diff: f64 = 0.0;
    for trial in 0..50u64 {
        let family = match trial % 3 {
            0 => ModelFamily::ProtoNets,
            1 => ModelFamily::Cnaps,
            _ => ModelFamily::SimpleCnaps,
        };
        let mut trial_rng = rng_from_seed(derive_seed(2000, trial));
        let (model, episode) = match family {
            ModelFamily::ProtoNets => {
                let model = protonets_model(8, vec![12, 8], derive_seed(21, trial));
                let ep = episode_from(&vec_bank, 3 + (trial as usize % 3), 2 + (trial as usize % 3), 2, derive_seed(23, trial));
                (model, ep)
            }
            fam => {
                let model = amortized_model(fam, vec![3, 4], trial % 2 == 0, derive_seed(24, trial));
                let ep = episode_from(&img_bank, 3 + (trial as usize % 3), 2 + (trial as usize % 3), 2, derive_seed(25, trial));
                (model, ep)
            }
        };
        let n = episode.n_support();
        let h = 1 + (derive_seed(26, trial) as usize) % n;
        let cfg = LiteConfig::new(h);
        let hset = sample_backprop_indices(n, h, cfg.sampling, &mut trial_rng).unwrap();

        let run = |lite: bool| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let plan = if lite {
                SupportPlan::Lite { hset: &hset, cfg: &cfg }
            } else {
                SupportPlan::Full
            };
            let state = support_forward(&mut tape, &model, &bound, &episode, plan).unwrap();
            let logits = predict_logits(&mut tape, &model, &bound, &state, &episode.query_x).unwrap();
            let loss = tape.softmax_cross_entropy(&logits, &episode.query_y).unwrap();
            (logits.detach(), loss.item())
        };
        let (logits_full, loss_full) = run(false);
        let (logits_lite, loss_lite) = run(true);
        max_diff = max_diff.max(logits_full.max_abs_diff(&logits_lite));
        max_diff = max_diff.max((loss_full - loss_lite).abs());
    }
    assert!(max_diff < 1e-12, "max abs value divergence {max_diff}");
    println!("criterion 2 PASS: LITE forward values equal full-backprop values (max abs diff {max_diff:.3e} over 50 triples)");
}

/// Criterion 3: at H = N (without replacement) the LITE gradient equals the
/// exact gradient, max |delta| < 1e-9, for both model families.
#[test]
fn criterion_3_exactness_at_h_equals_n() {
    let mut worst: f64 = 0.0;
    for family in [ModelFamily::ProtoNets, ModelFamily::SimpleCnaps, ModelFamily::Cnaps] {
        let (model, episode) = match family {
            ModelFamily::ProtoNets => {
                let bank = gaussian_bank(8, 8, 12, 3.0, 0.6, 31);
                (protonets_model(8, vec![12, 8], 31), episode_from(&bank, 4, 3, 3, 311))
            }
            fam => {
                let bank = image_bank(8, 12, 32);
                (amortized_model(fam, vec![3, 4], false, 32), episode_from(&bank, 4, 3, 2, 321))
            }
        };
        let n = episode.n_support();
        let cfg = LiteConfig::new(n);
        let mut rng_a = rng_from_seed(1);
        let mut rng_b = rng_from_seed(2);
        let full = task_step(&model, &episode, &TrainMode::FullBackprop, &cfg, &mut rng_a).unwrap();
        let lite = task_step(&model, &episode, &TrainMode::Lite, &cfg, &mut rng_b).unwrap();
        let diff = full.grads.max_abs_diff(&lite.grads);
        assert!(diff < 1e-9, "{family:?}: max |delta| = {diff}");
        worst = worst.max(diff);
    }
    println!("criterion 3 PASS: H=N LITE gradient equals exact gradient (max |delta| {worst:.3e})");
}

/// Criterion 4: unbiasedness on the fixed seeded 10-way 10-shot task (N=100):
/// the mean of 10^4 LITE draws at H=10 is within 2% relative L2 of the exact
/// gradient, and per-H bias MSE stays under 3x the Monte Carlo noise floor
/// for H in {10,...,90} at the 1000-example budget.
#[test]
fn criterion_4_unbiasedness() {
    let (model, episode) = unbiasedness_fixture();
    assert_eq!(episode.n_support(), 100);
    let param = "extractor.conv0.weight";
    let exact: Vec<f64> =
        exact_gradient(&model, &episode, param).unwrap().data().to_vec();

    // Mean over 10^4 draws at H=10.
    let draws = 10_000u64;
    let mut cfg = LiteConfig::new(10);
    cfg.query_batch = episode.n_query();
    let mut acc = vec![0.0f64; exact.len()];
    for d in 0..draws {
        let mut rng = rng_from_seed(derive_seed(0x4441, d));
        let est = task_step(&model, &episode, &TrainMode::Lite, &cfg, &mut rng).unwrap();
        for (a, g) in acc.iter_mut().zip(est.grads.get(param).unwrap().data()) {
            *a += *g;
        }
    }
    for a in &mut acc {
        *a /= draws as f64;
    }
    let rel = relative_l2(&acc, &exact);
    assert!(rel < 0.02, "relative L2 of the mean estimate: {rel}");

    // Per-H bias against the noise floor at the 1000-example budget.
    let experiment = GradExperimentConfig {
        measured_param: Some(param.to_string()),
        base_seed: 3,
        ..GradExperimentConfig::default()
    };
    let report =
        run_bias_variance_experiment(&model, &episode, &experiment, ExperimentArm::Lite, &SerialExecutor)
            .unwrap();
    let mut worst_ratio: f64 = 0.0;
    for row in &report.rows {
        let floor = row.avg_rmse * row.avg_rmse / row.num_runs as f64;
        let ratio = row.bias_mse / floor;
        assert!(
            row.bias_mse < 3.0 * floor,
            "H={}: bias_mse {:.3e} exceeds 3x noise floor {:.3e}",
            row.h,
            row.bias_mse,
            floor
        );
        worst_ratio = worst_ratio.max(ratio);
    }
    println!(
        "criterion 4 PASS: mean of {draws} LITE draws at H=10 within {:.3}% of exact (limit 2%); bias/floor <= {worst_ratio:.2} (limit 3) for H in 10..90",
        rel * 100.0
    );
}

/// Criterion 5: with the 1000-example budget, LITE average RMSE is below the
/// sub-sampled-task RMSE for every H in {10..50}, and decreases with H
/// allowing at most one Monte-Carlo inversion.
#[test]
fn criterion_5_variance_ordering() {
    let (model, episode) = ordering_fixture();
    let experiment = GradExperimentConfig { base_seed: 2, ..GradExperimentConfig::default() };
    let lite =
        run_bias_variance_experiment(&model, &episode, &experiment, ExperimentArm::Lite, &SerialExecutor)
            .unwrap();
    let sub = run_bias_variance_experiment(
        &model,
        &episode,
        &experiment,
        ExperimentArm::Subsampled,
        &SerialExecutor,
    )
    .unwrap();
    for (l, s) in lite.rows.iter().zip(&sub.rows) {
        assert_eq!(l.h, s.h);
        if l.h <= 50 {
            assert!(
                l.avg_rmse < s.avg_rmse,
                "H={}: lite rmse {:.3e} not below subsampled {:.3e}",
                l.h,
                l.avg_rmse,
                s.avg_rmse
            );
        }
    }
    let mut inversions = 0;
    for pair in lite.rows.windows(2) {
        if pair[1].avg_rmse > pair[0].avg_rmse {
            inversions += 1;
        }
    }
    assert!(inversions <= 1, "{inversions} inversions in LITE avg_rmse vs H");
    let ratio10 = sub.rows[0].avg_rmse / lite.rows[0].avg_rmse;
    println!(
        "criterion 5 PASS: lite rmse < subsampled rmse for H in 10..50 (at H=10 by {ratio10:.0}x); lite rmse non-increasing with {inversions} inversion(s)"
    );
}

/// Criterion 6: memory scaling. Over N in {100,200,400,800} at H=20, the
/// LITE tracked-activation count varies < 5% while the full-backprop count is
/// linear in N with R^2 > 0.99; at fixed N=400 the LITE count is linear in
/// H in {10,20,40,80} within 5%.
#[test]
fn criterion_6_memory_scaling() {
    let model = protonets_model(16, vec![32, 16], 61);
    let bank = gaussian_bank(16, 5, 200 + 2, 3.0, 0.5, 611);
    let way = 5;
    let tracked_of = |n: usize, h: Option<usize>| -> u64 {
        let episode = episode_from(&bank, way, n / way, 1, 612);
        assert_eq!(episode.n_support(), n);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        match h {
            Some(h) => {
                let mut rng = rng_from_seed(derive_seed(613, h as u64));
                let cfg = LiteConfig::new(h);
                let hset =
                    sample_backprop_indices(n, h, SamplingMode::WithoutReplacement, &mut rng)
                        .unwrap();
                lite_support_forward(&mut tape, &model, &bound, &episode, &hset, &cfg).unwrap();
            }
            None => {
                support_forward(&mut tape, &model, &bound, &episode, SupportPlan::Full).unwrap();
            }
        }
        tape.tracked_count()
    };

    let n_grid = [100usize, 200, 400, 800];
    let lite_counts: Vec<u64> = n_grid.iter().map(|&n| tracked_of(n, Some(20))).collect();
    let lo = *lite_counts.iter().min().unwrap() as f64;
    let hi = *lite_counts.iter().max().unwrap() as f64;
    let spread = (hi - lo) / lo;
    assert!(spread < 0.05, "LITE tracked count varies {:.2}% across N", spread * 100.0);

    let full_counts: Vec<f64> = n_grid.iter().map(|&n| tracked_of(n, None) as f64).collect();
    let ns: Vec<f64> = n_grid.iter().map(|&n| n as f64).collect();
    let r2 = linear_r2(&ns, &full_counts);
    assert!(r2 > 0.99, "full-backprop count R^2 = {r2}");

    let h_grid = [10usize, 20, 40, 80];
    let per_h: Vec<f64> =
        h_grid.iter().map(|&h| tracked_of(400, Some(h)) as f64 / h as f64).collect();
    let lo = per_h.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per_h.iter().cloned().fold(0.0f64, f64::max);
    assert!(hi / lo < 1.05, "tracked/H varies more than 5%: {per_h:?}");

    println!(
        "criterion 6 PASS: lite tracked count varies {:.2}% over N (limit 5%), full count linear in N (R^2 {:.4}), lite count linear in H (tracked/H spread {:.2}%)",
        spread * 100.0,
        r2,
        (hi / lo - 1.0) * 100.0
    );
}

fn oracle_is_perfect(bank: &ClassBank<f64>, sampler_seed: u64, episodes: u64) -> bool {
    // Nearest-class-mean classifier over episode query sets, with means from
    // the episode's own support rows.
    let sampler =
        EpisodeSampler::new(bank.clone(), EpisodeSamplerConfig::fixed(5, 4, 3, sampler_seed));
    for index in 0..episodes {
        let ep = sampler.sample_indexed(index).unwrap();
        let dim = ep.input_shape()[0];
        let mut means = vec![vec![0.0f64; dim]; ep.way];
        let counts = ep.class_counts().unwrap();
        for r in 0..ep.n_support() {
            for (m, v) in means[ep.support_y[r]].iter_mut().zip(ep.support_x.row(r)) {
                *m += v;
            }
        }
        for (c, mean) in means.iter_mut().enumerate() {
            for m in mean.iter_mut() {
                *m /= counts[c] as f64;
            }
        }
        for q in 0..ep.n_query() {
            let row = ep.query_x.row(q);
            let best = (0..ep.way)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&means[a]).map(|(x, m)| (x - m) * (x - m)).sum();
                    let db: f64 = row.iter().zip(&means[b]).map(|(x, m)| (x - m) * (x - m)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best != ep.query_y[q] {
                return false;
            }
        }
    }
    true
}

/// Criteria 7 and 8: end-to-end learning on separable 5-way data where the
/// nearest-mean oracle is perfect.
///
/// 7: ProtoNets+LITE with H = 20% of N exceeds 90% query accuracy within 500
///    iterations and matches full-backprop training within 2 points (95% CI
///    overlap over 200 eval episodes).
/// 8: the H=0 metric-based mode (fully detached support aggregates) still
///    learns, exceeding 80%.
#[test]
fn criteria_7_and_8_end_to_end_learning() {
    // 5-way 4-shot: N = 20, H = 4 = 20% of N.
    let bank = gaussian_bank(32, 12, 24, 2.6, 0.42, 71);
    assert!(oracle_is_perfect(&bank, 711, 40), "fixture must be oracle-separable");
    let sampler_cfg = EpisodeSamplerConfig::fixed(5, 4, 3, 712);
    let eval_cfg = EpisodeSamplerConfig::fixed(5, 4, 3, 713);
    let loop_cfg = TrainLoopConfig {
        iterations: 500,
        learning_rate: 0.003,
        accumulate_tasks: 16,
        optimizer: lite_core::train::OptimizerKind::adam_default(),
        seed: 714,
    };

    let train_arm = |mode: TrainMode, h: usize| {
        let mut model = protonets_model(32, vec![32, 16], 715);
        let sampler = EpisodeSampler::new(bank.clone(), sampler_cfg.clone());
        let mut lite_cfg = LiteConfig::new(h);
        lite_cfg.query_batch = 40;
        meta_train(&mut model, &sampler, &loop_cfg, &lite_cfg, &mode, &SerialExecutor, |_| {})
            .unwrap();
        let eval_sampler = EpisodeSampler::new(bank.clone(), eval_cfg.clone());
        evaluate(&model, &eval_sampler, 200, &SerialExecutor).unwrap()
    };

    // Untrained reference, for context in the PASS line.
    let untrained = {
        let model = protonets_model(32, vec![32, 16], 715);
        let eval_sampler = EpisodeSampler::new(bank.clone(), eval_cfg.clone());
        evaluate(&model, &eval_sampler, 200, &SerialExecutor).unwrap()
    };

    let lite = train_arm(TrainMode::Lite, 4);
    let full = train_arm(TrainMode::FullBackprop, 20);
    assert!(
        lite.mean_accuracy > 0.90,
        "LITE-trained accuracy {:.3} below 0.90",
        lite.mean_accuracy
    );
    let diff = (lite.mean_accuracy - full.mean_accuracy).abs();
    let overlap = (lite.mean_accuracy - lite.ci95) <= (full.mean_accuracy + full.ci95)
        && (full.mean_accuracy - full.ci95) <= (lite.mean_accuracy + lite.ci95);
    assert!(
        diff <= 0.02 || overlap,
        "LITE {:.4}+-{:.4} vs full {:.4}+-{:.4}: neither within 2 points nor CI overlap",
        lite.mean_accuracy,
        lite.ci95,
        full.mean_accuracy,
        full.ci95
    );
    println!(
        "criterion 7 PASS: ProtoNets+LITE (H=20% of N) reached {:.1}% (limit 90%), full-backprop {:.1}%, diff {:.2} points (untrained {:.1}%)",
        lite.mean_accuracy * 100.0,
        full.mean_accuracy * 100.0,
        diff * 100.0,
        untrained.mean_accuracy * 100.0
    );

    // Criterion 8: H = 0, support aggregates fully detached.
    let h0 = train_arm(TrainMode::Lite, 0);
    assert!(
        h0.mean_accuracy > 0.80,
        "H=0 trained accuracy {:.3} below 0.80",
        h0.mean_accuracy
    );
    println!(
        "criterion 8 PASS: H=0 metric-based training reached {:.1}% (limit 80%)",
        h0.mean_accuracy * 100.0
    );
}
