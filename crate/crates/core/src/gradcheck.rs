//! Gradient verification: finite-difference oracle, exact-gradient reference,
//! and the bias/RMSE experiment comparing LITE against sub-sampled tasks.
//!
//! The experiment protocol: a fixed seeded task, a model initialized
//! identically for every run, and per |H| as many single-iteration gradient
//! measurements as fit a fixed budget of support-set examples
//! (`floor(total / H)` runs). The exact reference gradient is the
//! full-support back-propagated gradient of the mean query loss.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::lite::{task_step, LiteConfig, SamplingMode, TrainMode};
use crate::model::{MetaModel, ENCODER_PREFIX, EXTRACTOR_PREFIX};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::rng;
use crate::stats::{mean_vectors, mse, rmse};
use crate::tensor::Tensor;
use crate::train::Executor;

/// Central-difference gradient of `loss_fn` with respect to the named
/// parameter: `(L(p + h) - L(p - h)) / 2h`, elementwise.
///
/// The oracle is independent of the tape: it only re-evaluates the loss on
/// perturbed copies of the store.
pub fn finite_difference_gradient<R: Real>(
    params: &ParamStore<R>,
    name: &str,
    step: f64,
    mut loss_fn: impl FnMut(&ParamStore<R>) -> Result<R>,
) -> Result<Tensor<R>> {
    if R::DTYPE != DType::F64 {
        return Err(Error::InvalidConfig(
            "finite differences require 64-bit mode".into(),
        ));
    }
    let base = params.value(name)?.clone();
    let shape = base.shape().to_vec();
    let mut work = params.clone();
    let h = R::from_f64(step);
    let mut grad = vec![R::zero(); base.numel()];
    for i in 0..base.numel() {
        let mut plus = base.data().to_vec();
        plus[i] += h;
        work.set_value(name, Tensor::new(shape.clone(), plus)?)?;
        let lp = loss_fn(&work)?;
        let mut minus = base.data().to_vec();
        minus[i] -= h;
        work.set_value(name, Tensor::new(shape.clone(), minus)?)?;
        let lm = loss_fn(&work)?;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFiniteValue { context: "finite_difference_gradient" });
        }
        grad[i] = (lp - lm) / (R::from_f64(2.0) * h);
    }
    Tensor::new(shape, grad)
}

/// Largest relative elementwise error between an analytic gradient and its
/// finite-difference estimate: `|a - f| / max(1, |a|, |f|)`.
///
/// The denominator floor of 1 keeps near-zero entries from blowing up the
/// ratio on rounding noise alone; gradients in these nets are O(1) or below.
pub fn max_rel_error<R: Real>(analytic: &Tensor<R>, fd: &Tensor<R>) -> f64 {
    debug_assert_eq!(analytic.shape(), fd.shape());
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &f)| {
            let a = a.to_f64();
            let f = f.to_f64();
            (a - f).abs() / f64::max(1.0, f64::max(a.abs(), f.abs()))
        })
        .fold(0.0, f64::max)
}

/// One row of the bias/RMSE report.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReportRow {
    pub h: usize,
    pub num_runs: usize,
    /// MSE between the mean of the gradient estimates and the exact gradient.
    pub bias_mse: f64,
    /// Mean over runs of the per-run RMSE against the exact gradient.
    pub avg_rmse: f64,
}

/// Per-experiment bias and RMSE statistics versus |H|.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub arm: ExperimentArm,
    pub rows: Vec<GradReportRow>,
    pub measured_param: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentArm {
    /// Full-support forward, sampled back-prop subset, N/H correction.
    Lite,
    /// Naive baseline: train on a randomly reduced support set, no correction.
    Subsampled,
}

impl ExperimentArm {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentArm::Lite => "lite",
            ExperimentArm::Subsampled => "subsampled",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradExperimentConfig {
    pub h_values: Vec<usize>,
    /// Support-set example budget per H value; `floor(total / H)` runs.
    pub total_per_h: usize,
    /// Defaults to the earliest convolution weight of the set encoder.
    pub measured_param: Option<String>,
    pub sampling: SamplingMode,
    pub base_seed: u64,
}

impl Default for GradExperimentConfig {
    fn default() -> Self {
        GradExperimentConfig {
            h_values: (1..=9).map(|i| i * 10).collect(),
            total_per_h: 1000,
            measured_param: None,
            sampling: SamplingMode::WithoutReplacement,
            base_seed: 0,
        }
    }
}

/// The default measurement target: the earliest convolution weights of the
/// set encoder, falling back to the extractor / first dense layer.
pub fn default_measured_param<R: Real>(model: &MetaModel<R>) -> Result<String> {
    for prefix in [ENCODER_PREFIX, EXTRACTOR_PREFIX] {
        for tail in ["conv0.weight", "layer0.weight"] {
            let name = alloc::format!("{prefix}.{tail}");
            if model.params.value(&name).is_ok() {
                return Ok(name);
            }
        }
    }
    Err(Error::InvalidConfig("no measurable parameter found".into()))
}

fn single_batch_cfg(episode_queries: usize, h: usize, sampling: SamplingMode) -> LiteConfig {
    let mut cfg = LiteConfig::new(h);
    cfg.query_batch = episode_queries.max(1);
    cfg.sampling = sampling;
    cfg
}

/// Full-support back-propagated gradient of the mean query loss for one
/// parameter. Deterministic: no sampling is involved.
pub fn exact_gradient<R: Real>(
    model: &MetaModel<R>,
    episode: &Episode<R>,
    param_name: &str,
) -> Result<Tensor<R>> {
    let cfg = single_batch_cfg(episode.n_query(), 0, SamplingMode::WithoutReplacement);
    let mut rng = rng::rng_from_seed(0);
    let out = task_step(model, episode, &TrainMode::FullBackprop, &cfg, &mut rng)?;
    Ok(out.grads.get(param_name)?.clone())
}

/// One gradient measurement for the given arm at subset size `h`.
pub fn gradient_draw<R: Real>(
    model: &MetaModel<R>,
    episode: &Episode<R>,
    param_name: &str,
    h: usize,
    sampling: SamplingMode,
    arm: ExperimentArm,
    rng: &mut rng::EngineRng,
) -> Result<Tensor<R>> {
    let cfg = single_batch_cfg(episode.n_query(), h, sampling);
    let mode = match arm {
        ExperimentArm::Lite => TrainMode::Lite,
        ExperimentArm::Subsampled => TrainMode::Subsampled { h },
    };
    let out = task_step(model, episode, &mode, &cfg, rng)?;
    Ok(out.grads.get(param_name)?.clone())
}

/// Bias and RMSE statistics versus |H| for one arm, against the exact
/// gradient of the same fixed task.
pub fn run_bias_variance_experiment<R: Real, E: Executor>(
    model: &MetaModel<R>,
    episode: &Episode<R>,
    cfg: &GradExperimentConfig,
    arm: ExperimentArm,
    exec: &E,
) -> Result<GradReport> {
    let param = match &cfg.measured_param {
        Some(name) => {
            model.params.value(name)?;
            name.clone()
        }
        None => default_measured_param(model)?,
    };
    let exact: Vec<f64> = exact_gradient(model, episode, &param)?
        .data()
        .iter()
        .map(|&g| g.to_f64())
        .collect();
    let arm_salt: u64 = match arm {
        ExperimentArm::Lite => 1,
        ExperimentArm::Subsampled => 2,
    };
    let mut rows = Vec::with_capacity(cfg.h_values.len());
    for &h in &cfg.h_values {
        if h == 0 || h > episode.n_support() {
            return Err(Error::InvalidConfig(alloc::format!(
                "H={h} invalid for a task with N={}",
                episode.n_support()
            )));
        }
        let num_runs = cfg.total_per_h / h;
        if num_runs == 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "budget {} gives zero runs at H={h}",
                cfg.total_per_h
            )));
        }
        let h_seed = rng::derive_seed(cfg.base_seed, arm_salt.wrapping_mul(1_000_003) + h as u64);
        let jobs: Vec<u64> = (0..num_runs as u64).collect();
        let results = exec.run(jobs, |run| {
            let mut draw_rng = rng::rng_from_seed(rng::derive_seed(h_seed, run));
            let est = gradient_draw(model, episode, &param, h, cfg.sampling, arm, &mut draw_rng)?;
            Ok::<_, Error>(est.data().iter().map(|&g| g.to_f64()).collect::<Vec<f64>>())
        });
        let mut estimates = Vec::with_capacity(num_runs);
        for r in results {
            estimates.push(r?);
        }
        let mean_estimate = mean_vectors(&estimates);
        let bias_mse = mse(&mean_estimate, &exact);
        let avg_rmse =
            estimates.iter().map(|e| rmse(e, &exact)).sum::<f64>() / num_runs as f64;
        if !bias_mse.is_finite() || !avg_rmse.is_finite() {
            return Err(Error::NonFiniteValue { context: "run_bias_variance_experiment" });
        }
        rows.push(GradReportRow { h, num_runs, bias_mse, avg_rmse });
    }
    Ok(GradReport { arm, rows, measured_param: param.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::InitSpec;
    use crate::rng::rng_from_seed;

    #[test]
    fn quadratic_loss_gradient_is_exact_to_oh2() {
        let mut rng = rng_from_seed(3);
        let mut store = ParamStore::<f64>::new();
        store.register("w", &[3], InitSpec::HeNormal { fan_in: 3 }, true, &mut rng);
        // L = sum w_i^2 -> dL/dw = 2w
        let fd = finite_difference_gradient(&store, "w", 1e-5, |ps| {
            Ok(ps.value("w")?.data().iter().map(|&x| x * x).sum())
        })
        .unwrap();
        let w = store.value("w").unwrap();
        for (g, x) in fd.data().iter().zip(w.data()) {
            assert!((g - 2.0 * x).abs() < 1e-9, "fd {g} vs analytic {}", 2.0 * x);
        }
    }

    #[test]
    fn zero_loss_function_gives_zero_gradient() {
        let mut rng = rng_from_seed(4);
        let mut store = ParamStore::<f64>::new();
        store.register("w", &[4], InitSpec::HeNormal { fan_in: 4 }, true, &mut rng);
        let fd = finite_difference_gradient(&store, "w", 1e-5, |_| Ok(0.0)).unwrap();
        assert!(fd.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn f32_mode_is_rejected() {
        let mut rng = rng_from_seed(5);
        let mut store = ParamStore::<f32>::new();
        store.register("w", &[2], InitSpec::Ones, true, &mut rng);
        let err = finite_difference_gradient(&store, "w", 1e-5, |_| Ok(0.0f32)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut rng = rng_from_seed(6);
        let mut store = ParamStore::<f64>::new();
        store.register("w", &[1], InitSpec::Ones, true, &mut rng);
        let err =
            finite_difference_gradient(&store, "w", 1e-5, |_| Ok(f64::NAN)).unwrap_err();
        assert_eq!(err, Error::NonFiniteValue { context: "finite_difference_gradient" });
    }
}
