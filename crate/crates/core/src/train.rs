//! Meta-training loop, optimizers, and episode evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

// Float must be in scope for f64 math in the no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use crate::episode::{Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::lite::{support_forward, predict_logits, task_step, LiteConfig, SupportPlan, TrainMode};
use crate::model::MetaModel;
use crate::ops::{argmax_rows, softmax_rows};
use crate::params::{GradMap, ParamStore};
use crate::real::Real;
use crate::rng;
use crate::stats::mean_ci95;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainLoopConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    /// Back-propagate every task; apply one optimizer step per this many.
    pub accumulate_tasks: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            iterations: 10_000,
            learning_rate: 0.001,
            accumulate_tasks: 16,
            optimizer: OptimizerKind::adam_default(),
            seed: 0,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulate_tasks == 0 {
            return Err(Error::InvalidConfig("accumulate_tasks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam/SGD over the trainable entries of a parameter store. Frozen
/// parameters are never touched.
pub struct Optimizer<R: Real> {
    kind: OptimizerKind,
    m: BTreeMap<String, Vec<R>>,
    v: BTreeMap<String, Vec<R>>,
    t: u64,
}

impl<R: Real> Optimizer<R> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &GradMap<R>, lr: f64) -> Result<()> {
        self.t += 1;
        let lr = R::from_f64(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, param) in params.iter_mut() {
                    if !param.trainable {
                        continue;
                    }
                    let g = grads.get(name)?;
                    let data = param.value.data_mut();
                    for (p, &gi) in data.iter_mut().zip(g.data()) {
                        *p -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let b1 = R::from_f64(beta1);
                let b2 = R::from_f64(beta2);
                let eps = R::from_f64(eps);
                let corr1 = R::from_f64(1.0 - beta1.powi(self.t as i32));
                let corr2 = R::from_f64(1.0 - beta2.powi(self.t as i32));
                for (name, param) in params.iter_mut() {
                    if !param.trainable {
                        continue;
                    }
                    let g = grads.get(name)?;
                    let numel = param.value.numel();
                    let m = self.m.entry(name.clone()).or_insert_with(|| alloc::vec![R::zero(); numel]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| alloc::vec![R::zero(); numel]);
                    let data = param.value.data_mut();
                    for i in 0..numel {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (R::one() - b1) * gi;
                        v[i] = b2 * v[i] + (R::one() - b2) * gi * gi;
                        let m_hat = m[i] / corr1;
                        let v_hat = v[i] / corr2;
                        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One training-log record per task.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iteration: u64,
    pub task_seed: u64,
    pub loss: f64,
    pub query_acc: f64,
    pub tracked_count: u64,
}

/// Maps a batch of independent jobs; implementations may parallelize but
/// must return outputs in input order.
pub trait Executor {
    fn run<I: Send, O: Send>(&self, items: Vec<I>, f: impl Fn(I) -> O + Sync + Send) -> Vec<O>;
}

/// In-order, single-threaded executor.
pub struct SerialExecutor;

impl Executor for SerialExecutor {
    fn run<I: Send, O: Send>(&self, items: Vec<I>, f: impl Fn(I) -> O + Sync + Send) -> Vec<O> {
        items.into_iter().map(f).collect()
    }
}

/// Derive the H-draw stream for a task so it is independent of the episode
/// content stream.
fn hdraw_seed(task_seed: u64) -> u64 {
    rng::derive_seed(task_seed, 0x4c49_5445) // "LITE"
}

/// Episodic meta-training: sample task, take a task step, accumulate
/// gradients, and apply one optimizer step every `accumulate_tasks` tasks.
///
/// `on_row` fires once per task in iteration order.
pub fn meta_train<R: Real, E: Executor>(
    model: &mut MetaModel<R>,
    sampler: &EpisodeSampler<R>,
    loop_cfg: &TrainLoopConfig,
    lite_cfg: &LiteConfig,
    mode: &TrainMode,
    exec: &E,
    mut on_row: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>> {
    loop_cfg.validate()?;
    lite_cfg.validate()?;
    let mut optimizer = Optimizer::new(loop_cfg.optimizer);
    let mut rows = Vec::with_capacity(loop_cfg.iterations as usize);
    let mut iteration = 0u64;
    while iteration < loop_cfg.iterations {
        let group = (loop_cfg.accumulate_tasks as u64).min(loop_cfg.iterations - iteration);
        let jobs: Vec<u64> = (iteration..iteration + group).collect();
        let model_ref: &MetaModel<R> = model;
        let results = exec.run(jobs, |task_index| {
            let task_seed = sampler.task_seed(task_index);
            let episode = sampler.sample_indexed(task_index)?;
            let mut draw_rng = rng::rng_from_seed(hdraw_seed(task_seed));
            let out = task_step(model_ref, &episode, mode, lite_cfg, &mut draw_rng)?;
            Ok::<_, Error>((task_index, task_seed, out))
        });
        let mut accum = GradMap::zeros_like(&model.params);
        for result in results {
            let (task_index, task_seed, out) = result?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: task_index, task_seed });
            }
            accum.add_assign(&out.grads);
            let row = TrainLogRow {
                iteration: task_index,
                task_seed,
                loss: out.loss,
                query_acc: out.query_acc,
                tracked_count: out.tracked_count,
            };
            on_row(&row);
            rows.push(row);
        }
        accum.scale(R::one() / R::from_f64(group as f64));
        optimizer.step(&mut model.params, &accum, loop_cfg.learning_rate)?;
        iteration += group;
    }
    Ok(rows)
}

/// Per-query probabilities and top-1 accuracy for one episode.
pub struct Prediction<R: Real> {
    pub probs: Tensor<R>,
    pub predicted: Vec<usize>,
    pub accuracy: f64,
}

/// Adapt on the full support set and classify the query set, entirely under
/// disabled gradients: zero tape growth.
pub fn adapt_and_predict<R: Real>(model: &MetaModel<R>, episode: &Episode<R>) -> Result<Prediction<R>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let before = tape.tracked_count();
    let (probs, predicted) = tape.with_grad_disabled(|tape| {
        let state = support_forward(tape, model, &bound, episode, SupportPlan::Full)?;
        let logits = predict_logits(tape, model, &bound, &state, &episode.query_x)?;
        Ok::<_, Error>((softmax_rows(&logits), argmax_rows(&logits)))
    })?;
    debug_assert_eq!(tape.tracked_count(), before);
    let correct = predicted.iter().zip(&episode.query_y).filter(|(p, y)| p == y).count();
    let accuracy = correct as f64 / episode.n_query() as f64;
    Ok(Prediction { probs, predicted, accuracy })
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub episode_index: u64,
    pub task_seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_accuracy: f64,
    /// 95% confidence half-width, 1.96 * stderr.
    pub ci95: f64,
}

/// Accuracy over `episodes` test episodes with a 95% confidence interval.
pub fn evaluate<R: Real, E: Executor>(
    model: &MetaModel<R>,
    sampler: &EpisodeSampler<R>,
    episodes: u64,
    exec: &E,
) -> Result<EvalReport> {
    let jobs: Vec<u64> = (0..episodes).collect();
    let results = exec.run(jobs, |index| {
        let episode = sampler.sample_indexed(index)?;
        let prediction = adapt_and_predict(model, &episode)?;
        Ok::<_, Error>(EvalRow {
            episode_index: index,
            task_seed: sampler.task_seed(index),
            accuracy: prediction.accuracy,
        })
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, ci95) = mean_ci95(&accs);
    Ok(EvalReport { rows, mean_accuracy, ci95 })
}
