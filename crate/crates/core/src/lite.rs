//! The LITE engine: forward the entire support set, back-propagate a random
//! subset.
//!
//! A task step samples a subset `H` of the support indices, forwards those
//! rows with gradient tracking and the complement in no-grad chunks, then
//! assembles every support-set aggregate (set-encoder sum, per-class feature
//! sums, covariance sufficient statistics) with the straight-through scaled
//! combinator: the aggregate's *value* equals the full-support computation
//! exactly, while its *gradient* flows only through the tracked rows, scaled
//! so the estimate stays unbiased.
//!
//! Scaling follows the estimator: the subset-sum of per-example gradient
//! contributions is multiplied by `N/H`, which makes every aggregate's
//! gradient unbiased under both sampling modes because each support element
//! enters the subset with probability `H/N`. A per-class `k_c/h_c` variant is
//! kept for ablation; note it conditions on the class being hit, so classes
//! the draw misses contribute nothing and the unconditional mean is shrunk by
//! the hit probability.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::episode::{split_query_batches, support_rows, Episode};
use crate::error::{Error, Result};
use crate::model::heads::{
    class_stats_from_sums, class_sums, euclidean_logits, linear_head_logits, mahalanobis_logits,
    regularize_covariances, scale_rows, select_row,
};
use crate::model::{extract_features, MetaModel, ModelFamily, FilmParams, ENCODER_PREFIX, FILM_PREFIX, HEAD_PREFIX};
use crate::ops::argmax_rows;
use crate::params::{BoundParams, GradMap};
use crate::real::Real;
use crate::rng::{self, EngineRng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// H distinct indices, uniform over size-H subsets.
    WithoutReplacement,
    /// H i.i.d. uniform draws; duplicates allowed.
    WithReplacement,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::WithoutReplacement => "without_replacement",
            SamplingMode::WithReplacement => "with_replacement",
        }
    }
}

/// Where the N/H correction applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// Scale only the support-path (subset) gradient contribution. The exact
    /// query-path gradient is left alone.
    SupportPath,
    /// No correction; ablation only (biased towards the subset).
    None,
}

/// How per-class aggregates are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateScale {
    /// N/H for every aggregate (unbiased; default).
    GlobalNOverH,
    /// k_c/h_c per class aggregate; classes missed by the draw are detached
    /// for the batch. Ablation mode.
    PerClassKOverH,
}

#[derive(Clone, Debug)]
pub struct LiteConfig {
    /// Back-prop subset size. 0 is allowed only for metric-based models.
    pub h: usize,
    /// Query batch size M_b.
    pub query_batch: usize,
    pub sampling: SamplingMode,
    pub scale_mode: ScaleMode,
    pub aggregate_scale: AggregateScale,
    /// Chunk size for the no-grad forward of the complement.
    pub complement_batch: usize,
    /// Draw a fresh H-set for every query batch.
    pub resample_per_query_batch: bool,
}

impl LiteConfig {
    pub fn new(h: usize) -> Self {
        LiteConfig {
            h,
            query_batch: 40,
            sampling: SamplingMode::WithoutReplacement,
            scale_mode: ScaleMode::SupportPath,
            aggregate_scale: AggregateScale::GlobalNOverH,
            complement_batch: 40,
            resample_per_query_batch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_batch == 0 {
            return Err(Error::InvalidConfig("query batch size must be >= 1".into()));
        }
        if self.complement_batch == 0 {
            return Err(Error::InvalidConfig("complement batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Lite,
    FullBackprop,
    /// Naive baseline: reduce the support set to `h` rows (at least one per
    /// class) and back-propagate the reduced task fully, no correction.
    Subsampled { h: usize },
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Lite => "lite",
            TrainMode::FullBackprop => "full",
            TrainMode::Subsampled { .. } => "subsampled",
        }
    }
}

/// Sample the back-prop index multiset, ascending.
pub fn sample_backprop_indices(
    n: usize,
    h: usize,
    mode: SamplingMode,
    rng: &mut EngineRng,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptySupport);
    }
    match mode {
        SamplingMode::WithoutReplacement => {
            if h > n {
                return Err(Error::SubsetTooLarge { h, n });
            }
            Ok(rng::sample_distinct(rng, n, h))
        }
        SamplingMode::WithReplacement => {
            let mut picks: Vec<usize> = (0..h).map(|_| rng.gen_range(0..n)).collect();
            picks.sort_unstable();
            Ok(picks)
        }
    }
}

/// Adapted classifier state produced by a support forward pass.
pub enum AdaptState<R: Real> {
    Prototypes { prototypes: Tensor<R> },
    LinearHead { film: FilmParams<R>, weights: Tensor<R>, biases: Tensor<R> },
    Mahalanobis { film: FilmParams<R>, mu: Tensor<R>, sigmas: Tensor<R> },
}

#[derive(Clone, Copy)]
pub enum SupportPlan<'a> {
    /// Track every support row; aggregates are used directly.
    Full,
    /// Track `hset`, forward the complement without gradients, and assemble
    /// aggregates with the straight-through combinator.
    Lite { hset: &'a [usize], cfg: &'a LiteConfig },
}

/// Features of the support set under a plan: the tracked subset rows plus a
/// detached full-feature matrix in original row order.
struct FeatView<R: Real> {
    tracked: Option<Tensor<R>>,
    tracked_labels: Vec<usize>,
    full: Tensor<R>,
}

fn split_pass<R: Real>(
    tape: &mut Tape<R>,
    episode: &Episode<R>,
    hset: &[usize],
    complement_batch: usize,
    mut pipeline: impl FnMut(&mut Tape<R>, &Tensor<R>) -> Result<Tensor<R>>,
) -> Result<FeatView<R>> {
    let n = episode.n_support();
    // Tracked pass over the subset, one batch.
    let (tracked, tracked_labels) = if hset.is_empty() {
        (None, Vec::new())
    } else {
        let x_h = support_rows(episode, hset)?;
        let feats = pipeline(tape, &x_h)?;
        let labels = hset.iter().map(|&i| episode.support_y[i]).collect();
        (Some(feats), labels)
    };
    // First tracked occurrence of each support index, if any.
    let mut slot_of = vec![usize::MAX; n];
    for (slot, &idx) in hset.iter().enumerate() {
        if slot_of[idx] == usize::MAX {
            slot_of[idx] = slot;
        }
    }
    let complement: Vec<usize> = (0..n).filter(|&i| slot_of[i] == usize::MAX).collect();
    // No-grad pass over the complement in chunks.
    let mut complement_feats: Vec<(usize, Vec<R>)> = Vec::with_capacity(complement.len());
    for chunk in complement.chunks(complement_batch) {
        let x_c = support_rows(episode, chunk)?;
        let feats = tape.with_grad_disabled(|tape| pipeline(tape, &x_c))?;
        let d = feats.shape()[1];
        for (row, &idx) in chunk.iter().enumerate() {
            complement_feats.push((idx, feats.data()[row * d..(row + 1) * d].to_vec()));
        }
    }
    // Assemble the full detached feature matrix in original order.
    let d = tracked
        .as_ref()
        .map(|t| t.shape()[1])
        .or_else(|| complement_feats.first().map(|(_, r)| r.len()))
        .ok_or(Error::EmptySupport)?;
    let mut comp_iter = complement_feats.iter();
    let mut full = Vec::with_capacity(n * d);
    for idx in 0..n {
        if slot_of[idx] != usize::MAX {
            let t = tracked.as_ref().expect("tracked rows present");
            full.extend_from_slice(&t.data()[slot_of[idx] * d..(slot_of[idx] + 1) * d]);
        } else {
            let (cidx, row) = comp_iter.next().expect("complement row present");
            debug_assert_eq!(*cidx, idx);
            full.extend_from_slice(row);
        }
    }
    Ok(FeatView {
        tracked,
        tracked_labels,
        full: Tensor::new(vec![n, d], full)?,
    })
}

/// Straight-through assembly policy for one support pass.
struct Combiner<R: Real> {
    /// None: full plan, aggregates come straight from the tracked tensor.
    lite: Option<LiteScales<R>>,
}

struct LiteScales<R: Real> {
    global: R,
    per_class: bool,
    /// Support count per class.
    counts: Vec<usize>,
    /// Tracked (multiset) count per class.
    h_counts: Vec<usize>,
}

impl<R: Real> LiteScales<R> {
    fn class_scale(&self, c: usize) -> R {
        if self.per_class {
            R::from_f64(self.counts[c] as f64 / self.h_counts[c] as f64)
        } else {
            self.global
        }
    }
}

fn make_combiner<R: Real>(
    plan: &SupportPlan<'_>,
    counts: &[usize],
    tracked_labels: &[usize],
) -> Combiner<R> {
    match plan {
        SupportPlan::Full => Combiner { lite: None },
        SupportPlan::Lite { hset, cfg } => {
            let n: usize = counts.iter().sum();
            let h = hset.len();
            let global = match cfg.scale_mode {
                ScaleMode::SupportPath if h > 0 => R::from_f64(n as f64 / h as f64),
                _ => R::one(),
            };
            let per_class = match cfg.aggregate_scale {
                AggregateScale::GlobalNOverH => false,
                AggregateScale::PerClassKOverH => cfg.scale_mode == ScaleMode::SupportPath,
            };
            let mut h_counts = vec![0usize; counts.len()];
            for &y in tracked_labels {
                h_counts[y] += 1;
            }
            Combiner { lite: Some(LiteScales { global, per_class, counts: counts.to_vec(), h_counts }) }
        }
    }
}

/// Combine a `[1, d]`-shaped global aggregate.
fn combine_global<R: Real>(
    tape: &mut Tape<R>,
    full: &Tensor<R>,
    tracked: Option<&Tensor<R>>,
    combiner: &Combiner<R>,
) -> Result<Tensor<R>> {
    match (&combiner.lite, tracked) {
        (None, Some(t)) => Ok(t.clone()),
        (None, None) => Err(Error::EmptySupport),
        (Some(_), None) => Ok(full.detach()),
        (Some(scales), Some(t)) => tape.straight_through_scaled(full, t, scales.global),
    }
}

/// Combine a `[C, d]` per-class aggregate.
fn combine_per_class<R: Real>(
    tape: &mut Tape<R>,
    full: &Tensor<R>,
    tracked: Option<&Tensor<R>>,
    combiner: &Combiner<R>,
) -> Result<Tensor<R>> {
    let Some(scales) = &combiner.lite else {
        return tracked.cloned().ok_or(Error::EmptySupport);
    };
    let Some(t) = tracked else { return Ok(full.detach()) };
    if !scales.per_class {
        return tape.straight_through_scaled(full, t, scales.global);
    }
    let way = full.shape()[0];
    let d = full.shape()[1];
    let mut rows = Vec::with_capacity(way);
    for c in 0..way {
        let full_row = Tensor::new(vec![1, d], full.row(c).to_vec())?;
        if scales.h_counts[c] == 0 {
            rows.push(full_row);
        } else {
            let tracked_row = select_row(tape, t, c)?;
            rows.push(tape.straight_through_scaled(&full_row, &tracked_row, scales.class_scale(c))?);
        }
    }
    let refs: Vec<&Tensor<R>> = rows.iter().collect();
    tape.concat(&refs, 0)
}

/// Per-class sums of the support features under the plan.
fn combined_class_sums<R: Real>(
    tape: &mut Tape<R>,
    view: &FeatView<R>,
    labels: &[usize],
    way: usize,
    combiner: &Combiner<R>,
) -> Result<Tensor<R>> {
    let full = class_sums(tape, &view.full, labels, way)?;
    let tracked = match &view.tracked {
        Some(t) => Some(class_sums(tape, t, &view.tracked_labels, way)?),
        None => None,
    };
    combine_per_class(tape, &full, tracked.as_ref(), combiner)
}

/// Global sum of the support features (set-encoder aggregate), `[1, d]`.
fn combined_global_sum<R: Real>(
    tape: &mut Tape<R>,
    view: &FeatView<R>,
    combiner: &Combiner<R>,
) -> Result<Tensor<R>> {
    let d = view.full.shape()[1];
    let full_sum = tape.sum_over_axis(&view.full, 0)?;
    let full_sum = tape.reshape(&full_sum, vec![1, d])?;
    let tracked_sum = match &view.tracked {
        Some(t) => {
            let s = tape.sum_over_axis(t, 0)?;
            Some(tape.reshape(&s, vec![1, d])?)
        }
        None => None,
    };
    combine_global(tape, &full_sum, tracked_sum.as_ref(), combiner)
}

/// Rows of `features` belonging to class `c`, via a constant selector.
fn rows_of_class<R: Real>(
    tape: &mut Tape<R>,
    features: &Tensor<R>,
    labels: &[usize],
    class: usize,
) -> Result<Option<Tensor<R>>> {
    let members: Vec<usize> =
        labels.iter().enumerate().filter(|(_, &y)| y == class).map(|(r, _)| r).collect();
    if members.is_empty() {
        return Ok(None);
    }
    let rows = labels.len();
    let mut sel = vec![R::zero(); members.len() * rows];
    for (slot, &r) in members.iter().enumerate() {
        sel[slot * rows + r] = R::one();
    }
    let sel = Tensor::from_parts(vec![members.len(), rows], sel, None);
    Ok(Some(tape.matmul(&sel, features)?))
}

/// Per-class second-moment sums `sum x x^T` under the plan, one `[d, d]`
/// block per class.
fn combined_class_outer_sums<R: Real>(
    tape: &mut Tape<R>,
    view: &FeatView<R>,
    labels: &[usize],
    way: usize,
    combiner: &Combiner<R>,
) -> Result<Vec<Tensor<R>>> {
    let mut out = Vec::with_capacity(way);
    for c in 0..way {
        let full_rows = rows_of_class(tape, &view.full, labels, c)?
            .ok_or(Error::EmptyClass { class: c })?;
        let full_rows_t = tape.transpose(&full_rows)?;
        let full_s2 = tape.matmul(&full_rows_t, &full_rows)?;
        let tracked_s2 = match &view.tracked {
            Some(t) => match rows_of_class(tape, t, &view.tracked_labels, c)? {
                Some(rows) => {
                    let rows_t = tape.transpose(&rows)?;
                    Some(tape.matmul(&rows_t, &rows)?)
                }
                None => None,
            },
            None => None,
        };
        let combined = match (&combiner.lite, tracked_s2) {
            (None, Some(t)) => t,
            (None, None) => return Err(Error::EmptyClass { class: c }),
            (Some(_), None) => full_s2.detach(),
            (Some(scales), Some(t)) => {
                tape.straight_through_scaled(&full_s2, &t, scales.class_scale(c))?
            }
        };
        out.push(combined);
    }
    Ok(out)
}

/// Run the support forward pass under a plan and build the adapted
/// classifier state for the model family.
pub fn support_forward<R: Real>(
    tape: &mut Tape<R>,
    model: &MetaModel<R>,
    bound: &BoundParams<R>,
    episode: &Episode<R>,
    plan: SupportPlan<'_>,
) -> Result<AdaptState<R>> {
    let n = episode.n_support();
    if n == 0 {
        return Err(Error::EmptySupport);
    }
    let way = episode.way;
    let counts = episode.class_counts()?;
    let (hset_vec, cfg): (Vec<usize>, Option<&LiteConfig>) = match plan {
        SupportPlan::Full => ((0..n).collect(), None),
        SupportPlan::Lite { hset, cfg } => {
            cfg.validate()?;
            if hset.is_empty() && model.config.family.is_amortized() {
                return Err(Error::InvalidConfig(
                    "H=0 is only supported for metric-based models".into(),
                ));
            }
            (hset.to_vec(), Some(cfg))
        }
    };
    let complement_batch = cfg.map_or(n.max(1), |c| c.complement_batch);
    let labels = &episode.support_y;

    match model.config.family {
        ModelFamily::ProtoNets => {
            let view = split_pass(tape, episode, &hset_vec, complement_batch, |tape, x| {
                extract_features(tape, model, bound, None, x)
            })?;
            let combiner = make_combiner(&plan, &counts, &view.tracked_labels);
            let sums = combined_class_sums(tape, &view, labels, way, &combiner)?;
            let inv_counts: Vec<R> =
                counts.iter().map(|&k| R::one() / R::from_f64(k as f64)).collect();
            let prototypes = scale_rows(tape, &sums, &inv_counts)?;
            Ok(AdaptState::Prototypes { prototypes })
        }
        ModelFamily::Cnaps | ModelFamily::SimpleCnaps => {
            let encoder = model.config.encoder.as_ref().expect("validated");
            let enc_view = split_pass(tape, episode, &hset_vec, complement_batch, |tape, x| {
                encoder.forward(tape, bound, ENCODER_PREFIX, None, x)
            })?;
            let combiner = make_combiner(&plan, &counts, &enc_view.tracked_labels);
            let emb_sum = combined_global_sum(tape, &enc_view, &combiner)?;
            let emb = tape.scale(&emb_sum, R::one() / R::from_f64(n as f64))?;
            let film_gen = model.config.film_generator().expect("validated");
            let film = film_gen.generate(tape, bound, FILM_PREFIX, &emb)?;

            let feat_view = split_pass(tape, episode, &hset_vec, complement_batch, |tape, x| {
                extract_features(tape, model, bound, Some(&film), x)
            })?;
            let s1 = combined_class_sums(tape, &feat_view, labels, way, &combiner)?;
            match model.config.family {
                ModelFamily::Cnaps => {
                    let inv_counts: Vec<R> =
                        counts.iter().map(|&k| R::one() / R::from_f64(k as f64)).collect();
                    let pooled = scale_rows(tape, &s1, &inv_counts)?;
                    let head = model.config.linear_head().expect("validated");
                    let (weights, biases) = head.generate(tape, bound, HEAD_PREFIX, &pooled)?;
                    Ok(AdaptState::LinearHead { film, weights, biases })
                }
                ModelFamily::SimpleCnaps => {
                    let s2 = combined_class_outer_sums(tape, &feat_view, labels, way, &combiner)?;
                    let stats = class_stats_from_sums(tape, &s1, &s2, &counts)?;
                    let sigmas = regularize_covariances(tape, &stats, model.config.maha_eps)?;
                    Ok(AdaptState::Mahalanobis { film, mu: stats.mu, sigmas })
                }
                ModelFamily::ProtoNets => unreachable!(),
            }
        }
    }
}

/// Spec name for the subset path: support forward with a LITE plan.
pub fn lite_support_forward<R: Real>(
    tape: &mut Tape<R>,
    model: &MetaModel<R>,
    bound: &BoundParams<R>,
    episode: &Episode<R>,
    hset: &[usize],
    cfg: &LiteConfig,
) -> Result<AdaptState<R>> {
    support_forward(tape, model, bound, episode, SupportPlan::Lite { hset, cfg })
}

/// Query logits under an adapted state (tracked when gradients are enabled).
pub fn predict_logits<R: Real>(
    tape: &mut Tape<R>,
    model: &MetaModel<R>,
    bound: &BoundParams<R>,
    state: &AdaptState<R>,
    query_x: &Tensor<R>,
) -> Result<Tensor<R>> {
    match state {
        AdaptState::Prototypes { prototypes } => {
            let qf = extract_features(tape, model, bound, None, query_x)?;
            euclidean_logits(tape, prototypes, &qf)
        }
        AdaptState::LinearHead { film, weights, biases } => {
            let qf = extract_features(tape, model, bound, Some(film), query_x)?;
            linear_head_logits(tape, weights, biases, &qf)
        }
        AdaptState::Mahalanobis { film, mu, sigmas } => {
            let qf = extract_features(tape, model, bound, Some(film), query_x)?;
            mahalanobis_logits(tape, mu, sigmas, &qf)
        }
    }
}

/// Gradient, loss and bookkeeping from one task.
#[derive(Debug)]
pub struct TaskStepOut<R: Real> {
    pub grads: GradMap<R>,
    /// Query-size-weighted mean loss over the batches.
    pub loss: f64,
    pub query_acc: f64,
    /// Activation scalars retained for backward, summed over batch tapes.
    pub tracked_count: u64,
}

fn task_batches<R: Real>(
    model: &MetaModel<R>,
    episode: &Episode<R>,
    cfg: &LiteConfig,
    mut next_hset: impl FnMut(&mut EngineRng) -> Result<Option<Vec<usize>>>,
    rng: &mut EngineRng,
) -> Result<TaskStepOut<R>> {
    let batches = split_query_batches(episode, cfg.query_batch)?;
    let m_total = episode.n_query() as f64;
    let mut grads = GradMap::zeros_like(&model.params);
    let mut loss_total = 0.0;
    let mut correct = 0usize;
    let mut tracked = 0u64;
    for batch in &batches {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let hset = next_hset(rng)?;
        let plan = match &hset {
            None => SupportPlan::Full,
            Some(hs) => SupportPlan::Lite { hset: hs, cfg },
        };
        let state = support_forward(&mut tape, model, &bound, episode, plan)?;
        let logits = predict_logits(&mut tape, model, &bound, &state, &batch.x)?;
        let batch_loss = tape.softmax_cross_entropy(&logits, &batch.y)?;
        let weight = batch.y.len() as f64 / m_total;
        let weighted = tape.scale(&batch_loss, R::from_f64(weight))?;
        tape.backward(&weighted)?;
        grads.add_assign(&bound.collect_grads(&tape));
        loss_total += batch_loss.item().to_f64() * weight;
        correct += argmax_rows(&logits).iter().zip(&batch.y).filter(|(p, y)| p == y).count();
        tracked += tape.tracked_count();
    }
    Ok(TaskStepOut { grads, loss: loss_total, query_acc: correct as f64 / m_total, tracked_count: tracked })
}

/// Reduce the support set to `h` rows, keeping at least one per class, in
/// original order. The query set is untouched.
pub fn subsample_support<R: Real>(
    episode: &Episode<R>,
    h: usize,
    rng: &mut EngineRng,
) -> Result<Episode<R>> {
    let n = episode.n_support();
    let way = episode.way;
    if h > n {
        return Err(Error::SubsetTooLarge { h, n });
    }
    if h < way {
        return Err(Error::InvalidConfig(alloc::format!(
            "subsampled task needs at least one example per class (H={h} < way={way})"
        )));
    }
    episode.class_counts()?;
    // One guaranteed pick per class, then uniform over the rest.
    let mut picked = vec![false; n];
    for c in 0..way {
        let members: Vec<usize> =
            (0..n).filter(|&i| episode.support_y[i] == c).collect();
        picked[members[rng.gen_range(0..members.len())]] = true;
    }
    let remaining: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
    for &extra in rng::sample_distinct(rng, remaining.len(), h - way).iter() {
        picked[remaining[extra]] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| picked[i]).collect();
    Ok(Episode {
        support_x: support_rows(episode, &keep)?,
        support_y: keep.iter().map(|&i| episode.support_y[i]).collect(),
        query_x: episode.query_x.clone(),
        query_y: episode.query_y.clone(),
        way,
        task_id: episode.task_id,
        rng_seed: episode.rng_seed,
    })
}

/// One meta-training task step: per query batch, (re)sample the H-set, run
/// the split support forward, forward the query batch with tracking, and
/// accumulate gradients of the mean query cross-entropy.
pub fn task_step<R: Real>(
    model: &MetaModel<R>,
    episode: &Episode<R>,
    mode: &TrainMode,
    cfg: &LiteConfig,
    rng: &mut EngineRng,
) -> Result<TaskStepOut<R>> {
    match mode {
        TrainMode::FullBackprop => task_batches(model, episode, cfg, |_| Ok(None), rng),
        TrainMode::Lite => {
            let n = episode.n_support();
            let mut shared: Option<Vec<usize>> = None;
            if !cfg.resample_per_query_batch {
                shared = Some(sample_backprop_indices(n, cfg.h, cfg.sampling, rng)?);
            }
            let sampling = cfg.sampling;
            let h = cfg.h;
            task_batches(
                model,
                episode,
                cfg,
                move |rng| match &shared {
                    Some(hs) => Ok(Some(hs.clone())),
                    None => Ok(Some(sample_backprop_indices(n, h, sampling, rng)?)),
                },
                rng,
            )
        }
        TrainMode::Subsampled { h } => {
            let reduced = subsample_support(episode, *h, rng)?;
            task_batches(model, &reduced, cfg, |_| Ok(None), rng)
        }
    }
}
