//! Task construction and synthetic few-shot datasets.
//!
//! An episode is one task: a labeled support set the learner adapts from and
//! a query set it is evaluated on, drawn from the same classes. Episodes are
//! sampled from a [`ClassBank`], which either comes from a synthetic
//! generator or from an externally loaded labeled tensor.

use alloc::vec;
use alloc::vec::Vec;

// Float must be in scope for f64 math in the no_std build.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, EngineRng};
use crate::tensor::Tensor;

/// One task: support set, query set, way metadata.
#[derive(Clone, Debug)]
pub struct Episode<R: Real> {
    /// `[N, input...]`
    pub support_x: Tensor<R>,
    /// Class indices in `0..way`, every class present at least once.
    pub support_y: Vec<usize>,
    /// `[M, input...]`
    pub query_x: Tensor<R>,
    pub query_y: Vec<usize>,
    pub way: usize,
    pub task_id: u64,
    pub rng_seed: u64,
}

impl<R: Real> Episode<R> {
    pub fn n_support(&self) -> usize {
        self.support_y.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_y.len()
    }

    /// Per-class support counts k_c; errors if a class is absent.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        class_counts(&self.support_y, self.way)
    }

    /// Input shape of a single example (support row).
    pub fn input_shape(&self) -> &[usize] {
        &self.support_x.shape()[1..]
    }
}

/// Per-class counts over a label vector; every class in `0..way` must appear.
pub fn class_counts(labels: &[usize], way: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; way];
    for &y in labels {
        if y >= way {
            return Err(Error::InvalidConfig(alloc::format!(
                "label {y} out of range for way {way}"
            )));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::EmptyClass { class: c });
    }
    Ok(counts)
}

/// Labeled example bank grouped by class.
#[derive(Clone, Debug)]
pub struct ClassBank<R: Real> {
    input_shape: Vec<usize>,
    classes: Vec<Vec<Vec<R>>>,
}

impl<R: Real> ClassBank<R> {
    pub fn new(input_shape: Vec<usize>, classes: Vec<Vec<Vec<R>>>) -> Result<Self> {
        let numel: usize = input_shape.iter().product();
        for (c, examples) in classes.iter().enumerate() {
            if examples.iter().any(|e| e.len() != numel) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "class {c} has examples not matching input shape {input_shape:?}"
                )));
            }
        }
        Ok(ClassBank { input_shape, classes })
    }

    /// Group a labeled example tensor `[K, input...]` into a bank. Class ids
    /// are the distinct labels in ascending order.
    pub fn from_labeled(examples: &Tensor<R>, labels: &[u32]) -> Result<Self> {
        if examples.shape()[0] != labels.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} examples but {} labels",
                examples.shape()[0],
                labels.len()
            )));
        }
        let input_shape = examples.shape()[1..].to_vec();
        let numel: usize = input_shape.iter().product();
        let mut ids: Vec<u32> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut classes = vec![Vec::new(); ids.len()];
        for (i, &label) in labels.iter().enumerate() {
            let slot = ids.binary_search(&label).expect("label present");
            classes[slot].push(examples.data()[i * numel..(i + 1) * numel].to_vec());
        }
        ClassBank::new(input_shape, classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn examples_per_class(&self, class: usize) -> usize {
        self.classes[class].len()
    }

    pub fn example(&self, class: usize, index: usize) -> &[R] {
        &self.classes[class][index]
    }

    /// Mean vector of each class; the nearest-mean oracle works off these.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let numel: usize = self.input_shape.iter().product();
        self.classes
            .iter()
            .map(|examples| {
                let mut mean = vec![0.0f64; numel];
                for e in examples {
                    for (m, &v) in mean.iter_mut().zip(e) {
                        *m += v.to_f64();
                    }
                }
                for m in &mut mean {
                    *m /= examples.len() as f64;
                }
                mean
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticGenerator {
    /// Class means on a sphere of radius `separation`, isotropic noise.
    GaussianClusters,
    /// Class-specific frequency/orientation gratings plus pixel noise.
    PatternedImages,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub generator: SyntheticGenerator,
    /// `[D]` for vectors, `[C,H,W]` for images.
    pub input_shape: Vec<usize>,
    pub separation: f64,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.separation <= 0.0 {
            return Err(Error::InvalidConfig("separation must be > 0".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidConfig("noise must be >= 0".into()));
        }
        match self.generator {
            SyntheticGenerator::GaussianClusters => {}
            SyntheticGenerator::PatternedImages => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidConfig(
                        "patterned_images needs a [C,H,W] input shape".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Generate a labeled example bank from a synthetic spec.
pub fn generate_synthetic_class_bank<R: Real>(
    spec: &SyntheticSpec,
    num_classes: usize,
    per_class: usize,
    rng: &mut EngineRng,
) -> Result<ClassBank<R>> {
    spec.validate()?;
    if num_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    let numel: usize = spec.input_shape.iter().product();
    let mut classes = Vec::with_capacity(num_classes);
    match spec.generator {
        SyntheticGenerator::GaussianClusters => {
            for _ in 0..num_classes {
                let dir: Vec<f64> = (0..numel).map(|_| rng::normal::<f64>(rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let mean: Vec<f64> = dir.iter().map(|v| v / norm * spec.separation).collect();
                let mut examples = Vec::with_capacity(per_class);
                for _ in 0..per_class {
                    examples.push(
                        mean.iter()
                            .map(|&m| R::from_f64(m + spec.noise * rng::normal::<f64>(rng)))
                            .collect(),
                    );
                }
                classes.push(examples);
            }
        }
        SyntheticGenerator::PatternedImages => {
            let (ch, h, w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
            let extent = h.max(w) as f64;
            for _ in 0..num_classes {
                let theta: f64 = rng.gen::<f64>() * core::f64::consts::PI;
                let freq: f64 = 1.0 + rng.gen::<f64>() * 2.0;
                let phase: f64 = rng.gen::<f64>() * 2.0 * core::f64::consts::PI;
                let mut pattern = vec![0.0f64; numel];
                for c in 0..ch {
                    let chan_phase = phase + c as f64 * core::f64::consts::FRAC_PI_4;
                    for y in 0..h {
                        for x in 0..w {
                            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                            let v = (2.0 * core::f64::consts::PI * freq * u / extent + chan_phase)
                                .sin();
                            pattern[(c * h + y) * w + x] = spec.separation * v;
                        }
                    }
                }
                let mut examples = Vec::with_capacity(per_class);
                for _ in 0..per_class {
                    examples.push(
                        pattern
                            .iter()
                            .map(|&p| R::from_f64(p + spec.noise * rng::normal::<f64>(rng)))
                            .collect(),
                    );
                }
                classes.push(examples);
            }
        }
    }
    ClassBank::new(spec.input_shape.clone(), classes)
}

/// Inclusive sampling ranges for episode shapes.
#[derive(Clone, Debug)]
pub struct EpisodeSamplerConfig {
    pub way: (usize, usize),
    pub shot: (usize, usize),
    pub query_per_class: (usize, usize),
    pub seed: u64,
}

impl EpisodeSamplerConfig {
    pub fn fixed(way: usize, shot: usize, query_per_class: usize, seed: u64) -> Self {
        EpisodeSamplerConfig {
            way: (way, way),
            shot: (shot, shot),
            query_per_class: (query_per_class, query_per_class),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if self.way.0 < 2 || self.way.0 > self.way.1 {
            return Err(Error::InvalidConfig("way range must be non-empty with way >= 2".into()));
        }
        if !ok(self.shot) {
            return Err(Error::InvalidConfig("shot range must be non-empty with shot >= 1".into()));
        }
        if !ok(self.query_per_class) {
            return Err(Error::InvalidConfig("query range must be non-empty".into()));
        }
        Ok(())
    }
}

fn range_sample(rng: &mut EngineRng, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Draw one episode from the bank. Deterministic given the rng state; class
/// labels are remapped to `0..way`; support and query are disjoint.
pub fn sample_episode<R: Real>(
    bank: &ClassBank<R>,
    cfg: &EpisodeSamplerConfig,
    rng: &mut EngineRng,
) -> Result<Episode<R>> {
    cfg.validate()?;
    let way = range_sample(rng, cfg.way);
    let shot = range_sample(rng, cfg.shot);
    let query = range_sample(rng, cfg.query_per_class);
    if bank.num_classes() < way {
        return Err(Error::InvalidConfig(alloc::format!(
            "bank has {} classes, episode needs {way}",
            bank.num_classes()
        )));
    }
    let class_ids = rng::sample_distinct(rng, bank.num_classes(), way);
    let mut support_rows: Vec<&[R]> = Vec::with_capacity(way * shot);
    let mut support_y = Vec::with_capacity(way * shot);
    let mut query_rows: Vec<&[R]> = Vec::with_capacity(way * query);
    let mut query_y = Vec::with_capacity(way * query);
    for (label, &class) in class_ids.iter().enumerate() {
        let have = bank.examples_per_class(class);
        let need = shot + query;
        if have < need {
            return Err(Error::InsufficientExamples { class, have, need });
        }
        let picks = rng::sample_distinct(rng, have, need);
        for &p in &picks[..shot] {
            support_rows.push(bank.example(class, p));
            support_y.push(label);
        }
        for &p in &picks[shot..] {
            query_rows.push(bank.example(class, p));
            query_y.push(label);
        }
    }
    Ok(Episode {
        support_x: Tensor::from_rows(bank.input_shape(), &support_rows)?,
        support_y,
        query_x: Tensor::from_rows(bank.input_shape(), &query_rows)?,
        query_y,
        way,
        task_id: 0,
        rng_seed: 0,
    })
}

/// Bank plus config; derives per-task seeds so any task index is replayable.
#[derive(Clone, Debug)]
pub struct EpisodeSampler<R: Real> {
    pub bank: ClassBank<R>,
    pub cfg: EpisodeSamplerConfig,
}

impl<R: Real> EpisodeSampler<R> {
    pub fn new(bank: ClassBank<R>, cfg: EpisodeSamplerConfig) -> Self {
        EpisodeSampler { bank, cfg }
    }

    pub fn task_seed(&self, task_index: u64) -> u64 {
        rng::derive_seed(self.cfg.seed, task_index)
    }

    pub fn sample_indexed(&self, task_index: u64) -> Result<Episode<R>> {
        let seed = self.task_seed(task_index);
        let mut rng = rng::rng_from_seed(seed);
        let mut episode = sample_episode(&self.bank, &self.cfg, &mut rng)?;
        episode.task_id = task_index;
        episode.rng_seed = seed;
        Ok(episode)
    }
}

/// A contiguous slice of an episode's query set.
#[derive(Clone, Debug)]
pub struct QueryBatch<R: Real> {
    pub x: Tensor<R>,
    pub y: Vec<usize>,
    /// Index of the first query element in the episode order.
    pub start: usize,
}

/// Split the query set into `ceil(M / m_b)` batches preserving order; the
/// last batch may be short.
pub fn split_query_batches<R: Real>(episode: &Episode<R>, m_b: usize) -> Result<Vec<QueryBatch<R>>> {
    if m_b == 0 {
        return Err(Error::InvalidConfig("query batch size must be >= 1".into()));
    }
    let m = episode.n_query();
    let row_numel: usize = episode.input_shape().iter().product();
    let mut batches = Vec::with_capacity(m.div_ceil(m_b));
    let mut start = 0;
    while start < m {
        let end = (start + m_b).min(m);
        let rows: Vec<&[R]> = (start..end)
            .map(|i| &episode.query_x.data()[i * row_numel..(i + 1) * row_numel])
            .collect();
        batches.push(QueryBatch {
            x: Tensor::from_rows(episode.input_shape(), &rows)?,
            y: episode.query_y[start..end].to_vec(),
            start,
        });
        start = end;
    }
    Ok(batches)
}

/// Rows of the support set at the given indices (detached).
pub fn support_rows<R: Real>(episode: &Episode<R>, indices: &[usize]) -> Result<Tensor<R>> {
    let row_numel: usize = episode.input_shape().iter().product();
    let rows: Vec<&[R]> = indices
        .iter()
        .map(|&i| &episode.support_x.data()[i * row_numel..(i + 1) * row_numel])
        .collect();
    Tensor::from_rows(episode.input_shape(), &rows)
}
