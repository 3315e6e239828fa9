//! Feature extractors: an MLP and a small conv net, with optional FiLM sites.
//!
//! Both map a batch to `[B, d]` features. FiLM applies `h -> gamma_ch * h +
//! beta_ch` per channel (per hidden unit for the MLP) after each layer's
//! affine, before the activation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::film::FilmParams;
use crate::params::{BoundParams, InitSpec, ParamStore};
use crate::real::Real;
use crate::rng::EngineRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Mlp { widths: Vec<usize> },
    SmallConvNet { channels: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct FeatureExtractorSpec {
    pub kind: ExtractorKind,
    /// `[D]` for the MLP, `[C,H,W]` for the conv net.
    pub input_shape: Vec<usize>,
    /// Channel counts at FiLM insertion points; empty means no FiLM.
    pub film_sites: Vec<usize>,
    pub frozen: bool,
}

impl FeatureExtractorSpec {
    pub fn mlp(input_dim: usize, widths: Vec<usize>, film: bool, frozen: bool) -> Self {
        let film_sites = if film { widths.clone() } else { Vec::new() };
        FeatureExtractorSpec {
            kind: ExtractorKind::Mlp { widths },
            input_shape: alloc::vec![input_dim],
            film_sites,
            frozen,
        }
    }

    pub fn small_convnet(input_shape: Vec<usize>, channels: Vec<usize>, film: bool, frozen: bool) -> Self {
        let film_sites = if film { channels.clone() } else { Vec::new() };
        FeatureExtractorSpec {
            kind: ExtractorKind::SmallConvNet { channels },
            input_shape,
            film_sites,
            frozen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ExtractorKind::Mlp { widths } => {
                if widths.is_empty() {
                    return Err(Error::InvalidConfig("mlp needs at least one layer".into()));
                }
                if self.input_shape.len() != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "mlp expects a [D] input shape, got {:?}",
                        self.input_shape
                    )));
                }
                if !self.film_sites.is_empty() && self.film_sites != *widths {
                    return Err(Error::InvalidConfig("film sites must match mlp widths".into()));
                }
            }
            ExtractorKind::SmallConvNet { channels } => {
                if channels.is_empty() {
                    return Err(Error::InvalidConfig("convnet needs at least one block".into()));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidConfig(format!(
                        "convnet expects a [C,H,W] input shape, got {:?}",
                        self.input_shape
                    )));
                }
                if !self.film_sites.is_empty() && self.film_sites != *channels {
                    return Err(Error::InvalidConfig(
                        "film sites must match convnet channels".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Output embedding dimension d.
    pub fn embed_dim(&self) -> usize {
        match &self.kind {
            ExtractorKind::Mlp { widths } => *widths.last().unwrap(),
            ExtractorKind::SmallConvNet { channels } => *channels.last().unwrap(),
        }
    }

    pub fn has_film(&self) -> bool {
        !self.film_sites.is_empty()
    }

    /// Register parameters under `prefix` (layer0, layer1, ... / conv0, ...).
    pub fn register(&self, store: &mut ParamStore<impl Real>, prefix: &str, rng: &mut EngineRng) {
        let trainable = !self.frozen;
        match &self.kind {
            ExtractorKind::Mlp { widths } => {
                let mut fan_in = self.input_shape[0];
                for (i, &width) in widths.iter().enumerate() {
                    store.register(
                        &format!("{prefix}.layer{i}.weight"),
                        &[fan_in, width],
                        InitSpec::HeNormal { fan_in },
                        trainable,
                        rng,
                    );
                    store.register(
                        &format!("{prefix}.layer{i}.bias"),
                        &[width],
                        InitSpec::Zeros,
                        trainable,
                        rng,
                    );
                    fan_in = width;
                }
            }
            ExtractorKind::SmallConvNet { channels } => {
                let mut cin = self.input_shape[0];
                for (i, &cout) in channels.iter().enumerate() {
                    store.register(
                        &format!("{prefix}.conv{i}.weight"),
                        &[cout, cin, 3, 3],
                        InitSpec::HeNormal { fan_in: 9 * cin },
                        trainable,
                        rng,
                    );
                    store.register(
                        &format!("{prefix}.conv{i}.bias"),
                        &[cout],
                        InitSpec::Zeros,
                        trainable,
                        rng,
                    );
                    cin = cout;
                }
            }
        }
    }

    /// Forward a batch to `[B, d]` features. `film` must be present exactly
    /// when the spec has film sites.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams<R>,
        prefix: &str,
        film: Option<&FilmParams<R>>,
        batch: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        match (self.has_film(), film) {
            (true, Some(f)) if f.arity() == self.film_sites.len() => {}
            (false, None) => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "film arity mismatch: extractor has {} sites, got {:?}",
                    self.film_sites.len(),
                    film.map(|f| f.arity())
                )))
            }
        }
        if batch.shape()[1..] != self.input_shape {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                detail: format!(
                    "batch {:?} does not end with input shape {:?}",
                    batch.shape(),
                    self.input_shape
                ),
            });
        }
        match &self.kind {
            ExtractorKind::Mlp { widths } => {
                let mut h = batch.clone();
                for i in 0..widths.len() {
                    let w = bound.get(&format!("{prefix}.layer{i}.weight"))?;
                    let b = bound.get(&format!("{prefix}.layer{i}.bias"))?;
                    h = tape.matmul(&h, w)?;
                    h = tape.add(&h, b)?;
                    if let Some(f) = film {
                        h = tape.mul(&h, &f.gammas[i])?;
                        h = tape.add(&h, &f.betas[i])?;
                    }
                    if i + 1 < widths.len() {
                        h = tape.relu(&h)?;
                    }
                }
                Ok(h)
            }
            ExtractorKind::SmallConvNet { channels } => {
                let mut h = batch.clone();
                for i in 0..channels.len() {
                    let w = bound.get(&format!("{prefix}.conv{i}.weight"))?;
                    let b = bound.get(&format!("{prefix}.conv{i}.bias"))?;
                    h = tape.conv2d_3x3(&h, w)?;
                    h = tape.add(&h, b)?;
                    if let Some(f) = film {
                        h = tape.mul(&h, &f.gammas[i])?;
                        h = tape.add(&h, &f.betas[i])?;
                    }
                    h = tape.relu(&h)?;
                }
                tape.global_avg_pool(&h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    fn batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor::new(shape.to_vec(), normal_vec(&mut rng, shape.iter().product(), 1.0)).unwrap()
    }

    #[test]
    fn identity_film_leaves_extraction_unchanged_exactly() {
        let mut rng = rng_from_seed(1);
        let with_film = FeatureExtractorSpec::mlp(6, alloc::vec![8, 4], true, false);
        let without = FeatureExtractorSpec::mlp(6, alloc::vec![8, 4], false, false);
        let mut store = ParamStore::<f64>::new();
        with_film.register(&mut store, "f", &mut rng);
        let x = batch(&[5, 6], 2);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let identity = FilmParams::identity(&with_film.film_sites);
        let a = with_film.forward(&mut tape, &bound, "f", Some(&identity), &x).unwrap();
        let b = without.forward(&mut tape, &bound, "f", None, &x).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn zero_gamma_replaces_activations_with_beta() {
        let mut rng = rng_from_seed(3);
        let spec = FeatureExtractorSpec::mlp(4, alloc::vec![3], true, false);
        let mut store = ParamStore::<f64>::new();
        spec.register(&mut store, "f", &mut rng);
        let x = batch(&[2, 4], 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let film = FilmParams {
            gammas: alloc::vec![Tensor::zeros(alloc::vec![1, 3])],
            betas: alloc::vec![Tensor::new(alloc::vec![1, 3], alloc::vec![5.0, -1.0, 2.0]).unwrap()],
        };
        // Single layer, no trailing relu: output is beta broadcast per row.
        let out = spec.forward(&mut tape, &bound, "f", Some(&film), &x).unwrap();
        assert_eq!(out.row(0), &[5.0, -1.0, 2.0]);
        assert_eq!(out.row(1), &[5.0, -1.0, 2.0]);
    }

    #[test]
    fn mlp_forward_matches_straight_line_reimplementation() {
        // Fixed seed, fixed 4-image batch: compare against a direct loop
        // implementation of the same arithmetic.
        let mut rng = rng_from_seed(5);
        let spec = FeatureExtractorSpec::mlp(3, alloc::vec![4, 2], false, false);
        let mut store = ParamStore::<f64>::new();
        spec.register(&mut store, "f", &mut rng);
        let x = batch(&[4, 3], 6);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let got = spec.forward(&mut tape, &bound, "f", None, &x).unwrap();

        let w1 = store.value("f.layer0.weight").unwrap();
        let b1 = store.value("f.layer0.bias").unwrap();
        let w2 = store.value("f.layer1.weight").unwrap();
        let b2 = store.value("f.layer1.bias").unwrap();
        for row in 0..4 {
            let mut hidden = [0.0f64; 4];
            for j in 0..4 {
                let mut acc = b1.data()[j];
                for i in 0..3 {
                    acc += x.data()[row * 3 + i] * w1.data()[i * 4 + j];
                }
                hidden[j] = acc.max(0.0);
            }
            for j in 0..2 {
                let mut acc = b2.data()[j];
                for i in 0..4 {
                    acc += hidden[i] * w2.data()[i * 2 + j];
                }
                assert!((got.data()[row * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convnet_produces_pooled_features() {
        let mut rng = rng_from_seed(7);
        let spec =
            FeatureExtractorSpec::small_convnet(alloc::vec![2, 5, 5], alloc::vec![4, 6], false, false);
        let mut store = ParamStore::<f64>::new();
        spec.register(&mut store, "f", &mut rng);
        let x = batch(&[3, 2, 5, 5], 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = spec.forward(&mut tape, &bound, "f", None, &x).unwrap();
        assert_eq!(out.shape(), &[3, 6]);
        assert_eq!(spec.embed_dim(), 6);
    }

    #[test]
    fn film_arity_mismatch_is_rejected() {
        let mut rng = rng_from_seed(9);
        let spec = FeatureExtractorSpec::mlp(4, alloc::vec![3, 3], true, false);
        let mut store = ParamStore::<f64>::new();
        spec.register(&mut store, "f", &mut rng);
        let x = batch(&[2, 4], 10);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let short = FilmParams::identity(&[3]);
        assert!(spec.forward(&mut tape, &bound, "f", Some(&short), &x).is_err());
        assert!(spec.forward(&mut tape, &bound, "f", None, &x).is_err());
    }
}
