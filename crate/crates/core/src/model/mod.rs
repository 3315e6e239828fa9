//! Meta-learner models: feature extractors, the deep-set encoder, FiLM
//! generator hyper-networks, and classifier heads.

pub mod extractor;
pub mod film;
pub mod heads;

use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::real::Real;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use extractor::{ExtractorKind, FeatureExtractorSpec};
pub use film::{FilmGeneratorSpec, FilmParams};
pub use heads::{ClassStats, LinearHeadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    /// Metric-based: trainable extractor, class prototypes, Euclidean head.
    ProtoNets,
    /// Amortization: frozen FiLM'd extractor, set encoder, generated linear head.
    Cnaps,
    /// Amortization with a Mahalanobis head over class means and covariances.
    SimpleCnaps,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::ProtoNets => "protonets",
            ModelFamily::Cnaps => "cnaps",
            ModelFamily::SimpleCnaps => "simple_cnaps",
        }
    }

    pub fn is_amortized(self) -> bool {
        !matches!(self, ModelFamily::ProtoNets)
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub extractor: FeatureExtractorSpec,
    /// Set encoder; present exactly for amortization families.
    pub encoder: Option<FeatureExtractorSpec>,
    /// Hidden width of each per-site FiLM generator MLP.
    pub film_hidden: usize,
    /// Identity modulation at step 0 (zero generator output layers).
    pub film_identity_init: bool,
    /// Hidden width of the linear-head generator (CNAPs only).
    pub head_hidden: usize,
    /// Covariance ridge term (Simple CNAPs only).
    pub maha_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if let Some(enc) = &self.encoder {
            enc.validate()?;
            if enc.has_film() || enc.frozen {
                return Err(Error::InvalidConfig(
                    "set encoder must be trainable and film-free".into(),
                ));
            }
        }
        match self.family {
            ModelFamily::ProtoNets => {
                if self.extractor.has_film() || self.encoder.is_some() {
                    return Err(Error::InvalidConfig(
                        "protonets uses a plain extractor without set encoder".into(),
                    ));
                }
                if self.extractor.frozen {
                    return Err(Error::InvalidConfig(
                        "protonets learns all extractor parameters".into(),
                    ));
                }
            }
            ModelFamily::Cnaps | ModelFamily::SimpleCnaps => {
                if !self.extractor.has_film() || !self.extractor.frozen {
                    return Err(Error::InvalidConfig(
                        "amortization families need a frozen extractor with film sites".into(),
                    ));
                }
                if self.encoder.is_none() {
                    return Err(Error::InvalidConfig(
                        "amortization families need a set encoder".into(),
                    ));
                }
                if self.film_hidden == 0 {
                    return Err(Error::InvalidConfig("film generator hidden width must be > 0".into()));
                }
                if self.family == ModelFamily::Cnaps && self.head_hidden == 0 {
                    return Err(Error::InvalidConfig("head generator hidden width must be > 0".into()));
                }
                if self.family == ModelFamily::SimpleCnaps && self.maha_eps <= 0.0 {
                    return Err(Error::InvalidConfig("maha_eps must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn film_generator(&self) -> Option<FilmGeneratorSpec> {
        let encoder = self.encoder.as_ref()?;
        Some(FilmGeneratorSpec {
            sites: self.extractor.film_sites.clone(),
            embed_dim: encoder.embed_dim(),
            hidden: self.film_hidden,
            identity_init: self.film_identity_init,
        })
    }

    pub fn linear_head(&self) -> Option<LinearHeadSpec> {
        if self.family == ModelFamily::Cnaps {
            Some(LinearHeadSpec { feat_dim: self.extractor.embed_dim(), hidden: self.head_hidden })
        } else {
            None
        }
    }
}

pub const EXTRACTOR_PREFIX: &str = "extractor";
pub const ENCODER_PREFIX: &str = "encoder";
pub const FILM_PREFIX: &str = "film";
pub const HEAD_PREFIX: &str = "head";

/// A model family plus its parameter store.
#[derive(Clone, Debug)]
pub struct MetaModel<R: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
}

/// Build a model with freshly initialized parameters from a seed.
pub fn build_model<R: Real>(config: ModelConfig, seed: u64) -> Result<MetaModel<R>> {
    config.validate()?;
    let mut rng = rng::rng_from_seed(seed);
    let mut params = ParamStore::new();
    config.extractor.register(&mut params, EXTRACTOR_PREFIX, &mut rng);
    if let Some(enc) = &config.encoder {
        enc.register(&mut params, ENCODER_PREFIX, &mut rng);
    }
    if let Some(gen) = config.film_generator() {
        gen.register(&mut params, FILM_PREFIX, &mut rng);
    }
    if let Some(head) = config.linear_head() {
        head.register(&mut params, HEAD_PREFIX, &mut rng);
    }
    Ok(MetaModel { config, params })
}

/// Task-adapted features for a batch through the extractor.
pub fn extract_features<R: Real>(
    tape: &mut Tape<R>,
    model: &MetaModel<R>,
    bound: &BoundParams<R>,
    film: Option<&FilmParams<R>>,
    batch: &Tensor<R>,
) -> Result<Tensor<R>> {
    model.config.extractor.forward(tape, bound, EXTRACTOR_PREFIX, film, batch)
}

/// Mean of per-example encoder embeddings over the support set; invariant to
/// the ordering of the inputs.
pub fn set_encode<R: Real>(
    tape: &mut Tape<R>,
    model: &MetaModel<R>,
    bound: &BoundParams<R>,
    support: &Tensor<R>,
) -> Result<Tensor<R>> {
    if support.shape()[0] == 0 {
        return Err(Error::EmptySupport);
    }
    let encoder = model
        .config
        .encoder
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("model has no set encoder".into()))?;
    let per_example = encoder.forward(tape, bound, ENCODER_PREFIX, None, support)?;
    let mean = tape.mean_over_axis(&per_example, 0)?;
    let d = mean.numel();
    tape.reshape(&mean, alloc::vec![1, d])
}

/// First convolution weight under `prefix`, if the pipeline is convolutional.
pub fn earliest_conv_param<R: Real>(model: &MetaModel<R>, prefix: &str) -> Option<String> {
    let name = alloc::format!("{prefix}.conv0.weight");
    model.params.value(&name).ok().map(|_| name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    pub(crate) fn protonets_config(input_dim: usize) -> ModelConfig {
        ModelConfig {
            family: ModelFamily::ProtoNets,
            extractor: FeatureExtractorSpec::mlp(input_dim, alloc::vec![16, 8], false, false),
            encoder: None,
            film_hidden: 0,
                film_identity_init: true,
            head_hidden: 0,
            maha_eps: 1e-3,
        }
    }

    pub(crate) fn simple_cnaps_config(input_shape: alloc::vec::Vec<usize>) -> ModelConfig {
        ModelConfig {
            family: ModelFamily::SimpleCnaps,
            extractor: FeatureExtractorSpec::small_convnet(
                input_shape.clone(),
                alloc::vec![4, 6],
                true,
                true,
            ),
            encoder: Some(FeatureExtractorSpec::small_convnet(
                input_shape,
                alloc::vec![4, 6],
                false,
                false,
            )),
            film_hidden: 8,
                film_identity_init: true,
            head_hidden: 8,
            maha_eps: 1e-3,
        }
    }

    #[test]
    fn build_registers_expected_params() {
        let model = build_model::<f64>(simple_cnaps_config(alloc::vec![1, 6, 6]), 7).unwrap();
        assert!(model.params.value("extractor.conv0.weight").is_ok());
        assert!(model.params.value("encoder.conv1.bias").is_ok());
        assert!(model.params.value("film.site0.w_gamma").is_ok());
        assert!(!model.params.get("extractor.conv0.weight").unwrap().trainable);
        assert!(model.params.get("encoder.conv0.weight").unwrap().trainable);
        assert_eq!(
            earliest_conv_param(&model, ENCODER_PREFIX),
            Some("encoder.conv0.weight".into())
        );
    }

    #[test]
    fn invalid_family_configs_are_rejected() {
        let mut bad = protonets_config(4);
        bad.extractor.frozen = true;
        assert!(bad.validate().is_err());

        let mut bad = simple_cnaps_config(alloc::vec![1, 6, 6]);
        bad.encoder = None;
        assert!(bad.validate().is_err());

        let mut bad = simple_cnaps_config(alloc::vec![1, 6, 6]);
        bad.extractor.frozen = false;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn set_encode_of_single_example_is_its_embedding() {
        let model = build_model::<f64>(simple_cnaps_config(alloc::vec![1, 5, 5]), 3).unwrap();
        let mut rng = rng_from_seed(4);
        let x = Tensor::new(alloc::vec![1, 1, 5, 5], normal_vec(&mut rng, 25, 1.0)).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let emb = set_encode(&mut tape, &model, &bound, &x).unwrap();
        let direct = model
            .config
            .encoder
            .as_ref()
            .unwrap()
            .forward(&mut tape, &bound, ENCODER_PREFIX, None, &x)
            .unwrap();
        assert_eq!(emb.data(), direct.data());
    }

    #[test]
    fn set_encode_is_permutation_invariant() {
        let model = build_model::<f64>(simple_cnaps_config(alloc::vec![1, 5, 5]), 5).unwrap();
        let mut rng = rng_from_seed(6);
        let data = normal_vec::<f64>(&mut rng, 4 * 25, 1.0);
        let x = Tensor::new(alloc::vec![4, 1, 5, 5], data.clone()).unwrap();
        // Reverse the four examples.
        let mut rev = alloc::vec::Vec::new();
        for i in (0..4).rev() {
            rev.extend_from_slice(&data[i * 25..(i + 1) * 25]);
        }
        let xr = Tensor::new(alloc::vec![4, 1, 5, 5], rev).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let a = set_encode(&mut tape, &model, &bound, &x).unwrap();
        let b = set_encode(&mut tape, &model, &bound, &xr).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn set_encode_mean_of_two_is_average() {
        let model = build_model::<f64>(simple_cnaps_config(alloc::vec![1, 5, 5]), 8).unwrap();
        let mut rng = rng_from_seed(9);
        let data = normal_vec::<f64>(&mut rng, 2 * 25, 1.0);
        let x = Tensor::new(alloc::vec![2, 1, 5, 5], data.clone()).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let both = set_encode(&mut tape, &model, &bound, &x).unwrap();
        let first = Tensor::new(alloc::vec![1, 1, 5, 5], data[..25].to_vec()).unwrap();
        let second = Tensor::new(alloc::vec![1, 1, 5, 5], data[25..].to_vec()).unwrap();
        let e1 = set_encode(&mut tape, &model, &bound, &first).unwrap();
        let e2 = set_encode(&mut tape, &model, &bound, &second).unwrap();
        for i in 0..both.numel() {
            let avg = 0.5 * (e1.data()[i] + e2.data()[i]);
            assert!((both.data()[i] - avg).abs() < 1e-12);
        }
    }
}
