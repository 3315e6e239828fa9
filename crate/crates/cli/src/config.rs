//! Flat key=value run configuration.
//!
//! Values resolve in order: per-command defaults, then the `--config` file,
//! then `--set KEY=VALUE` pairs, then named flags. Unknown keys are rejected
//! naming the offender, and the fully resolved table is echoed into the
//! output directory so any run can be reproduced from its echo.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lite_core::episode::{EpisodeSamplerConfig, SyntheticGenerator, SyntheticSpec};
use lite_core::gradcheck::GradExperimentConfig;
use lite_core::lite::{AggregateScale, LiteConfig, SamplingMode, ScaleMode, TrainMode};
use lite_core::model::{FeatureExtractorSpec, ModelConfig, ModelFamily};
use lite_core::train::{OptimizerKind, TrainLoopConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    GradCheck,
    BiasVariance,
    MemStat,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::GradCheck => "gradcheck",
            Command::BiasVariance => "bias-variance",
            Command::MemStat => "memstat",
        }
    }
}

/// (key, default, help) rows; the single source of truth for known keys.
const BASE_DEFAULTS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; all run streams derive from it"),
    ("workers", "1", "worker threads (1 = fully deterministic)"),
    ("f32", "false", "compute in 32-bit floats instead of 64-bit"),
    ("out", "out", "output directory"),
    ("model", "protonets", "protonets | cnaps | simple_cnaps"),
    ("extractor", "mlp", "feature extractor: mlp | small_convnet"),
    ("extractor.widths", "64,64,64", "mlp layer widths"),
    ("extractor.channels", "16,32,64", "convnet channels"),
    ("encoder", "", "set encoder kind; empty = same as extractor"),
    ("encoder.widths", "64,64,64", "set-encoder mlp widths"),
    ("encoder.channels", "16,32,64", "set-encoder convnet channels"),
    ("film.hidden", "32", "FiLM generator hidden width"),
    ("film.identity_init", "true", "identity modulation at step 0"),
    ("head.hidden", "32", "linear-head generator hidden width (cnaps)"),
    ("maha.eps", "0.001", "covariance ridge term (simple_cnaps)"),
    ("data.generator", "gaussian_clusters", "gaussian_clusters | patterned_images"),
    ("data.vector_dim", "16", "input dimension for gaussian_clusters"),
    ("data.image_shape", "1x8x8", "CxHxW for patterned_images"),
    ("data.classes", "20", "bank classes"),
    ("data.per_class", "40", "bank examples per class"),
    ("data.separation", "4.0", "class separation scale"),
    ("data.noise", "0.5", "within-class noise scale"),
    ("data.seed", "1", "bank generation seed"),
    ("data.file", "", "LTEN dataset path; overrides the generator"),
    ("episode.way", "5", "classes per episode (min)"),
    ("episode.way_max", "5", "classes per episode (max)"),
    ("episode.shot", "5", "support examples per class (min)"),
    ("episode.shot_max", "5", "support examples per class (max)"),
    ("episode.query", "5", "query examples per class (min)"),
    ("episode.query_max", "5", "query examples per class (max)"),
    ("lite.h", "8", "back-prop subset size H"),
    ("lite.query_batch", "40", "query batch size M_b"),
    ("lite.sampling", "without_replacement", "without_replacement | with_replacement"),
    ("lite.scale_mode", "support_path", "support_path | none"),
    ("lite.aggregate_scale", "global", "global | per_class"),
    ("lite.complement_batch", "40", "no-grad chunk size for the complement"),
    ("lite.resample_per_batch", "true", "fresh H-set per query batch"),
    ("train.mode", "lite", "lite | full | subsampled"),
    ("train.iterations", "10000", "meta-training tasks"),
    ("train.lr", "0.001", "learning rate"),
    ("train.accumulate", "16", "tasks per optimizer step"),
    ("train.optimizer", "adam", "adam | sgd"),
    ("train.adam_beta1", "0.9", "Adam beta1"),
    ("train.adam_beta2", "0.999", "Adam beta2"),
    ("train.adam_eps", "1e-8", "Adam epsilon"),
    ("eval.episodes", "600", "test episodes"),
    ("grad.h_list", "10,20,30,40,50,60,70,80,90", "|H| values for the experiments"),
    ("grad.total_per_h", "1000", "support-example budget per |H|"),
    ("grad.param", "", "measured parameter; empty = earliest encoder conv"),
    ("memstat.n_list", "100,200,400,800", "support sizes for the N sweep"),
    ("memstat.h_list", "10,20,40,80", "subset sizes for the H sweep"),
    ("memstat.fixed_n", "400", "support size for the H sweep"),
    ("memstat.fixed_h", "20", "subset size for the N sweep"),
];

/// Per-command overrides of the base defaults. The gradient experiments
/// default to the measurement fixture: a Simple CNAPs model over patterned
/// images with a convolutional set encoder and standard (non-identity)
/// generator initialization, on a 10-way 10-shot task.
fn command_defaults(command: Command) -> Vec<(&'static str, &'static str)> {
    match command {
        Command::Train | Command::Eval => Vec::new(),
        Command::GradCheck | Command::BiasVariance => vec![
            ("model", "simple_cnaps"),
            ("extractor", "small_convnet"),
            ("extractor.channels", "4,8"),
            ("encoder.channels", "4,8"),
            ("film.hidden", "8"),
            ("film.identity_init", "false"),
            ("data.generator", "patterned_images"),
            ("data.classes", "12"),
            ("data.per_class", "24"),
            ("data.separation", "1.5"),
            ("data.noise", "0.4"),
            ("episode.way", "10"),
            ("episode.way_max", "10"),
            ("episode.shot", "10"),
            ("episode.shot_max", "10"),
            ("episode.query", "5"),
            ("episode.query_max", "5"),
        ],
        Command::MemStat => vec![
            ("data.per_class", "200"),
            ("episode.way", "5"),
            ("episode.way_max", "5"),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub command: Command,
}

impl RunConfig {
    /// Resolve the configuration for a command. `overrides` are applied in
    /// order after the file.
    pub fn resolve(
        command: Command,
        config_file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig> {
        let mut values: BTreeMap<String, String> =
            BASE_DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        for (k, v) in command_defaults(command) {
            values.insert(k.to_string(), v.to_string());
        }
        let known: Vec<&str> = BASE_DEFAULTS.iter().map(|(k, _, _)| *k).collect();
        if let Some(path) = config_file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    bail!("config line {} is not KEY=VALUE: '{line}'", lineno + 1);
                };
                let key = key.trim();
                if !known.contains(&key) {
                    bail!("unknown config key '{key}' (line {})", lineno + 1);
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            if !known.contains(&key.as_str()) {
                bail!("unknown config key '{key}'");
            }
            values.insert(key.clone(), value.clone());
        }
        Ok(RunConfig { values, command })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_else(|| panic!("unknown key {key}"))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key).parse().with_context(|| format!("config key '{key}' must be an integer"))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key).parse().with_context(|| format!("config key '{key}' must be an integer"))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key).parse().with_context(|| format!("config key '{key}' must be a number"))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => bail!("config key '{key}' must be a boolean, got '{other}'"),
        }
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("config key '{key}' must be a comma list of integers"))
            })
            .collect()
    }

    /// "CxHxW" shapes.
    pub fn get_shape(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split('x')
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("config key '{key}' must look like 1x8x8"))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_u64("seed")
    }

    pub fn workers(&self) -> Result<usize> {
        let w = self.get_usize("workers")?;
        if w == 0 {
            bail!("config key 'workers' must be >= 1");
        }
        Ok(w)
    }

    pub fn use_f32(&self) -> Result<bool> {
        self.get_bool("f32")
    }

    /// The resolved table as echoable text, sorted by key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# resolved configuration ({})", self.command.name());
        for (key, value) in &self.values {
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }

    fn extractor_spec(
        &self,
        key_prefix: &str,
        input_shape: &[usize],
        film: bool,
        frozen: bool,
    ) -> Result<FeatureExtractorSpec> {
        let kind_key = if key_prefix == "extractor" { "extractor" } else { "encoder" };
        let mut kind = self.get(kind_key).to_string();
        if kind.is_empty() {
            kind = self.get("extractor").to_string();
        }
        let input_shape = input_shape.to_vec();
        match kind.as_str() {
            "mlp" => {
                if input_shape.len() != 1 {
                    bail!(
                        "config key '{kind_key}': mlp cannot consume {}-d inputs from '{}'",
                        input_shape.len(),
                        self.get("data.generator")
                    );
                }
                let widths = self.get_usize_list(&format!("{key_prefix}.widths"))?;
                Ok(FeatureExtractorSpec::mlp(input_shape[0], widths, film, frozen))
            }
            "small_convnet" => {
                if input_shape.len() != 3 {
                    bail!(
                        "config key '{kind_key}': small_convnet needs CxHxW inputs, data provides {input_shape:?}"
                    );
                }
                let channels = self.get_usize_list(&format!("{key_prefix}.channels"))?;
                Ok(FeatureExtractorSpec::small_convnet(input_shape, channels, film, frozen))
            }
            other => bail!("config key '{kind_key}' must be mlp or small_convnet, got '{other}'"),
        }
    }

    /// Input shape implied by the synthetic generator keys. File-backed
    /// datasets carry their own shape; callers pass the bank's shape to
    /// [`RunConfig::model_config`] instead.
    pub fn data_input_shape(&self) -> Result<Vec<usize>> {
        match self.get("data.generator") {
            "gaussian_clusters" => Ok(vec![self.get_usize("data.vector_dim")?]),
            "patterned_images" => self.get_shape("data.image_shape"),
            other => bail!("config key 'data.generator' must name a generator, got '{other}'"),
        }
    }

    pub fn model_family(&self) -> Result<ModelFamily> {
        match self.get("model") {
            "protonets" => Ok(ModelFamily::ProtoNets),
            "cnaps" => Ok(ModelFamily::Cnaps),
            "simple_cnaps" => Ok(ModelFamily::SimpleCnaps),
            other => bail!("config key 'model' must name a model family, got '{other}'"),
        }
    }

    pub fn model_config(&self, input_shape: &[usize]) -> Result<ModelConfig> {
        let family = self.model_family()?;
        let amortized = family.is_amortized();
        let extractor = self.extractor_spec("extractor", input_shape, amortized, amortized)?;
        let encoder = if amortized {
            Some(self.extractor_spec("encoder", input_shape, false, false)?)
        } else {
            None
        };
        let config = ModelConfig {
            family,
            extractor,
            encoder,
            film_hidden: self.get_usize("film.hidden")?,
            film_identity_init: self.get_bool("film.identity_init")?,
            head_hidden: self.get_usize("head.hidden")?,
            maha_eps: self.get_f64("maha.eps")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let generator = match self.get("data.generator") {
            "gaussian_clusters" => SyntheticGenerator::GaussianClusters,
            "patterned_images" => SyntheticGenerator::PatternedImages,
            other => bail!("config key 'data.generator' must name a generator, got '{other}'"),
        };
        Ok(SyntheticSpec {
            generator,
            input_shape: self.data_input_shape()?,
            separation: self.get_f64("data.separation")?,
            noise: self.get_f64("data.noise")?,
        })
    }

    pub fn sampler_config(&self, seed: u64) -> Result<EpisodeSamplerConfig> {
        Ok(EpisodeSamplerConfig {
            way: (self.get_usize("episode.way")?, self.get_usize("episode.way_max")?),
            shot: (self.get_usize("episode.shot")?, self.get_usize("episode.shot_max")?),
            query_per_class: (
                self.get_usize("episode.query")?,
                self.get_usize("episode.query_max")?,
            ),
            seed,
        })
    }

    pub fn lite_config(&self) -> Result<LiteConfig> {
        let sampling = match self.get("lite.sampling") {
            "without_replacement" => SamplingMode::WithoutReplacement,
            "with_replacement" => SamplingMode::WithReplacement,
            other => bail!("config key 'lite.sampling' must name a mode, got '{other}'"),
        };
        let scale_mode = match self.get("lite.scale_mode") {
            "support_path" => ScaleMode::SupportPath,
            "none" => ScaleMode::None,
            other => bail!("config key 'lite.scale_mode' must be support_path or none, got '{other}'"),
        };
        let aggregate_scale = match self.get("lite.aggregate_scale") {
            "global" => AggregateScale::GlobalNOverH,
            "per_class" => AggregateScale::PerClassKOverH,
            other => {
                bail!("config key 'lite.aggregate_scale' must be global or per_class, got '{other}'")
            }
        };
        Ok(LiteConfig {
            h: self.get_usize("lite.h")?,
            query_batch: self.get_usize("lite.query_batch")?,
            sampling,
            scale_mode,
            aggregate_scale,
            complement_batch: self.get_usize("lite.complement_batch")?,
            resample_per_query_batch: self.get_bool("lite.resample_per_batch")?,
        })
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        match self.get("train.mode") {
            "lite" => Ok(TrainMode::Lite),
            "full" => Ok(TrainMode::FullBackprop),
            "subsampled" => Ok(TrainMode::Subsampled { h: self.get_usize("lite.h")? }),
            other => bail!("config key 'train.mode' must be lite, full or subsampled, got '{other}'"),
        }
    }

    pub fn train_loop_config(&self) -> Result<TrainLoopConfig> {
        let optimizer = match self.get("train.optimizer") {
            "adam" => OptimizerKind::Adam {
                beta1: self.get_f64("train.adam_beta1")?,
                beta2: self.get_f64("train.adam_beta2")?,
                eps: self.get_f64("train.adam_eps")?,
            },
            "sgd" => OptimizerKind::Sgd,
            other => bail!("config key 'train.optimizer' must be adam or sgd, got '{other}'"),
        };
        Ok(TrainLoopConfig {
            iterations: self.get_u64("train.iterations")?,
            learning_rate: self.get_f64("train.lr")?,
            accumulate_tasks: self.get_usize("train.accumulate")?,
            optimizer,
            seed: self.seed()?,
        })
    }

    pub fn grad_experiment_config(&self) -> Result<GradExperimentConfig> {
        let sampling = match self.get("lite.sampling") {
            "without_replacement" => SamplingMode::WithoutReplacement,
            "with_replacement" => SamplingMode::WithReplacement,
            other => bail!("config key 'lite.sampling' must name a mode, got '{other}'"),
        };
        let param = self.get("grad.param");
        Ok(GradExperimentConfig {
            h_values: self.get_usize_list("grad.h_list")?,
            total_per_h: self.get_usize("grad.total_per_h")?,
            measured_param: if param.is_empty() { None } else { Some(param.to_string()) },
            sampling,
            base_seed: self.seed()?,
        })
    }
}

/// Documented key table for `--help-keys` style output and the README.
pub fn key_table() -> &'static [(&'static str, &'static str, &'static str)] {
    BASE_DEFAULTS
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_echo_app_protocol_values() {
        let cfg = RunConfig::resolve(Command::Train, None, &[]).unwrap();
        assert_eq!(cfg.get("train.lr"), "0.001");
        assert_eq!(cfg.get("train.accumulate"), "16");
        assert_eq!(cfg.get("lite.query_batch"), "40");
        assert_eq!(cfg.get("train.iterations"), "10000");
        assert_eq!(cfg.get("eval.episodes"), "600");
        assert_eq!(cfg.get("grad.h_list"), "10,20,30,40,50,60,70,80,90");
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = RunConfig::resolve(
            Command::Train,
            None,
            &[("train.lrate".to_string(), "1".to_string())],
        )
        .unwrap_err();
        assert!(err.to_string().contains("train.lrate"), "{err}");
    }

    #[test]
    fn file_values_override_defaults_and_flags_override_file() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "# comment line\ntrain.lr = 0.5\nlite.h = 4").unwrap();
        let cfg = RunConfig::resolve(
            Command::Train,
            Some(file.path()),
            &[("lite.h".to_string(), "9".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.get("train.lr"), "0.5");
        assert_eq!(cfg.get("lite.h"), "9");
    }

    #[test]
    fn echo_contains_every_key_sorted() {
        let cfg = RunConfig::resolve(Command::Train, None, &[]).unwrap();
        let echo = cfg.echo();
        let mut last = String::new();
        let mut count = 0;
        for line in echo.lines().skip(1) {
            let key = line.split('=').next().unwrap().to_string();
            assert!(key > last, "echo keys must be sorted");
            last = key;
            count += 1;
        }
        assert_eq!(count, key_table().len());
    }

    #[test]
    fn mismatched_data_and_extractor_is_a_config_error() {
        let cfg = RunConfig::resolve(
            Command::Train,
            None,
            &[("extractor".to_string(), "small_convnet".to_string())],
        )
        .unwrap();
        let shape = cfg.data_input_shape().unwrap();
        let err = cfg.model_config(&shape).unwrap_err();
        assert!(err.to_string().contains("small_convnet"), "{err}");
    }

    #[test]
    fn gradcheck_defaults_select_the_measurement_fixture() {
        let cfg = RunConfig::resolve(Command::BiasVariance, None, &[]).unwrap();
        assert_eq!(cfg.get("model"), "simple_cnaps");
        assert_eq!(cfg.get("episode.way"), "10");
        assert_eq!(cfg.get("episode.shot"), "10");
        assert_eq!(cfg.get("film.identity_init"), "false");
        let shape = cfg.data_input_shape().unwrap();
        let model_cfg = cfg.model_config(&shape).unwrap();
        assert!(model_cfg.encoder.is_some());
    }
}
