//! Command implementations. Each returns the process exit code it wants
//! (0 success, 1 verification failure); configuration and I/O failures bubble
//! up as errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use lite_core::episode::{generate_synthetic_class_bank, ClassBank, Episode, EpisodeSampler};
use lite_core::gradcheck::{
    finite_difference_gradient, max_rel_error, run_bias_variance_experiment, ExperimentArm,
};
use lite_core::lite::{
    lite_support_forward, sample_backprop_indices, support_forward, task_step, SupportPlan,
    TrainMode,
};
use lite_core::model::{build_model, MetaModel};
use lite_core::rng::{derive_seed, rng_from_seed};
use lite_core::tape::Tape;
use lite_core::train::{evaluate, meta_train};
use lite_core::{Real, Tensor};

use crate::config::RunConfig;
use crate::exec::WorkerPool;
use crate::lten::{load_checkpoint, save_checkpoint, LtenRecord};
use crate::report::{self, JsonValue, MemStatRow, TrainLogWriter};
use crate::{lten, EVAL_SALT, GRAD_SALT, MODEL_SALT};

fn build_bank<R: Real>(cfg: &RunConfig) -> Result<ClassBank<R>> {
    let file = cfg.get("data.file");
    if !file.is_empty() {
        let record = lten::read_tensor_file(Path::new(file))
            .with_context(|| format!("loading dataset {file}"))?;
        if record.labels.is_empty() {
            bail!("dataset {file} carries no labels");
        }
        let shape = record.shape.clone();
        let labels = record.labels.clone();
        let tensor = Tensor::new(shape, record.data.into_reals::<R>())
            ?;
        return ClassBank::from_labeled(&tensor, &labels).map_err(anyhow::Error::new);
    }
    let spec = cfg.synthetic_spec()?;
    let classes = cfg.get_usize("data.classes")?;
    let per_class = cfg.get_usize("data.per_class")?;
    let mut rng = rng_from_seed(cfg.get_u64("data.seed")?);
    generate_synthetic_class_bank(&spec, classes, per_class, &mut rng).map_err(anyhow::Error::new)
}

fn build_model_for_bank<R: Real>(cfg: &RunConfig, bank: &ClassBank<R>) -> Result<MetaModel<R>> {
    let model_cfg = cfg.model_config(bank.input_shape())?;
    let model_seed = derive_seed(cfg.seed()?, MODEL_SALT);
    build_model(model_cfg, model_seed).map_err(anyhow::Error::new)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("checkpoint.lten")
}

/// Mean query cross-entropy of one episode under full back-prop, as a plain
/// value (used as the loss function for finite differences).
fn task_loss<R: Real>(model: &MetaModel<R>, episode: &Episode<R>) -> Result<R> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let state = support_forward(&mut tape, model, &bound, episode, SupportPlan::Full)
        ?;
    let logits = lite_core::lite::predict_logits(&mut tape, model, &bound, &state, &episode.query_x)
        ?;
    let loss =
        tape.softmax_cross_entropy(&logits, &episode.query_y)?;
    Ok(loss.item())
}

pub fn cmd_train<R: Real>(cfg: &RunConfig, pool: &WorkerPool) -> Result<i32> {
    let bank = build_bank::<R>(cfg)?;
    let mut model = build_model_for_bank(cfg, &bank)?;
    let sampler = EpisodeSampler::new(bank, cfg.sampler_config(cfg.seed()?)?);
    let loop_cfg = cfg.train_loop_config()?;
    let lite_cfg = cfg.lite_config()?;
    let mode = cfg.train_mode()?;

    let log_path = cfg.out_dir().join("train_log.csv");
    let mut writer = TrainLogWriter::create(&log_path)?;
    let start = Instant::now();
    let mut sink_err = None;
    let rows = meta_train(&mut model, &sampler, &loop_cfg, &lite_cfg, &mode, pool, |row| {
        if let Err(e) = writer.row(row, start.elapsed().as_millis()) {
            sink_err.get_or_insert(e);
        }
    })
    ?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    writer.finish()?;

    let ckpt = checkpoint_path(cfg);
    save_checkpoint(&ckpt, &model.params)?;

    let last = rows.last();
    println!(
        "{}",
        report::json_summary(&[
            ("command", JsonValue::Str("train".into())),
            ("iterations", JsonValue::Int(rows.len() as u64)),
            ("final_loss", JsonValue::Num(last.map_or(f64::NAN, |r| r.loss))),
            ("final_query_acc", JsonValue::Num(last.map_or(f64::NAN, |r| r.query_acc))),
            ("log", JsonValue::Str(log_path.display().to_string())),
            ("checkpoint", JsonValue::Str(ckpt.display().to_string())),
        ])
    );
    Ok(0)
}

fn apply_checkpoint<R: Real>(
    model: &mut MetaModel<R>,
    entries: Vec<(String, LtenRecord)>,
) -> Result<()> {
    let expected = model.params.len();
    if entries.len() != expected {
        bail!(
            "checkpoint/model mismatch: checkpoint has {} tensors, model has {expected}",
            entries.len()
        );
    }
    for (name, record) in entries {
        let current_shape = model
            .params
            .value(&name)
            .map_err(|_| anyhow!("checkpoint/model mismatch: unknown parameter '{name}'"))?
            .shape()
            .to_vec();
        if current_shape != record.shape {
            bail!(
                "checkpoint/model mismatch: parameter '{name}' has shape {:?}, model expects {:?}",
                record.shape,
                current_shape
            );
        }
        let tensor = Tensor::new(record.shape.clone(), record.data.into_reals::<R>())
            ?;
        model.params.set_value(&name, tensor)?;
    }
    Ok(())
}

pub fn cmd_eval<R: Real>(cfg: &RunConfig, pool: &WorkerPool, checkpoint: &Path) -> Result<i32> {
    let bank = build_bank::<R>(cfg)?;
    let mut model = build_model_for_bank(cfg, &bank)?;
    let entries =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    apply_checkpoint(&mut model, entries)?;
    let eval_seed = derive_seed(cfg.seed()?, EVAL_SALT);
    let sampler = EpisodeSampler::new(bank, cfg.sampler_config(eval_seed)?);
    let episodes = cfg.get_u64("eval.episodes")?;
    let report = evaluate(&model, &sampler, episodes, pool)?;

    let csv_path = cfg.out_dir().join("eval.csv");
    report::write_eval_csv(&csv_path, &report)?;
    println!(
        "{}",
        report::json_summary(&[
            ("command", JsonValue::Str("eval".into())),
            ("episodes", JsonValue::Int(episodes)),
            ("mean_accuracy", JsonValue::Num(report.mean_accuracy)),
            ("ci95_halfwidth", JsonValue::Num(report.ci95)),
            ("csv", JsonValue::Str(csv_path.display().to_string())),
        ])
    );
    Ok(0)
}

/// The fixed seeded task the gradient experiments measure on.
fn grad_episode<R: Real>(cfg: &RunConfig, bank: ClassBank<R>) -> Result<Episode<R>> {
    let grad_seed = derive_seed(cfg.seed()?, GRAD_SALT);
    let sampler = EpisodeSampler::new(bank, cfg.sampler_config(grad_seed)?);
    sampler.sample_indexed(0).map_err(anyhow::Error::new)
}

pub fn cmd_gradcheck<R: Real>(cfg: &RunConfig, _pool: &WorkerPool) -> Result<i32> {
    let bank = build_bank::<R>(cfg)?;
    let model = build_model_for_bank(cfg, &bank)?;
    let episode = grad_episode(cfg, bank)?;

    // Analytic gradients of the mean query loss, full back-prop.
    let mut rng = rng_from_seed(0);
    let mut lite_cfg = cfg.lite_config()?;
    lite_cfg.query_batch = episode.n_query().max(1);
    let analytic = task_step(&model, &episode, &TrainMode::FullBackprop, &lite_cfg, &mut rng)
        ?
        .grads;

    let tolerance = 1e-4;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let trainable: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(name, _)| name.clone())
        .collect();
    for name in &trainable {
        let fd = finite_difference_gradient(&model.params, name, 1e-5, |ps| {
            let probe = MetaModel { config: model.config.clone(), params: ps.clone() };
            task_loss(&probe, &episode).map_err(|_| lite_core::Error::NonFiniteValue {
                context: "gradcheck loss",
            })
        })
        ?;
        let grad = analytic.get(name)?;
        let err = max_rel_error(grad, &fd);
        let pass = err < tolerance;
        if !pass {
            failures.push(format!("{name} (rel err {err:.3e})"));
        }
        rows.push((name.clone(), grad.numel(), err, pass));
    }
    let csv_path = cfg.out_dir().join("gradcheck.csv");
    report::write_gradcheck_csv(&csv_path, &rows)?;
    println!(
        "{}",
        report::json_summary(&[
            ("command", JsonValue::Str("gradcheck".into())),
            ("params_checked", JsonValue::Int(rows.len() as u64)),
            ("failures", JsonValue::Int(failures.len() as u64)),
            ("tolerance", JsonValue::Num(tolerance)),
            ("csv", JsonValue::Str(csv_path.display().to_string())),
        ])
    );
    if failures.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradcheck failures: {}", failures.join(", "));
        Ok(1)
    }
}

pub fn cmd_bias_variance<R: Real>(cfg: &RunConfig, pool: &WorkerPool) -> Result<i32> {
    let bank = build_bank::<R>(cfg)?;
    let model = build_model_for_bank(cfg, &bank)?;
    let episode = grad_episode(cfg, bank)?;
    let experiment = cfg.grad_experiment_config()?;
    let task_desc = format!(
        "way{}_shot{}_N{}_seed{}",
        episode.way,
        episode.n_support() / episode.way,
        episode.n_support(),
        cfg.seed()?
    );

    let mut outputs = Vec::new();
    for arm in [ExperimentArm::Lite, ExperimentArm::Subsampled] {
        let report = run_bias_variance_experiment(&model, &episode, &experiment, arm, pool)
            ?;
        let path = cfg.out_dir().join(format!("bias_variance_{}.csv", arm.name()));
        report::write_grad_report_csv(&path, &report, experiment.sampling, &task_desc)?;
        outputs.push(path);
    }
    println!(
        "{}",
        report::json_summary(&[
            ("command", JsonValue::Str("bias-variance".into())),
            ("h_values", JsonValue::Str(cfg.get("grad.h_list").to_string())),
            ("lite_csv", JsonValue::Str(outputs[0].display().to_string())),
            ("subsampled_csv", JsonValue::Str(outputs[1].display().to_string())),
        ])
    );
    Ok(0)
}

pub fn cmd_memstat<R: Real>(cfg: &RunConfig, _pool: &WorkerPool) -> Result<i32> {
    let way = cfg.get_usize("episode.way")?;
    let n_list = cfg.get_usize_list("memstat.n_list")?;
    let h_list = cfg.get_usize_list("memstat.h_list")?;
    let fixed_n = cfg.get_usize("memstat.fixed_n")?;
    let fixed_h = cfg.get_usize("memstat.fixed_h")?;
    let bytes_per_scalar = R::DTYPE.size_bytes() as u64;

    // Size the bank for the largest shot in the sweep.
    let max_n = n_list.iter().chain(&[fixed_n]).copied().max().unwrap_or(fixed_n);
    for &n in n_list.iter().chain(&[fixed_n]) {
        if n % way != 0 {
            bail!("memstat support size {n} is not divisible by episode.way {way}");
        }
    }
    let spec = cfg.synthetic_spec()?;
    let classes = way.max(cfg.get_usize("data.classes")?.min(way + 4));
    let per_class = max_n / way + 2;
    let mut bank_rng = rng_from_seed(cfg.get_u64("data.seed")?);
    let bank = generate_synthetic_class_bank::<R>(&spec, classes, per_class, &mut bank_rng)
        ?;
    let model = build_model_for_bank(cfg, &bank)?;
    let lite_cfg = cfg.lite_config()?;
    let grad_seed = derive_seed(cfg.seed()?, GRAD_SALT);

    let episode_of = |n: usize| -> Result<Episode<R>> {
        let shot = n / way;
        let mut sampler_cfg = cfg.sampler_config(grad_seed)?;
        sampler_cfg.way = (way, way);
        sampler_cfg.shot = (shot, shot);
        sampler_cfg.query_per_class = (1, 1);
        let sampler = EpisodeSampler::new(bank.clone(), sampler_cfg);
        sampler.sample_indexed(0).map_err(anyhow::Error::new)
    };

    let measure = |episode: &Episode<R>, h: Option<usize>| -> Result<(u64, u64)> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        match h {
            Some(h) => {
                let mut rng = rng_from_seed(derive_seed(grad_seed, h as u64));
                let hset =
                    sample_backprop_indices(episode.n_support(), h, lite_cfg.sampling, &mut rng)
                        ?;
                lite_support_forward(&mut tape, &model, &bound, episode, &hset, &lite_cfg)
                    ?;
            }
            None => {
                support_forward(&mut tape, &model, &bound, episode, SupportPlan::Full)
                    ?;
            }
        }
        let tracked = tape.tracked_count();
        Ok((tracked, tracked + tape.grad_buffer_scalars()))
    };

    let mut rows = Vec::new();
    // N sweep at fixed H, with the full-backprop baseline.
    for &n in &n_list {
        let episode = episode_of(n)?;
        let (tracked, retained) = measure(&episode, Some(fixed_h))?;
        rows.push(MemStatRow {
            mode: "lite",
            n,
            h: fixed_h,
            tracked_count: tracked,
            retained_scalars: retained,
            estimated_bytes: retained * bytes_per_scalar,
        });
        let (tracked, retained) = measure(&episode, None)?;
        rows.push(MemStatRow {
            mode: "full",
            n,
            h: n,
            tracked_count: tracked,
            retained_scalars: retained,
            estimated_bytes: retained * bytes_per_scalar,
        });
    }
    // H sweep at fixed N.
    let episode = episode_of(fixed_n)?;
    for &h in &h_list {
        let (tracked, retained) = measure(&episode, Some(h))?;
        rows.push(MemStatRow {
            mode: "lite",
            n: fixed_n,
            h,
            tracked_count: tracked,
            retained_scalars: retained,
            estimated_bytes: retained * bytes_per_scalar,
        });
    }

    let csv_path = cfg.out_dir().join("memstat.csv");
    report::write_memstat_csv(&csv_path, &rows)?;
    println!(
        "{}",
        report::json_summary(&[
            ("command", JsonValue::Str("memstat".into())),
            ("rows", JsonValue::Int(rows.len() as u64)),
            ("csv", JsonValue::Str(csv_path.display().to_string())),
        ])
    );
    Ok(0)
}
