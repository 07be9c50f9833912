//! Desk-scale training: synthetic probes and a byte-level language model.
//!
//! Every step draws its data and dropout masks from its own random stream
//! (`Rng::stream(seed, step + 1)`; stream 0 initialises the model), so a run
//! resumed from a checkpoint replays the same batches as an uninterrupted
//! one. Checkpoints are written only at log steps.

pub mod model;
pub mod optim;
pub mod tasks;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensors, save_tensors, to_any, AnyTensor, TensorMap};
use crate::error::{config_err, Result};
use crate::layers::{NormPlacement, Parameterized};
use crate::rng::Rng;
use crate::tensor::{DType, Scalar, Tensor};

pub use model::{ModelConfig, TalkModel};
pub use optim::{lr_schedule, Adam, Schedule};
pub use tasks::{make_char_lm_batch, make_copy_batch, make_reverse_batch, Task, TaskBatch, BLANK};

/// Run configuration; the JSON form uses these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub seq_len: usize,
    /// Ignored for `char_lm`, which always uses 256 byte values.
    pub vocab: usize,
    pub text_path: Option<PathBuf>,

    pub layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub left_max: Vec<usize>,
    pub right_max: Vec<usize>,
    pub offsets_dropout: f64,
    pub normalize: bool,
    pub glu: bool,
    pub positional: bool,
    pub activation_dropout: f64,
    pub norm: NormPlacement,

    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
    pub log_every: usize,
    /// Stop once the masked accuracy of a log window reaches this value.
    pub target_accuracy: Option<f64>,
    /// Stop after this many updates without finishing the schedule.
    pub stop_at_step: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Copy,
            seq_len: 32,
            vocab: 16,
            text_path: None,
            layers: 2,
            dim: 64,
            ffn_dim: 128,
            heads: 4,
            left_max: vec![16, 16],
            right_max: vec![0, 0],
            offsets_dropout: 0.0,
            normalize: true,
            glu: true,
            positional: false,
            activation_dropout: 0.0,
            norm: NormPlacement::Pre,
            lr_peak: 1e-3,
            lr_floor: 1e-7,
            warmup_steps: 200,
            total_steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            seed: 0,
            dtype: DType::F32,
            log_every: 50,
            target_accuracy: None,
            stop_at_step: None,
            checkpoint_path: None,
            report_path: None,
            resume_from: None,
        }
    }
}

/// Loss divergence: this many consecutive steps above the multiple of the
/// first loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 100;

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.lr_peak,
            floor: self.lr_floor,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.task {
            Task::CharLm => 256,
            _ => self.vocab,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab_size(),
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            left_max: self.left_max.clone(),
            right_max: self.right_max.clone(),
            offsets_dropout: self.offsets_dropout,
            normalize: self.normalize,
            glu: self.glu,
            positional: self.positional.then_some(self.seq_len),
            activation_dropout: self.activation_dropout,
            norm: self.norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.left_max.len() != self.layers || self.right_max.len() != self.layers {
            return config_err(format!(
                "{} layers need {} left/right reaches, got {} / {}",
                self.layers,
                self.layers,
                self.left_max.len(),
                self.right_max.len()
            ));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.log_every == 0 {
            return config_err("batch_size, seq_len and log_every must be positive");
        }
        if self.task == Task::CharLm && self.text_path.is_none() {
            return config_err("char_lm needs text_path");
        }
        if self.task == Task::CharLm && self.right_max.iter().any(|&r| r > 0) {
            return config_err("char_lm predicts the next byte and needs right_max = 0 everywhere");
        }
        self.model_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Updates completed, counting any before a resume.
    pub steps: usize,
    pub diverged: bool,
    pub skipped_updates: u64,
    /// Held-out batches scored in eval mode after training.
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["step", "loss", "lr", "accuracy"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }
}

/// Source of batches for one run.
pub enum DataSource {
    Copy { vocab: usize },
    Reverse { vocab: usize },
    Text(Vec<u8>),
}

impl DataSource {
    pub fn for_config(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.task {
            Task::Copy => DataSource::Copy { vocab: cfg.vocab },
            Task::Reverse => DataSource::Reverse { vocab: cfg.vocab },
            Task::CharLm => {
                let path = cfg.text_path.as_ref().expect("validated");
                DataSource::Text(fs::read(path)?)
            }
        })
    }

    pub fn batch(&self, rng: &mut Rng, batch: usize, n: usize) -> Result<TaskBatch> {
        match self {
            DataSource::Copy { vocab } => make_copy_batch(rng, batch, n, *vocab),
            DataSource::Reverse { vocab } => make_reverse_batch(rng, batch, n, *vocab),
            DataSource::Text(t) => make_char_lm_batch(rng, t, batch, n),
        }
    }
}

/// Stream reserved for held-out evaluation batches.
const EVAL_STREAM: u64 = u64::MAX;
const EVAL_BATCHES: usize = 4;

struct Progress {
    step: usize,
    initial_loss: Option<f64>,
    over: usize,
}

fn meta(v: f64) -> AnyTensor {
    AnyTensor::F64(Tensor::from_vec(&[1], vec![v]).expect("one element"))
}

fn save_state<T: Scalar>(
    path: &Path,
    model: &TalkModel<T>,
    adam: &Adam<T>,
    progress: &Progress,
) -> Result<()> {
    let mut map = TensorMap::new();
    for ((name, p), (m, v)) in model
        .param_names()
        .into_iter()
        .zip(model.params())
        .zip(adam.m.iter().zip(&adam.v))
    {
        map.insert(format!("model.{name}"), to_any(p));
        map.insert(format!("adam.m.{name}"), to_any(m));
        map.insert(format!("adam.v.{name}"), to_any(v));
    }
    map.insert("state.step".into(), meta(progress.step as f64));
    map.insert("state.adam_t".into(), meta(adam.t as f64));
    map.insert("state.adam_skipped".into(), meta(adam.skipped as f64));
    map.insert("state.initial_loss".into(), meta(progress.initial_loss.unwrap_or(f64::NAN)));
    map.insert("state.over".into(), meta(progress.over as f64));
    save_tensors(&map, path)
}

fn take<T: Scalar>(map: &TensorMap, name: &str, like: &Tensor<T>) -> Result<Tensor<T>> {
    let Some(t) = map.get(name) else {
        return config_err(format!("checkpoint lacks {name:?}"));
    };
    if t.dtype() != T::DTYPE {
        return config_err(format!("{name:?} stored as {:?}, run uses {:?}", t.dtype(), T::DTYPE));
    }
    if t.shape() != like.shape() {
        return config_err(format!("{name:?} has shape {:?}, model expects {:?}", t.shape(), like.shape()));
    }
    Ok(t.to_tensor())
}

fn scalar_meta(map: &TensorMap, name: &str) -> Result<f64> {
    match map.get(name) {
        Some(AnyTensor::F64(t)) if t.len() == 1 => Ok(t.data()[0]),
        _ => config_err(format!("checkpoint lacks scalar {name:?}")),
    }
}

fn load_state<T: Scalar>(path: &Path, model: &mut TalkModel<T>, adam: &mut Adam<T>) -> Result<Progress> {
    let map = load_tensors(path)?;
    let names = model.param_names();
    for ((name, p), (m, v)) in names
        .iter()
        .zip(model.params_mut())
        .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
    {
        *p = take(&map, &format!("model.{name}"), p)?;
        *m = take(&map, &format!("adam.m.{name}"), m)?;
        *v = take(&map, &format!("adam.v.{name}"), v)?;
    }
    adam.t = scalar_meta(&map, "state.adam_t")? as u64;
    adam.skipped = scalar_meta(&map, "state.adam_skipped")? as u64;
    let initial = scalar_meta(&map, "state.initial_loss")?;
    Ok(Progress {
        step: scalar_meta(&map, "state.step")? as usize,
        initial_loss: (!initial.is_nan()).then_some(initial),
        over: scalar_meta(&map, "state.over")? as usize,
    })
}

/// Trains a model of element type `T` and returns it with the report.
pub fn train_model<T: Scalar>(cfg: &TrainConfig) -> Result<(TrainReport, TalkModel<T>)> {
    cfg.validate()?;
    let data = DataSource::for_config(cfg)?;
    let schedule = cfg.schedule();
    let mut model = TalkModel::<T>::new(cfg.model_config(), &mut Rng::stream(cfg.seed, 0))?;
    let mut adam = Adam::new(&model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut progress = match &cfg.resume_from {
        Some(path) => load_state(path, &mut model, &mut adam)?,
        None => Progress {
            step: 0,
            initial_loss: None,
            over: 0,
        },
    };

    let end = cfg.stop_at_step.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut rows = Vec::new();
    let mut diverged = false;
    let (mut loss_sum, mut correct, mut counted, mut window) = (0f64, 0usize, 0usize, 0usize);
    while progress.step < end && !diverged {
        let step = progress.step;
        let mut rng = Rng::stream(cfg.seed, step as u64 + 1);
        let batch = data.batch(&mut rng, cfg.batch_size, cfg.seq_len)?;
        let (out, grads) = model.loss_and_grads(&batch, true, &mut rng)?;
        let loss = out.loss.to_f64_lossless();
        let lr = schedule.lr(step);
        let grad_refs = grads.params();
        adam.step(model.params_mut(), &grad_refs, lr)?;
        progress.step += 1;

        let initial = *progress.initial_loss.get_or_insert(loss);
        if !loss.is_finite() {
            diverged = true;
        } else if loss > DIVERGENCE_FACTOR * initial {
            progress.over += 1;
            diverged = progress.over >= DIVERGENCE_PATIENCE;
        } else {
            progress.over = 0;
        }

        loss_sum += loss;
        correct += out.correct;
        counted += out.counted;
        window += 1;
        let last = progress.step == end || diverged;
        if progress.step % cfg.log_every == 0 || last {
            let accuracy = if counted > 0 { correct as f64 / counted as f64 } else { 0.0 };
            rows.push(LogRow {
                step: progress.step,
                loss: loss_sum / window as f64,
                lr,
                accuracy,
            });
            (loss_sum, correct, counted, window) = (0.0, 0, 0, 0);
            if let Some(path) = &cfg.checkpoint_path {
                save_state(path, &model, &adam, &progress)?;
            }
            if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
                break;
            }
        }
    }

    let mut eval_rng = Rng::stream(cfg.seed, EVAL_STREAM);
    let (mut eval_loss, mut eval_correct, mut eval_counted) = (0f64, 0usize, 0usize);
    for _ in 0..EVAL_BATCHES {
        let batch = data.batch(&mut eval_rng, cfg.batch_size, cfg.seq_len)?;
        let out = model.evaluate(&batch, &mut eval_rng)?;
        eval_loss += out.loss.to_f64_lossless() / EVAL_BATCHES as f64;
        eval_correct += out.correct;
        eval_counted += out.counted;
    }

    let report = TrainReport {
        rows,
        steps: progress.step,
        diverged,
        skipped_updates: adam.skipped,
        eval_loss,
        eval_accuracy: if eval_counted > 0 {
            eval_correct as f64 / eval_counted as f64
        } else {
            0.0
        },
    };
    if let Some(path) = &cfg.report_path {
        report.save_csv(path)?;
    }
    Ok((report, model))
}

/// Trains with the element type named in `cfg.dtype`.
pub fn train_loop(cfg: &TrainConfig) -> Result<TrainReport> {
    match cfg.dtype {
        DType::F32 => train_model::<f32>(cfg).map(|r| r.0),
        DType::F64 => train_model::<f64>(cfg).map(|r| r.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            seq_len: 8,
            vocab: 6,
            dim: 8,
            ffn_dim: 16,
            heads: 2,
            left_max: vec![4, 4],
            right_max: vec![0, 0],
            warmup_steps: 5,
            total_steps: 40,
            batch_size: 4,
            log_every: 10,
            dtype: DType::F64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = quick();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = TrainConfig::from_json(r#"{"task": "reverse", "right_max": [2, 2]}"#).unwrap();
        assert_eq!(partial.task, Task::Reverse);
        assert_eq!(partial.dim, 64);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { layers: 3, ..quick() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 40, ..quick() }.validate().is_err());
        assert!(TrainConfig { task: Task::CharLm, ..quick() }.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let a = train_loop(&quick()).unwrap();
        let b = train_loop(&quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
        assert!(!a.diverged);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("step,loss,lr,accuracy\n"));
    }
}
