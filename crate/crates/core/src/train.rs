//! Training loop, evaluation and the metrics log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, render_pairs, KeyValues};
use crate::data::RgbdSample;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_classes, ModelConfig, SegModel};
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "rgbdseg-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds initialisation, batch order and augmentation.
    pub seed: u64,
    /// Log (and evaluate) every this many steps; the last step always logs.
    pub log_every: usize,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 6e-4,
            weight_decay: 0.01,
            seed: 0,
            log_every: 250,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl KeyValues for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "hflip" => self.hflip = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("steps", self.steps.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("lr", format!("{:?}", self.lr)),
            kv("weight_decay", format!("{:?}", self.weight_decay)),
            kv("seed", self.seed.to_string()),
            kv("log_every", self.log_every.to_string()),
            kv("hflip", self.hflip.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogSplit {
    Train,
    Val,
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub split: LogSplit,
    pub loss: f64,
    pub miou: Option<f64>,
    pub iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn miou(&self) -> Option<f64> {
        self.confusion.miou()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub log: Vec<LogRow>,
    pub final_val: Option<EvalReport>,
}

pub fn csv_header(num_classes: usize) -> String {
    let mut s = String::from("step,split,loss,miou");
    for k in 0..num_classes {
        let _ = write!(s, ",iou_class{k}");
    }
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(num_classes: usize, rows: &[LogRow]) -> String {
    let mut out = csv_header(num_classes);
    out.push('\n');
    for r in rows {
        let split = match r.split {
            LogSplit::Train => "train",
            LogSplit::Val => "val",
        };
        let _ = write!(out, "{},{},{},{}", r.step, split, r.loss, fmt_opt(r.miou));
        for v in &r.iou {
            let _ = write!(out, ",{}", fmt_opt(*v));
        }
        out.push('\n');
    }
    out
}

fn labels_in_range(sample: &RgbdSample, k: usize) -> Result<()> {
    match sample.labels.iter().find(|&&c| c >= k) {
        Some(c) => Err(Error::Domain(format!("label {c} outside 0..{k}"))),
        None => Ok(()),
    }
}

/// Mean per-pixel cross-entropy over `samples` and the confusion of the
/// arg-max predictions.
pub fn evaluate(model: &SegModel, samples: &[RgbdSample]) -> Result<EvalReport> {
    let k = model.config().num_classes;
    let mut confusion = ConfusionMatrix::new(k);
    let mut loss = 0.0;
    for s in samples {
        labels_in_range(s, k)?;
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape);
        let logits = model.forward(&mut tape, &bound, &s.rgb, &s.disparity)?;
        let flat = tape.reshape(logits, &[s.labels.len(), k])?;
        let l = tape.cross_entropy(flat, &s.labels)?;
        loss += tape.value(l).item();
        confusion.add(&argmax_classes(tape.value(flat)), &s.labels)?;
    }
    Ok(EvalReport {
        loss: if samples.is_empty() {
            0.0
        } else {
            loss / samples.len() as f64
        },
        confusion,
    })
}

/// Per-pixel class predictions for one sample.
pub fn predict(model: &SegModel, sample: &RgbdSample) -> Result<Vec<usize>> {
    let input = model.prepare(&sample.rgb, &sample.disparity)?;
    Ok(argmax_classes(&model.predict_logits(&input)?))
}

fn as_divergence(step: usize, e: Error) -> Error {
    if e.is_numeric() && !matches!(e, Error::Divergence { .. }) {
        Error::Divergence {
            step,
            reason: e.to_string(),
        }
    } else {
        e
    }
}

/// Model initialisation seed derived from the run seed.
pub fn init_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x243f_6a88_85a3_08d3
}

/// Trains from a fresh initialisation. Deterministic given the inputs.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[RgbdSample],
    val_set: &[RgbdSample],
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = SegModel::new(model_config.clone(), init_seed(config.seed))?;
    train_from(model, config, train_set, val_set)
}

pub fn train_from(
    mut model: SegModel,
    config: &TrainConfig,
    train_set: &[RgbdSample],
    val_set: &[RgbdSample],
) -> Result<TrainOutcome> {
    config.validate()?;
    let k = model.config().num_classes;
    for s in train_set.iter().chain(val_set) {
        labels_in_range(s, k)?;
    }
    if config.steps > 0 && train_set.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        model.params().values(),
    );
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let mut window_conf = ConfusionMatrix::new(k);
    let mut final_val = None;
    for step in 1..=config.steps {
        let mut grads: Option<Vec<Tensor>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            let base = &train_set[order.pop().expect("refilled above")];
            let flipped;
            let sample = if config.hflip && rng.random_bool(0.5) {
                flipped = base.hflip();
                &flipped
            } else {
                base
            };
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let run = (|| -> Result<f64> {
                let logits = model.forward(&mut tape, &bound, &sample.rgb, &sample.disparity)?;
                let flat = tape.reshape(logits, &[sample.labels.len(), k])?;
                let l = tape.cross_entropy(flat, &sample.labels)?;
                window_conf.add(&argmax_classes(tape.value(flat)), &sample.labels)?;
                tape.backward(l)?;
                Ok(tape.value(l).item())
            })();
            batch_loss += run.map_err(|e| as_divergence(step, e))?;
            let g = bound.grads(&tape);
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / config.batch_size as f64;
        let mut grads = grads.expect("batch_size > 0");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        let lr = cosine_lr(config.lr, step - 1, config.steps);
        adam.step(model.params_mut().values_mut(), &grads, lr)
            .map_err(|e| as_divergence(step, e))?;
        window_loss += batch_loss * inv;
        window_steps += 1;
        if step % config.log_every == 0 || step == config.steps {
            log.push(LogRow {
                step,
                split: LogSplit::Train,
                loss: window_loss / window_steps as f64,
                miou: window_conf.miou(),
                iou: window_conf.per_class_iou(),
            });
            window_loss = 0.0;
            window_steps = 0;
            window_conf = ConfusionMatrix::new(k);
            if !val_set.is_empty() {
                let report = evaluate(&model, val_set).map_err(|e| as_divergence(step, e))?;
                log.push(LogRow {
                    step,
                    split: LogSplit::Val,
                    loss: report.loss,
                    miou: report.miou(),
                    iou: report.confusion.per_class_iou(),
                });
                final_val = Some(report);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        final_val,
    })
}

/// Writes parameters, the model description and a format tag to `dir`.
pub fn save_checkpoint(model: &SegModel, dir: &Path) -> Result<()> {
    model.params().save_dir(dir)?;
    let mut text = format!("# {CHECKPOINT_FORMAT}\n");
    text.push_str(&render_pairs(&model.config().pairs()));
    let path = dir.join("model.txt");
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<SegModel> {
    let path = dir.join("model.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if text.lines().next() != Some(&format!("# {CHECKPOINT_FORMAT}")) {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("missing '# {CHECKPOINT_FORMAT}' header"),
        });
    }
    let mut config = ModelConfig::default();
    for (k, v) in crate::config::parse_pairs(&text)? {
        if !config.set(&k, &v)? {
            return Err(Error::Config(format!("unknown model key {k:?} in {}", path.display())));
        }
    }
    let mut model = SegModel::new(config, 0)?;
    model.params_mut().load_dir(dir)?;
    Ok(model)
}

/// Writes `metrics.csv` and `checkpoint/` under `out`.
pub fn write_outputs(outcome: &TrainOutcome, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let csv = render_csv(outcome.model.config().num_classes, &outcome.log);
    let path = out.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    save_checkpoint(&outcome.model, &out.join("checkpoint"))
}
