//! Loss, optimizers, the training loop and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, LOG_PROB_FLOOR};
use crate::charset::Charset;
use crate::checkpoint::{Checkpoint, OptimizerState, RngState};
use crate::decoder::{self, DecodeMode};
use crate::error::{Error, Result};
use crate::model::{streams, Model, ModelConfig};
use crate::parallel::{self, Exec};
use crate::params::ParamStore;
use crate::rectifier;
use crate::synthgen::{self, LoadedSample};
use crate::tensor::{Real, Tensor};
use crate::tfe::{self, SkipMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adadelta { rho: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adadelta { rho: 0.95, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 1-based epochs from which the rate is multiplied by `lr_decay_factor`;
    /// `None` places them at 80% and 96% of the run.
    #[serde(default)]
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Extra metrics line every this many steps; 0 logs epochs only.
    #[serde(default)]
    pub log_every: usize,
}

impl TrainConfig {
    /// The large-batch AdaDelta schedule: 24 epochs, batch 640, decays at
    /// epochs 19 and 23.
    pub fn paper(train_data: PathBuf, val_data: PathBuf) -> Self {
        Self {
            model: ModelConfig::paper_1d(),
            train_data,
            val_data,
            epochs: 24,
            batch_size: 640,
            lr: 1.0,
            lr_decay_epochs: Some(vec![19, 23]),
            lr_decay_factor: 0.1,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            max_steps: None,
            log_every: 0,
        }
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        match &self.lr_decay_epochs {
            Some(v) => v.clone(),
            None => {
                let mut v: Vec<usize> = [0.8, 0.96]
                    .iter()
                    .map(|f| (f * self.epochs as f64).floor() as usize)
                    .filter(|&e| e >= 1 && e < self.epochs)
                    .collect();
                v.dedup();
                v
            }
        }
    }

    /// Learning rate used throughout 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs().iter().filter(|&&d| d <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        let d = self.decay_epochs();
        if d.windows(2).any(|w| w[0] >= w[1]) || d.iter().any(|&e| e == 0 || e >= self.epochs.max(1)) {
            return Err(Error::Config(format!(
                "decay epochs {d:?} must be strictly increasing and within 1..{}",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// `−Σ_t ln p_t[y_t]` with each log-probability floored at `ln 1e-12`.
pub fn ce_loss<T: Real>(probs: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    if probs.shape().len() != 2 || probs.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} targets",
            probs.shape().first().copied().unwrap_or(0),
            targets.len()
        )));
    }
    Ok(-targets
        .iter()
        .enumerate()
        .map(|(t, &y)| probs.row(t)[y].f64().ln().max(LOG_PROB_FLOOR))
        .sum::<f64>())
}

/// Builds the per-sample loss `TRA → TFE → AD → CE` on `tape`.
pub fn sample_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    image: Var,
    targets: &[usize],
    skip: SkipMode,
) -> Var {
    let rect = rectifier::rectify_on(tape, model, image);
    let enc = tfe::encode_on(tape, model, rect, skip);
    let tf = decoder::teacher_forced_on(tape, model, enc.f_init, enc.features, targets);
    tape.cross_entropy(tf, targets)
}

/// Loss of one sample and dense gradients for every parameter.
pub fn loss_and_grads<T: Real>(model: &Model<T>, image: &Tensor<T>, targets: &[usize]) -> (T, Vec<Vec<T>>) {
    let mut tape = Tape::with_params(&model.params);
    let img = tape.input(image.clone());
    let loss = sample_loss(&mut tape, model, img, targets, SkipMode::from_flag(model.config.skip_attention));
    let value = tape.value(loss).data()[0];
    (value, tape.backward(loss).into_dense(&model.params))
}

pub fn loss_only<T: Real>(model: &Model<T>, image: &Tensor<T>, targets: &[usize]) -> T {
    let mut tape = Tape::with_params(&model.params);
    let img = tape.input(image.clone());
    let loss = sample_loss(&mut tape, model, img, targets, SkipMode::from_flag(model.config.skip_attention));
    tape.value(loss).data()[0]
}

/// Optimizer state, one accumulator set per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adadelta {
        rho: f64,
        eps: f64,
        sq_grad: Vec<Vec<f32>>,
        sq_delta: Vec<Vec<f32>>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0f32; t.len()]).collect::<Vec<_>>();
        match *cfg {
            OptimizerConfig::Adadelta { rho, eps } => Optimizer::Adadelta {
                rho,
                eps,
                sq_grad: zeros(),
                sq_delta: zeros(),
            },
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        match self {
            Optimizer::Adadelta {
                rho,
                eps,
                sq_grad,
                sq_delta,
            } => {
                let (rho, eps, lr) = (*rho as f32, *eps as f32, lr as f32);
                for (k, id) in ids.into_iter().enumerate() {
                    let p = params.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        let g = grads[k][i];
                        let eg = rho * sq_grad[k][i] + (1.0 - rho) * g * g;
                        let delta = -((sq_delta[k][i] + eps).sqrt() / (eg + eps).sqrt()) * g;
                        sq_grad[k][i] = eg;
                        sq_delta[k][i] = rho * sq_delta[k][i] + (1.0 - rho) * delta * delta;
                        p[i] += lr * delta;
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                let (b1, b2, eps) = (*beta1 as f32, *beta2 as f32, *eps as f32);
                let step = (lr * c2.sqrt() / c1) as f32;
                for (k, id) in ids.into_iter().enumerate() {
                    let p = params.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        let g = grads[k][i];
                        m[k][i] = b1 * m[k][i] + (1.0 - b1) * g;
                        v[k][i] = b2 * v[k][i] + (1.0 - b2) * g * g;
                        p[i] -= step * m[k][i] / (v[k][i].sqrt() + eps);
                    }
                }
            }
        }
    }

    pub(crate) fn to_state(&self) -> OptimizerState {
        match self {
            Optimizer::Adadelta {
                sq_grad, sq_delta, ..
            } => OptimizerState {
                kind: "adadelta".into(),
                t: 0,
                slots: vec![("sq_grad".into(), sq_grad.clone()), ("sq_delta".into(), sq_delta.clone())],
            },
            Optimizer::Adam { t, m, v, .. } => OptimizerState {
                kind: "adam".into(),
                t: *t,
                slots: vec![("m".into(), m.clone()), ("v".into(), v.clone())],
            },
        }
    }

    pub(crate) fn from_state(cfg: &OptimizerConfig, params: &ParamStore<f32>, state: &OptimizerState) -> Result<Self> {
        let mut opt = Optimizer::new(cfg, params);
        let slot = |name: &str| -> Result<Vec<Vec<f32>>> {
            let found = state
                .slots
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer slot {name} missing")))?;
            let fits = found.len() == params.len() && found.iter().zip(params.iter()).all(|(s, (_, _, t))| s.len() == t.len());
            if !fits {
                return Err(Error::Checkpoint(format!("optimizer slot {name} does not match the parameters")));
            }
            Ok(found)
        };
        match &mut opt {
            Optimizer::Adadelta {
                sq_grad, sq_delta, ..
            } if state.kind == "adadelta" => {
                *sq_grad = slot("sq_grad")?;
                *sq_delta = slot("sq_delta")?;
            }
            Optimizer::Adam { t, m, v, .. } if state.kind == "adam" => {
                *t = state.t;
                *m = slot("m")?;
                *v = slot("v")?;
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint optimizer {} does not match the configuration",
                    state.kind
                )))
            }
        }
        Ok(opt)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// A labelled image ready for the network.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: crate::image::RgbImage,
    pub label: String,
    pub targets: Vec<usize>,
}

pub fn prepare_examples(samples: Vec<LoadedSample>, cfg: &ModelConfig) -> Result<Vec<Example>> {
    let charset = Charset::new();
    samples
        .into_iter()
        .map(|s| {
            if s.image.height() != cfg.input_h || s.image.width() != cfg.input_w {
                return Err(Error::Data(format!(
                    "{} is {}x{}, model expects {}x{}",
                    s.path,
                    s.image.height(),
                    s.image.width(),
                    cfg.input_h,
                    cfg.input_w
                )));
            }
            let targets = charset.encode_unpadded(&s.label);
            if targets.len() > cfg.max_len {
                return Err(Error::Length {
                    len: s.label.chars().count(),
                    max_len: cfg.max_len,
                });
            }
            Ok(Example {
                image: s.image,
                label: s.label,
                targets,
            })
        })
        .collect()
}

pub fn load_examples(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Vec<Example>> {
    prepare_examples(synthgen::load_dataset(path)?, cfg)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// Case-sensitive exact-match sequence accuracy.
    pub accuracy: f64,
    pub mean_edit_distance: f64,
    pub per_length: BTreeMap<usize, LengthStats>,
}

pub fn evaluate(model: &Model<f32>, data: &[Example], mode: DecodeMode, exec: Exec) -> Result<(EvalReport, Vec<String>)> {
    let preds = parallel::map(exec, data, |ex| {
        decoder::recognize(model, &ex.image.to_tensor(), mode).map(|r| r.text)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&str> = data.iter().map(|e| e.label.as_str()).collect();
    Ok((score_predictions(&labels, &preds), preds))
}

pub fn score_predictions(labels: &[&str], preds: &[String]) -> EvalReport {
    let mut per_length: BTreeMap<usize, LengthStats> = BTreeMap::new();
    let mut correct = 0;
    let mut edits = 0usize;
    for (label, pred) in labels.iter().zip(preds) {
        let hit = *label == pred.as_str();
        let entry = per_length.entry(label.chars().count()).or_default();
        entry.total += 1;
        if hit {
            entry.correct += 1;
            correct += 1;
        }
        edits += strsim::levenshtein(label, pred);
    }
    for s in per_length.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    let total = labels.len();
    let denom = total.max(1) as f64;
    EvalReport {
        total,
        correct,
        accuracy: correct as f64 / denom,
        mean_edit_distance: edits as f64 / denom,
        per_length,
    }
}

/// Mean loss and summed gradients over a batch, reduced in sample order.
pub fn batch_gradients(model: &Model<f32>, batch: &[&Example], exec: Exec) -> (f64, Vec<Vec<f32>>) {
    let results = parallel::map(exec, batch, |ex| loss_and_grads(model, &ex.image.to_tensor(), &ex.targets));
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    let mut grads: Vec<Vec<f32>> = model.params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (loss, g) in results {
        total += loss as f64;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b * scale);
        }
    }
    (total / batch.len() as f64, grads)
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsLine>,
    pub best_val_acc: f64,
    pub final_checkpoint: Checkpoint,
}

/// Progress callback; receives every metrics line as it is written.
pub type Progress<'a> = &'a mut dyn FnMut(&MetricsLine);

/// Runs training, writing checkpoints and `metrics.jsonl` under `out`.
pub fn train(
    cfg: &TrainConfig,
    out: impl AsRef<Path>,
    resume: Option<Checkpoint>,
    exec: Exec,
    progress: Option<Progress<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train_set = load_examples(&cfg.train_data, &cfg.model)?;
    let val_set = load_examples(&cfg.val_data, &cfg.model)?;
    train_on(cfg, &train_set, &val_set, out, resume, exec, progress)
}

pub fn train_on(
    cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    out: &Path,
    resume: Option<Checkpoint>,
    exec: Exec,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (mut model, mut opt, mut rng, start_epoch, mut step, mut best) = match resume {
        Some(ck) => {
            if ck.model != cfg.model {
                return Err(Error::Checkpoint("checkpoint model config differs from the training config".into()));
            }
            let model = Model::from_params(ck.model.clone(), ck.params.clone())?;
            let opt = Optimizer::from_state(&cfg.optimizer, &model.params, &ck.optimizer)?;
            (model, opt, ck.rng.restore(), ck.epoch, ck.step, ck.best_val_acc)
        }
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
            let opt = Optimizer::new(&cfg.optimizer, &model.params);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(streams::SHUFFLE);
            (model, opt, rng, 0, 0, f64::NEG_INFINITY)
        }
    };

    let metrics_path = out.join(METRICS_FILE);
    let file = if start_epoch == 0 {
        File::create(&metrics_path)
    } else {
        fs::OpenOptions::new().append(true).create(true).open(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut metrics = Vec::new();
    let mut emit = |line: MetricsLine, log: &mut BufWriter<File>| -> Result<()> {
        let text = serde_json::to_string(&line)?;
        writeln!(log, "{text}").and_then(|_| log.flush()).map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(p) = progress.as_mut() {
            p(&line);
        }
        metrics.push(line);
        Ok(())
    };

    let make_checkpoint = |model: &Model<f32>, opt: &Optimizer, rng: &ChaCha8Rng, epoch: usize, step: usize, best: f64| Checkpoint {
        model: model.config.clone(),
        train: Some(cfg.clone()),
        params: model.params.clone(),
        optimizer: opt.to_state(),
        rng: RngState::capture(cfg.seed, rng),
        epoch,
        step,
        best_val_acc: best,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last = make_checkpoint(&model, &opt, &rng, start_epoch, step, best);
    let step_limit = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in start_epoch + 1..=cfg.epochs {
        if step >= step_limit {
            break;
        }
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut batches) = (0.0, 0usize);
        let (mut window_loss, mut window_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= step_limit {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, exec);
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {}", step + 1)));
            }
            opt.step(&mut model.params, &grads, lr);
            step += 1;
            epoch_loss += loss;
            batches += 1;
            window_loss += loss;
            window_n += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                emit(
                    MetricsLine {
                        epoch,
                        step,
                        lr,
                        loss: window_loss / window_n as f64,
                        val_acc: None,
                    },
                    &mut log,
                )?;
                window_loss = 0.0;
                window_n = 0;
            }
        }
        let (report, _) = evaluate(&model, val_set, DecodeMode::Greedy, exec)?;
        let improved = report.accuracy > best;
        if improved {
            best = report.accuracy;
        }
        emit(
            MetricsLine {
                epoch,
                step,
                lr,
                loss: epoch_loss / batches.max(1) as f64,
                val_acc: Some(report.accuracy),
            },
            &mut log,
        )?;
        last = make_checkpoint(&model, &opt, &rng, epoch, step, best);
        if improved {
            last.save(out.join(BEST_CHECKPOINT))?;
        }
        last.save(out.join(LAST_CHECKPOINT))?;
    }
    if start_epoch >= cfg.epochs || step == 0 {
        last.save(out.join(LAST_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        metrics,
        best_val_acc: best,
        final_checkpoint: last,
    })
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charset::{EOS, NUM_CLASSES};

    fn cfg(epochs: usize, decays: Option<Vec<usize>>) -> TrainConfig {
        TrainConfig {
            epochs,
            lr_decay_epochs: decays,
            ..TrainConfig::paper("a".into(), "b".into())
        }
    }

    #[test]
    fn loss_examples() {
        let mut perfect = Tensor::<f64>::zeros(&[2, NUM_CLASSES]);
        perfect.data_mut()[3] = 1.0;
        perfect.data_mut()[NUM_CLASSES + EOS] = 1.0;
        assert_eq!(ce_loss(&perfect, &[3, EOS]).unwrap(), 0.0);
        let uniform = Tensor::<f64>::filled(&[3, NUM_CLASSES], 1.0 / NUM_CLASSES as f64);
        let l = ce_loss(&uniform, &[1, 2, EOS]).unwrap();
        assert!((l - 3.0 * (NUM_CLASSES as f64).ln()).abs() < 1e-12);
        assert!(ce_loss(&uniform, &[1, 2]).is_err());
        // A zero probability is floored rather than infinite.
        assert!((ce_loss(&perfect, &[4, EOS]).unwrap() - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn paper_schedule() {
        let c = cfg(24, Some(vec![19, 23]));
        assert_eq!(c.lr_at(1), 1.0);
        assert_eq!(c.lr_at(18), 1.0);
        assert!((c.lr_at(19) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(24) - 0.01).abs() < 1e-15);
        assert_eq!(cfg(24, None).decay_epochs(), vec![19, 23]);
        assert_eq!(cfg(30, None).decay_epochs(), vec![24, 28]);
    }

    #[test]
    fn bad_schedules_rejected() {
        assert!(cfg(24, Some(vec![23, 19])).validate().is_err());
        assert!(cfg(24, Some(vec![24])).validate().is_err());
        let mut c = cfg(24, None);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scoring_reports_lengths_and_edits() {
        let r = score_predictions(&["12", "345", "6"], &["12".into(), "34".into(), "".into()]);
        assert_eq!(r.correct, 1);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.mean_edit_distance - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_length[&3].correct, 0);
        assert_eq!(r.per_length[&2].accuracy, 1.0);
    }

    #[test]
    fn adadelta_moves_against_the_gradient() {
        let mut store = ParamStore::<f32>::new();
        store.add("p", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut opt = Optimizer::new(&OptimizerConfig::default(), &store);
        opt.step(&mut store, &[vec![1.0, -1.0]], 1.0);
        let p = store.by_name("p").unwrap().data();
        assert!(p[0] < 1.0 && p[1] > -1.0);
    }

    #[test]
    fn config_json_roundtrip() {
        let c = cfg(10, None);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(&s.replace("\"epochs\"", "\"epochz\"")).is_err());
    }
}
