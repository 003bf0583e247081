//! Optimization: Adam, step learning-rate schedule, AR/TAR/weight decay,
//! gradient clipping, the epoch loop, evaluation, and resumable checkpoints.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::corpus::{batchify, next_window, BatchStream, Cursor, Vocabulary, WindowSchedule};
use crate::model::LanguageModel;
use crate::param::ParamStore;
use crate::rng::{Rng, RngState};
use crate::rnn::{LayerState, Mode, ModelConfig, RecurrentState};
use crate::softmax::Metrics;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update from the current grads. Grads are left as they are.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Domain(format!("learning rate {lr} must be positive")));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let w = p.value.data_mut();
            let g = p.grad.data();
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate divided by `factor` at each listed (1-based) epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub reductions: Vec<usize>,
    #[serde(default = "ten")]
    pub factor: f64,
}

fn ten() -> f64 {
    10.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            reductions: Vec::new(),
            factor: 10.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.reductions.iter().filter(|&&r| r <= epoch).count();
        self.lr / self.factor.powi(n as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub ar_alpha: f64,
    pub tar_beta: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ar_alpha, self.tar_beta, self.weight_decay, self.clip_norm.unwrap_or(1.0)];
        if all.iter().any(|&x| !(x >= 0.0)) || self.clip_norm == Some(0.0) {
            return Err(Error::Domain(format!("regularizer settings must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// `loss + α·mean(dropped²) + β·mean((raw_t − raw_{t−1})²) + λ·Σ‖W‖²`.
///
/// Zero coefficients add no nodes, so the total is then `loss` itself.
pub fn apply_regularizers(tape: &mut Tape, store: &ParamStore, loss: Var, raw: Var, dropped: Var, batch: usize, cfg: &RegConfig) -> Result<Var> {
    let mut total = loss;
    if cfg.ar_alpha > 0.0 {
        let sq = tape.mul(dropped, dropped)?;
        let m = tape.mean(sq);
        let ar = tape.scale(m, cfg.ar_alpha);
        total = tape.add(total, ar)?;
    }
    let rows = tape.value(raw).rows();
    if cfg.tar_beta > 0.0 && rows > batch {
        let later = tape.slice_rows(raw, batch, rows)?;
        let earlier = tape.slice_rows(raw, 0, rows - batch)?;
        let diff = tape.sub(later, earlier)?;
        let sq = tape.mul(diff, diff)?;
        let m = tape.mean(sq);
        let tar = tape.scale(m, cfg.tar_beta);
        total = tape.add(total, tar)?;
    }
    if cfg.weight_decay > 0.0 {
        for id in store.ids() {
            let w = tape.param(store, id);
            let sq = tape.mul(w, w)?;
            let s = tape.sum(sq);
            let d = tape.scale(s, cfg.weight_decay);
            total = tape.add(total, d)?;
        }
    }
    Ok(total)
}

/// Rescales all grads so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Domain(format!("clip norm {max_norm} must be positive")));
    }
    let norm = store.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    Ok(scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub window: WindowSchedule,
    pub eval_batch_size: usize,
    pub eval_bptt: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub reg: RegConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Position inside the run, enough to resume mid-epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Current 1-based epoch.
    pub epoch: usize,
    pub cursor: Cursor,
    /// Windows completed over the whole run.
    pub windows_done: usize,
    pub epoch_nats: f64,
    pub epoch_tokens: usize,
    pub epoch_windows: usize,
    pub epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_nats: f64,
    pub windows: usize,
    pub seconds: f64,
    /// Mean cross-entropy of every window, in order.
    pub window_losses: Vec<f64>,
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_nats: f64,
    pub valid_nats: f64,
    pub valid_bpc_or_ppl: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: LanguageModel,
    pub adam: Adam,
    pub config: TrainConfig,
    pub progress: Progress,
    rng: Rng,
    state: Option<RecurrentState>,
}

impl Trainer {
    pub fn new(model: LanguageModel, config: TrainConfig) -> Result<Self> {
        config.reg.validate()?;
        if config.batch_size == 0 || config.eval_batch_size == 0 || config.window.base_bptt == 0 {
            return Err(Error::Domain("batch sizes and bptt must be positive".into()));
        }
        let adam = Adam::new(&model.params, config.adam);
        let rng = Rng::seed_from(config.seed);
        Ok(Self {
            model,
            adam,
            progress: Progress {
                epoch: 1,
                ..Progress::default()
            },
            rng,
            state: None,
            config,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.schedule.lr_at(self.progress.epoch)
    }

    /// Trains on the next window; `None` once the epoch's stream is exhausted.
    pub fn step_window(&mut self, stream: &BatchStream) -> Result<Option<f64>> {
        let started = Instant::now();
        let batch = stream.batch();
        let Some(win) = next_window(stream, &self.config.window, &mut self.progress.cursor, &mut self.rng) else {
            return Ok(None);
        };
        let state = match self.state.take() {
            Some(s) if s.batch() == batch => s,
            _ => self.model.zero_state(batch),
        };
        let lr = self.lr();
        let mut tape = Tape::new();
        let wl = self.model.window_loss(&mut tape, &win.inputs, &win.targets, batch, &state, Mode::Train(&mut self.rng))?;
        let nats = tape.value(wl.loss).item();
        if !nats.is_finite() {
            return Err(Error::Divergence {
                window: self.progress.windows_done,
                value: nats,
            });
        }
        let total = apply_regularizers(&mut tape, &self.model.params, wl.loss, wl.forward.raw, wl.forward.output, batch, &self.config.reg)?;
        tape.backward(total, &mut self.model.params)?;
        if let Some(max) = self.config.reg.clip_norm {
            clip_gradients(&mut self.model.params, max)?;
        }
        if lr > 0.0 {
            self.adam.step(&mut self.model.params, lr)?;
        }
        self.model.params.zero_grads();
        self.state = Some(wl.forward.state);
        let p = &mut self.progress;
        p.windows_done += 1;
        p.epoch_windows += 1;
        p.epoch_nats += nats * win.inputs.len() as f64;
        p.epoch_tokens += win.inputs.len();
        p.epoch_seconds += started.elapsed().as_secs_f64();
        Ok(Some(nats))
    }

    /// Runs the rest of the current epoch and advances to the next one.
    pub fn train_epoch(&mut self, stream: &BatchStream) -> Result<EpochStats> {
        let mut window_losses = Vec::new();
        while let Some(l) = self.step_window(stream)? {
            window_losses.push(l);
        }
        let p = self.progress;
        let stats = EpochStats {
            epoch: p.epoch,
            lr: self.lr(),
            mean_nats: if p.epoch_tokens == 0 { f64::NAN } else { p.epoch_nats / p.epoch_tokens as f64 },
            windows: p.epoch_windows,
            seconds: p.epoch_seconds,
            window_losses,
        };
        self.progress = Progress {
            epoch: p.epoch + 1,
            windows_done: p.windows_done,
            ..Progress::default()
        };
        self.state = None;
        Ok(stats)
    }

    /// Model, optimizer moments, rng, cursor and carried state in one container.
    pub fn to_container(&self, vocab: Option<&Vocabulary>) -> Result<Container> {
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            vocab: vocab.cloned(),
            training: Some(TrainingMeta {
                config: self.config.clone(),
                progress: self.progress,
                rng: self.rng.state(),
                adam_step: self.adam.step,
                has_state: self.state.is_some(),
            }),
        };
        let mut tensors = model_tensors(&self.model);
        for (p, (m, v)) in self.model.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            tensors.push((format!("adam.m.{}", p.name), m.clone()));
            tensors.push((format!("adam.v.{}", p.name), v.clone()));
        }
        if let Some(state) = &self.state {
            for (l, s) in state.layers.iter().enumerate() {
                tensors.push((format!("state.{l}.h"), s.h.clone()));
                tensors.push((format!("state.{l}.c"), s.c.clone()));
            }
        }
        Ok(Container {
            config_json: serde_json::to_string(&meta)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path, vocab: Option<&Vocabulary>) -> Result<()> {
        self.to_container(vocab)?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<(Self, Option<Vocabulary>)> {
        let meta: CheckpointMeta = serde_json::from_str(&c.config_json)?;
        let training = meta
            .training
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?;
        let model = restore_model(&meta.model, c)?;
        let mut adam = Adam::new(&model.params, training.config.adam);
        adam.step = training.adam_step;
        for (i, p) in model.params.iter().enumerate() {
            adam.m[i] = named(c, &format!("adam.m.{}", p.name), p.value.shape())?;
            adam.v[i] = named(c, &format!("adam.v.{}", p.name), p.value.shape())?;
        }
        let state = if training.has_state {
            let mut layers = Vec::new();
            for l in 0..model.config().layers {
                let h = c.tensor(&format!("state.{l}.h")).cloned();
                let cc = c.tensor(&format!("state.{l}.c")).cloned();
                match (h, cc) {
                    (Some(h), Some(c)) => layers.push(LayerState { h, c }),
                    _ => return Err(Error::Format(format!("missing carried state for layer {l}"))),
                }
            }
            Some(RecurrentState { layers })
        } else {
            None
        };
        let trainer = Self {
            model,
            adam,
            config: training.config,
            progress: training.progress,
            rng: Rng::from_state(&training.rng)?,
            state,
        };
        Ok((trainer, meta.vocab.map(Vocabulary::rebuilt)))
    }

    pub fn restore(path: &Path) -> Result<(Self, Option<Vocabulary>)> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub vocab: Option<Vocabulary>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub progress: Progress,
    pub rng: RngState,
    pub adam_step: u64,
    pub has_state: bool,
}

fn model_tensors(model: &LanguageModel) -> Vec<(String, Tensor)> {
    model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

fn named(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = c
        .tensor(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t.clone())
}

fn restore_model(config: &ModelConfig, c: &Container) -> Result<LanguageModel> {
    let mut model = LanguageModel::new(config.clone(), &mut Rng::seed_from(0))?;
    let ids: Vec<_> = model.params.ids().collect();
    let mut values = Vec::with_capacity(ids.len());
    for &id in &ids {
        let p = model.params.get(id);
        values.push(named(c, &p.name, p.value.shape())?);
    }
    for (id, v) in ids.into_iter().zip(values) {
        model.params.set_value(id, v)?;
    }
    Ok(model)
}

/// Writes model weights (no optimizer state) plus the vocabulary.
pub fn save_model(model: &LanguageModel, vocab: Option<&Vocabulary>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config().clone(),
        vocab: vocab.cloned(),
        training: None,
    };
    Container {
        config_json: serde_json::to_string(&meta)?,
        tensors: model_tensors(model),
    }
    .save(path)
}

/// Loads the model part of any checkpoint.
pub fn load_model(path: &Path) -> Result<(LanguageModel, Option<Vocabulary>)> {
    let c = Container::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&c.config_json)?;
    let model = restore_model(&meta.model, &c)?;
    Ok((model, meta.vocab.map(Vocabulary::rebuilt)))
}

/// Log-probability of every target, scored once each with state carried
/// across fixed-length windows. Order is column by column.
pub fn stream_log_probs(model: &LanguageModel, stream: &BatchStream, bptt: usize) -> Result<Vec<Vec<f64>>> {
    if stream.rows() < 2 {
        return Err(Error::Contract("evaluation split has no targets".into()));
    }
    let batch = stream.batch();
    let schedule = WindowSchedule::fixed(bptt.max(1));
    let mut cursor = Cursor::default();
    let mut rng = Rng::seed_from(0);
    let mut state = model.zero_state(batch);
    let mut cols = vec![Vec::with_capacity(stream.rows()); batch];
    while let Some(win) = next_window(stream, &schedule, &mut cursor, &mut rng) {
        let mut tape = Tape::new();
        let wl = model.window_loss(&mut tape, &win.inputs, &win.targets, batch, &state, Mode::Eval)?;
        for (i, &lp) in tape.value(wl.log_probs).data().iter().enumerate() {
            cols[i % batch].push(lp);
        }
        state = wl.forward.state;
    }
    Ok(cols)
}

/// Token-weighted cross-entropy over an evaluation split.
pub fn evaluate(model: &LanguageModel, stream: &BatchStream, bptt: usize) -> Result<Metrics> {
    let cols = stream_log_probs(model, stream, bptt)?;
    let n: usize = cols.iter().map(Vec::len).sum();
    let total: f64 = cols.iter().flatten().sum();
    Metrics::from_total(-total, n)
}

/// Convenience: batchify `tokens` and evaluate.
pub fn evaluate_tokens(model: &LanguageModel, tokens: &[usize], batch: usize, bptt: usize) -> Result<Metrics> {
    if tokens.len() < 2 {
        return Err(Error::Contract("evaluation split has no targets".into()));
    }
    let stream = batchify(tokens, batch.min(tokens.len() / 2).max(1))?;
    evaluate(model, &stream, bptt)
}

/// Writes an epoch log as CSV with a header row.
pub fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
