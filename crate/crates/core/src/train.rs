//! Mini-batch training with Adam, global-norm clipping, early stopping on
//! the validation split, and random hyperparameter search.
//!
//! Per-sample gradients may be computed on worker threads, but they are
//! always reduced in batch order so any thread count gives the same bits.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Sample};
use crate::model::{self, LossParts, ModelConfig, ModelError, ModelParams, ModelVars};
use crate::rng::{seeded, stream_rng, Stream};
use crate::tape::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(
        "non-finite loss at step {step}: samples {batch:?}, data {data}, l1 {l1}, l2 {l2}"
    )]
    NonFinite {
        step: usize,
        batch: Vec<usize>,
        data: f64,
        l1: f64,
        l2: f64,
    },
    #[error("thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub clip_norm: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Worker threads for per-sample gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_steps: 2000,
            clip_norm: 5.0,
            patience: 10,
            seed: 42,
            eval_every: 50,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters unchanged.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        // false for NaN as well
        let positive = |x: f64| x > 0.0;
        if !positive(self.eps) || !positive(self.clip_norm) {
            return bad("eps and clip_norm must be positive");
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 || self.threads == 0 {
            return bad("batch_size, patience, eval_every and threads must be at least 1");
        }
        Ok(())
    }
}

/// Adam state, one moment buffer pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        if self.lr == 0.0 {
            return;
        }
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *x = (*x as f64 - update) as f32;
            }
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One line of training history. Validation loss is present only on
/// evaluation steps; step 0 is the initialization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
}

pub fn write_history(rows: &[HistoryRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,train_loss,valid_loss")?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(out, "{},{},{}", r.step, cell(r.train_loss), cell(r.valid_loss))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
    pub best_step: usize,
    pub best_valid: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

pub(crate) struct Workers(Option<rayon::ThreadPool>);

impl Workers {
    pub(crate) fn new(threads: usize) -> Result<Self, TrainError> {
        if threads <= 1 {
            return Ok(Self(None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map(|p| Self(Some(p)))
            .map_err(|e| TrainError::Threads(e.to_string()))
    }

    /// `f(0..n)` in index order.
    pub(crate) fn map<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.0 {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

/// Data loss and per-tensor gradient of one sample.
pub fn sample_gradient<R: Rng>(
    params: &ModelParams,
    sample: &Sample,
    dropout_rng: Option<&mut R>,
) -> Result<(f64, Vec<Vec<f32>>), ModelError> {
    let cfg = params.config();
    let mut tape = Tape::<f32>::new();
    let vars = params.register(&mut tape)?;
    let mv = ModelVars::bind(cfg, &vars)?;
    let out = model::forward(&mut tape, &mv, cfg, sample, dropout_rng)?;
    let l = model::data_loss(&mut tape, out.value, sample, cfg.objective)?;
    let mut g = tape.backward(l)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((tape.scalar(l) as f64, grads))
}

/// Mean data loss over `samples` without dropout.
pub fn mean_loss(params: &ModelParams, samples: &[Sample], threads: usize) -> Result<f64, TrainError> {
    mean_loss_with(params, samples, &Workers::new(threads)?)
}

fn mean_loss_with(params: &ModelParams, samples: &[Sample], workers: &Workers) -> Result<f64, TrainError> {
    let cfg = params.config();
    let losses = workers.map(samples.len(), |i| -> Result<f64, ModelError> {
        let mut tape = Tape::<f32>::new();
        let vars = params.register(&mut tape)?;
        let mv = ModelVars::bind(cfg, &vars)?;
        let out = model::forward::<f32, rand_chacha::ChaCha8Rng>(&mut tape, &mv, cfg, &samples[i], None)?;
        let l = model::data_loss(&mut tape, out.value, &samples[i], cfg.objective)?;
        Ok(tape.scalar(l) as f64)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Batch loss parts and the mean gradient including the penalties.
fn batch_gradient(
    params: &ModelParams,
    train: &[Sample],
    batch: &[usize],
    step: usize,
    seed: u64,
    workers: &Workers,
) -> Result<(LossParts, Vec<Vec<f64>>), TrainError> {
    let per_sample = workers.map(batch.len(), |k| {
        let idx = batch[k];
        let mut rng = stream_rng(seed, Stream::Dropout, [step as u64, idx as u64, 0]);
        sample_gradient(params, &train[idx], Some(&mut rng))
    });
    let mut sum: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut data = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        data += l;
        for (acc, g) in sum.iter_mut().zip(&g) {
            acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x as f64);
        }
    }
    let n = batch.len() as f64;
    let mut reg: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    params.add_regularization_grad(&mut reg);
    for (acc, r) in sum.iter_mut().zip(&reg) {
        acc.iter_mut().zip(r).for_each(|(a, &x)| *a = *a / n + x as f64);
    }
    let (l1, l2) = params.regularization();
    Ok((LossParts { data: data / n, l1, l2 }, sum))
}

/// Endless sequence of shuffled mini-batches, reshuffled every epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            seed,
            size: size.min(n),
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = stream_rng(self.seed, Stream::Shuffle, [self.epoch, 0, 0]);
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let end = (self.pos + self.size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

pub fn train(params: ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_observed(params, &data.train, &data.valid, cfg, |_| {})
}

/// Like [`train`], calling `observe` after every history row.
pub fn train_observed(
    mut params: ModelParams,
    train: &[Sample],
    valid: &[Sample],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    params.config().validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let workers = Workers::new(cfg.threads)?;
    let mut adam = Adam::new(cfg, &params);
    let mut batches = Batches::new(train.len(), cfg.batch_size, cfg.seed);
    let mut history = Vec::new();

    let v0 = mean_loss_with(&params, valid, &workers)?;
    let row = HistoryRow { step: 0, train_loss: None, valid_loss: Some(v0) };
    observe(&row);
    history.push(row);
    let (mut best, mut best_step, mut best_valid) = (params.clone(), 0, v0);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let batch = batches.next_batch();
        let (parts, mut grads) = batch_gradient(&params, train, &batch, step, cfg.seed, &workers)?;
        if !parts.total().is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                batch,
                data: parts.data,
                l1: parts.l1,
                l2: parts.l2,
            });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut params, &grads);
        steps_run = step;

        let evaluate = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let valid_loss = if evaluate {
            Some(mean_loss_with(&params, valid, &workers)?)
        } else {
            None
        };
        let row = HistoryRow { step, train_loss: Some(parts.total()), valid_loss };
        observe(&row);
        history.push(row);
        if let Some(v) = valid_loss {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step, batch, data: v, l1: parts.l1, l2: parts.l2 });
            }
            if v < best_valid {
                best_valid = v;
                best_step = step;
                best = params.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_step,
        best_valid,
        steps_run,
        stopped_early,
    })
}

/// Candidate values for each searched hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub d_s: Vec<usize>,
    pub d_h: Vec<usize>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub dropout: Vec<f64>,
    pub window: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let rates = vec![0.1, 0.05, 0.01, 0.005, 0.001];
        Self {
            d_s: vec![16, 32, 64, 128],
            d_h: vec![16, 32, 64, 128],
            l1: rates.clone(),
            l2: rates,
            dropout: vec![0.0, 0.1, 0.2, 0.4],
            window: vec![3, 5, 7, 10],
        }
    }
}

impl SearchSpace {
    /// Draws every dimension uniformly, starting from `base`.
    pub fn sample(&self, base: &ModelConfig, rng: &mut impl Rng) -> ModelConfig {
        fn pick<T: Copy>(v: &[T], fallback: T, rng: &mut impl Rng) -> T {
            if v.is_empty() {
                fallback
            } else {
                v[rng.random_range(0..v.len())]
            }
        }
        ModelConfig {
            d_s: pick(&self.d_s, base.d_s, rng),
            d_h: pick(&self.d_h, base.d_h, rng),
            l1: pick(&self.l1, base.l1, rng),
            l2: pick(&self.l2, base.l2, rng),
            dropout: pick(&self.dropout, base.dropout, rng),
            window: pick(&self.window, base.window, rng),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchEntry {
    pub trial: usize,
    pub config: ModelConfig,
    pub valid_loss: f64,
    pub best_step: usize,
}

/// Trains `budget` sampled configurations and ranks them by validation
/// loss, ties by trial order. Every trial uses the same training seed, so
/// identical draws give identical losses. `data_for` builds the dataset for
/// a look-back window.
pub fn random_search(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    mut data_for: impl FnMut(usize) -> Result<Dataset, TrainError>,
) -> Result<Vec<SearchEntry>, TrainError> {
    if budget == 0 {
        return Err(TrainError::Config("search budget must be at least 1".into()));
    }
    let mut rng = seeded(seed, Stream::Search);
    let mut board = Vec::with_capacity(budget);
    for trial in 0..budget {
        let config = space.sample(base, &mut rng);
        let valid_loss_and_step = evaluate_config(&config, train_cfg, &mut data_for)?;
        board.push(SearchEntry {
            trial,
            config,
            valid_loss: valid_loss_and_step.0,
            best_step: valid_loss_and_step.1,
        });
    }
    board.sort_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.trial.cmp(&b.trial)));
    Ok(board)
}

/// Best validation loss and its step for one configuration.
pub fn evaluate_config(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    data_for: &mut impl FnMut(usize) -> Result<Dataset, TrainError>,
) -> Result<(f64, usize), TrainError> {
    let data = data_for(config.window)?;
    let params = ModelParams::init(config, &mut seeded(train_cfg.seed, Stream::Init))?;
    let out = train(params, &data, train_cfg)?;
    Ok((out.best_valid, out.best_step))
}
