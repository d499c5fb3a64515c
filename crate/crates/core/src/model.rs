//! Full models: the interrelation network and its two ablations, the shared
//! output head, and the training loss.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{self, AttentionTrace, AttnContext, AttnVars, CellError, MsinVars};
use crate::data::Sample;
use crate::gradcheck::{grad_check, GradCheckError, GradCheckReport};
use crate::lstm::{LstmState, LstmVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::text::{self, EmbeddingTable, EncoderVars, PoolDivisor, TextError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: {msg}")]
    Layout { name: String, msg: String },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Context vector enters every gate.
    Msin,
    /// Text aligned once with the final series state.
    LstmWo,
    /// Series and text branches fused only at the head.
    LstmPar,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Msin, Variant::LstmWo, Variant::LstmPar];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Msin => "msin",
            Variant::LstmWo => "lstm_wo",
            Variant::LstmPar => "lstm_par",
        }
    }

    pub fn has_relevance(self) -> bool {
        self != Variant::LstmPar
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (msin, lstm_wo, lstm_par)"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Squared error on the normalized next value.
    #[default]
    NextValue,
    /// Cross-entropy on the up/down label; the output is a logit.
    Movement,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "next_value" => Ok(Objective::NextValue),
            "movement" => Ok(Objective::Movement),
            _ => Err(format!("unknown objective {s:?} (next_value, movement)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Series hidden width.
    pub d_s: usize,
    /// Per-direction text hidden width.
    pub d_h: usize,
    /// Word embedding width.
    pub d_w: usize,
    /// Attention inner width; `None` means `d_s`.
    pub d_a: Option<usize>,
    pub vocab_size: usize,
    /// Look-back window `m`.
    pub window: usize,
    /// Series feature count `D`.
    pub series_dim: usize,
    /// Tokens per document `K`.
    pub max_len: usize,
    pub daily_doc_cap: usize,
    pub dropout: f64,
    pub l1: f64,
    pub l2: f64,
    pub objective: Objective,
    pub pool_divisor: PoolDivisor,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Msin,
            d_s: 32,
            d_h: 32,
            d_w: 50,
            d_a: None,
            vocab_size: 5000,
            window: 5,
            series_dim: 1,
            max_len: 16,
            daily_doc_cap: 25,
            dropout: 0.0,
            l1: 0.0,
            l2: 0.0,
            objective: Objective::NextValue,
            pool_divisor: PoolDivisor::ActualLen,
        }
    }
}

impl ModelConfig {
    /// The configuration used for gradient checking.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            d_s: 4,
            d_h: 3,
            d_w: 5,
            d_a: Some(4),
            vocab_size: 20,
            window: 3,
            series_dim: 1,
            max_len: 4,
            daily_doc_cap: 3,
            ..Self::default()
        }
    }

    pub fn attn_width(&self) -> usize {
        self.d_a.unwrap_or(self.d_s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.window < 1 {
            return bad("window must be at least 1");
        }
        if self.daily_doc_cap < 1 {
            return bad("daily_doc_cap must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if [self.d_s, self.d_h, self.d_w, self.attn_width(), self.series_dim, self.max_len].contains(&0) {
            return bad("all widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0 && self.l1.is_finite() && self.l2.is_finite()) {
            return bad("l1 and l2 must be non-negative");
        }
        Ok(())
    }

    /// Width of the feature vector fed to the head.
    pub fn head_width(&self) -> usize {
        match self.variant {
            Variant::LstmPar => 2 * self.d_s,
            _ => self.d_s + 2 * self.d_h,
        }
    }
}

/// Role of a parameter for regularization and initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `uniform(±1/√fan_in)` with fan-in the last dimension.
    Fan,
    Zero,
    /// Zero except the forget block of a stacked gate bias.
    ForgetOne(usize),
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], kind: ParamKind, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        kind,
        init,
    }
}

fn lstm_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    use ParamKind::*;
    out.push(spec(format!("{prefix}.w_x"), &[4 * hidden, input], Weight, Init::Fan));
    out.push(spec(format!("{prefix}.w_h"), &[4 * hidden, hidden], Weight, Init::Fan));
    out.push(spec(format!("{prefix}.bias"), &[4 * hidden], Bias, Init::ForgetOne(hidden)));
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    use ParamKind::*;
    let (da, ds, dv) = (cfg.attn_width(), cfg.d_s, 2 * cfg.d_h);
    out.push(spec(format!("{prefix}.w_a"), &[da, ds], Weight, Init::Fan));
    out.push(spec(format!("{prefix}.u_a"), &[da, dv], Weight, Init::Fan));
    out.push(spec(format!("{prefix}.b_a"), &[da], Bias, Init::Zero));
    out.push(spec(format!("{prefix}.v_a"), &[da], Weight, Init::Fan));
}

/// Ordered parameter list of a configuration. Names are unique.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use ParamKind::*;
    let (ds, dh, dv) = (cfg.d_s, cfg.d_h, 2 * cfg.d_h);
    let mut out = vec![spec("embedding", &[cfg.vocab_size, cfg.d_w], Embedding, Init::Embedding)];
    lstm_specs(&mut out, "encoder.fwd", cfg.d_w, dh);
    lstm_specs(&mut out, "encoder.bwd", cfg.d_w, dh);
    out.push(spec("encoder.pool.w", &[dv, dv], Weight, Init::Fan));
    out.push(spec("encoder.pool.b", &[dv], Bias, Init::Zero));
    out.push(spec("encoder.pool.u", &[dv], Weight, Init::Fan));
    match cfg.variant {
        Variant::Msin => {
            out.push(spec("cell.u_c0", &[ds, dv], Weight, Init::Fan));
            out.push(spec("cell.b_c0", &[ds], Bias, Init::Zero));
            out.push(spec("cell.u_h0", &[ds, dv], Weight, Init::Fan));
            out.push(spec("cell.b_h0", &[ds], Bias, Init::Zero));
            attn_specs(&mut out, "cell.attn", cfg);
            lstm_specs(&mut out, "cell.gates", cfg.series_dim, ds);
            out.push(spec("cell.u_v", &[4 * ds, dv], Weight, Init::Fan));
        }
        Variant::LstmWo => {
            lstm_specs(&mut out, "series", cfg.series_dim, ds);
            attn_specs(&mut out, "attn", cfg);
        }
        Variant::LstmPar => {
            lstm_specs(&mut out, "series", cfg.series_dim, ds);
            out.push(spec("text.w", &[ds, dv], Weight, Init::Fan));
            out.push(spec("text.b", &[ds], Bias, Init::Zero));
        }
    }
    out.push(spec("head.w", &[1, cfg.head_width()], Weight, Init::Fan));
    out.push(spec("head.b", &[1], Bias, Init::Zero));
    out
}

/// Named parameter tensors of one model, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(config);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = match s.init {
                Init::Embedding => EmbeddingTable::random(s.shape[0], s.shape[1], rng)?.into_tensor(),
                Init::Fan => {
                    let bound = 1.0 / (*s.shape.last().expect("non-empty shape") as f32).sqrt();
                    Tensor::from_fn(s.shape.clone(), |_| rng.random_range(-bound..=bound))?
                }
                Init::Zero => Tensor::zeros(s.shape.clone())?,
                Init::ForgetOne(h) => Tensor::from_fn(s.shape.clone(), |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 })?,
            };
            tensors.push(t.with_name(s.name.clone()));
        }
        Ok(Self {
            config: config.clone(),
            specs,
            tensors,
        })
    }

    /// Validates `tensors` against the layout of `config`; order may differ.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(config);
        let mut slots: Vec<Option<Tensor>> = vec![None; specs.len()];
        for t in tensors {
            let name = t.name().unwrap_or("").to_owned();
            let Some(i) = specs.iter().position(|s| s.name == name) else {
                return Err(ModelError::Layout {
                    name,
                    msg: "unknown tensor".into(),
                });
            };
            if t.shape() != specs[i].shape.as_slice() {
                return Err(ModelError::Layout {
                    name,
                    msg: format!("shape {:?}, expected {:?}", t.shape(), specs[i].shape),
                });
            }
            if slots[i].replace(t).is_some() {
                return Err(ModelError::Layout {
                    name,
                    msg: "duplicate tensor".into(),
                });
            }
        }
        let tensors = slots
            .into_iter()
            .zip(&specs)
            .map(|(t, s)| {
                t.ok_or_else(|| ModelError::Layout {
                    name: s.name.clone(),
                    msg: "missing tensor".into(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config: config.clone(),
            specs,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf borrowing its storage.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p, f32>) -> Result<Vec<Var>, TensorError> {
        self.tensors.iter().map(|t| tape.param(t.data(), t.shape())).collect()
    }

    /// `l1·Σ|θ|` and `l2·Σθ²` over weight-kind tensors.
    pub fn regularization(&self) -> (f64, f64) {
        let (mut a, mut s) = (0.0f64, 0.0f64);
        for (t, sp) in self.tensors.iter().zip(&self.specs) {
            if sp.kind == ParamKind::Weight {
                for &x in t.data() {
                    a += (x as f64).abs();
                    s += (x as f64) * (x as f64);
                }
            }
        }
        (self.config.l1 * a, self.config.l2 * s)
    }

    /// Adds the gradient of [`Self::regularization`] to `grads` (one buffer
    /// per tensor).
    pub fn add_regularization_grad(&self, grads: &mut [Vec<f32>]) {
        let (l1, l2) = (self.config.l1 as f32, self.config.l2 as f32);
        if l1 == 0.0 && l2 == 0.0 {
            return;
        }
        for ((t, sp), g) in self.tensors.iter().zip(&self.specs).zip(grads) {
            if sp.kind != ParamKind::Weight {
                continue;
            }
            for (gi, &x) in g.iter_mut().zip(t.data()) {
                let sign = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *gi += l1 * sign + 2.0 * l2 * x;
            }
        }
    }
}

enum Body {
    Msin(MsinVars),
    LstmWo { series: LstmVars, attn: AttnVars },
    LstmPar { series: LstmVars, text_w: Var, text_b: Var },
}

/// Tape handles of a registered model.
pub struct ModelVars {
    embedding: Var,
    encoder: EncoderVars,
    body: Body,
    head_w: Var,
    head_b: Var,
}

impl ModelVars {
    /// `vars` must follow the layout order of `cfg`.
    pub fn bind(cfg: &ModelConfig, vars: &[Var]) -> Result<Self, ModelError> {
        let specs = layout(cfg);
        if specs.len() != vars.len() {
            return Err(ModelError::Config(format!("expected {} parameters, got {}", specs.len(), vars.len())));
        }
        let v = |name: &str| vars[specs.iter().position(|s| s.name == name).expect("name in layout")];
        let lstm = |p: &str| LstmVars {
            w_x: v(&format!("{p}.w_x")),
            w_h: v(&format!("{p}.w_h")),
            bias: v(&format!("{p}.bias")),
        };
        let attn = |p: &str| AttnVars {
            w_a: v(&format!("{p}.w_a")),
            u_a: v(&format!("{p}.u_a")),
            b_a: v(&format!("{p}.b_a")),
            v_a: v(&format!("{p}.v_a")),
        };
        let body = match cfg.variant {
            Variant::Msin => Body::Msin(MsinVars {
                u_c0: v("cell.u_c0"),
                b_c0: v("cell.b_c0"),
                u_h0: v("cell.u_h0"),
                b_h0: v("cell.b_h0"),
                attn: attn("cell.attn"),
                gates: lstm("cell.gates"),
                u_v: v("cell.u_v"),
            }),
            Variant::LstmWo => Body::LstmWo {
                series: lstm("series"),
                attn: attn("attn"),
            },
            Variant::LstmPar => Body::LstmPar {
                series: lstm("series"),
                text_w: v("text.w"),
                text_b: v("text.b"),
            },
        };
        Ok(Self {
            embedding: v("embedding"),
            encoder: EncoderVars {
                fwd: lstm("encoder.fwd"),
                bwd: lstm("encoder.bwd"),
                pool_w: v("encoder.pool.w"),
                pool_b: v("encoder.pool.b"),
                pool_u: v("encoder.pool.u"),
            },
            body,
            head_w: v("head.w"),
            head_b: v("head.b"),
        })
    }
}

/// Forward pass results as tape handles.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1 × 1]` prediction (a logit under the movement objective).
    pub value: Var,
    /// Final document attention, `[1 × n]`; absent for `lstm_par`.
    pub relevance: Option<Var>,
    /// Per-step masses (`msin` only).
    pub masses: Vec<Var>,
    /// Series hidden states.
    pub hiddens: Vec<Var>,
    /// Document vectors `[n × 2d_h]`.
    pub docs: Var,
    /// Word attention inside each document, `[n × K']`.
    pub word_attention: Var,
}

/// Runs a model on one sample. Dropout is applied to the head input only
/// when `dropout_rng` is given and the rate is positive.
pub fn forward<T: Scalar, R: Rng>(
    tape: &mut Tape<'_, T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    sample: &Sample,
    dropout_rng: Option<&mut R>,
) -> Result<ForwardOutput, ModelError> {
    let reps = text::encode_documents(tape, &sample.docs, vars.embedding, &vars.encoder, cfg.pool_divisor)?;
    let docs = reps.vectors;
    let mask = sample.docs.mask();
    let xs = cell::window_inputs(tape, &sample.window)?;
    let (features, relevance, masses, hiddens) = match &vars.body {
        Body::Msin(mv) => {
            let out = cell::run_sequence(tape, &xs, docs, &mask, mv)?;
            let p = out.final_mass();
            let summary = tape.weighted_sum_rows(p, docs)?;
            let h = *out.hiddens.last().expect("non-empty window");
            let z = tape.concat(&[h, summary], 1)?;
            (z, Some(p), out.masses, out.hiddens)
        }
        Body::LstmWo { series, attn } => {
            let init = LstmState::zeros(tape, 1, cfg.d_s)?;
            let hs = cell::run_plain_lstm(tape, &xs, init, *series)?;
            let h = *hs.last().expect("non-empty window");
            let ctx = AttnContext::new(tape, docs, &mask, attn)?;
            let p = cell::attend(tape, h, &ctx, attn)?;
            let summary = tape.weighted_sum_rows(p, docs)?;
            let z = tape.concat(&[h, summary], 1)?;
            (z, Some(p), vec![p], hs)
        }
        Body::LstmPar { series, text_w, text_b } => {
            let init = LstmState::zeros(tape, 1, cfg.d_s)?;
            let hs = cell::run_plain_lstm(tape, &xs, init, *series)?;
            let h = *hs.last().expect("non-empty window");
            let mean = cell::mean_documents(tape, docs, &mask)?;
            let t = tape.matmul_nt(mean, *text_w)?;
            let t = tape.add_row(t, *text_b)?;
            let t = tape.tanh(t);
            let z = tape.concat(&[h, t], 1)?;
            (z, None, Vec::new(), hs)
        }
    };
    let features = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let keep = 1.0 - cfg.dropout;
            let width = tape.shape(features)[1];
            let m = (0..width)
                .map(|_| if rng.random::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() })
                .collect();
            let m = tape.constant(m, &[1, width])?;
            tape.hadamard(features, m)?
        }
        _ => features,
    };
    let value = tape.matmul_nt(features, vars.head_w)?;
    let value = tape.add_row(value, vars.head_b)?;
    Ok(ForwardOutput {
        value,
        relevance,
        masses,
        hiddens,
        docs,
        word_attention: reps.word_attention,
    })
}

/// Data term of the loss for one sample.
pub fn data_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    value: Var,
    sample: &Sample,
    objective: Objective,
) -> Result<Var, ModelError> {
    Ok(match objective {
        Objective::NextValue => {
            let target = tape.constant(vec![T::of_f32(sample.window.target)], &[1, 1])?;
            let d = tape.sub(value, target)?;
            let sq = tape.hadamard(d, d)?;
            tape.sum_all(sq)
        }
        Objective::Movement => {
            let label = if sample.window.movement_up() { 1.0 } else { 0.0 };
            tape.bce_with_logits(value, label)?
        }
    })
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub data: f64,
    pub l1: f64,
    pub l2: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.data + self.l1 + self.l2
    }
}

/// Data loss plus both penalties, entirely on the tape. `vars` must follow
/// the layout order of `cfg`.
pub fn loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    value: Var,
    sample: &Sample,
    cfg: &ModelConfig,
    vars: &[Var],
) -> Result<(Var, LossParts), ModelError> {
    let data = data_loss(tape, value, sample, cfg.objective)?;
    let mut parts = LossParts {
        data: tape.scalar(data).as_f64(),
        ..Default::default()
    };
    let mut total = data;
    for (s, &v) in layout(cfg).iter().zip(vars) {
        if s.kind != ParamKind::Weight {
            continue;
        }
        if cfg.l1 > 0.0 {
            let a = tape.abs(v);
            let a = tape.sum_all(a);
            let a = tape.scale(a, cfg.l1);
            parts.l1 += tape.scalar(a).as_f64();
            total = tape.add(total, a)?;
        }
        if cfg.l2 > 0.0 {
            let q = tape.hadamard(v, v)?;
            let q = tape.sum_all(q);
            let q = tape.scale(q, cfg.l2);
            parts.l2 += tape.scalar(q).as_f64();
            total = tape.add(total, q)?;
        }
    }
    Ok((total, parts))
}

/// Read-off prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Normalized next value, or a logit under the movement objective.
    pub value: f64,
    pub up: bool,
    /// `p_m`, absent for `lstm_par`.
    pub relevance: Option<Vec<f64>>,
}

/// Up/down decision implied by a raw model output.
pub fn predicted_up(value: f64, sample: &Sample, objective: Objective) -> bool {
    match objective {
        Objective::NextValue => value >= sample.window.prev as f64,
        Objective::Movement => value >= 0.0,
    }
}

/// Deterministic inference (no dropout).
pub fn predict(params: &ModelParams, sample: &Sample) -> Result<(Prediction, AttentionTrace), ModelError> {
    let cfg = params.config();
    let mut tape = Tape::<f32>::new();
    let vars = params.register(&mut tape)?;
    let mv = ModelVars::bind(cfg, &vars)?;
    let out = forward::<f32, rand_chacha::ChaCha8Rng>(&mut tape, &mv, cfg, sample, None)?;
    let value = tape.scalar(out.value) as f64;
    let relevance = out
        .relevance
        .map(|p| tape.value(p).iter().map(|&x| x as f64).collect());
    let trace = AttentionTrace::from_tape(&tape, &out.masses);
    Ok((
        Prediction {
            value,
            up: predicted_up(value, sample, cfg.objective),
            relevance,
        },
        trace,
    ))
}

/// Failure of [`model_grad_check`] to run at all.
#[derive(Debug, Error)]
pub enum ModelCheckError {
    #[error("gradient check needs dropout 0, got {0}")]
    Dropout(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Check(#[from] GradCheckError),
}

/// Check point used when none is requested. Every entry of the check passes
/// with margin at this point for all variants of the tiny configuration.
pub const GRAD_CHECK_SEED: u64 = 15;

/// Central difference step of the model gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Gradient check of a whole model on a random tiny sample. Every parameter,
/// biases included, is redrawn at random so no entry sits at a special point.
///
/// At `h = 1e-5` the finite-difference noise is about `1e-11` absolute, so
/// entries whose true gradient is below roughly `1e-7` can exceed a relative
/// tolerance of `1e-4` at some random points even with a correct tape.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport, ModelCheckError> {
    if cfg.dropout > 0.0 {
        return Err(ModelCheckError::Dropout(cfg.dropout));
    }
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg, &mut rng)?;
    for t in params.tensors_mut() {
        let skip = if t.name() == Some("embedding") { t.shape()[1] } else { 0 };
        let bound = if t.shape().len() == 1 { 0.5 } else { 1.0 / (t.shape()[1] as f32).sqrt() };
        for x in &mut t.data_mut()[skip..] {
            *x = rng.random_range(-bound..bound);
        }
    }
    let sample = random_sample(cfg, cfg.daily_doc_cap.min(3), &mut rng);
    let failure = std::cell::RefCell::new(None);
    let report = grad_check(
        |tape, vars| {
            let run = |tape: &mut Tape<'_, f64>| -> Result<Var, ModelError> {
                let mv = ModelVars::bind(cfg, vars)?;
                let out = forward::<f64, rand_chacha::ChaCha8Rng>(tape, &mv, cfg, &sample, None)?;
                let (l, _) = loss(tape, out.value, &sample, cfg, vars)?;
                // fixed linear probes on intermediate outputs keep every
                // gradient well above the finite-difference noise floor
                let mut total = l;
                let probes: Vec<Var> = out.relevance.into_iter().chain([out.docs, out.word_attention]).collect();
                for (k, v) in probes.into_iter().enumerate() {
                    let shape = tape.shape(v).to_vec();
                    let n = tape.value(v).len();
                    let w = (0..n).map(|i| ((i * 7 + k * 3) as f64 * 0.61).sin()).collect();
                    let w = tape.constant(w, &shape)?;
                    let p = tape.hadamard(v, w)?;
                    let p = tape.sum_all(p);
                    total = tape.add(total, p)?;
                }
                Ok(total)
            };
            run(tape).map_err(|e| match e {
                ModelError::Tensor(t) | ModelError::Cell(CellError::Tensor(t)) | ModelError::Text(TextError::Tensor(t)) => t,
                other => {
                    *failure.borrow_mut() = Some(other);
                    TensorError::EmptyShape(vec![])
                }
            })
        },
        params.tensors(),
        GRAD_CHECK_STEP,
    );
    match (report, failure.into_inner()) {
        (_, Some(e)) => Err(e.into()),
        (r, None) => Ok(r?),
    }
}

/// A random unlabeled sample with `n` documents matching `cfg`.
pub fn random_sample(cfg: &ModelConfig, n: usize, rng: &mut impl Rng) -> Sample {
    use crate::data::{DocumentBatch, SeriesWindow};
    let docs: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..rng.random_range(1..=cfg.max_len)).map(|_| rng.random_range(2..cfg.vocab_size.max(3))).collect())
        .collect();
    let values: Vec<f32> = (0..cfg.window * cfg.series_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = rng.random_range(-1.0..1.0);
    Sample {
        window: SeriesWindow {
            date: chrono::NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            prev: values[values.len() - cfg.series_dim],
            target,
            target_raw: target as f64,
            prev_raw: values[values.len() - cfg.series_dim] as f64,
            values,
            dim: cfg.series_dim,
        },
        docs: DocumentBatch::from_ids(&docs, cfg.max_len),
    }
}
