//! Multi-step interrelation cell: an LSTM over the series window whose gates
//! also read a context vector built by attending over the day's document
//! vectors at every step.
//!
//! Per step the order is attend, update context, gates, cell, hidden.

use thiserror::Error;

use crate::data::SeriesWindow;
use crate::lstm::{lstm_step, LstmState, LstmVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, TensorError};

/// Attention logits are clamped to this magnitude before normalization.
pub const LOGIT_CLAMP: f64 = 50.0;

#[derive(Debug, Error)]
pub enum CellError {
    #[error("day has no documents to attend over")]
    EmptyDay,
    #[error("series window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Document attention parameters: `W_a [d_a × d_s]`, `U_a [d_a × 2d_h]`,
/// `b_a [d_a]`, `v_a [d_a]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_a: Var,
    pub u_a: Var,
    pub b_a: Var,
    pub v_a: Var,
}

/// Tape handles of the cell parameters.
#[derive(Clone, Copy, Debug)]
pub struct MsinVars {
    /// `[d_s × 2d_h]`
    pub u_c0: Var,
    pub b_c0: Var,
    pub u_h0: Var,
    pub b_h0: Var,
    pub attn: AttnVars,
    /// Series and recurrent gate weights, stacked as in [`crate::lstm`].
    pub gates: LstmVars,
    /// `[4d_s × 2d_h]` context-to-gate weights.
    pub u_v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MsinState {
    /// `[1 × d_s]`
    pub c: Var,
    /// `[1 × d_s]`
    pub h: Var,
    /// `[1 × 2d_h]`
    pub v: Var,
    /// `[1 × n]`; unset before the first step.
    pub p: Option<Var>,
}

/// Day documents prepared for repeated attention: `docs` is `[n × 2d_h]`
/// and `projected` caches `docs · U_aᵀ`.
#[derive(Clone, Debug)]
pub struct AttnContext {
    pub docs: Var,
    pub projected: Var,
    pub mask: Vec<bool>,
}

impl AttnContext {
    pub fn new<T: Scalar>(tape: &mut Tape<'_, T>, docs: Var, mask: &[bool], attn: &AttnVars) -> Result<Self, CellError> {
        let n = tape.shape(docs)[0];
        if n == 0 || mask.len() != n {
            return Err(CellError::EmptyDay);
        }
        let projected = tape.matmul_nt(docs, attn.u_a)?;
        Ok(Self {
            docs,
            projected,
            mask: mask.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Mean of the unmasked document rows, `[1 × 2d_h]`.
pub fn mean_documents<T: Scalar>(tape: &mut Tape<'_, T>, docs: Var, mask: &[bool]) -> Result<Var, CellError> {
    let valid = mask.iter().filter(|&&k| k).count();
    if valid == 0 {
        return Err(CellError::EmptyDay);
    }
    let inv = T::one() / T::of(valid as f64);
    let w = mask.iter().map(|&k| if k { inv } else { T::zero() }).collect();
    let w = tape.constant(w, &[1, mask.len()])?;
    Ok(tape.weighted_sum_rows(w, docs)?)
}

/// `c₀ = tanh(U_c0·s̄ + b_c0)`, `h₀ = tanh(U_h0·s̄ + b_h0)`, `v₀ = 0`.
pub fn init_states<T: Scalar>(
    tape: &mut Tape<'_, T>,
    docs: Var,
    mask: &[bool],
    vars: &MsinVars,
) -> Result<MsinState, CellError> {
    let mean = mean_documents(tape, docs, mask)?;
    let c = tape.matmul_nt(mean, vars.u_c0)?;
    let c = tape.add_row(c, vars.b_c0)?;
    let c = tape.tanh(c);
    let h = tape.matmul_nt(mean, vars.u_h0)?;
    let h = tape.add_row(h, vars.b_h0)?;
    let h = tape.tanh(h);
    let width = tape.shape(docs)[1];
    let v = tape.zeros(&[1, width])?;
    Ok(MsinState { c, h, v, p: None })
}

/// Attention mass over documents given the previous hidden state, `[1 × n]`.
pub fn attend<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h_prev: Var,
    ctx: &AttnContext,
    attn: &AttnVars,
) -> Result<Var, CellError> {
    let hw = tape.matmul_nt(h_prev, attn.w_a)?;
    let hw = tape.add_row(hw, attn.b_a)?;
    let a = tape.add_row(ctx.projected, hw)?;
    let a = tape.tanh(a);
    let logits = tape.matmul_nt(a, attn.v_a)?;
    let logits = tape.reshape(logits, &[1, ctx.len()])?;
    let logits = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    Ok(tape.masked_softmax(logits, &ctx.mask)?)
}

/// `v = ½(Σ_j p_j s_j + v_prev)`.
pub fn update_context<T: Scalar>(tape: &mut Tape<'_, T>, p: Var, docs: Var, v_prev: Var) -> Result<Var, CellError> {
    let summary = tape.weighted_sum_rows(p, docs)?;
    let sum = tape.add(summary, v_prev)?;
    Ok(tape.scale(sum, 0.5))
}

/// One step for the series input `x` (`[1 × D]`).
pub fn cell_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    state: MsinState,
    ctx: &AttnContext,
    vars: &MsinVars,
) -> Result<MsinState, CellError> {
    let p = attend(tape, state.h, ctx, &vars.attn)?;
    let v = update_context(tape, p, ctx.docs, state.v)?;
    let extra = tape.matmul_nt(v, vars.u_v)?;
    let next = lstm_step(
        tape,
        x,
        LstmState {
            c: state.c,
            h: state.h,
        },
        vars.gates,
        Some(extra),
    )?;
    Ok(MsinState {
        c: next.c,
        h: next.h,
        v,
        p: Some(p),
    })
}

/// Everything a window run produces, as tape handles.
#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// `m` hidden states, each `[1 × d_s]`.
    pub hiddens: Vec<Var>,
    /// `m` context vectors, each `[1 × 2d_h]`.
    pub contexts: Vec<Var>,
    /// `p₁ … p_m`, each `[1 × n]`.
    pub masses: Vec<Var>,
    pub last: MsinState,
}

impl SequenceOutput {
    pub fn final_mass(&self) -> Var {
        *self.masses.last().expect("non-empty window")
    }
}

/// Attention masses of every step, read off a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub per_step: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn from_tape<T: Scalar>(tape: &Tape<'_, T>, masses: &[Var]) -> Self {
        Self {
            per_step: masses
                .iter()
                .map(|&p| tape.value(p).iter().map(|x| x.as_f64()).collect())
                .collect(),
        }
    }

    /// `p_m`.
    pub fn final_mass(&self) -> &[f64] {
        self.per_step.last().map_or(&[], Vec::as_slice)
    }
}

/// One `[1 × D]` constant per window step, oldest first.
pub fn window_inputs<T: Scalar>(tape: &mut Tape<'_, T>, window: &SeriesWindow) -> Result<Vec<Var>, TensorError> {
    (0..window.len())
        .map(|s| {
            let row = window.step(s).iter().map(|&x| T::of_f32(x)).collect();
            tape.constant(row, &[1, window.dim])
        })
        .collect()
}

/// Initializes from the documents and steps through `xs`.
pub fn run_sequence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    xs: &[Var],
    docs: Var,
    mask: &[bool],
    vars: &MsinVars,
) -> Result<SequenceOutput, CellError> {
    if xs.is_empty() {
        return Err(CellError::EmptyWindow);
    }
    let ctx = AttnContext::new(tape, docs, mask, &vars.attn)?;
    let mut state = init_states(tape, docs, mask, vars)?;
    let mut out = SequenceOutput {
        hiddens: Vec::with_capacity(xs.len()),
        contexts: Vec::with_capacity(xs.len()),
        masses: Vec::with_capacity(xs.len()),
        last: state,
    };
    for &x in xs {
        state = cell_step(tape, x, state, &ctx, vars)?;
        out.hiddens.push(state.h);
        out.contexts.push(state.v);
        out.masses.push(state.p.expect("set by cell_step"));
    }
    out.last = state;
    Ok(out)
}

/// Plain LSTM over `xs` from `init`, returning every hidden state.
pub fn run_plain_lstm<T: Scalar>(
    tape: &mut Tape<'_, T>,
    xs: &[Var],
    init: LstmState,
    gates: LstmVars,
) -> Result<Vec<Var>, CellError> {
    if xs.is_empty() {
        return Err(CellError::EmptyWindow);
    }
    let mut state = init;
    let mut hs = Vec::with_capacity(xs.len());
    for &x in xs {
        state = lstm_step(tape, x, state, gates, None)?;
        hs.push(state.h);
    }
    Ok(hs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Dims {
        ds: usize,
        dv: usize,
        da: usize,
        d: usize,
    }

    const DIMS: Dims = Dims { ds: 3, dv: 4, da: 2, d: 2 };

    /// u_c0, b_c0, u_h0, b_h0, w_a, u_a, b_a, v_a, w_x, w_h, bias, u_v
    fn shapes(k: &Dims) -> Vec<Vec<usize>> {
        vec![
            vec![k.ds, k.dv],
            vec![k.ds],
            vec![k.ds, k.dv],
            vec![k.ds],
            vec![k.da, k.ds],
            vec![k.da, k.dv],
            vec![k.da],
            vec![k.da],
            vec![4 * k.ds, k.d],
            vec![4 * k.ds, k.ds],
            vec![4 * k.ds],
            vec![4 * k.ds, k.dv],
        ]
    }

    fn random(k: &Dims, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shapes(k)
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.random_range(-0.9..0.9)).collect())
            .collect()
    }

    fn register<'a>(tape: &mut Tape<'a, f64>, k: &Dims, vals: &'a [Vec<f64>]) -> MsinVars {
        let v: Vec<Var> = vals.iter().zip(shapes(k)).map(|(d, s)| tape.param(d, &s).unwrap()).collect();
        MsinVars {
            u_c0: v[0],
            b_c0: v[1],
            u_h0: v[2],
            b_h0: v[3],
            attn: AttnVars {
                w_a: v[4],
                u_a: v[5],
                b_a: v[6],
                v_a: v[7],
            },
            gates: LstmVars {
                w_x: v[8],
                w_h: v[9],
                bias: v[10],
            },
            u_v: v[11],
        }
    }

    fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
        let cols = x.len();
        m.chunks(cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn zero_params_give_zero_initial_states() {
        let vals: Vec<Vec<f64>> = random(&DIMS, 1).into_iter().map(|v| vec![0.0; v.len()]).collect();
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let docs = tape.constant(vec![0.5, -1.0, 2.0, 0.3, 0.1, 0.2, 0.3, 0.4], &[2, 4]).unwrap();
        let s = init_states(&mut tape, docs, &[true, true], &vars).unwrap();
        assert!(tape.value(s.c).iter().chain(tape.value(s.h)).all(|&x| x == 0.0));
        assert!(tape.value(s.v).iter().all(|&x| x == 0.0));
        assert!(s.p.is_none());
    }

    #[test]
    fn single_doc_mean_is_exact_and_two_doc_init_matches_formula() {
        let vals = random(&DIMS, 2);
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let s1 = [0.3, -0.7, 0.11, 0.9];
        let one = tape.constant(s1.to_vec(), &[1, 4]).unwrap();
        let m = mean_documents(&mut tape, one, &[true]).unwrap();
        assert_eq!(tape.value(m), &s1);

        let s2 = [-0.2, 0.4, 0.6, -0.5];
        let two = tape.constant([s1, s2].concat(), &[2, 4]).unwrap();
        let st = init_states(&mut tape, two, &[true, true], &vars).unwrap();
        let mean: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| (a + b) / 2.0).collect();
        let c0: Vec<f64> = matvec(&vals[0], &mean).iter().zip(&vals[1]).map(|(a, b)| (a + b).tanh()).collect();
        let h0: Vec<f64> = matvec(&vals[2], &mean).iter().zip(&vals[3]).map(|(a, b)| (a + b).tanh()).collect();
        for (a, b) in tape.value(st.c).iter().zip(&c0).chain(tape.value(st.h).iter().zip(&h0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(init_states(&mut tape, two, &[false, false], &vars), Err(CellError::EmptyDay)));
    }

    fn scalar_attn<'a>(tape: &mut Tape<'a, f64>) -> AttnVars {
        AttnVars {
            w_a: tape.constant(vec![0.0], &[1, 1]).unwrap(),
            u_a: tape.constant(vec![1.0], &[1, 1]).unwrap(),
            b_a: tape.constant(vec![0.0], &[1]).unwrap(),
            v_a: tape.constant(vec![1.0], &[1]).unwrap(),
        }
    }

    #[test]
    fn attend_scalar_hand_evaluation() {
        let mut tape = Tape::<f64>::new();
        let attn = scalar_attn(&mut tape);
        let docs = tape.constant(vec![0.0, 10.0], &[2, 1]).unwrap();
        let h = tape.constant(vec![0.4], &[1, 1]).unwrap();
        let ctx = AttnContext::new(&mut tape, docs, &[true, true], &attn).unwrap();
        let p = attend(&mut tape, h, &ctx, &attn).unwrap();
        let t = 10f64.tanh();
        let expected = [1.0 / (1.0 + t.exp()), t.exp() / (1.0 + t.exp())];
        assert!((tape.value(p)[0] - 0.2690).abs() < 1e-4);
        assert!((tape.value(p)[1] - 0.7310).abs() < 1e-4);
        for (a, b) in tape.value(p).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_single_identical_and_masked() {
        let vals = random(&DIMS, 3);
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let h = tape.constant(vec![0.1, 0.2, -0.3], &[1, 3]).unwrap();
        let one = tape.constant(vec![0.3, 0.1, 0.2, 0.5], &[1, 4]).unwrap();
        let ctx = AttnContext::new(&mut tape, one, &[true], &vars.attn).unwrap();
        let p = attend(&mut tape, h, &ctx, &vars.attn).unwrap();
        assert_eq!(tape.value(p), &[1.0]);

        let same = tape.constant([0.3, 0.1, 0.2, 0.5].repeat(4), &[4, 4]).unwrap();
        let ctx = AttnContext::new(&mut tape, same, &[true; 4], &vars.attn).unwrap();
        let p = attend(&mut tape, h, &ctx, &vars.attn).unwrap();
        assert!(tape.value(p).iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let ctx = AttnContext::new(&mut tape, same, &[true, false, true, false], &vars.attn).unwrap();
        let p = attend(&mut tape, h, &ctx, &vars.attn).unwrap();
        assert_eq!(tape.value(p)[1], 0.0);
        assert_eq!(tape.value(p)[3], 0.0);
        let ctx = AttnContext::new(&mut tape, same, &[false; 4], &vars.attn).unwrap();
        assert!(matches!(
            attend(&mut tape, h, &ctx, &vars.attn),
            Err(CellError::Tensor(TensorError::DegenerateMask { .. }))
        ));
    }

    #[test]
    fn context_update_cases() {
        let mut tape = Tape::<f64>::new();
        let s = [0.8, -0.4];
        let docs = tape.constant(s.to_vec(), &[1, 2]).unwrap();
        let p = tape.constant(vec![1.0], &[1, 1]).unwrap();
        let zero = tape.zeros(&[1, 2]).unwrap();
        let v = update_context(&mut tape, p, docs, zero).unwrap();
        assert_eq!(tape.value(v), &[0.4, -0.2]);

        let docs3 = tape.constant(vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0], &[3, 2]).unwrap();
        let p3 = tape.constant(vec![0.2, 0.5, 0.3], &[1, 3]).unwrap();
        let vp = tape.constant(vec![0.7, -0.1], &[1, 2]).unwrap();
        let v = update_context(&mut tape, p3, docs3, vp).unwrap();
        let e0 = (0.2 * 1.0 + -0.5 + 0.3 * 3.0) / 2.0 + 0.35;
        let e1 = (0.2 * 2.0 + 0.5 * 0.5 + 0.3 * -2.0) / 2.0 - 0.05;
        assert!((tape.value(v)[0] - e0).abs() < 1e-15);
        assert!((tape.value(v)[1] - e1).abs() < 1e-15);
    }

    #[test]
    fn zero_params_step_halves_cell() {
        let vals: Vec<Vec<f64>> = random(&DIMS, 4).into_iter().map(|v| vec![0.0; v.len()]).collect();
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let docs = tape.constant(vec![0.5; 8], &[2, 4]).unwrap();
        let ctx = AttnContext::new(&mut tape, docs, &[true, true], &vars.attn).unwrap();
        let state = MsinState {
            c: tape.constant(vec![0.6, -1.2, 2.0], &[1, 3]).unwrap(),
            h: tape.constant(vec![0.1, 0.2, 0.3], &[1, 3]).unwrap(),
            v: tape.zeros(&[1, 4]).unwrap(),
            p: None,
        };
        let x = tape.constant(vec![1.0, -1.0], &[1, 2]).unwrap();
        let next = cell_step(&mut tape, x, state, &ctx, &vars).unwrap();
        assert_eq!(tape.value(next.c), &[0.3, -0.6, 1.0]);
        let h: Vec<f64> = [0.3f64, -0.6, 1.0].iter().map(|c| 0.5 * c.tanh()).collect();
        assert_eq!(tape.value(next.h), h.as_slice());
    }

    #[test]
    fn closed_input_gate_is_pure_decay() {
        let mut vals = random(&DIMS, 5);
        for b in &mut vals[10][..DIMS.ds] {
            *b = -50.0;
        }
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let docs = tape.constant(vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8], &[2, 4]).unwrap();
        let ctx = AttnContext::new(&mut tape, docs, &[true, true], &vars.attn).unwrap();
        let c_prev = [0.6, -1.2, 2.0];
        let state = MsinState {
            c: tape.constant(c_prev.to_vec(), &[1, 3]).unwrap(),
            h: tape.constant(vec![0.1, 0.2, 0.3], &[1, 3]).unwrap(),
            v: tape.zeros(&[1, 4]).unwrap(),
            p: None,
        };
        let x = tape.constant(vec![0.3, -0.2], &[1, 2]).unwrap();
        let next = cell_step(&mut tape, x, state, &ctx, &vars).unwrap();
        // recompute the forget gate directly
        let p = tape.value(next.p.unwrap()).to_vec();
        let v: Vec<f64> = (0..4).map(|c| (p[0] * [0.1, 0.2, 0.3, 0.4][c] + p[1] * [-0.5, 0.6, 0.7, 0.8][c]) / 2.0).collect();
        let pre = |r: usize| {
            matvec(&vals[8][r * 2..r * 2 + 2], &[0.3, -0.2])[0]
                + matvec(&vals[9][r * 3..r * 3 + 3], &[0.1, 0.2, 0.3])[0]
                + vals[10][r]
                + matvec(&vals[11][r * 4..r * 4 + 4], &v)[0]
        };
        for u in 0..3 {
            let f = 1.0 / (1.0 + (-pre(3 + u)).exp());
            assert!((tape.value(next.c)[u] - f * c_prev[u]).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_step_matches_hand_unrolled() {
        let k = Dims { ds: 1, dv: 1, da: 1, d: 1 };
        let vals = random(&k, 6);
        let s = [0.4, -0.9];
        let x = 0.35;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        // initial states
        let mean = (s[0] + s[1]) / 2.0;
        let c0 = (vals[0][0] * mean + vals[1][0]).tanh();
        let h0 = (vals[2][0] * mean + vals[3][0]).tanh();
        // attention
        let logits: Vec<f64> = s
            .iter()
            .map(|sj| vals[7][0] * (vals[4][0] * h0 + vals[5][0] * sj + vals[6][0]).tanh())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let v = (p[0] * s[0] + p[1] * s[1]) / 2.0;
        let pre: Vec<f64> = (0..4).map(|g| vals[8][g] * x + vals[9][g] * h0 + vals[10][g] + vals[11][g] * v).collect();
        let c = sig(pre[1]) * c0 + sig(pre[0]) * pre[3].tanh();
        let h = sig(pre[2]) * c.tanh();

        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &k, &vals);
        let docs = tape.constant(s.to_vec(), &[2, 1]).unwrap();
        let xv = tape.constant(vec![x], &[1, 1]).unwrap();
        let out = run_sequence(&mut tape, &[xv], docs, &[true, true], &vars).unwrap();
        assert_eq!(out.hiddens.len(), 1);
        assert_eq!(out.masses.len(), 1);
        assert!((tape.scalar(out.last.c) - c).abs() < 1e-12);
        assert!((tape.scalar(out.hiddens[0]) - h).abs() < 1e-12);
        assert!((tape.value(out.final_mass())[0] - p[0]).abs() < 1e-12);
    }

    #[test]
    fn shapes_for_many_day_sizes() {
        let vals = random(&DIMS, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=25 {
            let mut tape = Tape::<f64>::new();
            let vars = register(&mut tape, &DIMS, &vals);
            let docs = tape.constant((0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect(), &[n, 4]).unwrap();
            let xs: Vec<Var> = (0..5).map(|i| tape.constant(vec![i as f64 * 0.1, -0.2], &[1, 2]).unwrap()).collect();
            let out = run_sequence(&mut tape, &xs, docs, &vec![true; n], &vars).unwrap();
            assert_eq!(out.hiddens.len(), 5);
            let trace = AttentionTrace::from_tape(&tape, &out.masses);
            assert_eq!(trace.per_step.len(), 5);
            for p in &trace.per_step {
                assert_eq!(p.len(), n);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(tape.shape(out.hiddens[4]), &[1, 3]);
        }
    }

    #[test]
    fn constant_documents_follow_closed_form() {
        let vals = random(&DIMS, 8);
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let s = [0.3, -0.6, 0.9, 0.15];
        let docs = tape.constant(s.repeat(3), &[3, 4]).unwrap();
        let xs: Vec<Var> = (0..10).map(|_| tape.constant(vec![0.5, 0.5], &[1, 2]).unwrap()).collect();
        let out = run_sequence(&mut tape, &xs, docs, &[true; 3], &vars).unwrap();
        for (l, (&v, &p)) in out.contexts.iter().zip(&out.masses).enumerate() {
            let f = 1.0 - 0.5f64.powi(l as i32 + 1);
            for (a, b) in tape.value(v).iter().zip(s) {
                assert!((a - b * f).abs() < 1e-12);
            }
            assert!(tape.value(p).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn zeroed_context_weights_reduce_to_plain_lstm() {
        let mut vals = random(&DIMS, 9);
        vals[11].iter_mut().for_each(|x| *x = 0.0);
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &DIMS, &vals);
        let docs = tape.constant(vec![0.1, 0.5, -0.3, 0.2, 0.8, -0.1, 0.4, 0.0], &[2, 4]).unwrap();
        let xs: Vec<Var> = (0..4).map(|i| tape.constant(vec![i as f64, 1.0 - i as f64], &[1, 2]).unwrap()).collect();
        let out = run_sequence(&mut tape, &xs, docs, &[true, true], &vars).unwrap();
        let init = init_states(&mut tape, docs, &[true, true], &vars).unwrap();
        let plain = run_plain_lstm(&mut tape, &xs, LstmState { c: init.c, h: init.h }, vars.gates).unwrap();
        for (a, b) in out.hiddens.iter().zip(&plain) {
            let (a, b) = (tape.value(*a), tape.value(*b));
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn cell_passes_grad_check() {
        let k = Dims { ds: 4, dv: 6, da: 4, d: 1 };
        let vals = random(&k, 10);
        let params: Vec<crate::tensor::Tensor> = vals
            .iter()
            .zip(shapes(&k))
            .map(|(v, s)| crate::tensor::Tensor::new(s, v.iter().map(|&x| x as f32).collect()).unwrap())
            .collect();
        let doc_vals: Vec<f64> = (0..18).map(|i| (i as f64 * 0.71).sin()).collect();
        let report = crate::gradcheck::grad_check(
            |tape, v| {
                let vars = MsinVars {
                    u_c0: v[0],
                    b_c0: v[1],
                    u_h0: v[2],
                    b_h0: v[3],
                    attn: AttnVars {
                        w_a: v[4],
                        u_a: v[5],
                        b_a: v[6],
                        v_a: v[7],
                    },
                    gates: LstmVars {
                        w_x: v[8],
                        w_h: v[9],
                        bias: v[10],
                    },
                    u_v: v[11],
                };
                let docs = tape.constant(doc_vals.clone(), &[3, 6])?;
                let xs = (0..3)
                    .map(|i| tape.constant(vec![0.3 * i as f64 - 0.2], &[1, 1]))
                    .collect::<Result<Vec<_>, _>>()?;
                let out = run_sequence(tape, &xs, docs, &[true; 3], &vars).map_err(|e| match e {
                    CellError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let h = tape.sum_all(out.last.h);
                let p = tape.slice(out.final_mass(), 1, 0, 1)?;
                let p = tape.sum_all(p);
                let c = tape.sum_all(out.last.c);
                let t = tape.add(h, p)?;
                tape.add(t, c)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{:?}", report.per_tensor);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn context_fades_geometrically(seed in 0u64..10_000) {
            let vals = random(&DIMS, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..6);
            let docv: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f64>::new();
            let vars = register(&mut tape, &DIMS, &vals);
            let docs = tape.constant(docv.clone(), &[n, 4]).unwrap();
            let xs: Vec<Var> = (0..6).map(|_| tape.constant(vec![rng.random_range(-1.0..1.0), 0.2], &[1, 2]).unwrap()).collect();
            let out = run_sequence(&mut tape, &xs, docs, &vec![true; n], &vars).unwrap();
            let summaries: Vec<Vec<f64>> = out.masses.iter().map(|&p| {
                let p = tape.value(p);
                (0..4).map(|c| (0..n).map(|j| p[j] * docv[j * 4 + c]).sum()).collect()
            }).collect();
            for (l, &v) in out.contexts.iter().enumerate() {
                for c in 0..4 {
                    let closed: f64 = (0..=l).map(|r| 0.5f64.powi((l - r + 1) as i32) * summaries[r][c]).sum();
                    prop_assert!((tape.value(v)[c] - closed).abs() < 1e-12);
                }
            }
            for &p in &out.masses {
                prop_assert!((tape.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn document_permutation_is_equivariant(seed in 0u64..10_000) {
            let vals = random(&DIMS, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let docv: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mask = [true, false, true, true];
            let order = [2, 3, 1, 0];
            let run = |docv: Vec<f64>, mask: Vec<bool>| {
                let mut tape = Tape::<f64>::new();
                let vars = register(&mut tape, &DIMS, &vals);
                let docs = tape.constant(docv, &[n, 4]).unwrap();
                let xs: Vec<Var> = (0..3).map(|i| tape.constant(vec![0.1 * i as f64, -0.4], &[1, 2]).unwrap()).collect();
                let out = run_sequence(&mut tape, &xs, docs, &mask, &vars).unwrap();
                let hs: Vec<u64> = out.hiddens.iter().flat_map(|&h| tape.value(h).iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
                (hs, AttentionTrace::from_tape(&tape, &out.masses))
            };
            let (h1, t1) = run(docv.clone(), mask.to_vec());
            let pd: Vec<f64> = order.iter().flat_map(|&j| docv[j * 4..j * 4 + 4].to_vec()).collect();
            let pm: Vec<bool> = order.iter().map(|&j| mask[j]).collect();
            let (h2, t2) = run(pd, pm);
            prop_assert_eq!(h1, h2);
            for (a, b) in t1.per_step.iter().zip(&t2.per_step) {
                for (r, &j) in order.iter().enumerate() {
                    prop_assert_eq!(b[r].to_bits(), a[j].to_bits());
                }
                prop_assert_eq!(a[1], 0.0);
            }
        }
    }
}
