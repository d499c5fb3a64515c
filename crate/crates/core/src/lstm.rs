//! LSTM step shared by the text encoder and the series networks.
//!
//! Gate weights are stacked row-wise in the order input, forget, output,
//! candidate: `w_x` is `[4h × in]`, `w_h` is `[4h × h]`, `bias` is `[4h]`.

use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, TensorError};

/// Tape handles of one stacked LSTM weight set.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// Cell and hidden state, one row per sequence in the batch.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub c: Var,
    pub h: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(tape: &mut Tape<'_, T>, rows: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            c: tape.zeros(&[rows, hidden])?,
            h: tape.zeros(&[rows, hidden])?,
        })
    }
}

/// One step: `x` is `[rows × in]`. `extra`, when given, is an already
/// projected `[rows × 4h]` term added to the gate pre-activations last.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    state: LstmState,
    w: LstmVars,
    extra: Option<Var>,
) -> Result<LstmState, TensorError> {
    let hidden = tape.shape(state.h)[1];
    let xp = tape.matmul_nt(x, w.w_x)?;
    let hp = tape.matmul_nt(state.h, w.w_h)?;
    let pre = tape.add(xp, hp)?;
    let mut pre = tape.add_row(pre, w.bias)?;
    if let Some(e) = extra {
        pre = tape.add(pre, e)?;
    }
    let sig_part = tape.slice(pre, 1, 0, 3 * hidden)?;
    let sig = tape.sigmoid(sig_part);
    let i = tape.slice(sig, 1, 0, hidden)?;
    let f = tape.slice(sig, 1, hidden, hidden)?;
    let o = tape.slice(sig, 1, 2 * hidden, hidden)?;
    let cand = tape.slice(pre, 1, 3 * hidden, hidden)?;
    let cand = tape.tanh(cand);
    let keep = tape.hadamard(f, state.c)?;
    let write = tape.hadamard(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.hadamard(o, tc)?;
    Ok(LstmState { c, h })
}
