//! Central-difference gradient checking.
//!
//! Both the tape gradient and the finite differences are computed in `f64`,
//! so disagreement points at a wrong backward rule rather than at `f32`
//! rounding.

use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function is not deterministic: {first} vs {second}")]
    Nondeterministic { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Worst disagreement found inside one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub worst_rel_err: f64,
    pub worst_index: usize,
    pub tape_grad: f64,
    pub fd_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every parameter.
///
/// `f` receives a fresh tape with `params` registered as trainable leaves, in
/// order, and must return a one-element variable.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut values: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.data().iter().map(|&x| x as f64).collect())
        .collect();
    let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, values, &shapes)?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let first = eval(&values)?;
    let second = eval(&values)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::Nondeterministic { first, second });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::<f64>::new();
        let vars = register(&mut tape, &values, &shapes)?;
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(&values)
            .map(|(&v, val)| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; val.len()])
            })
            .collect()
    };

    let mut per_tensor = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut check = TensorCheck {
            name: param
                .name()
                .map(str::to_owned)
                .unwrap_or_else(|| format!("param{pi}")),
            worst_rel_err: 0.0,
            worst_index: 0,
            tape_grad: 0.0,
            fd_grad: 0.0,
        };
        for i in 0..values[pi].len() {
            let orig = values[pi][i];
            values[pi][i] = orig + h;
            let plus = eval(&values)?;
            values[pi][i] = orig - h;
            let minus = eval(&values)?;
            values[pi][i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let tape_grad = analytic[pi][i];
            let err = relative_error(tape_grad, fd);
            if err > check.worst_rel_err || i == 0 {
                check.worst_rel_err = err;
                check.worst_index = i;
                check.tape_grad = tape_grad;
                check.fd_grad = fd;
            }
        }
        per_tensor.push(check);
    }
    let max_rel_err = per_tensor
        .iter()
        .map(|c| c.worst_rel_err)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err,
    })
}

fn register<'a>(
    tape: &mut Tape<'a, f64>,
    values: &'a [Vec<f64>],
    shapes: &[Vec<usize>],
) -> Result<Vec<Var>, TensorError> {
    values
        .iter()
        .zip(shapes)
        .map(|(v, s)| tape.param(v, s))
        .collect()
}
