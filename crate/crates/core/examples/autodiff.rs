//! Reverse-mode gradients on a small expression, checked against central
//! differences.
//!
//! Run with `cargo run --example autodiff`.

use msin::gradcheck::relative_error;
use msin::tape::Tape;

fn loss(w: &[f64], x: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let wv = tape.param(w, &[2, 3]).unwrap();
    let xv = tape.constant(x.to_vec(), &[1, 3]).unwrap();
    let y = tape.matmul_nt(xv, wv).unwrap();
    let y = tape.tanh(y);
    let y2 = tape.hadamard(y, y).unwrap();
    let l = tape.sum_all(y2);
    tape.scalar(l)
}

fn main() {
    let w = [0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
    let x = [1.0, -2.0, 0.5];

    // loss = Σ tanh(W x)²
    let mut tape = Tape::<f64>::new();
    let wv = tape.param(&w, &[2, 3]).unwrap();
    let xv = tape.constant(x.to_vec(), &[1, 3]).unwrap();
    let y = tape.matmul_nt(xv, wv).unwrap();
    let y = tape.tanh(y);
    let y2 = tape.hadamard(y, y).unwrap();
    let l = tape.sum_all(y2);
    println!("loss {:.6} with {} tape nodes", tape.scalar(l), tape.len());

    let grads = tape.backward(l).unwrap();
    let g = grads.get(wv).unwrap();
    let h = 1e-6;
    println!("{:>5} {:>12} {:>12} {:>10}", "entry", "tape", "numeric", "rel err");
    for i in 0..w.len() {
        let (mut up, mut dn) = (w, w);
        up[i] += h;
        dn[i] -= h;
        let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * h);
        println!("{i:>5} {:>12.8} {:>12.8} {:>10.2e}", g[i], fd, relative_error(g[i], fd));
    }
}
