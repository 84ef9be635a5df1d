//! Row-batched passes through the encoder and decoder stacks.
//!
//! A batch is a row-major matrix with one frame per row. Processing every
//! frame of a minibatch at once lets each weight matrix stream through the
//! cache once per batch instead of once per frame.

use super::{leaky, leaky_grad, Dense};
use crate::N_LABELS;
use matrixmultiply::dgemm;

/// Stack input: dense rows, or label maps to be one-hot encoded.
pub(super) enum Rows<'a> {
    Dense(&'a [f64]),
    Labels(&'a [&'a [u8]]),
}

pub(super) struct MatTrace {
    pub n: usize,
    pub pre: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

impl MatTrace {
    pub fn output(&self) -> &[f64] {
        self.out.last().unwrap()
    }
}

/// `y = x W + b` for `n` rows.
fn forward(l: &Dense, x: &[f64], n: usize) -> Vec<f64> {
    let mut y: Vec<f64> = l.b.iter().copied().cycle().take(n * l.outputs).collect();
    unsafe {
        dgemm(
            n, l.inputs, l.outputs,
            1.0,
            x.as_ptr(), l.inputs as isize, 1,
            l.w.as_ptr(), l.outputs as isize, 1,
            1.0,
            y.as_mut_ptr(), l.outputs as isize, 1,
        );
    }
    y
}

/// One-hot rows: each pixel adds the weight row of its label. Pixels are
/// the outer loop so only four weight rows are live at a time.
fn forward_labels(l: &Dense, labels: &[&[u8]]) -> Vec<f64> {
    let n = labels.len();
    let out = l.outputs;
    let mut y: Vec<f64> = l.b.iter().copied().cycle().take(n * out).collect();
    let pixels = labels.first().map_or(0, |r| r.len());
    for p in 0..pixels {
        for (f, row) in labels.iter().enumerate() {
            let i = p * N_LABELS + row[p] as usize;
            let w = &l.w[i * out..(i + 1) * out];
            for (yo, wo) in y[f * out..(f + 1) * out].iter_mut().zip(w) {
                *yo += wo;
            }
        }
    }
    y
}

pub(super) fn run(layers: &[Dense], input: &Rows, n: usize) -> MatTrace {
    let mut pre = Vec::with_capacity(layers.len());
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (k, l) in layers.iter().enumerate() {
        let y = match (k, input) {
            (0, Rows::Labels(rows)) => forward_labels(l, rows),
            (0, Rows::Dense(x)) => forward(l, x, n),
            _ => forward(l, &out[k - 1], n),
        };
        let o = if k + 1 < layers.len() { y.iter().map(|&v| leaky(v)).collect() } else { y.clone() };
        pre.push(y);
        out.push(o);
    }
    MatTrace { n, pre, out }
}

/// Backpropagates `dy` (gradient wrt the linear stack output), adding
/// weight gradients into `grads`. Returns the input gradient for dense input.
pub(super) fn backward(layers: &[Dense], trace: &MatTrace, input: &Rows, mut dy: Vec<f64>, grads: &mut [Dense]) -> Option<Vec<f64>> {
    let n = trace.n;
    for k in (0..layers.len()).rev() {
        let l = &layers[k];
        if k + 1 < layers.len() {
            for (d, &p) in dy.iter_mut().zip(&trace.pre[k]) {
                *d *= leaky_grad(p);
            }
        }
        let g = &mut grads[k];
        for row in dy.chunks_exact(l.outputs) {
            for (b, d) in g.b.iter_mut().zip(row) {
                *b += d;
            }
        }
        let x: &[f64] = match (k, input) {
            (0, Rows::Labels(rows)) => {
                let out = l.outputs;
                for p in 0..rows[0].len() {
                    for (f, r) in rows.iter().enumerate() {
                        let i = p * N_LABELS + r[p] as usize;
                        let gw = &mut g.w[i * out..(i + 1) * out];
                        for (a, d) in gw.iter_mut().zip(&dy[f * out..(f + 1) * out]) {
                            *a += d;
                        }
                    }
                }
                return None;
            }
            (0, Rows::Dense(x)) => x,
            _ => &trace.out[k - 1],
        };
        // dW += x^T dy
        unsafe {
            dgemm(
                l.inputs, n, l.outputs,
                1.0,
                x.as_ptr(), 1, l.inputs as isize,
                dy.as_ptr(), l.outputs as isize, 1,
                1.0,
                g.w.as_mut_ptr(), l.outputs as isize, 1,
            );
        }
        // dx = dy W^T
        let mut dx = vec![0.0; n * l.inputs];
        unsafe {
            dgemm(
                n, l.outputs, l.inputs,
                1.0,
                dy.as_ptr(), l.outputs as isize, 1,
                l.w.as_ptr(), 1, l.outputs as isize,
                0.0,
                dx.as_mut_ptr(), l.inputs as isize, 1,
            );
        }
        if k == 0 {
            return Some(dx);
        }
        dy = dx;
    }
    None
}
