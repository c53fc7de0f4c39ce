use serde::{Deserialize, Serialize};

use super::{CustomOp, Matrix, Real, Tape, Var};

const PI: Real = std::f64::consts::PI as Real;

/// Frequency encoding widths for positions and view directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub position_freqs: usize,
    pub direction_freqs: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { position_freqs: 10, direction_freqs: 4, include_input: true }
    }
}

impl EncodingConfig {
    pub fn position_width(&self) -> usize {
        encoded_width(3, self.position_freqs, self.include_input)
    }

    pub fn direction_width(&self) -> usize {
        encoded_width(3, self.direction_freqs, self.include_input)
    }
}

pub fn encoded_width(input_dim: usize, freqs: usize, include_input: bool) -> usize {
    input_dim * (2 * freqs + usize::from(include_input))
}

/// `[p?, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp)]`, each
/// sin/cos block spanning every input component.
pub fn positional_encode(p: &[Real], freqs: usize, include_input: bool) -> Vec<Real> {
    let mut out = Vec::with_capacity(encoded_width(p.len(), freqs, include_input));
    if include_input {
        out.extend_from_slice(p);
    }
    for j in 0..freqs {
        let f = (1u64 << j) as Real * PI;
        out.extend(p.iter().map(|x| (f * x).sin()));
        out.extend(p.iter().map(|x| (f * x).cos()));
    }
    out
}

struct EncodeOp {
    freqs: usize,
    include_input: bool,
}

impl CustomOp for EncodeOp {
    fn name(&self) -> &'static str {
        "positional_encode"
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let x = inputs[0];
        let dim = x.cols;
        let mut gx = Matrix::zeros(x.rows, dim);
        for r in 0..x.rows {
            let (out, g) = (output.row(r), grad.row(r));
            let gr = gx.row_mut(r);
            let mut off = 0;
            if self.include_input {
                gr.copy_from_slice(&g[..dim]);
                off = dim;
            }
            for j in 0..self.freqs {
                let f = (1u64 << j) as Real * PI;
                for d in 0..dim {
                    let (s, c) = (out[off + d], out[off + dim + d]);
                    gr[d] += f * (c * g[off + d] - s * g[off + dim + d]);
                }
                off += 2 * dim;
            }
        }
        vec![Some(gx)]
    }
}

/// Encodes every row of `x` on the tape.
pub fn encode(tape: &mut Tape, x: Var, freqs: usize, include_input: bool) -> Var {
    let xv = tape.value(x);
    let width = encoded_width(xv.cols, freqs, include_input);
    let mut value = Matrix::zeros(xv.rows, width);
    for r in 0..xv.rows {
        value.row_mut(r).copy_from_slice(&positional_encode(xv.row(r), freqs, include_input));
    }
    tape.custom(&[x], value, Box::new(EncodeOp { freqs, include_input }))
}
