use rand_chacha::ChaCha8Rng;

use super::{Activation, BlockId, Matrix, ParameterStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// One affine layer: `act(x · W + b)` with `W` stored `in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: BlockId,
    pub bias: BlockId,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Layers whose input is the previous activation concatenated with the
    /// network input.
    pub skips: Vec<usize>,
}

/// Shape of an [`Mlp`] before its parameters are allocated.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub skips: Vec<usize>,
    /// Multiplier on the final layer's initial weights and biases.
    pub output_scale: Real,
}

impl Mlp {
    pub fn build(store: &mut ParameterStore, prefix: &str, spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        let last = widths.len() - 2;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let fan_in = widths[i] + if spec.skips.contains(&i) { spec.input } else { 0 };
            let scale = if i == last { spec.output_scale } else { 1.0 };
            let weight = store.insert_uniform(format!("{prefix}.{i}.w"), fan_in, widths[i + 1], fan_in, scale, rng)?;
            let bias = store.insert_uniform(format!("{prefix}.{i}.b"), 1, widths[i + 1], fan_in, scale, rng)?;
            let activation = if i == last { spec.output_activation } else { spec.hidden_activation };
            layers.push(Dense { weight, bias, activation });
        }
        Ok(Self { layers, skips: spec.skips.clone() })
    }

    pub fn output_width(&self, params: &ParameterStore) -> usize {
        self.layers.last().map_or(0, |l| params.value(l.weight).cols)
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if self.skips.contains(&i) {
                h = tape.concat_cols(&[h, x]);
            }
            let (w, b) = (tape.param(layer.weight), tape.param(layer.bias));
            let (wv, bv) = (tape.value(w), tape.value(b));
            let in_cols = tape.value(h).cols;
            if wv.rows != in_cols || bv.cols != wv.cols || bv.rows != 1 {
                return Err(Error::Config(format!(
                    "layer {i}: input width {in_cols} against weight {}x{} and bias {}x{}",
                    wv.rows, wv.cols, bv.rows, bv.cols
                )));
            }
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = tape.activate(z, layer.activation);
        }
        Ok(h)
    }
}

/// Evaluates `mlp` on a single input vector.
pub fn mlp_forward(params: &ParameterStore, mlp: &Mlp, x: &[Real]) -> Result<Vec<Real>> {
    let mut tape = Tape::new(params);
    let xv = tape.constant(Matrix::from_vec(1, x.len(), x.to_vec()));
    let y = mlp.forward(&mut tape, xv)?;
    Ok(tape.value(y).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    fn spec(input: usize, hidden: Vec<usize>, output: usize) -> MlpSpec {
        MlpSpec {
            input,
            hidden,
            output,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            skips: vec![],
            output_scale: 1.0,
        }
    }

    #[test]
    fn zero_weights_pass_bias_through_activation() {
        let mut store = ParameterStore::new();
        let mut s = spec(3, vec![4], 2);
        s.output_activation = Activation::Sigmoid;
        let mlp = Mlp::build(&mut store, "n", &s, &mut seeded_rng(1)).unwrap();
        for id in mlp.blocks() {
            store.value_mut(id).data.fill(0.0);
        }
        store.value_mut(mlp.layers[1].bias).data = vec![0.3, -1.2];
        let y = mlp_forward(&store, &mlp, &[5.0, -2.0, 1.0]).unwrap();
        assert_eq!(y, vec![super::super::sigmoid(0.3), super::super::sigmoid(-1.2)]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::build(&mut store, "id", &spec(3, vec![], 3), &mut seeded_rng(1)).unwrap();
        let w = store.value_mut(mlp.layers[0].weight);
        w.data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        store.value_mut(mlp.layers[0].bias).data.fill(0.0);
        let x = [0.25, -3.0, 7.5];
        assert_eq!(mlp_forward(&store, &mlp, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn two_layer_net_matches_hand_products() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::build(&mut store, "n", &spec(4, vec![5], 3), &mut seeded_rng(9)).unwrap();
        let x = [0.1, -0.4, 0.9, 0.3];
        let (w0, b0) = (store.value(mlp.layers[0].weight), store.value(mlp.layers[0].bias));
        let (w1, b1) = (store.value(mlp.layers[1].weight), store.value(mlp.layers[1].bias));
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut s = b0.data[j];
            for i in 0..4 {
                s += x[i] * w0.get(i, j);
            }
            h[j] = s.max(0.0);
        }
        let got = mlp_forward(&store, &mlp, &x).unwrap();
        for k in 0..3 {
            let mut s = b1.data[k];
            for j in 0..5 {
                s += h[j] * w1.get(j, k);
            }
            assert!((got[k] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::build(&mut store, "n", &spec(3, vec![4], 2), &mut seeded_rng(1)).unwrap();
        assert!(matches!(mlp_forward(&store, &mlp, &[1.0, 2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut store = ParameterStore::new();
        let mut s = spec(6, vec![16, 16], 4);
        s.skips = vec![1];
        let mlp = Mlp::build(&mut store, "n", &s, &mut seeded_rng(4)).unwrap();
        let x = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let a = mlp_forward(&store, &mlp, &x).unwrap();
        let b = mlp_forward(&store, &mlp, &x).unwrap();
        assert_eq!(a, b);
    }
}
