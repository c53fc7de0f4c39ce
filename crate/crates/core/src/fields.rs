//! The scene radiance field and the per-ray noise estimator.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{encode, Activation, BlockId, EncodingConfig, Matrix, Mlp, MlpSpec, ParameterStore, Real, Tape, Var};
use crate::error::Result;
use crate::renderer::RadianceField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Hidden layers in the scene trunk.
    pub depth: usize,
    pub width: usize,
    pub encoding: EncodingConfig,
    /// Offset added before the density softplus.
    pub density_shift: Real,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { depth: 8, width: 128, encoding: EncodingConfig::default(), density_shift: 0.0 }
    }
}

/// Radiance field `(x, d) ↦ (rgb, σ)`. Density reads only the position
/// trunk; the direction enters the colour head alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneField {
    pub config: FieldConfig,
    pub trunk: Mlp,
    pub density: Mlp,
    pub feature: Mlp,
    pub color: Mlp,
}

impl SceneField {
    pub fn build(store: &mut ParameterStore, prefix: &str, config: FieldConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let enc = config.encoding;
        let w = config.width;
        let hidden = vec![w; config.depth.saturating_sub(1)];
        let skips = if config.depth > 4 { vec![config.depth / 2] } else { vec![] };
        let trunk = Mlp::build(
            store,
            &format!("{prefix}.trunk"),
            &MlpSpec {
                input: enc.position_width(),
                hidden,
                output: w,
                hidden_activation: Activation::Relu,
                output_activation: Activation::Relu,
                skips,
                output_scale: 1.0,
            },
            rng,
        )?;
        let density = Mlp::build(
            store,
            &format!("{prefix}.density"),
            &MlpSpec {
                input: w,
                hidden: vec![],
                output: 1,
                hidden_activation: Activation::Identity,
                output_activation: Activation::Softplus(config.density_shift),
                skips: vec![],
                output_scale: 1.0,
            },
            rng,
        )?;
        let feature = Mlp::build(
            store,
            &format!("{prefix}.feature"),
            &MlpSpec {
                input: w,
                hidden: vec![],
                output: w,
                hidden_activation: Activation::Identity,
                output_activation: Activation::Identity,
                skips: vec![],
                output_scale: 1.0,
            },
            rng,
        )?;
        let color = Mlp::build(
            store,
            &format!("{prefix}.color"),
            &MlpSpec {
                input: w + enc.direction_width(),
                hidden: vec![(w / 2).max(1)],
                output: 3,
                hidden_activation: Activation::Relu,
                output_activation: Activation::Sigmoid,
                skips: vec![],
                output_scale: 1.0,
            },
            rng,
        )?;
        Ok(Self { config, trunk, density, feature, color })
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        [&self.trunk, &self.density, &self.feature, &self.color].iter().flat_map(|m| m.blocks()).collect()
    }
}

impl RadianceField for SceneField {
    fn eval(&self, tape: &mut Tape, points: Var, dirs: Var) -> Result<(Var, Var)> {
        let enc = self.config.encoding;
        let px = encode(tape, points, enc.position_freqs, enc.include_input);
        let h = self.trunk.forward(tape, px)?;
        let sigma = self.density.forward(tape, h)?;
        let feat = self.feature.forward(tape, h)?;
        let dx = encode(tape, dirs, enc.direction_freqs, enc.include_input);
        let joined = tape.concat_cols(&[feat, dx]);
        let rgb = self.color.forward(tape, joined)?;
        Ok((sigma, rgb))
    }
}

/// Point query of the scene field: `(rgb, σ)`.
pub fn snerf_eval(params: &ParameterStore, field: &SceneField, x: [f64; 3], d: [f64; 3]) -> Result<([f64; 3], f64)> {
    let mut tape = Tape::new(params);
    let p = tape.constant(row3(x));
    let dv = tape.constant(row3(d));
    let (sigma, rgb) = field.eval(&mut tape, p, dv)?;
    let c = tape.value(rgb);
    Ok(([c.data[0] as f64, c.data[1] as f64, c.data[2] as f64], tape.value(sigma).data[0] as f64))
}

/// Noise field `(P_mid, d) ↦ n`, half the depth and width of the scene
/// trunk, with an unbounded linear output initialised near zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub encoding: EncodingConfig,
    pub depth: usize,
    pub width: usize,
    pub mlp: Mlp,
}

impl NoiseField {
    pub fn build(store: &mut ParameterStore, prefix: &str, scene: &FieldConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let depth = (scene.depth / 2).max(1);
        let width = (scene.width / 2).max(1);
        let enc = scene.encoding;
        let mlp = Mlp::build(
            store,
            prefix,
            &MlpSpec {
                input: enc.position_width() + enc.direction_width(),
                hidden: vec![width; depth],
                output: 3,
                hidden_activation: Activation::Relu,
                output_activation: Activation::Identity,
                skips: vec![],
                output_scale: 1e-2,
            },
            rng,
        )?;
        Ok(Self { encoding: enc, depth, width, mlp })
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        self.mlp.blocks()
    }

    /// Noise triple per row of `points`/`dirs`.
    pub fn eval(&self, tape: &mut Tape, points: Var, dirs: Var) -> Result<Var> {
        let enc = self.encoding;
        let px = encode(tape, points, enc.position_freqs, enc.include_input);
        let dx = encode(tape, dirs, enc.direction_freqs, enc.include_input);
        let x = tape.concat_cols(&[px, dx]);
        self.mlp.forward(tape, x)
    }
}

/// Point query of the noise field.
pub fn nestimator_eval(params: &ParameterStore, field: &NoiseField, p_mid: [f64; 3], d: [f64; 3]) -> Result<[f64; 3]> {
    let mut tape = Tape::new(params);
    let p = tape.constant(row3(p_mid));
    let dv = tape.constant(row3(d));
    let n = field.eval(&mut tape, p, dv)?;
    let v = tape.value(n);
    Ok([v.data[0] as f64, v.data[1] as f64, v.data[2] as f64])
}

/// Index of the sample used as `P_mid` among `n` sorted samples.
pub fn mid_sample_index(n: usize) -> usize {
    n / 2
}

fn row3(v: [f64; 3]) -> Matrix {
    Matrix::from_vec(1, 3, v.iter().map(|x| *x as Real).collect())
}
