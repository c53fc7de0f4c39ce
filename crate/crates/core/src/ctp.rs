//! Camera trajectory prediction: frequency-domain masking of noise-dominated
//! rays and the rigid blurring kernel.
//!
//! The mask low-passes the grayscale training image with a hard circular
//! filter and thresholds the result. Rays on dark or purely high-frequency
//! regions come out as noisy and are cut off from the blur kernel's gradient.
//!
//! The blur kernel predicts `k` rigid camera motions per view from a learned
//! latent code and blends the renders of the shaken rays with softmax weights.
//! Motions act in the camera frame, so the shaken ray of a pixel is the ray of
//! the same pixel seen from `pose · exp(s)`.

use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BlockId, CustomOp, Matrix, Mlp, MlpSpec, ParameterStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    mat_vec, normalize, rigid_transform_ray, se3_exp_jacobian, se3_exp_mode, transpose, Mat3, Ray, RigidTransform,
    ScrewMotion, TranslationMode, Vec3,
};
use crate::raster::{Plane, RgbImage};

/// Centred 2D spectrum: the DC coefficient sits at `(rows/2, cols/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.cols + v]
    }

    /// Signed frequency offsets of array position `(u, v)` from the centre.
    #[inline]
    pub fn frequency(&self, u: usize, v: usize) -> (f64, f64) {
        (u as f64 - (self.rows / 2) as f64, v as f64 - (self.cols / 2) as f64)
    }
}

fn fft_2d(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse { planner.plan_fft_inverse(cols) } else { planner.plan_fft_forward(cols) };
    for row in data.chunks_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(rows) } else { planner.plan_fft_forward(rows) };
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

/// Unnormalised forward DFT of a channel, centre-shifted.
pub fn dft2(channel: &Plane) -> Spectrum {
    assert!(!channel.data.is_empty(), "dft2 needs a non-empty channel");
    let (rows, cols) = (channel.height, channel.width);
    let mut raw: Vec<Complex64> = channel.data.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft_2d(&mut raw, rows, cols, false);
    let mut data = vec![Complex64::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[((r + rows / 2) % rows) * cols + (c + cols / 2) % cols] = raw[r * cols + c];
        }
    }
    Spectrum { rows, cols, data }
}

/// Inverse of [`dft2`], including the `1/(MN)` factor.
pub fn idft2(spec: &Spectrum) -> Vec<Complex64> {
    let (rows, cols) = (spec.rows, spec.cols);
    let mut raw = vec![Complex64::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            raw[r * cols + c] = spec.data[((r + rows / 2) % rows) * cols + (c + cols / 2) % cols];
        }
    }
    fft_2d(&mut raw, rows, cols, true);
    let norm = 1.0 / (rows * cols) as f64;
    for v in &mut raw {
        *v *= norm;
    }
    raw
}

/// Real part of the inverse transform.
pub fn idft2_real(spec: &Spectrum) -> Plane {
    Plane::new(spec.cols, spec.rows, idft2(spec).into_iter().map(|c| c.re).collect())
}

/// Zeroes every coefficient farther than `radius` from the centre.
pub fn lowpass(spec: &Spectrum, radius: f64) -> Spectrum {
    assert!(radius >= 0.0, "filter radius must be non-negative");
    let mut out = spec.clone();
    for u in 0..spec.rows {
        for v in 0..spec.cols {
            let (fu, fv) = spec.frequency(u, v);
            if (fu * fu + fv * fv).sqrt() > radius {
                out.data[u * spec.cols + v] = Complex64::new(0.0, 0.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtpMaskConfig {
    /// Filter radius in frequency-index units.
    pub radius: f64,
    /// Threshold on the 0–255 scale.
    pub threshold: f64,
}

impl Default for CtpMaskConfig {
    fn default() -> Self {
        Self { radius: 30.0, threshold: 48.0 }
    }
}

/// Binary per-pixel mask: 1 marks a clear ray, 0 a noise-dominated one.
#[derive(Debug, Clone, PartialEq)]
pub struct CtpMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
    pub radius: f64,
    pub threshold: f64,
}

impl CtpMask {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    pub fn to_plane(&self) -> Plane {
        Plane::new(self.width, self.height, self.values.iter().map(|v| *v as f64).collect())
    }
}

/// The CTP mask together with the low-passed grayscale image it thresholds.
pub fn ctp_mask_with_lowpass(image: &RgbImage, radius: f64, threshold: f64) -> (CtpMask, Plane) {
    assert!((0.0..=255.0).contains(&threshold), "threshold must lie in [0, 255]");
    let low = idft2_real(&lowpass(&dft2(&image.luma()), radius));
    let values = low.data.iter().map(|v| u8::from(v * 255.0 >= threshold)).collect();
    (CtpMask { width: image.width, height: image.height, values, radius, threshold }, low)
}

pub fn ctp_mask(image: &RgbImage, radius: f64, threshold: f64) -> CtpMask {
    ctp_mask_with_lowpass(image, radius, threshold).0
}

/// Plain brightness threshold on the grayscale image, without filtering.
pub fn intensity_mask(image: &RgbImage, threshold: f64) -> CtpMask {
    let values = image.luma().data.iter().map(|v| u8::from(v * 255.0 >= threshold)).collect();
    CtpMask { width: image.width, height: image.height, values, radius: f64::INFINITY, threshold }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayTag {
    Clear,
    Noisy,
}

/// Tags each pixel's ray by the mask.
pub fn partition_rays(pixels: &[(usize, usize)], mask: &CtpMask) -> Result<Vec<RayTag>> {
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= mask.height || col >= mask.width {
                return Err(Error::Argument(format!("pixel ({row}, {col}) outside the mask")));
            }
            Ok(if mask.get(row, col) == 1 { RayTag::Clear } else { RayTag::Noisy })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurKernelConfig {
    /// Camera motions per view.
    pub motions: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub translation_mode: TranslationMode,
    /// Initial scale of the motion heads' output layers.
    pub init_scale: Real,
}

impl Default for BlurKernelConfig {
    fn default() -> Self {
        Self { motions: 4, latent_dim: 32, hidden: 64, translation_mode: TranslationMode::LeftJacobian, init_scale: 1e-2 }
    }
}

/// Per-view latent codes with embedding `E`, rotation head `R`, translation
/// head `L` and composition-weight head `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernelNet {
    pub config: BlurKernelConfig,
    pub views: usize,
    pub latent: BlockId,
    pub embed: Mlp,
    pub rotation: Mlp,
    pub translation: Mlp,
    pub weights: Mlp,
}

/// Per-row outputs of the blur kernel on a tape.
pub struct KernelOutputs {
    /// `n × 3k` rotation parts, motion-major.
    pub rotation: Var,
    /// `n × 3k` translation parts, motion-major.
    pub translation: Var,
    /// `n × (k+1)` normalised composition weights.
    pub weights: Var,
}

impl BlurKernelNet {
    pub fn build(
        store: &mut ParameterStore,
        prefix: &str,
        views: usize,
        config: BlurKernelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let latent = store.insert_uniform(format!("{prefix}.latent"), views, config.latent_dim, 1, 1.0, rng)?;
        let k = config.motions;
        let head = |store: &mut ParameterStore, name: &str, out: usize, rng: &mut ChaCha8Rng| {
            Mlp::build(
                store,
                &format!("{prefix}.{name}"),
                &MlpSpec {
                    input: config.hidden,
                    hidden: vec![],
                    output: out,
                    hidden_activation: Activation::Identity,
                    output_activation: Activation::Identity,
                    skips: vec![],
                    output_scale: config.init_scale,
                },
                rng,
            )
        };
        let embed = Mlp::build(
            store,
            &format!("{prefix}.embed"),
            &MlpSpec {
                input: config.latent_dim,
                hidden: vec![config.hidden],
                output: config.hidden,
                hidden_activation: Activation::Relu,
                output_activation: Activation::Relu,
                skips: vec![],
                output_scale: 1.0,
            },
            rng,
        )?;
        let rotation = head(store, "rotation", 3 * k, rng)?;
        let translation = head(store, "translation", 3 * k, rng)?;
        let weights = head(store, "weights", k + 1, rng)?;
        Ok(Self { config, views, latent, embed, rotation, translation, weights })
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        let mut b = vec![self.latent];
        for m in [&self.embed, &self.rotation, &self.translation, &self.weights] {
            b.extend(m.blocks());
        }
        b
    }

    /// Kernel outputs for every entry of `views`, one row each.
    pub fn forward(&self, tape: &mut Tape, views: &[usize]) -> Result<KernelOutputs> {
        if let Some(v) = views.iter().find(|v| **v >= self.views) {
            return Err(Error::Argument(format!("unknown view {v} (kernel has {} views)", self.views)));
        }
        let mut unique: Vec<usize> = views.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let latent = tape.param(self.latent);
        let codes = tape.gather_rows(latent, &unique);
        let e = self.embed.forward(tape, codes)?;
        let rot = self.rotation.forward(tape, e)?;
        let trans = self.translation.forward(tape, e)?;
        let logits = self.weights.forward(tape, e)?;
        let w = row_softmax(tape, logits);
        let rows: Vec<usize> = views.iter().map(|v| unique.binary_search(v).unwrap()).collect();
        Ok(KernelOutputs {
            rotation: tape.gather_rows(rot, &rows),
            translation: tape.gather_rows(trans, &rows),
            weights: tape.gather_rows(w, &rows),
        })
    }
}

/// The `k` screws and `k+1` composition weights of one view.
pub fn rbk_motions(params: &ParameterStore, net: &BlurKernelNet, view: usize) -> Result<(Vec<ScrewMotion>, Vec<f64>)> {
    let mut tape = Tape::new(params);
    let out = net.forward(&mut tape, &[view])?;
    let (r, t, w) = (tape.value(out.rotation), tape.value(out.translation), tape.value(out.weights));
    let screws = (0..net.config.motions)
        .map(|q| {
            ScrewMotion::new(
                [r.data[3 * q] as f64, r.data[3 * q + 1] as f64, r.data[3 * q + 2] as f64],
                [t.data[3 * q] as f64, t.data[3 * q + 1] as f64, t.data[3 * q + 2] as f64],
            )
        })
        .collect();
    Ok((screws, w.data.iter().map(|x| *x as f64).collect()))
}

/// Weighted blend of the sharp render and the renders of the shaken rays.
///
/// `cam_pose` is the camera-to-world pose of the ray's view; each screw moves
/// the camera in its own frame.
pub fn blur_compose(
    cam_pose: &RigidTransform,
    ray: &Ray,
    motions: &[ScrewMotion],
    weights: &[f64],
    mode: TranslationMode,
    mut render: impl FnMut(&Ray) -> [f64; 3],
) -> Result<[f64; 3]> {
    if weights.len() != motions.len() + 1 {
        return Err(Error::Argument(format!("{} weights for {} motions", weights.len(), motions.len())));
    }
    let inv = cam_pose.inverse();
    let mut out = [0.0; 3];
    let c0 = render(ray);
    for c in 0..3 {
        out[c] += weights[0] * c0[c];
    }
    for (s, w) in motions.iter().zip(&weights[1..]) {
        let world = cam_pose.compose(&se3_exp_mode(s, mode)).compose(&inv);
        let cq = render(&rigid_transform_ray(ray, &world));
        for c in 0..3 {
            out[c] += w * cq[c];
        }
    }
    Ok(out)
}

struct SoftmaxOp;

impl CustomOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "row_softmax"
    }

    fn backward(&self, _inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let mut g = Matrix::zeros(output.rows, output.cols);
        for r in 0..output.rows {
            let (y, gy) = (output.row(r), grad.row(r));
            let dot: Real = y.iter().zip(gy).map(|(a, b)| a * b).sum();
            for (o, (yi, gi)) in g.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                *o = yi * (gi - dot);
            }
        }
        vec![Some(g)]
    }
}

pub fn row_softmax(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x);
    let mut out = xv.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    tape.custom(&[x], out, Box::new(SoftmaxOp))
}

struct MixOp;

impl CustomOp for MixOp {
    fn name(&self) -> &'static str {
        "mix_rows"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (w, colors) = (inputs[0], inputs[1]);
        let g_count = w.cols;
        let mut gw = Matrix::zeros(w.rows, g_count);
        let mut gc = Matrix::zeros(colors.rows, 3);
        for i in 0..w.rows {
            let gi = grad.row(i);
            for q in 0..g_count {
                let k = i * g_count + q;
                let c = colors.row(k);
                gw.set(i, q, gi[0] * c[0] + gi[1] * c[1] + gi[2] * c[2]);
                let wq = w.get(i, q);
                for (o, g) in gc.row_mut(k).iter_mut().zip(gi) {
                    *o = wq * g;
                }
            }
        }
        vec![Some(gw), Some(gc)]
    }
}

/// `out[i] = Σ_q weights[i, q] · colors[i·G + q]` with `G = weights.cols`.
pub fn mix_rows(tape: &mut Tape, weights: Var, colors: Var) -> Var {
    let (w, c) = (tape.value(weights), tape.value(colors));
    let g_count = w.cols;
    assert_eq!(c.rows, w.rows * g_count, "one colour per ray and motion");
    let mut out = Matrix::zeros(w.rows, 3);
    for i in 0..w.rows {
        for q in 0..g_count {
            let wq = w.get(i, q);
            let cq = c.row(i * g_count + q);
            for ch in 0..3 {
                out.data[3 * i + ch] += wq * cq[ch];
            }
        }
    }
    tape.custom(&[weights, colors], out, Box::new(MixOp))
}

/// Camera data a ray needs to be shaken in its camera's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShakeFrame {
    /// Camera centre (and ray origin) in world space.
    pub origin: Vec3,
    /// Camera-to-world rotation.
    pub cam_rot: Mat3,
    /// Unit ray direction in camera coordinates.
    pub cam_dir: Vec3,
}

impl ShakeFrame {
    pub fn world_dir(&self) -> Vec3 {
        normalize(mat_vec(&self.cam_rot, self.cam_dir))
    }
}

struct ShakeOp {
    frames: Vec<ShakeFrame>,
    motions: usize,
    mode: TranslationMode,
}

impl ShakeOp {
    fn screw(rot: &Matrix, trans: &Matrix, i: usize, q: usize) -> ScrewMotion {
        let r = &rot.row(i)[3 * q..3 * q + 3];
        let t = &trans.row(i)[3 * q..3 * q + 3];
        ScrewMotion::new(
            [r[0] as f64, r[1] as f64, r[2] as f64],
            [t[0] as f64, t[1] as f64, t[2] as f64],
        )
    }
}

impl CustomOp for ShakeOp {
    fn name(&self) -> &'static str {
        "shake_rays"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (rot, trans) = (inputs[0], inputs[1]);
        let k = self.motions;
        let mut g_rot = Matrix::zeros(rot.rows, rot.cols);
        let mut g_trans = Matrix::zeros(trans.rows, trans.cols);
        for (i, f) in self.frames.iter().enumerate() {
            let rct = transpose(&f.cam_rot);
            for q in 0..k {
                let s = Self::screw(rot, trans, i, q);
                let (flat, jac) = se3_exp_jacobian(&s, self.mode);
                let g = grad.row(i * (k + 1) + q + 1);
                let g_o = [g[0] as f64, g[1] as f64, g[2] as f64];
                let g_d = [g[3] as f64, g[4] as f64, g[5] as f64];
                // u = Rc · R · dc, d = u / |u|.
                let r_local = [[flat[0], flat[1], flat[2]], [flat[3], flat[4], flat[5]], [flat[6], flat[7], flat[8]]];
                let u = mat_vec(&f.cam_rot, mat_vec(&r_local, f.cam_dir));
                let un = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                let d = [u[0] / un, u[1] / un, u[2] / un];
                let dg = d[0] * g_d[0] + d[1] * g_d[1] + d[2] * g_d[2];
                let g_u = [(g_d[0] - d[0] * dg) / un, (g_d[1] - d[1] * dg) / un, (g_d[2] - d[2] * dg) / un];
                let a = mat_vec(&rct, g_u);
                let g_t = mat_vec(&rct, g_o);
                let mut g_flat = [0.0; 12];
                for p in 0..3 {
                    for c in 0..3 {
                        g_flat[3 * p + c] = a[p] * f.cam_dir[c];
                    }
                }
                g_flat[9..12].copy_from_slice(&g_t);
                for j in 0..6 {
                    let v: f64 = (0..12).map(|o| jac[j][o] * g_flat[o]).sum();
                    if j < 3 {
                        g_rot.data[i * rot.cols + 3 * q + j] = v as Real;
                    } else {
                        g_trans.data[i * trans.cols + 3 * q + j - 3] = v as Real;
                    }
                }
            }
        }
        vec![Some(g_rot), Some(g_trans)]
    }
}

/// Expands each ray into `k+1` rays (`origin | direction` rows), ray-major:
/// the unmoved ray first, then one per motion.
pub fn shake_rays(
    tape: &mut Tape,
    rotation: Var,
    translation: Var,
    frames: &[ShakeFrame],
    motions: usize,
    mode: TranslationMode,
) -> Var {
    let (rot, trans) = (tape.value(rotation), tape.value(translation));
    assert_eq!(rot.rows, frames.len(), "one frame per ray");
    assert_eq!(rot.cols, 3 * motions, "rotation width must be 3k");
    assert_eq!(trans.shape(), rot.shape(), "rotation/translation shape mismatch");
    let mut out = Matrix::zeros(frames.len() * (motions + 1), 6);
    for (i, f) in frames.iter().enumerate() {
        let base = f.world_dir();
        let row = out.row_mut(i * (motions + 1));
        for c in 0..3 {
            row[c] = f.origin[c] as Real;
            row[3 + c] = base[c] as Real;
        }
        for q in 0..motions {
            let tf = se3_exp_mode(&ShakeOp::screw(rot, trans, i, q), mode);
            let o = mat_vec(&f.cam_rot, tf.translation);
            let d = normalize(mat_vec(&f.cam_rot, mat_vec(&tf.rotation, f.cam_dir)));
            let row = out.row_mut(i * (motions + 1) + q + 1);
            for c in 0..3 {
                row[c] = (f.origin[c] + o[c]) as Real;
                row[3 + c] = d[c] as Real;
            }
        }
    }
    let op = ShakeOp { frames: frames.to_vec(), motions, mode };
    tape.custom(&[rotation, translation], out, Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, seeded_rng};
    use crate::geometry::{camera_ray, se3_exp, Camera};
    use rand::{Rng, SeedableRng};

    fn random_plane(w: usize, h: usize, seed: u64) -> Plane {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Plane::new(w, h, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Brute-force DFT, then the same centre shift.
    fn naive_dft(p: &Plane) -> Vec<Complex64> {
        let (m, n) = (p.height, p.width);
        let mut out = vec![Complex64::new(0.0, 0.0); m * n];
        for u in 0..m {
            for v in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..m {
                    for b in 0..n {
                        let ang = -2.0 * std::f64::consts::PI * ((u * a) as f64 / m as f64 + (v * b) as f64 / n as f64);
                        acc += p.get(a, b) * Complex64::from_polar(1.0, ang);
                    }
                }
                out[((u + m / 2) % m) * n + (v + n / 2) % n] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_single_dc_coefficient() {
        let s = dft2(&Plane::filled(6, 4, 0.7));
        for u in 0..4 {
            for v in 0..6 {
                let c = s.get(u, v);
                if (u, v) == (2, 3) {
                    assert!((c.re - 24.0 * 0.7).abs() < 1e-12 && c.im.abs() < 1e-12);
                } else {
                    assert!(c.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut p = Plane::filled(5, 7, 0.0);
        p.data[0] = 1.0;
        assert!(dft2(&p).data.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_dft() {
        for (w, h, seed) in [(8, 8, 1), (12, 16, 2), (5, 3, 3)] {
            let p = random_plane(w, h, seed);
            let fast = dft2(&p);
            for (a, b) in fast.data.iter().zip(naive_dft(&p)) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let p = random_plane(16, 16, 4);
        let back = idft2(&dft2(&p));
        for (a, b) in back.iter().zip(&p.data) {
            assert!((a.re - b).abs() < 1e-9 && a.im.abs() < 1e-9);
        }
    }

    #[test]
    fn lowpass_cases() {
        let p = random_plane(16, 12, 5);
        let s = dft2(&p);
        let diag = ((8.0f64).powi(2) + (6.0f64).powi(2)).sqrt();
        assert_eq!(lowpass(&s, diag), s);
        let dc = idft2_real(&lowpass(&s, 0.0));
        for v in &dc.data {
            assert!((v - p.mean()).abs() < 1e-12);
        }
        let once = lowpass(&s, 3.0);
        assert_eq!(lowpass(&once, 3.0), once);
        for u in 0..s.rows {
            for v in 0..s.cols {
                let (fu, fv) = s.frequency(u, v);
                if (fu * fu + fv * fv).sqrt() > 3.0 {
                    assert_eq!(once.get(u, v), Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn flat_fields_mask_uniformly() {
        let bright = RgbImage::filled(10, 8, [200.0 / 255.0; 3]);
        assert!(ctp_mask(&bright, 30.0, 48.0).values.iter().all(|v| *v == 1));
        let dark = RgbImage::filled(10, 8, [10.0 / 255.0; 3]);
        assert!(ctp_mask(&dark, 30.0, 48.0).values.iter().all(|v| *v == 0));
    }

    #[test]
    fn mask_is_monotone_in_threshold() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let img = RgbImage::new(20, 14, (0..280).map(|_| [rng.random_range(0.0..0.5); 3]).collect());
        let lo = ctp_mask(&img, 4.0, 30.0);
        let hi = ctp_mask(&img, 4.0, 60.0);
        assert!(lo.values.iter().zip(&hi.values).all(|(a, b)| b <= a));
    }

    #[test]
    fn partition_follows_mask() {
        let mask = CtpMask { width: 2, height: 1, values: vec![1, 0], radius: 1.0, threshold: 0.0 };
        assert_eq!(partition_rays(&[(0, 0), (0, 1)], &mask).unwrap(), vec![RayTag::Clear, RayTag::Noisy]);
        assert!(partition_rays(&[(1, 0)], &mask).is_err());
    }

    fn kernel() -> (ParameterStore, BlurKernelNet) {
        let mut store = ParameterStore::new();
        let cfg = BlurKernelConfig { latent_dim: 8, hidden: 16, init_scale: 0.5, ..Default::default() };
        let net = BlurKernelNet::build(&mut store, "rbk", 3, cfg, &mut seeded_rng(6)).unwrap();
        (store, net)
    }

    #[test]
    fn weights_normalise_and_zero_logits_are_uniform() {
        let (mut store, net) = kernel();
        for v in 0..3 {
            let (screws, w) = rbk_motions(&store, &net, v).unwrap();
            assert_eq!(screws.len(), 4);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for id in net.weights.blocks() {
            store.value_mut(id).data.fill(0.0);
        }
        let (_, w) = rbk_motions(&store, &net, 1).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-15));
        assert!(matches!(rbk_motions(&store, &net, 3), Err(Error::Argument(_))));
    }

    fn test_camera() -> Camera {
        Camera::new(Camera::look_at([0.0, -3.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]), 10.0, 8, 6, 0.5, 6.0).unwrap()
    }

    #[test]
    fn blur_compose_special_cases() {
        let cam = test_camera();
        let ray = camera_ray(&cam, 0, (2, 3)).unwrap();
        let render = |r: &Ray| [r.dir[0].abs(), r.origin[1].abs() * 0.1, r.dir[2].abs()];
        let sharp = render(&ray);
        let moving = vec![ScrewMotion::new([0.01, 0.02, 0.0], [0.05, 0.0, 0.0]); 2];
        let only_sharp = blur_compose(&cam.pose, &ray, &moving, &[1.0, 0.0, 0.0], TranslationMode::LeftJacobian, render).unwrap();
        assert_eq!(only_sharp, sharp);
        let still = vec![ScrewMotion::default(); 2];
        let out = blur_compose(&cam.pose, &ray, &still, &[0.2, 0.5, 0.3], TranslationMode::LeftJacobian, render).unwrap();
        for c in 0..3 {
            assert!((out[c] - sharp[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_compose_is_the_weighted_sum_of_rerenders() {
        let cam = test_camera();
        let ray = camera_ray(&cam, 0, (1, 5)).unwrap();
        let render = |r: &Ray| [0.5 + 0.5 * r.dir[0], 0.3 + r.origin[0], r.dir[1] * r.dir[1]];
        let s1 = ScrewMotion::new([0.02, -0.01, 0.03], [0.1, 0.0, -0.05]);
        let s2 = ScrewMotion::new([-0.04, 0.0, 0.01], [0.0, 0.2, 0.0]);
        let w = [0.5, 0.3, 0.2];
        let out = blur_compose(&cam.pose, &ray, &[s1, s2], &w, TranslationMode::LeftJacobian, render).unwrap();
        // The shaken ray is the same pixel seen from pose · exp(s).
        let mut want = render(&ray).map(|v| v * w[0]);
        for (s, wq) in [(s1, w[1]), (s2, w[2])] {
            let mut moved = cam;
            moved.pose = cam.pose.compose(&se3_exp(&s));
            let c = render(&camera_ray(&moved, 0, (1, 5)).unwrap());
            for ch in 0..3 {
                want[ch] += wq * c[ch];
            }
        }
        for ch in 0..3 {
            assert!((out[ch] - want[ch]).abs() < 1e-12);
        }
        // Doubling one weight then renormalising follows the closed form.
        let raw = [w[0], 2.0 * w[1], w[2]];
        let z: f64 = raw.iter().sum();
        let w2 = raw.map(|x| x / z);
        let out2 = blur_compose(&cam.pose, &ray, &[s1, s2], &w2, TranslationMode::LeftJacobian, render).unwrap();
        let c1 = {
            let mut moved = cam;
            moved.pose = cam.pose.compose(&se3_exp(&s1));
            render(&camera_ray(&moved, 0, (1, 5)).unwrap())
        };
        for ch in 0..3 {
            let predicted = (out[ch] + w[1] * c1[ch]) / z;
            assert!((out2[ch] - predicted).abs() < 1e-12);
        }
    }

    #[test]
    fn shake_rays_agree_with_blur_compose_geometry() {
        let cam = test_camera();
        let (store, net) = kernel();
        let (screws, _) = rbk_motions(&store, &net, 2).unwrap();
        let pixel = (4, 1);
        let ray = camera_ray(&cam, 2, pixel).unwrap();
        let frame = ShakeFrame {
            origin: cam.center(),
            cam_rot: cam.pose.rotation,
            cam_dir: cam.camera_dir(pixel.0 as f64, pixel.1 as f64),
        };
        let mut tape = Tape::new(&store);
        let out = net.forward(&mut tape, &[2]).unwrap();
        let rays = shake_rays(&mut tape, out.rotation, out.translation, &[frame], 4, TranslationMode::LeftJacobian);
        let rv = tape.value(rays).clone();
        let inv = cam.pose.inverse();
        for (q, s) in std::iter::once(None).chain(screws.iter().map(Some)).enumerate() {
            let want = match s {
                None => ray,
                Some(s) => rigid_transform_ray(&ray, &cam.pose.compose(&se3_exp(s)).compose(&inv)),
            };
            let row = rv.row(q);
            for c in 0..3 {
                assert!((row[c] as f64 - want.origin[c]).abs() < 1e-12);
                assert!((row[3 + c] as f64 - want.dir[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_chain_passes_grad_check() {
        let cam = test_camera();
        let (store, net) = kernel();
        let frames: Vec<ShakeFrame> = [(0, 0), (3, 5), (5, 7)]
            .iter()
            .map(|&(r, c)| ShakeFrame {
                origin: cam.center(),
                cam_rot: cam.pose.rotation,
                cam_dir: cam.camera_dir(r as f64, c as f64),
            })
            .collect();
        let proj = Matrix::from_vec(15, 6, (0..90).map(|i| ((i as Real) * 0.77).sin()).collect());
        let colors = Matrix::from_vec(15, 3, (0..45).map(|i| ((i as Real) * 0.31).cos()).collect());
        let report = grad_check(
            &store,
            |t| {
                let out = net.forward(t, &[0, 2, 2])?;
                let rays = shake_rays(t, out.rotation, out.translation, &frames, 4, TranslationMode::LeftJacobian);
                let p = t.constant(proj.clone());
                let m = t.mul(rays, p);
                let a = t.sum(m);
                let c = t.constant(colors.clone());
                let mixed = mix_rows(t, out.weights, c);
                let b = t.sum(mixed);
                Ok(t.add(a, b))
            },
            1e-6,
            Some(10),
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
