//! Stratified and hierarchical ray sampling and differentiable volume
//! rendering.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Matrix, ParameterStore, Real, Tape, Var};
use crate::error::Result;
use crate::geometry::{camera_ray, Camera, Ray};
use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub coarse: usize,
    /// Extra importance samples for the fine pass; 0 disables it.
    pub fine: usize,
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { coarse: 64, fine: 64, jitter: true }
    }
}

/// One sample distance per equal-width bin of `[near, far]`: the bin
/// midpoint, or a uniform draw inside the bin when `rng` is given.
pub fn stratified_samples<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    assert!(near < far && n >= 1, "need near < far and at least one sample");
    let width = (far - near) / n as f64;
    match rng {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.random::<f64>()) * width).collect(),
    }
}

/// Interval widths: `t[i+1] - t[i]`, and `far - t[last]` for the last one.
pub fn deltas(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = t.last() {
        d.push((far - last).max(0.0));
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Alpha compositing of one ray: `T_i = exp(-Σ_{j<i} σ_j δ_j)`,
/// `w_i = T_i (1 - exp(-σ_i δ_i))`, `Ĉ = Σ w_i c_i`.
pub fn volume_render(sigma: &[f64], delta: &[f64], colors: &[[f64; 3]]) -> RenderOutput {
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut optical: f64 = 0.0;
    for i in 0..n {
        let t = (-optical).exp();
        let tau = sigma[i] * delta[i];
        let w = t * -(-tau).exp_m1();
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        weights.push(w);
        transmittance.push(t);
        optical += tau;
    }
    RenderOutput { color, weights, transmittance }
}

/// Fine distances drawn by inverse CDF over the bins of `[near, far]`
/// weighted by `weights`. Falls back to uniform when the weights are all zero.
/// Without an `rng` the CDF is inverted at evenly spaced quantiles.
pub fn hierarchical_resample<R: Rng>(
    near: f64,
    far: f64,
    weights: &[f64],
    n_fine: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    inverse_cdf(near, far, weights, &quantiles(n_fine, rng))
}

fn quantiles<R: Rng>(n: usize, rng: Option<&mut R>) -> Vec<f64> {
    match rng {
        None => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        Some(rng) => (0..n).map(|_| rng.random::<f64>()).collect(),
    }
}

/// Maps each `u ∈ [0, 1)` through the inverse CDF of the weight histogram.
pub fn inverse_cdf(near: f64, far: f64, weights: &[f64], us: &[f64]) -> Vec<f64> {
    let bins = weights.len().max(1);
    let width = (far - near) / bins as f64;
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for i in 0..bins {
        acc += if total > 0.0 { weights[i].max(0.0) / total } else { 1.0 / bins as f64 };
        cdf.push(acc);
    }
    let last = *cdf.last().unwrap();
    let mut out: Vec<f64> = us
        .iter()
        .map(|u| {
            let u = u * last;
            // First bin whose upper CDF edge exceeds u, skipping empty bins.
            let mut b = cdf[1..].partition_point(|c| *c <= u).min(bins - 1);
            while b + 1 < bins && cdf[b + 1] - cdf[b] <= 0.0 {
                b += 1;
            }
            let span = cdf[b + 1] - cdf[b];
            let frac = if span > 0.0 { ((u - cdf[b]) / span).clamp(0.0, 1.0) } else { 0.5 };
            near + (b as f64 + frac) * width
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Sorted union of two sample sets.
pub fn merge_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(f64::total_cmp);
    out
}

struct CompositeOp {
    per_ray: usize,
    delta: Vec<Real>,
    weights: Vec<Real>,
    trans_after: Vec<Real>,
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (sigma, rgb) = (inputs[0], inputs[1]);
        let s = self.per_ray;
        let rays = grad.rows;
        let mut g_sigma = Matrix::zeros(sigma.rows, 1);
        let mut g_rgb = Matrix::zeros(rgb.rows, 3);
        g_sigma
            .data
            .par_chunks_mut(s.max(1))
            .zip(g_rgb.data.par_chunks_mut(3 * s.max(1)))
            .enumerate()
            .take(rays)
            .for_each(|(r, (gs, gc))| {
                let g = grad.row(r);
                let base = r * s;
                let mut suffix = 0.0;
                for i in (0..s).rev() {
                    let k = base + i;
                    let c = rgb.row(k);
                    let gc_dot = g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
                    gs[i] = self.delta[k] * (self.trans_after[k] * gc_dot - suffix);
                    suffix += self.weights[k] * gc_dot;
                    for ch in 0..3 {
                        gc[3 * i + ch] = self.weights[k] * g[ch];
                    }
                }
            });
        vec![Some(g_sigma), Some(g_rgb)]
    }
}

/// Volume-renders `rays` rays of `per_ray` samples each.
///
/// `sigma` is `(rays·per_ray)×1`, `rgb` is `(rays·per_ray)×3`, `delta` holds
/// the interval widths in the same order. Returns the `rays×3` colour node and
/// the compositing weights.
pub fn composite(tape: &mut Tape, sigma: Var, rgb: Var, delta: &[Real], per_ray: usize) -> (Var, Vec<Real>) {
    let sv = tape.value(sigma);
    let cv = tape.value(rgb);
    assert_eq!(sv.cols, 1, "density must be a column");
    assert_eq!(cv.cols, 3, "colour must have three channels");
    assert_eq!(sv.rows, cv.rows, "density/colour row mismatch");
    assert_eq!(sv.rows, delta.len(), "delta length mismatch");
    assert!(per_ray > 0 && sv.rows % per_ray == 0, "rows must split evenly into rays");
    let rays = sv.rows / per_ray;
    let mut out = Matrix::zeros(rays, 3);
    let mut weights = vec![0.0; sv.rows];
    let mut trans_after = vec![0.0; sv.rows];
    out.data
        .par_chunks_mut(3)
        .zip(weights.par_chunks_mut(per_ray))
        .zip(trans_after.par_chunks_mut(per_ray))
        .enumerate()
        .for_each(|(r, ((color, w), ta))| {
            let mut optical: Real = 0.0;
            for i in 0..per_ray {
                let k = r * per_ray + i;
                let t = (-optical).exp();
                let tau = sv.data[k] * delta[k];
                let decay = (-tau).exp();
                w[i] = t * (1.0 - decay);
                ta[i] = t * decay;
                let c = cv.row(k);
                for ch in 0..3 {
                    color[ch] += w[i] * c[ch];
                }
                optical += tau;
            }
        });
    let op = CompositeOp { per_ray, delta: delta.to_vec(), weights: weights.clone(), trans_after };
    let node = tape.custom(&[sigma, rgb], out, Box::new(op));
    (node, weights)
}

/// Maps rays (`R×6`: origin, direction) and per-ray distances to sample
/// points and repeated directions, each `(R·S)×3`.
pub fn sample_points(tape: &mut Tape, rays: Var, t: &[Vec<Real>]) -> (Var, Var) {
    let rv = tape.value(rays);
    assert_eq!(rv.cols, 6, "rays must be origin|direction rows");
    assert_eq!(rv.rows, t.len(), "one distance list per ray");
    let total: usize = t.iter().map(Vec::len).sum();
    let mut pts = Matrix::zeros(total, 3);
    let mut owner = Vec::with_capacity(total);
    let mut k = 0;
    for (r, ts) in t.iter().enumerate() {
        let row = rv.row(r);
        for &s in ts {
            let p = pts.row_mut(k);
            for c in 0..3 {
                p[c] = row[c] + s * row[3 + c];
            }
            owner.push(r);
            k += 1;
        }
    }
    let flat_t: Vec<Real> = t.iter().flatten().copied().collect();
    let points = tape.custom(&[rays], pts, Box::new(PointsOp { owner: owner.clone(), t: flat_t }));
    let dirs = tape.slice_cols(rays, 3, 3);
    let dirs = tape.gather_rows(dirs, &owner);
    (points, dirs)
}

struct PointsOp {
    owner: Vec<usize>,
    t: Vec<Real>,
}

impl CustomOp for PointsOp {
    fn name(&self) -> &'static str {
        "sample_points"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let mut g = Matrix::zeros(inputs[0].rows, 6);
        for (k, (&r, &s)) in self.owner.iter().zip(&self.t).enumerate() {
            let gk = grad.row(k);
            let row = g.row_mut(r);
            for c in 0..3 {
                row[c] += gk[c];
                row[3 + c] += s * gk[c];
            }
        }
        vec![Some(g)]
    }
}

/// Anything that maps sample points and view directions to density and
/// colour on a tape.
pub trait RadianceField {
    /// Returns `(σ: n×1, rgb: n×3)` for `points` and `dirs`, both `n×3`.
    fn eval(&self, tape: &mut Tape, points: Var, dirs: Var) -> Result<(Var, Var)>;
}

/// Rendered colours of a batch plus the sample distances that produced them.
pub struct RenderedRays {
    pub color: Var,
    /// Distances of the final pass, per ray.
    pub t: Vec<Vec<Real>>,
    /// Compositing weights of the final pass, per ray.
    pub weights: Vec<Vec<Real>>,
    /// Colour of the coarse pass when a fine pass was also run.
    pub coarse_color: Option<Var>,
}

/// Coarse pass over stratified samples, then (if configured) a fine pass over
/// the merged coarse + importance samples. Sample distances carry no gradient.
///
/// Consecutive runs of `group` rays share their random draws, so identical
/// rays inside a group render identically.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<R: Rng>(
    tape: &mut Tape,
    field: &dyn RadianceField,
    rays: Var,
    near: f64,
    far: f64,
    cfg: &SamplingConfig,
    group: usize,
    mut rng: Option<&mut R>,
) -> Result<RenderedRays> {
    if !cfg.jitter {
        rng = None;
    }
    let n_rays = tape.value(rays).rows;
    let group = group.max(1);
    assert_eq!(n_rays % group, 0, "ray count must split into groups");
    let mut coarse_t = Vec::with_capacity(n_rays);
    for _ in 0..n_rays / group {
        let t = stratified_samples(near, far, cfg.coarse, rng.as_deref_mut());
        coarse_t.extend(std::iter::repeat_n(t, group));
    }
    let (color, weights) = render_pass(tape, field, rays, &coarse_t, far)?;
    if cfg.fine == 0 {
        return Ok(RenderedRays {
            color,
            t: to_real(&coarse_t),
            weights: split(&weights, cfg.coarse),
            coarse_color: None,
        });
    }
    let mut fine_t = Vec::with_capacity(n_rays);
    let mut us = Vec::new();
    for (i, (ct, w)) in coarse_t.iter().zip(weights.chunks(cfg.coarse)).enumerate() {
        if i % group == 0 {
            us = quantiles(cfg.fine, rng.as_deref_mut());
        }
        let w: Vec<f64> = w.iter().map(|x| *x as f64).collect();
        fine_t.push(merge_samples(ct, &inverse_cdf(near, far, &w, &us)));
    }
    let (fine_color, fine_weights) = render_pass(tape, field, rays, &fine_t, far)?;
    Ok(RenderedRays {
        color: fine_color,
        t: to_real(&fine_t),
        weights: split(&fine_weights, cfg.coarse + cfg.fine),
        coarse_color: Some(color),
    })
}

/// `origin | direction` rows for a list of rays.
pub fn ray_matrix(rays: &[Ray]) -> Matrix {
    let mut m = Matrix::zeros(rays.len(), 6);
    for (i, r) in rays.iter().enumerate() {
        let row = m.row_mut(i);
        for c in 0..3 {
            row[c] = r.origin[c] as Real;
            row[3 + c] = r.dir[c] as Real;
        }
    }
    m
}

/// Full image from `cam` with midpoint samples, clamped to `[0, 1]`.
pub fn render_image(params: &ParameterStore, field: &dyn RadianceField, cam: &Camera, cfg: &SamplingConfig) -> Result<RgbImage> {
    const CHUNK: usize = 1024;
    let cfg = SamplingConfig { jitter: false, ..*cfg };
    let pixels: Vec<(usize, usize)> = (0..cam.height).flat_map(|r| (0..cam.width).map(move |c| (r, c))).collect();
    let mut data = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(CHUNK) {
        let rays = chunk.iter().map(|p| camera_ray(cam, 0, *p)).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new(params);
        let m = tape.constant(ray_matrix(&rays));
        let out = render_rays::<rand_chacha::ChaCha8Rng>(&mut tape, field, m, cam.near, cam.far, &cfg, 1, None)?;
        let c = tape.value(out.color);
        data.extend((0..c.rows).map(|i| {
            let r = c.row(i);
            [r[0] as f64, r[1] as f64, r[2] as f64].map(|v| v.clamp(0.0, 1.0))
        }));
    }
    Ok(RgbImage::new(cam.width, cam.height, data))
}

fn render_pass(tape: &mut Tape, field: &dyn RadianceField, rays: Var, t: &[Vec<f64>], far: f64) -> Result<(Var, Vec<Real>)> {
    let per_ray = t[0].len();
    let t_real = to_real(t);
    let delta: Vec<Real> = t.iter().flat_map(|ts| deltas(ts, far)).map(|d| d as Real).collect();
    let (points, dirs) = sample_points(tape, rays, &t_real);
    let (sigma, rgb) = field.eval(tape, points, dirs)?;
    Ok(composite(tape, sigma, rgb, &delta, per_ray))
}

fn to_real(t: &[Vec<f64>]) -> Vec<Vec<Real>> {
    t.iter().map(|ts| ts.iter().map(|x| *x as Real).collect()).collect()
}

fn split(w: &[Real], per_ray: usize) -> Vec<Vec<Real>> {
    w.chunks(per_ray).map(<[Real]>::to_vec).collect()
}
