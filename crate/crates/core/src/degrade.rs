//! Brightness preprocessing and the synthetic low-light degradation model.
//!
//! Synthesis darkens each clean frame of an exposure path, averages the frames
//! (camera-shake blur) and only then adds sensor noise, so the noise stays
//! sharp however much the camera moved. The noise model (Gaussian plus a
//! signal-dependent term) is a stand-in for a real sensor pipeline.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add, camera_ray, dot, norm, normalize, scale, se3_exp, sub, Camera, RigidTransform, ScrewMotion, Vec3};
use crate::raster::{Plane, RgbImage};

/// Power law per channel, then optional per-channel histogram equalisation
/// over 256 bins. Output is clamped to `[0, 1]`.
pub fn scale_up(image: &RgbImage, gamma: f64, equalize: bool) -> RgbImage {
    assert!(gamma > 0.0, "gamma must be positive");
    let mut out = RgbImage::new(
        image.width,
        image.height,
        image.data.iter().map(|p| p.map(|v| v.clamp(0.0, 1.0).powf(gamma))).collect(),
    );
    if equalize {
        for c in 0..3 {
            equalize_channel(&mut out, c);
        }
    }
    out.clamped()
}

fn equalize_channel(img: &mut RgbImage, c: usize) {
    let bin = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for p in &img.data {
        hist[bin(p[c])] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc;
    }
    let total = img.data.len();
    let cdf_min = cdf.iter().copied().find(|v| *v > 0).unwrap_or(0);
    if total <= cdf_min {
        return;
    }
    let denom = (total - cdf_min) as f64;
    for p in &mut img.data {
        p[c] = (cdf[bin(p[c])] - cdf_min) as f64 / denom;
    }
}

/// Gamma whose power law brings the image mean to `target`, by bisection.
pub fn auto_gamma(image: &RgbImage, target: f64) -> f64 {
    let mean_at = |g: f64| {
        image.data.iter().flat_map(|p| p.iter()).map(|v| v.clamp(0.0, 1.0).powf(g)).sum::<f64>()
            / (3 * image.data.len()).max(1) as f64
    };
    // The mean falls as gamma grows.
    let (mut lo, mut hi) = (1e-3, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleUpConfig {
    /// Mean intensity the auto-gamma rule aims for.
    pub target_mean: f64,
    pub equalize: bool,
}

impl Default for ScaleUpConfig {
    fn default() -> Self {
        Self { target_mean: 0.4, equalize: true }
    }
}

/// ScaleUp with the auto-gamma rule.
pub fn scale_up_auto(image: &RgbImage, cfg: &ScaleUpConfig) -> RgbImage {
    scale_up(image, auto_gamma(image, cfg.target_mean), cfg.equalize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeSpec {
    /// Darkening exponent, > 1.
    pub gamma: f64,
    pub gain: f64,
    /// Signal-independent noise std.
    pub noise_std: f64,
    /// Signal-dependent variance coefficient.
    pub noise_signal: f64,
    /// Frames averaged along each exposure path.
    pub exposure_frames: usize,
    /// Fraction of views that get a shaken exposure path.
    pub shake_fraction: f64,
    pub max_rotation_deg: f64,
    /// Translation bound as a fraction of the scene diameter.
    pub max_translation_frac: f64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            gain: 0.2,
            noise_std: 0.004,
            noise_signal: 0.002,
            exposure_frames: 8,
            shake_fraction: 0.8,
            max_rotation_deg: 0.5,
            max_translation_frac: 0.005,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.exposure_frames == 0 {
            return Err(Error::Config("exposure path needs at least one frame".into()));
        }
        if self.noise_std < 0.0 || self.noise_signal < 0.0 {
            return Err(Error::Config("noise parameters must be non-negative".into()));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::Config(format!("gain {} outside (0, 1]", self.gain)));
        }
        Ok(())
    }

    pub fn darken(&self, v: f64) -> f64 {
        self.gain * v.clamp(0.0, 1.0).powf(self.gamma)
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = norm(v);
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Camera-frame offsets of the exposure path: a straight screw path centred
/// on the nominal pose, or the nominal pose repeated when unshaken.
pub fn shake_trajectory<R: Rng>(spec: &DegradeSpec, scene_diameter: f64, shaken: bool, rng: &mut R) -> Vec<ScrewMotion> {
    let p = spec.exposure_frames;
    if !shaken || p == 1 {
        return vec![ScrewMotion::default(); p];
    }
    let rot = random_unit(rng);
    let trans = random_unit(rng);
    let end = ScrewMotion::new(
        scale(rot, rng.random::<f64>() * spec.max_rotation_deg.to_radians()),
        scale(trans, rng.random::<f64>() * spec.max_translation_frac * scene_diameter),
    );
    (0..p).map(|i| end.scaled(i as f64 / (p - 1) as f64 - 0.5)).collect()
}

/// Darken every frame, average them, add noise, clamp. 8-bit quantisation
/// happens when the result is written out.
pub fn synth_degrade<R: Rng>(frames: &[RgbImage], spec: &DegradeSpec, rng: &mut R) -> Result<RgbImage> {
    spec.validate()?;
    let first = frames.first().ok_or_else(|| Error::Argument("no frames to degrade".into()))?;
    if frames.iter().any(|f| !f.same_size(first)) {
        return Err(Error::Argument("exposure frames differ in size".into()));
    }
    let n = frames.len() as f64;
    let mut out = RgbImage::filled(first.width, first.height, [0.0; 3]);
    for f in frames {
        for (o, p) in out.data.iter_mut().zip(&f.data) {
            for c in 0..3 {
                o[c] += spec.darken(p[c]) / n;
            }
        }
    }
    for o in &mut out.data {
        for v in o.iter_mut() {
            let std = (spec.noise_std * spec.noise_std + spec.noise_signal * *v).sqrt();
            if std > 0.0 {
                *v += Normal::new(0.0, std).expect("finite std").sample(rng);
            }
        }
    }
    Ok(out.clamped())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub min: Vec3,
    pub max: Vec3,
    pub color: [f64; 3],
}

/// Spheres and boxes resting on a checkered ground plane `z = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyScene {
    pub spheres: Vec<Sphere>,
    pub boxes: Vec<Cuboid>,
    pub ground: bool,
    pub checker_size: f64,
    pub checker_colors: [[f64; 3]; 2],
    pub background: [f64; 3],
    pub light_dir: Vec3,
    pub ambient: f64,
}

impl Default for ToyScene {
    fn default() -> Self {
        Self {
            spheres: vec![
                Sphere { center: [0.0, 0.0, 0.6], radius: 0.6, color: [0.85, 0.3, 0.25] },
                Sphere { center: [1.1, 0.7, 0.35], radius: 0.35, color: [0.25, 0.75, 0.35] },
                Sphere { center: [-0.9, 0.9, 0.45], radius: 0.45, color: [0.3, 0.4, 0.9] },
            ],
            boxes: vec![Cuboid { min: [-1.3, -1.1, 0.0], max: [-0.5, -0.4, 0.7], color: [0.9, 0.8, 0.3] }],
            ground: true,
            checker_size: 0.4,
            checker_colors: [[0.75, 0.75, 0.7], [0.3, 0.3, 0.35]],
            background: [0.55, 0.6, 0.7],
            light_dir: [0.4, -0.3, 0.85],
            ambient: 0.35,
        }
    }
}

impl ToyScene {
    /// A scene with nothing but background.
    pub fn empty() -> Self {
        Self { spheres: vec![], boxes: vec![], ground: false, ..Self::default() }
    }

    /// Diameter of the region holding the objects.
    pub fn diameter(&self) -> f64 {
        4.0
    }

    /// Nearest hit as `(distance, colour)`.
    pub fn trace(&self, origin: Vec3, dir: Vec3) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, Vec3, [f64; 3])> = None;
        let mut consider = |t: f64, n: Vec3, albedo: [f64; 3]| {
            if t > 1e-9 && best.is_none_or(|b| t < b.0) {
                best = Some((t, n, albedo));
            }
        };
        for s in &self.spheres {
            let oc = sub(origin, s.center);
            let b = dot(oc, dir);
            let c = dot(oc, oc) - s.radius * s.radius;
            let disc = b * b - c;
            if disc >= 0.0 {
                let t = -b - disc.sqrt();
                if t > 1e-9 {
                    let p = add(origin, scale(dir, t));
                    consider(t, normalize(sub(p, s.center)), s.color);
                }
            }
        }
        for bx in &self.boxes {
            if let Some((t, n)) = ray_box(origin, dir, bx) {
                consider(t, n, bx.color);
            }
        }
        if self.ground && dir[2] < -1e-12 {
            let t = -origin[2] / dir[2];
            let p = add(origin, scale(dir, t));
            let cell = ((p[0] / self.checker_size).floor() + (p[1] / self.checker_size).floor()) as i64;
            consider(t, [0.0, 0.0, 1.0], self.checker_colors[cell.rem_euclid(2) as usize]);
        }
        best.map(|(t, n, albedo)| {
            let diffuse = dot(n, normalize(self.light_dir)).max(0.0);
            let shade = self.ambient + (1.0 - self.ambient) * diffuse;
            (t, albedo.map(|a| (a * shade).clamp(0.0, 1.0)))
        })
    }
}

fn ray_box(o: Vec3, d: Vec3, b: &Cuboid) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[i] - o[i]) / d[i];
        let t2 = (b.max[i] - o[i]) / d[i];
        let (lo, hi, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if lo > t_near {
            t_near = lo;
            axis = i;
            sign = s;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 1e-9 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t_near, n))
}

/// Ray-traced image plus per-pixel hit distance (`far` where nothing is hit).
pub fn render_toy_scene(scene: &ToyScene, cam: &Camera) -> (RgbImage, Plane) {
    let mut img = RgbImage::filled(cam.width, cam.height, scene.background);
    let mut depth = Plane::filled(cam.width, cam.height, cam.far);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let ray = camera_ray(cam, 0, (row, col)).expect("pixel in bounds");
            if let Some((t, c)) = scene.trace(ray.origin, ray.dir) {
                if t <= cam.far {
                    img.set(row, col, c);
                    depth.data[row * cam.width + col] = t;
                }
            }
        }
    }
    (img, depth)
}

/// Clean frames seen along an exposure path around `cam`.
pub fn render_exposure(scene: &ToyScene, cam: &Camera, path: &[ScrewMotion]) -> Vec<RgbImage> {
    path.iter()
        .map(|s| {
            let mut moved = *cam;
            moved.pose = cam.pose.compose(&se3_exp(s));
            render_toy_scene(scene, &moved).0
        })
        .collect()
}

/// Cameras on a ring around the scene, all looking at its centre.
pub fn orbit_cameras(
    views: usize,
    radius: f64,
    height: f64,
    focal: f64,
    width: usize,
    img_height: usize,
    near: f64,
    far: f64,
) -> Result<Vec<Camera>> {
    (0..views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / views as f64;
            let eye = [radius * a.cos(), radius * a.sin(), height];
            let pose: RigidTransform = Camera::look_at(eye, [0.0, 0.0, 0.3], [0.0, 0.0, 1.0]);
            Camera::new(pose, focal, width, img_height, near, far)
        })
        .collect()
}
