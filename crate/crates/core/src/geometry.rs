//! Pinhole cameras, rays and SE(3) screw motions.
//!
//! Cameras are right-handed and look down their local −z axis; pixel rows
//! grow downward. Pixel `(row, col)` back-projects through its own integer
//! coordinate, so the principal point `(cy, cx)` may be fractional.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Skew-symmetric matrix with `hat(a) · b = a × b`.
pub fn hat(a: Vec3) -> Mat3 {
    [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
}

fn mat_add_scaled(acc: &mut Mat3, m: &Mat3, s: f64) {
    for i in 0..3 {
        for j in 0..3 {
            acc[i][j] += s * m[i][j];
        }
    }
}

/// Rotation plus translation, acting as `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: Self = Self { rotation: IDENTITY3, translation: [0.0; 3] };

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        mat_vec(&self.rotation, d)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply_point(other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        RigidTransform { rotation: rt, translation: scale(mat_vec(&rt, self.translation), -1.0) }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2]]
    }

    pub fn from_rows(m: &[f64; 12]) -> RigidTransform {
        RigidTransform {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        }
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                err = err.max((rtr[i][j] - IDENTITY3[i][j]).abs());
            }
        }
        err
    }
}

/// Twist `(r; v)`: axis-angle rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScrewMotion {
    pub r: Vec3,
    pub v: Vec3,
}

impl ScrewMotion {
    pub fn new(r: Vec3, v: Vec3) -> Self {
        Self { r, v }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self { r: [s[0], s[1], s[2]], v: [s[3], s[4], s[5]] }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { r: scale(self.r, s), v: scale(self.v, s) }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }
}

/// How the translation half of a screw enters the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMode {
    /// `t = V(r) v` with the SE(3) left Jacobian.
    #[default]
    LeftJacobian,
    /// `t = v`.
    Raw,
}

const SERIES_BELOW: f64 = 1e-2;

/// `(a, b, c)` with `R = I + aK + bK²`, `V = I + bK + cK²`, plus their
/// θ-derivatives divided by θ.
fn exp_coefficients(theta: f64) -> ([f64; 3], [f64; 3]) {
    let t2 = theta * theta;
    if theta < SERIES_BELOW {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        (
            [
                1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
                0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
                1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0,
            ],
            [
                -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0,
                -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0,
                -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0 + t6 / 4989600.0,
            ],
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = t2 * theta;
        let t4 = t2 * t2;
        (
            [s / theta, (1.0 - c) / t2, (theta - s) / t3],
            [
                (theta * c - s) / t3,
                (theta * s - 2.0 * (1.0 - c)) / t4,
                (1.0 - c) / t4 - 3.0 * (theta - s) / (t4 * theta),
            ],
        )
    }
}

pub fn se3_exp(s: &ScrewMotion) -> RigidTransform {
    se3_exp_mode(s, TranslationMode::LeftJacobian)
}

pub fn se3_exp_mode(s: &ScrewMotion, mode: TranslationMode) -> RigidTransform {
    let theta = norm(s.r);
    let ([a, b, c], _) = exp_coefficients(theta);
    let k = hat(s.r);
    let k2 = mat_mul(&k, &k);
    let mut rot = IDENTITY3;
    mat_add_scaled(&mut rot, &k, a);
    mat_add_scaled(&mut rot, &k2, b);
    let translation = match mode {
        TranslationMode::Raw => s.v,
        TranslationMode::LeftJacobian => {
            let mut v = IDENTITY3;
            mat_add_scaled(&mut v, &k, b);
            mat_add_scaled(&mut v, &k2, c);
            mat_vec(&v, s.v)
        }
    };
    RigidTransform { rotation: rot, translation }
}

/// The exponential as 12 numbers (`R` row-major, then `t`) together with
/// its Jacobian: `jac[i][o]` is ∂out[o]/∂screw[i] for screw order `(r; v)`.
pub fn se3_exp_jacobian(s: &ScrewMotion, mode: TranslationMode) -> ([f64; 12], [[f64; 12]; 6]) {
    let theta = norm(s.r);
    let ([a, b, c], [da, db, dc]) = exp_coefficients(theta);
    let k = hat(s.r);
    let k2 = mat_mul(&k, &k);
    let tf = se3_exp_mode(s, mode);
    let mut out = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = tf.rotation[i][j];
        }
    }
    out[9..12].copy_from_slice(&tf.translation);

    let mut jac = [[0.0; 12]; 6];
    for (i, row) in jac.iter_mut().enumerate().take(3) {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = hat(e);
        let sym = {
            let mut m = mat_mul(&ei, &k);
            mat_add_scaled(&mut m, &mat_mul(&k, &ei), 1.0);
            m
        };
        let ri = s.r[i];
        let mut d_rot = [[0.0; 3]; 3];
        mat_add_scaled(&mut d_rot, &k, da * ri);
        mat_add_scaled(&mut d_rot, &ei, a);
        mat_add_scaled(&mut d_rot, &k2, db * ri);
        mat_add_scaled(&mut d_rot, &sym, b);
        for p in 0..3 {
            for q in 0..3 {
                row[3 * p + q] = d_rot[p][q];
            }
        }
        if mode == TranslationMode::LeftJacobian {
            let mut d_v = [[0.0; 3]; 3];
            mat_add_scaled(&mut d_v, &k, db * ri);
            mat_add_scaled(&mut d_v, &ei, b);
            mat_add_scaled(&mut d_v, &k2, dc * ri);
            mat_add_scaled(&mut d_v, &sym, c);
            row[9..12].copy_from_slice(&mat_vec(&d_v, s.v));
        }
    }
    let v_mat = match mode {
        TranslationMode::Raw => IDENTITY3,
        TranslationMode::LeftJacobian => {
            let mut v = IDENTITY3;
            mat_add_scaled(&mut v, &k, b);
            mat_add_scaled(&mut v, &k2, c);
            v
        }
    };
    for j in 0..3 {
        for p in 0..3 {
            jac[3 + j][9 + p] = v_mat[p][j];
        }
    }
    (out, jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub view: usize,
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

/// Origin mapped affinely; direction rotated and renormalised.
pub fn rigid_transform_ray(ray: &Ray, tf: &RigidTransform) -> Ray {
    Ray { origin: tf.apply_point(ray.origin), dir: normalize(tf.apply_dir(ray.dir)), ..*ray }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Camera-to-world transform.
    pub pose: RigidTransform,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(pose: RigidTransform, focal: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let cam = Self {
            pose,
            focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Argument(format!("focal length must be positive, got {}", self.focal)));
        }
        if !(self.near < self.far) {
            return Err(Error::Argument(format!("near {} must be below far {}", self.near, self.far)));
        }
        if self.pose.orthonormality_error() > 1e-9 {
            return Err(Error::Argument("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target`, with `up` roughly upward.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> RigidTransform {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        RigidTransform {
            rotation: [
                [right[0], true_up[0], back[0]],
                [right[1], true_up[1], back[1]],
                [right[2], true_up[2], back[2]],
            ],
            translation: eye,
        }
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    /// Unit direction of pixel `(row, col)` in camera coordinates.
    pub fn camera_dir(&self, row: f64, col: f64) -> Vec3 {
        normalize([(col - self.cx) / self.focal, -(row - self.cy) / self.focal, -1.0])
    }

    /// Projects a world point to `(row, col, depth_along_axis)`; `None`
    /// behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let local = self.pose.inverse().apply_point(p);
        let z = -local[2];
        if z <= 1e-12 {
            return None;
        }
        let col = self.cx + self.focal * local[0] / z;
        let row = self.cy - self.focal * local[1] / z;
        Some((row, col, z))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn camera_ray(cam: &Camera, view: usize, pixel: (usize, usize)) -> Result<Ray> {
    let (row, col) = pixel;
    if row >= cam.height || col >= cam.width {
        return Err(Error::Argument(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            cam.height, cam.width
        )));
    }
    let d = cam.camera_dir(row as f64, col as f64);
    Ok(Ray { origin: cam.center(), dir: normalize(cam.pose.apply_dir(d)), view, pixel })
}
