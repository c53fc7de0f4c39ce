//! Scene-noise decomposition: noisy-pixel composition, cross-view matching and
//! the consistency loss over groups of aligned rays.

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{camera_ray, norm, sub, Camera, Ray};
use crate::raster::{Plane, RgbImage};

/// Scene colour after the blur kernel plus the estimated noise. No clamping.
pub fn compose_noisy_pixel(scene: [f64; 3], noise: [f64; 3]) -> [f64; 3] {
    [scene[0] + noise[0], scene[1] + noise[1], scene[2] + noise[2]]
}

/// Dense correspondence from view `a` into view `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatch {
    pub width: usize,
    pub height: usize,
    /// Target `(row, col)` in `b`; `None` where the pixel has no match.
    pub map: Vec<Option<(f64, f64)>>,
    pub certainty: Vec<f64>,
}

impl PairMatch {
    fn empty(width: usize, height: usize) -> Self {
        Self { width, height, map: vec![None; width * height], certainty: vec![0.0; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> (Option<(f64, f64)>, f64) {
        let i = row * self.width + col;
        (self.map[i], self.certainty[i])
    }

    pub fn certainty_plane(&self) -> Plane {
        Plane::new(self.width, self.height, self.certainty.clone())
    }
}

pub enum MatchBackend<'a> {
    /// Reprojection through known per-pixel distances along the ray.
    GroundTruth {
        cam_a: &'a Camera,
        cam_b: &'a Camera,
        depth_a: Option<&'a Plane>,
        depth_b: Option<&'a Plane>,
    },
    /// Normalised cross-correlation of luma patches.
    Block { patch_radius: usize, search_radius: usize },
}

pub fn match_views(a: &RgbImage, b: &RgbImage, backend: &MatchBackend) -> Result<PairMatch> {
    if !a.same_size(b) {
        return Err(Error::Argument("matched images differ in size".into()));
    }
    match backend {
        MatchBackend::GroundTruth { cam_a, cam_b, depth_a, depth_b } => {
            let da = depth_a.ok_or_else(|| Error::Config("ground-truth matching needs a depth map for view a".into()))?;
            let db = depth_b.ok_or_else(|| Error::Config("ground-truth matching needs a depth map for view b".into()))?;
            Ok(match_ground_truth(cam_a, cam_b, da, db))
        }
        MatchBackend::Block { patch_radius, search_radius } => {
            Ok(match_block(&a.luma(), &b.luma(), *patch_radius, *search_radius))
        }
    }
}

fn match_ground_truth(cam_a: &Camera, cam_b: &Camera, da: &Plane, db: &Plane) -> PairMatch {
    let (w, h) = (cam_a.width, cam_a.height);
    let mut out = PairMatch::empty(w, h);
    for row in 0..h {
        for col in 0..w {
            let d = da.get(row, col);
            if !(d < cam_a.far * (1.0 - 1e-9)) {
                continue;
            }
            let ray = camera_ray(cam_a, 0, (row, col)).expect("pixel in bounds");
            let p = ray.at(d);
            let Some((r, c, _)) = cam_b.project(p) else { continue };
            let (ri, ci) = (r.round(), c.round());
            if ri < 0.0 || ci < 0.0 || ri >= cam_b.height as f64 || ci >= cam_b.width as f64 {
                continue;
            }
            // Occluded when every pixel around the projection sees a surface
            // clearly in front of the point.
            let dist = norm(sub(p, cam_b.center()));
            let tol = 2e-2 * dist + dist / cam_b.focal;
            let (r0, c0) = (r.floor().max(0.0) as usize, c.floor().max(0.0) as usize);
            let visible = (r0..=(r0 + 1).min(cam_b.height - 1))
                .flat_map(|y| (c0..=(c0 + 1).min(cam_b.width - 1)).map(move |x| (y, x)))
                .any(|(y, x)| db.get(y, x) >= dist - tol);
            if !visible {
                continue;
            }
            let i = row * w + col;
            out.map[i] = Some((r, c));
            out.certainty[i] = 1.0;
        }
    }
    out
}

fn patch_stats(img: &Plane, row: usize, col: usize, r: usize) -> Option<(Vec<f64>, f64)> {
    if row < r || col < r || row + r >= img.height || col + r >= img.width {
        return None;
    }
    let mut vals = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for y in row - r..=row + r {
        for x in col - r..=col + r {
            vals.push(img.get(y, x));
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter_mut().for_each(|v| *v -= mean);
    let energy = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
    (energy > 1e-9).then_some((vals, energy))
}

fn match_block(a: &Plane, b: &Plane, pr: usize, sr: usize) -> PairMatch {
    let (w, h) = (a.width, a.height);
    let sr = sr as isize;
    let rows: Vec<Vec<(Option<(f64, f64)>, f64)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let Some((pa, ea)) = patch_stats(a, row, col, pr) else { return (None, 0.0) };
                    let span = (2 * sr + 1) as usize;
                    let mut scores = vec![f64::NEG_INFINITY; span * span];
                    let mut best: Option<(usize, usize, f64)> = None;
                    for dy in -sr..=sr {
                        for dx in -sr..=sr {
                            let (y, x) = (row as isize + dy, col as isize + dx);
                            if y < 0 || x < 0 {
                                continue;
                            }
                            let Some((pb, eb)) = patch_stats(b, y as usize, x as usize, pr) else { continue };
                            let ncc = pa.iter().zip(&pb).map(|(u, v)| u * v).sum::<f64>() / (ea * eb);
                            let k = (dy + sr) as usize * span + (dx + sr) as usize;
                            scores[k] = ncc;
                            if best.is_none_or(|bst| ncc > bst.2) {
                                best = Some((y as usize, x as usize, ncc));
                            }
                        }
                    }
                    let Some((y, x, score)) = best else { return (None, 0.0) };
                    let ky = (y as isize - row as isize + sr) as usize;
                    let kx = (x as isize - col as isize + sr) as usize;
                    let at = |ky: usize, kx: usize| scores[ky * span + kx];
                    let refine = |lo: f64, mid: f64, hi: f64| {
                        let denom = lo - 2.0 * mid + hi;
                        if lo.is_finite() && hi.is_finite() && denom < -1e-12 {
                            (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
                        } else {
                            0.0
                        }
                    };
                    let oy = if ky > 0 && ky + 1 < span { refine(at(ky - 1, kx), score, at(ky + 1, kx)) } else { 0.0 };
                    let ox = if kx > 0 && kx + 1 < span { refine(at(ky, kx - 1), score, at(ky, kx + 1)) } else { 0.0 };
                    (Some((y as f64 + oy, x as f64 + ox)), score.clamp(0.0, 1.0))
                })
                .collect()
        })
        .collect();
    let mut out = PairMatch::empty(w, h);
    for (i, (m, c)) in rows.into_iter().flatten().enumerate() {
        out.map[i] = m;
        out.certainty[i] = c;
    }
    out
}

/// Correspondences for every ordered pair of views. Built whole and then
/// swapped in, so readers only ever see a complete table.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTable {
    pub views: usize,
    pairs: Vec<Option<PairMatch>>,
}

impl MatchTable {
    pub fn new(views: usize) -> Self {
        Self { views, pairs: vec![None; views * views] }
    }

    pub fn insert(&mut self, a: usize, b: usize, m: PairMatch) {
        assert!(a != b && a < self.views && b < self.views, "bad view pair ({a}, {b})");
        self.pairs[a * self.views + b] = Some(m);
    }

    pub fn pair(&self, a: usize, b: usize) -> Option<&PairMatch> {
        self.pairs.get(a * self.views + b)?.as_ref()
    }

    /// Matches every ordered pair of `images` with `backend(a, b)`.
    pub fn build<'a, F>(images: &[RgbImage], backend: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> MatchBackend<'a> + Sync,
    {
        let n = images.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).filter(move |b| *b != a).map(move |b| (a, b))).collect();
        let matched: Vec<Result<PairMatch>> =
            pairs.par_iter().map(|&(a, b)| match_views(&images[a], &images[b], &backend(a, b))).collect();
        let mut table = Self::new(n);
        for (&(a, b), m) in pairs.iter().zip(matched) {
            table.insert(a, b, m?);
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedRayGroup {
    /// Anchor first, with certainty 1.
    pub members: Vec<(Ray, f64)>,
}

impl AlignedRayGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// The anchor plus rays through its confidently matched pixels in other
/// views, at most `k` rays in total.
pub fn aligned_rays(anchor: &Ray, tables: &MatchTable, cams: &[Camera], theta: f64, k: usize) -> Result<AlignedRayGroup> {
    if anchor.view >= tables.views || anchor.view >= cams.len() {
        return Err(Error::Argument(format!("anchor view {} not in the match table", anchor.view)));
    }
    let mut members = vec![(*anchor, 1.0)];
    let (row, col) = anchor.pixel;
    for b in 0..tables.views {
        if members.len() >= k {
            break;
        }
        if b == anchor.view {
            continue;
        }
        let Some(pair) = tables.pair(anchor.view, b) else { continue };
        let (Some((r, c)), cert) = pair.get(row, col) else { continue };
        if cert <= theta {
            continue;
        }
        let (r, c) = (r.round(), c.round());
        if r < 0.0 || c < 0.0 || r >= cams[b].height as f64 || c >= cams[b].width as f64 {
            continue;
        }
        members.push((camera_ray(&cams[b], b, (r as usize, c as usize))?, cert));
    }
    Ok(AlignedRayGroup { members })
}

/// Mean absolute deviation from the group mean, averaged over channels.
pub fn consistency_loss(colors: &[[f64; 3]]) -> f64 {
    assert!(!colors.is_empty(), "consistency needs at least one colour");
    let k = colors.len() as f64;
    let mut total = 0.0;
    for c in 0..3 {
        let mean = colors.iter().map(|p| p[c]).sum::<f64>() / k;
        total += colors.iter().map(|p| (p[c] - mean).abs()).sum::<f64>() / k;
    }
    total / 3.0
}

/// Consistency loss averaged over `groups`, each a list of row indices into
/// the `n×3` colour matrix.
pub fn consistency_loss_tape(tape: &mut Tape, colors: Var, groups: &[Vec<usize>]) -> Var {
    let x = tape.value(colors);
    let mut value = 0.0;
    for g in groups {
        let pts: Vec<[f64; 3]> = g.iter().map(|&i| {
            let r = x.row(i);
            [r[0] as f64, r[1] as f64, r[2] as f64]
        }).collect();
        value += consistency_loss(&pts);
    }
    let value = if groups.is_empty() { 0.0 } else { value / groups.len() as f64 };
    tape.custom(&[colors], Matrix::scalar(value as Real), Box::new(ConsistencyOp { groups: groups.to_vec() }))
}

struct ConsistencyOp {
    groups: Vec<Vec<usize>>,
}

impl CustomOp for ConsistencyOp {
    fn name(&self) -> &'static str {
        "consistency"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let x = inputs[0];
        let mut g = Matrix::zeros(x.rows, x.cols);
        if self.groups.is_empty() {
            return vec![Some(g)];
        }
        let upstream = grad.data[0] / self.groups.len() as Real;
        for group in &self.groups {
            let k = group.len() as Real;
            for c in 0..3 {
                let mean = group.iter().map(|&i| x.get(i, c)).sum::<Real>() / k;
                let signs: Vec<Real> = group.iter().map(|&i| sign(x.get(i, c) - mean)).collect();
                let mean_sign = signs.iter().sum::<Real>() / k;
                for (&i, s) in group.iter().zip(&signs) {
                    let cur = g.get(i, c);
                    g.set(i, c, cur + upstream * (s - mean_sign) / (3.0 * k));
                }
            }
        }
        vec![Some(g)]
    }
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
