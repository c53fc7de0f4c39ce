//! PSNR and SSIM on `[0, 1]` RGB images.

use std::fmt;

use crate::error::{Error, Result};
use crate::raster::{Plane, RgbImage};

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

fn check_sizes(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::Argument(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)))
    }
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_sizes(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2))).sum();
    Ok(sum / (3 * a.data.len()).max(1) as f64)
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter(p: &Plane, g: &[f64]) -> Plane {
    let n = g.len();
    let (w, h) = (p.width + 1 - n, p.height + 1 - n);
    let mut tmp = vec![0.0; w * p.height];
    for r in 0..p.height {
        for c in 0..w {
            tmp[r * w + c] = (0..n).map(|k| g[k] * p.get(r, c + k)).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = (0..n).map(|k| g[k] * tmp[(r + k) * w + c]).sum();
        }
    }
    Plane::new(w, h, out)
}

fn ssim_plane(x: &Plane, y: &Plane) -> f64 {
    let n = WINDOW.min(x.width).min(x.height);
    let g = gaussian_window(n);
    let prod = |a: &Plane, b: &Plane| Plane::new(a.width, a.height, a.data.iter().zip(&b.data).map(|(u, v)| u * v).collect());
    let (mx, my) = (filter(x, &g), filter(y, &g));
    let (xx, yy, xy) = (filter(&prod(x, x), &g), filter(&prod(y, y), &g), filter(&prod(x, y), &g));
    let mut total = 0.0;
    for i in 0..mx.data.len() {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let vx = xx.data[i] - ux * ux;
        let vy = yy.data[i] - uy * uy;
        let cov = xy.data[i] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cov + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    total / mx.data.len() as f64
}

/// Mean SSIM over channels, 11×11 Gaussian window (σ = 1.5), valid region.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_sizes(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Argument("empty images".into()));
    }
    Ok((0..3).map(|c| ssim_plane(&a.channel(c), &b.channel(c))).sum::<f64>() / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub views: Vec<ViewScore>,
}

impl MetricReport {
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a RgbImage, &'a RgbImage)>) -> Result<Self> {
        let views = pairs
            .into_iter()
            .map(|(name, render, reference)| {
                Ok(ViewScore { name, psnr: psnr(render, reference)?, ssim: ssim(render, reference)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { views })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.views.iter().map(|v| v.psnr).sum::<f64>() / self.views.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.views.iter().map(|v| v.ssim).sum::<f64>() / self.views.len().max(1) as f64
    }

    /// `view,psnr,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,psnr,ssim\n");
        for v in &self.views {
            out.push_str(&format!("{},{:.6},{:.6}\n", v.name, v.psnr, v.ssim));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.views {
            writeln!(f, "{:<12} {:.2} / {:.4}", v.name, v.psnr, v.ssim)?;
        }
        write!(f, "{:<12} {:.2} / {:.4}", "mean", self.mean_psnr(), self.mean_ssim())
    }
}
