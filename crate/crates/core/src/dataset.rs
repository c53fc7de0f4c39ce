//! Multi-view datasets on disk: a TOML manifest next to PNG images and raw
//! depth maps, plus the generator for synthetic degraded scenes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{orbit_cameras, render_exposure, render_toy_scene, shake_trajectory, synth_degrade, DegradeSpec, ToyScene};
use crate::error::{Error, Result};
use crate::geometry::{Camera, RigidTransform};
use crate::raster::{Plane, RgbImage};

pub const MANIFEST_NAME: &str = "manifest.toml";
const DEPTH_MAGIC: &[u8; 8] = b"DIMDEPTH";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One view as recorded in the manifest. Paths are relative to the
/// dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub name: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    pub split: Split,
    /// Camera-to-world 3×4 matrix, row-major.
    pub pose: Vec<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub shaken: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrade: Option<DegradeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub split: Split,
    pub camera: Camera,
    pub image: RgbImage,
    pub clean: Option<RgbImage>,
    pub depth: Option<Plane>,
    pub shaken: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub near: f64,
    pub far: f64,
    pub views: Vec<View>,
    pub degrade: Option<DegradeSpec>,
}

/// Roughly 85/15 train/eval, evaluation views spread evenly.
pub fn default_split(n: usize) -> Vec<Split> {
    let n_eval = if n < 2 { 0 } else { ((0.15 * n as f64).round() as usize).max(1) };
    let mut split = vec![Split::Train; n];
    for j in 0..n_eval {
        split[((j as f64 + 0.5) * n as f64 / n_eval as f64) as usize] = Split::Eval;
    }
    split
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|i| self.views[*i].split == split).collect()
    }

    pub fn split_views(&self, split: Split) -> Vec<&View> {
        self.views.iter().filter(|v| v.split == split).collect()
    }

    /// Reads the manifest and every file it references. Fails without
    /// returning anything if one entry is broken.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Load { path: manifest_path.clone(), reason: e.to_string() })?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Load { path: manifest_path.clone(), reason: e.to_string() })?;
        let mut views = Vec::with_capacity(manifest.views.len());
        for rec in &manifest.views {
            views.push(load_view(dir, rec, manifest.near, manifest.far)?);
        }
        if !views.iter().any(|v| v.split == Split::Train) {
            return Err(Error::Load { path: manifest_path, reason: "no training views".into() });
        }
        Ok(Dataset { near: manifest.near, far: manifest.far, views, degrade: manifest.degrade })
    }

    /// Writes images, depth maps and the manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "clean", "depth"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut records = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let image = format!("images/{}.png", v.name);
            v.image.save_png(&dir.join(&image))?;
            let clean = match &v.clean {
                Some(c) => {
                    let p = format!("clean/{}.png", v.name);
                    c.save_png(&dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            let depth = match &v.depth {
                Some(d) => {
                    let p = format!("depth/{}.depth", v.name);
                    save_depth(d, &dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            let c = &v.camera;
            records.push(ViewRecord {
                name: v.name.clone(),
                image,
                clean,
                depth,
                split: v.split,
                pose: c.pose.to_rows().to_vec(),
                focal: c.focal,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                shaken: v.shaken,
            });
        }
        let manifest = Manifest { near: self.near, far: self.far, views: records, degrade: self.degrade };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }
}

fn load_view(dir: &Path, rec: &ViewRecord, near: f64, far: f64) -> Result<View> {
    let bad = |reason: String| Error::Load { path: dir.join(MANIFEST_NAME), reason: format!("view {}: {reason}", rec.name) };
    let pose: [f64; 12] = rec
        .pose
        .as_slice()
        .try_into()
        .map_err(|_| bad(format!("pose has {} entries, expected 12", rec.pose.len())))?;
    if pose.iter().any(|x| !x.is_finite()) {
        return Err(bad("pose has non-finite entries".into()));
    }
    let camera = Camera {
        pose: RigidTransform::from_rows(&pose),
        focal: rec.focal,
        cx: rec.cx,
        cy: rec.cy,
        width: rec.width,
        height: rec.height,
        near,
        far,
    };
    camera.validate().map_err(|e| bad(e.to_string()))?;
    let sized = |img: RgbImage, what: &str| {
        if img.width != rec.width || img.height != rec.height {
            Err(bad(format!("{what} is {}x{}, manifest says {}x{}", img.width, img.height, rec.width, rec.height)))
        } else {
            Ok(img)
        }
    };
    let image = sized(RgbImage::load_png(&dir.join(&rec.image))?, "image")?;
    let clean = match &rec.clean {
        Some(p) => Some(sized(RgbImage::load_png(&dir.join(p))?, "clean image")?),
        None => None,
    };
    let depth = match &rec.depth {
        Some(p) => Some(load_depth(&dir.join(p))?),
        None => None,
    };
    Ok(View { name: rec.name.clone(), split: rec.split, camera, image, clean, depth, shaken: rec.shaken })
}

/// `DIMDEPTH | width u32 | height u32 | f64 values`, little endian.
pub fn save_depth(depth: &Plane, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 8 * depth.data.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_depth(path: &Path) -> Result<Plane> {
    let bad = |reason: &str| Error::Load { path: path.to_path_buf(), reason: reason.into() };
    let bytes = fs::read(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(bad("not a depth file"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * w * h {
        return Err(bad("depth file truncated"));
    }
    let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Plane::new(w, h, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    pub degrade: DegradeSpec,
    pub scene: ToyScene,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            views: 12,
            width: 96,
            height: 72,
            fov_deg: 50.0,
            orbit_radius: 4.0,
            orbit_height: 2.2,
            near: 1.5,
            far: 8.0,
            seed: 0,
            degrade: DegradeSpec::default(),
            scene: ToyScene::default(),
        }
    }
}

/// Renders the toy scene from a ring of cameras and degrades every view.
/// Each view draws from its own random stream, so views are independent of
/// one another and of processing order.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.degrade.validate()?;
    let focal = 0.5 * cfg.width as f64 / (0.5 * cfg.fov_deg.to_radians()).tan();
    let cams = orbit_cameras(cfg.views, cfg.orbit_radius, cfg.orbit_height, focal, cfg.width, cfg.height, cfg.near, cfg.far)?;
    let split = default_split(cfg.views);
    let shaken_count = (cfg.degrade.shake_fraction * cfg.views as f64).round() as usize;
    // Shaken views are spread evenly over the ring.
    let mut order: Vec<usize> = (0..cfg.views).collect();
    order.sort_by_key(|i| (i * 7919) % cfg.views.max(1));
    let mut shaken = vec![false; cfg.views];
    for i in order.into_iter().take(shaken_count) {
        shaken[i] = true;
    }
    let views = cams
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let (clean, depth) = render_toy_scene(&cfg.scene, cam);
            let path = shake_trajectory(&cfg.degrade, cfg.scene.diameter(), shaken[i], &mut rng);
            let frames = render_exposure(&cfg.scene, cam, &path);
            let image = synth_degrade(&frames, &cfg.degrade, &mut rng)?.quantized();
            Ok(View {
                name: format!("view_{i:02}"),
                split: split[i],
                camera: *cam,
                image,
                clean: Some(clean.quantized()),
                depth: Some(depth),
                shaken: shaken[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { near: cfg.near, far: cfg.far, views, degrade: Some(cfg.degrade) })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}
