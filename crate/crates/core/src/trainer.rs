//! Training: the simulated degraded pixel, losses, the two-stage schedule,
//! the optimiser loop and checkpoints.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{seeded_rng, Checkpoint, Gradients, Matrix, ParameterStore, Real, Tape, Var};
use crate::ctp::{ctp_mask, partition_rays, shake_rays, mix_rows, BlurKernelConfig, BlurKernelNet, CtpMask, CtpMaskConfig, RayTag, ShakeFrame};
use crate::dataset::{Dataset, Split};
use crate::degrade::{scale_up_auto, ScaleUpConfig};
use crate::error::{Error, Result};
use crate::fields::{mid_sample_index, FieldConfig, NoiseField, SceneField};
use crate::geometry::{camera_ray, Camera};
use crate::raster::{Plane, RgbImage};
use crate::renderer::{ray_matrix, render_image, render_rays, SamplingConfig};
use crate::snd::{aligned_rays, consistency_loss_tape, MatchBackend, MatchTable};

/// How the simulated training pixel is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Blur the scene render, then add the noise estimate, so noise is
    /// removed before the blur is modelled.
    #[default]
    DenoiseThenSharpen,
    /// Add the noise estimate to every shaken ray, then blur the sum.
    SharpenThenDenoise,
    /// Scene render only, fitted straight to the brightened images.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherKind {
    /// Reprojection through the dataset's depth maps.
    #[default]
    GroundTruth,
    /// Block matching on the current scene renders.
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub stage1_fraction: f64,
    pub alpha: f64,
    pub beta_stage2: f64,
    pub batch_rays: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub sampling: SamplingConfig,
    pub field: FieldConfig,
    pub kernel: BlurKernelConfig,
    pub mask: CtpMaskConfig,
    pub scale_up: ScaleUpConfig,
    /// Aligned-ray group cap, anchor included.
    pub group_size: usize,
    pub certainty_threshold: f64,
    /// Batch rays used as consistency anchors per step.
    pub consistency_anchors: usize,
    /// Iterations between match-table refreshes (block matcher only).
    pub match_refresh: usize,
    pub matcher: MatcherKind,
    pub match_patch_radius: usize,
    pub match_search_radius: usize,
    /// Cut the blur-kernel gradient of rays the mask marks as noisy.
    pub detach_noisy: bool,
    pub seed: u64,
    pub deterministic: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::DenoiseThenSharpen,
            iterations: 20_000,
            stage1_fraction: 0.6,
            alpha: 1.0,
            beta_stage2: 1e-2,
            batch_rays: 1024,
            lr_start: 5e-4,
            lr_end: 5e-5,
            sampling: SamplingConfig::default(),
            field: FieldConfig::default(),
            kernel: BlurKernelConfig::default(),
            mask: CtpMaskConfig::default(),
            scale_up: ScaleUpConfig::default(),
            group_size: 20,
            certainty_threshold: 0.8,
            consistency_anchors: 128,
            match_refresh: 2000,
            matcher: MatcherKind::GroundTruth,
            match_patch_radius: 3,
            match_search_radius: 6,
            detach_noisy: true,
            seed: 0,
            deterministic: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0) {
            return Err(Error::Config(format!("stage-1 fraction {} outside (0, 1)", self.stage1_fraction)));
        }
        if self.batch_rays == 0 || self.iterations == 0 {
            return Err(Error::Config("batch size and iteration count must be positive".into()));
        }
        if self.sampling.coarse == 0 {
            return Err(Error::Config("need at least one coarse sample".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size counts the anchor, so it must be at least 1".into()));
        }
        if self.lr_start < 0.0 || self.lr_end < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First iteration of the second stage.
    pub fn stage_boundary(&self) -> usize {
        (self.stage1_fraction * self.iterations as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
}

/// Loss weights and learning rate at `iteration`. The learning rate decays
/// exponentially from `lr_start` at the first iteration to `lr_end` at the
/// last.
pub fn schedule(iteration: usize, cfg: &TrainConfig) -> Schedule {
    let beta = if iteration < cfg.stage_boundary() { 0.0 } else { cfg.beta_stage2 };
    let progress = if cfg.iterations > 1 { iteration as f64 / (cfg.iterations - 1) as f64 } else { 0.0 };
    let lr = if cfg.lr_start == 0.0 { 0.0 } else { cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(progress) };
    Schedule { alpha: cfg.alpha, beta, lr }
}

/// Mean squared difference over rays and channels.
pub fn reconstruction_loss(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(predicted.len(), target.len(), "batch sizes differ");
    let sum: f64 = predicted.iter().zip(target).flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).powi(2))).sum();
    sum / (3 * predicted.len()).max(1) as f64
}

pub fn total_loss(construction: f64, consistency: f64, alpha: f64, beta: f64) -> f64 {
    alpha * construction + beta * consistency
}

fn mse_tape(tape: &mut Tape, predicted: Var, target: Var) -> Var {
    let d = tape.sub(predicted, target);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

/// The three networks trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub scene: SceneField,
    pub noise: NoiseField,
    pub kernel: BlurKernelNet,
}

impl Model {
    pub fn build(store: &mut ParameterStore, cfg: &TrainConfig, views: usize) -> Result<Self> {
        let mut rng = seeded_rng(cfg.seed);
        let scene = SceneField::build(store, "scene", cfg.field, &mut rng)?;
        let noise = NoiseField::build(store, "noise", &cfg.field, &mut rng)?;
        let kernel = BlurKernelNet::build(store, "kernel", views, cfg.kernel, &mut rng)?;
        Ok(Self { scene, noise, kernel })
    }
}

/// Training views after brightening, with their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub names: Vec<String>,
    pub cams: Vec<Camera>,
    pub targets: Vec<RgbImage>,
    pub masks: Vec<CtpMask>,
    pub depths: Vec<Option<Plane>>,
}

impl TrainingData {
    /// Uses `targets` as given (no brightening) and computes masks from them.
    pub fn new(cams: Vec<Camera>, targets: Vec<RgbImage>, depths: Vec<Option<Plane>>, mask: &CtpMaskConfig) -> Result<Self> {
        if cams.len() != targets.len() || cams.len() != depths.len() || cams.is_empty() {
            return Err(Error::Argument("need one camera, image and depth slot per training view".into()));
        }
        for (c, t) in cams.iter().zip(&targets) {
            if c.width != t.width || c.height != t.height {
                return Err(Error::Argument("image size differs from its camera".into()));
            }
        }
        let masks = targets.iter().map(|t| ctp_mask(t, mask.radius, mask.threshold)).collect();
        let names = (0..cams.len()).map(|i| format!("view_{i:02}")).collect();
        Ok(Self { names, cams, targets, masks, depths })
    }

    /// Brightens the training split of `ds`.
    pub fn from_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let views = ds.split_views(Split::Train);
        let targets: Vec<RgbImage> = views.iter().map(|v| scale_up_auto(&v.image, &cfg.scale_up)).collect();
        let mut data = Self::new(
            views.iter().map(|v| v.camera).collect(),
            targets,
            views.iter().map(|v| v.depth.clone()).collect(),
            &cfg.mask,
        )?;
        data.names = views.iter().map(|v| v.name.clone()).collect();
        Ok(data)
    }

    pub fn views(&self) -> usize {
        self.cams.len()
    }
}

/// A training pixel: view index into the training data and `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RayRef {
    pub view: usize,
    pub pixel: (usize, usize),
}

pub fn sample_batch<R: Rng>(data: &TrainingData, n: usize, rng: &mut R) -> Vec<RayRef> {
    (0..n)
        .map(|_| {
            let view = rng.random_range(0..data.views());
            let cam = &data.cams[view];
            RayRef { view, pixel: (rng.random_range(0..cam.height), rng.random_range(0..cam.width)) }
        })
        .collect()
}

pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Var,
    pub consistency: Option<Var>,
    /// Aligned groups that fed the consistency term.
    pub groups: usize,
}

/// Builds the full training loss for `batch` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn composed_loss<R: Rng>(
    tape: &mut Tape,
    model: &Model,
    cfg: &TrainConfig,
    data: &TrainingData,
    matches: Option<&MatchTable>,
    batch: &[RayRef],
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<LossTerms> {
    let b = batch.len();
    let (near, far) = (data.cams[0].near, data.cams[0].far);
    let mut target = Matrix::zeros(b, 3);
    let mut base = Vec::with_capacity(b);
    for (i, r) in batch.iter().enumerate() {
        let px = data.targets[r.view].get(r.pixel.0, r.pixel.1);
        for c in 0..3 {
            target.data[3 * i + c] = px[c] as Real;
        }
        base.push(camera_ray(&data.cams[r.view], r.view, r.pixel)?);
    }
    let target = tape.constant(target);

    let (pred, coarse_pred) = if cfg.mode == TrainMode::Plain {
        let rays = tape.constant(ray_matrix(&base));
        let out = render_rays(tape, &model.scene, rays, near, far, &cfg.sampling, 1, Some(&mut *rng))?;
        (out.color, out.coarse_color)
    } else {
        let k = cfg.kernel.motions;
        let views: Vec<usize> = batch.iter().map(|r| r.view).collect();
        let ko = model.kernel.forward(tape, &views)?;
        let (mut rot, mut trans, mut weights) = (ko.rotation, ko.translation, ko.weights);
        if cfg.detach_noisy {
            let mut blocked = vec![false; b];
            for (i, r) in batch.iter().enumerate() {
                blocked[i] = partition_rays(&[r.pixel], &data.masks[r.view])?[0] == RayTag::Noisy;
            }
            if blocked.iter().any(|x| *x) {
                rot = tape.detach_rows(rot, &blocked);
                trans = tape.detach_rows(trans, &blocked);
                weights = tape.detach_rows(weights, &blocked);
            }
        }
        let frames: Vec<ShakeFrame> = batch
            .iter()
            .map(|r| {
                let cam = &data.cams[r.view];
                ShakeFrame { origin: cam.center(), cam_rot: cam.pose.rotation, cam_dir: cam.camera_dir(r.pixel.0 as f64, r.pixel.1 as f64) }
            })
            .collect();
        let shaken = shake_rays(tape, rot, trans, &frames, k, cfg.kernel.translation_mode);
        let out = render_rays(tape, &model.scene, shaken, near, far, &cfg.sampling, k + 1, Some(&mut *rng))?;
        let rays_val = tape.value(shaken).clone();
        // Noise is read at the middle sample of each ray that enters it.
        let noise_rows: Vec<usize> = match cfg.mode {
            TrainMode::DenoiseThenSharpen => (0..b).map(|i| i * (k + 1)).collect(),
            _ => (0..b * (k + 1)).collect(),
        };
        let mut pts = Matrix::zeros(noise_rows.len(), 3);
        let mut dirs = Matrix::zeros(noise_rows.len(), 3);
        for (j, &row) in noise_rows.iter().enumerate() {
            let ts = &out.t[row];
            let t = ts[mid_sample_index(ts.len())];
            let ray = rays_val.row(row);
            for c in 0..3 {
                pts.data[3 * j + c] = ray[c] + t * ray[3 + c];
                dirs.data[3 * j + c] = ray[3 + c];
            }
        }
        let (pts, dirs) = (tape.constant(pts), tape.constant(dirs));
        let noise = model.noise.eval(tape, pts, dirs)?;
        let compose = |tape: &mut Tape, colors: Var| match cfg.mode {
            TrainMode::DenoiseThenSharpen => {
                let blurred = mix_rows(tape, weights, colors);
                tape.add(blurred, noise)
            }
            _ => {
                let noisy = tape.add(colors, noise);
                mix_rows(tape, weights, noisy)
            }
        };
        let pred = compose(tape, out.color);
        let coarse = out.coarse_color.map(|c| compose(tape, c));
        (pred, coarse)
    };

    let mut reconstruction = mse_tape(tape, pred, target);
    if let Some(c) = coarse_pred {
        let extra = mse_tape(tape, c, target);
        reconstruction = tape.add(reconstruction, extra);
    }
    let mut total = tape.scale(reconstruction, alpha as Real);

    let mut consistency = None;
    let mut group_count = 0;
    if beta > 0.0 && cfg.mode != TrainMode::Plain {
        if let Some(table) = matches {
            let mut rays = Vec::new();
            let mut groups = Vec::new();
            for anchor in base.iter().take(cfg.consistency_anchors) {
                let g = aligned_rays(anchor, table, &data.cams, cfg.certainty_threshold, cfg.group_size)?;
                if g.len() < 2 {
                    continue;
                }
                assert!(g.members.iter().skip(1).all(|m| m.1 > cfg.certainty_threshold), "group member below threshold");
                groups.push((rays.len()..rays.len() + g.len()).collect::<Vec<_>>());
                rays.extend(g.members.iter().map(|m| m.0));
            }
            if !groups.is_empty() {
                let m = tape.constant(ray_matrix(&rays));
                let out = render_rays(tape, &model.scene, m, near, far, &cfg.sampling, 1, Some(&mut *rng))?;
                let cons = consistency_loss_tape(tape, out.color, &groups);
                let weighted = tape.scale(cons, beta as Real);
                total = tape.add(total, weighted);
                consistency = Some(cons);
                group_count = groups.len();
            }
        }
    }
    Ok(LossTerms { total, reconstruction, consistency, groups: group_count })
}

/// Adaptive-moment optimiser state, one moment pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

const BETA1: Real = 0.9;
const BETA2: Real = 0.999;
const ADAM_EPS: Real = 1e-8;

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Matrix> = store.blocks().iter().map(|b| Matrix::zeros(b.value.rows, b.value.cols)).collect();
        Self { m: zeros.clone(), v: zeros }
    }

    /// One update with bias correction for step `t` (1-based). Blocks
    /// without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64, t: u64) {
        let lr = lr as Real;
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = BETA1 * m.data[j] + (1.0 - BETA1) * gj;
                v.data[j] = BETA2 * v.data[j] + (1.0 - BETA2) * gj * gj;
                let step = lr * (m.data[j] / c1) / ((v.data[j] / c2).sqrt() + ADAM_EPS);
                p.data[j] -= step;
            }
        }
    }
}

/// Per-iteration random stream, so a resumed run draws what an
/// uninterrupted one would.
pub fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub reconstruction: f64,
    pub consistency: f64,
    pub lr: f64,
    pub groups: usize,
}

pub const LOG_HEADER: &str = "iteration,l_construction,l_consistency,lr";

impl StepLog {
    pub fn row(&self) -> String {
        format!("{},{:.9e},{:.9e},{:.9e}", self.iteration, self.reconstruction, self.consistency, self.lr)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    views: usize,
    config: TrainConfig,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub views: usize,
    pub store: ParameterStore,
    pub model: Model,
    pub adam: Adam,
    pub iteration: usize,
    matches: Option<Arc<MatchTable>>,
    matches_at: Option<usize>,
}

impl TrainState {
    pub fn new(config: TrainConfig, views: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let model = Model::build(&mut store, &config, views)?;
        let adam = Adam::new(&store);
        Ok(Self { config, views, store, model, adam, iteration: 0, matches: None, matches_at: None })
    }

    pub fn matches(&self) -> Option<&MatchTable> {
        self.matches.as_deref()
    }

    fn needs_matches(&self) -> bool {
        self.config.mode != TrainMode::Plain
            && self.config.beta_stage2 > 0.0
            && self.views > 1
            && self.iteration >= self.config.stage_boundary()
    }

    /// Rebuilds the match table when the schedule calls for it. Nothing is
    /// matched during the first stage.
    pub fn refresh_matches(&mut self, data: &TrainingData) -> Result<()> {
        if !self.needs_matches() {
            return Ok(());
        }
        let cfg = &self.config;
        let due = match (cfg.matcher, self.matches_at) {
            (_, None) => true,
            (MatcherKind::GroundTruth, Some(_)) => false,
            (MatcherKind::Block, Some(at)) => self.iteration >= at + cfg.match_refresh.max(1),
        };
        if !due {
            return Ok(());
        }
        let table = match cfg.matcher {
            MatcherKind::GroundTruth => {
                if data.depths.iter().any(Option::is_none) {
                    return Err(Error::Config("ground-truth matching needs a depth map for every training view".into()));
                }
                MatchTable::build(&data.targets, |a, b| MatchBackend::GroundTruth {
                    cam_a: &data.cams[a],
                    cam_b: &data.cams[b],
                    depth_a: data.depths[a].as_ref(),
                    depth_b: data.depths[b].as_ref(),
                })?
            }
            MatcherKind::Block => {
                let renders = data
                    .cams
                    .iter()
                    .map(|c| render_image(&self.store, &self.model.scene, c, &cfg.sampling))
                    .collect::<Result<Vec<_>>>()?;
                let (pr, sr) = (cfg.match_patch_radius, cfg.match_search_radius);
                MatchTable::build(&renders, |_, _| MatchBackend::Block { patch_radius: pr, search_radius: sr })?
            }
        };
        self.matches = Some(Arc::new(table));
        self.matches_at = Some(self.iteration);
        Ok(())
    }

    /// One optimiser step on a freshly drawn batch.
    pub fn step(&mut self, data: &TrainingData) -> Result<StepLog> {
        if data.views() != self.views {
            return Err(Error::Argument(format!("model has {} views, data has {}", self.views, data.views())));
        }
        self.refresh_matches(data)?;
        let i = self.iteration;
        let sched = schedule(i, &self.config);
        let mut rng = step_rng(self.config.seed, i);
        let batch = sample_batch(data, self.config.batch_rays, &mut rng);
        let matches = self.matches.clone();
        let (grads, log) = {
            let mut tape = Tape::new(&self.store);
            let terms = composed_loss(
                &mut tape,
                &self.model,
                &self.config,
                data,
                matches.as_deref(),
                &batch,
                sched.alpha,
                sched.beta,
                &mut rng,
            )?;
            let grads = tape.backward(terms.total)?;
            let log = StepLog {
                iteration: i,
                reconstruction: tape.value(terms.reconstruction).data[0] as f64,
                consistency: terms.consistency.map_or(0.0, |c| tape.value(c).data[0] as f64),
                lr: sched.lr,
                groups: terms.groups,
            };
            (grads.params, log)
        };
        self.adam.update(&mut self.store, &grads, sched.lr, i as u64 + 1);
        self.iteration += 1;
        Ok(log)
    }

    /// Steps until `until` (capped at the configured total), writing a log
    /// row every `log_every` iterations and for the last one.
    pub fn run(&mut self, data: &TrainingData, until: usize, log: &mut dyn Write) -> Result<Vec<StepLog>> {
        let until = until.min(self.config.iterations);
        let mut logs = Vec::new();
        while self.iteration < until {
            let entry = self.step(data)?;
            let every = self.config.log_every.max(1);
            if entry.iteration % every == 0 || entry.iteration + 1 == until {
                writeln!(log, "{}", entry.row())?;
            }
            logs.push(entry);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta { views: self.views, config: self.config.clone() };
        Checkpoint {
            iteration: self.iteration as u64,
            metadata: toml::to_string(&meta).expect("metadata serialises"),
            params: self.store.clone(),
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            toml::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut fresh = Self::new(meta.config, meta.views)?;
        let same_layout = fresh.store.len() == ck.params.len()
            && fresh.store.blocks().iter().zip(ck.params.blocks()).all(|(a, b)| {
                a.name == b.name && a.value.shape() == b.value.shape()
            });
        if !same_layout {
            return Err(Error::Checkpoint("parameter layout does not match the stored configuration".into()));
        }
        fresh.store = ck.params;
        if let Some((m, v)) = ck.moments {
            fresh.adam = Adam { m, v };
        }
        fresh.iteration = ck.iteration as usize;
        Ok(fresh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Novel view from the scene field alone; noise and blur networks are not
/// used at render time.
pub fn render_novel(state: &TrainState, cam: &Camera) -> Result<RgbImage> {
    render_image(&state.store, &state.model.scene, cam, &state.config.sampling)
}
