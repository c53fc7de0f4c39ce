use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dimnerf::ctp::ctp_mask_with_lowpass;
use dimnerf::dataset::{synth_dataset, Dataset, Split, SynthConfig};
use dimnerf::degrade::scale_up_auto;
use dimnerf::metrics::MetricReport;
use dimnerf::raster::RgbImage;
use dimnerf::snd::{match_views, MatchBackend, PairMatch};
use dimnerf::trainer::{render_novel, MatcherKind, TrainConfig, TrainState, TrainingData, LOG_HEADER};

#[derive(Parser)]
#[command(name = "dimnerf", version, about = "Radiance fields from dark, noisy, shaky photos")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Random seed. Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config: a synth config for `synth`, a training config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Pin the seed (0 unless --seed is given) so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a degraded synthetic scene with clean references and depth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Write `checkpoint_<iter>.bin` every N iterations as well.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from a checkpoint (its config wins over --config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render dataset poses from the scene field of a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        /// Output size as WxH; the focal length scales with the width.
        #[arg(long)]
        size: Option<String>,
    },
    /// PSNR/SSIM of `<renders>/<view>.png` against the clean references.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the CTP mask and its low-pass image for every training view.
    Mask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Match one pair of training views and write the flow and certainty.
    Match {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, value_enum)]
        matcher: Option<MatcherArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherArg {
    GroundTruth,
    Block,
}

impl Common {
    fn resolve_seed(&self, configured: u64) -> u64 {
        match self.seed {
            Some(s) => s,
            None if self.deterministic || self.config.is_some() => configured,
            None => rand::random(),
        }
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_toml(&read(p)?).with_context(|| format!("config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        cfg.seed = self.resolve_seed(cfg.seed);
        cfg.deterministic |= self.deterministic;
        Ok(cfg)
    }

    fn synth_config(&self) -> Result<SynthConfig> {
        let mut cfg: SynthConfig = match &self.config {
            Some(p) => toml::from_str(&read(p)?).with_context(|| format!("config {}", p.display()))?,
            None => SynthConfig::default(),
        };
        cfg.seed = self.resolve_seed(cfg.seed);
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn selected<'a>(ds: &'a Dataset, split: SplitArg) -> Vec<&'a dimnerf::dataset::View> {
    match split {
        SplitArg::Train => ds.split_views(Split::Train),
        SplitArg::Eval => ds.split_views(Split::Eval),
        SplitArg::All => ds.views.iter().collect(),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once('x').context("size must look like 96x72")?;
    let (w, h) = (w.trim().parse()?, h.trim().parse()?);
    if w == 0 || h == 0 {
        bail!("size must be positive");
    }
    Ok((w, h))
}

fn synth(common: &Common, out: &Path, views: Option<usize>) -> Result<()> {
    let mut cfg = common.synth_config()?;
    if let Some(v) = views {
        cfg.views = v;
    }
    let ds = synth_dataset(&cfg)?;
    ds.save(out)?;
    fs::write(out.join("synth.toml"), toml::to_string(&cfg)?)?;
    let mean = ds.views.iter().map(|v| v.image.mean()).sum::<f64>() / ds.views.len() as f64;
    println!(
        "wrote {} views to {} (mean intensity {:.1}/255, {} shaken)",
        ds.views.len(),
        out.display(),
        mean * 255.0,
        ds.views.iter().filter(|v| v.shaken).count()
    );
    Ok(())
}

fn train(
    common: &Common,
    data: &Path,
    out: &Path,
    iterations: Option<usize>,
    checkpoint_every: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let mut state = match resume {
        Some(p) => TrainState::load(p)?,
        None => {
            let mut cfg = common.train_config()?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate()?;
            let views = ds.split_views(Split::Train).len();
            TrainState::new(cfg, views)?
        }
    };
    let td = TrainingData::from_dataset(&ds, &state.config)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), state.config.to_toml())?;
    let log_path = out.join("train_log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut w = BufWriter::new(fs::File::create(&log_path)?);
        writeln!(w, "{LOG_HEADER}")?;
        w
    };
    let total = state.config.iterations;
    let every = checkpoint_every.unwrap_or(total).max(1);
    while state.iteration < total {
        let stop = ((state.iteration / every + 1) * every).min(total);
        let logs = state.run(&td, stop, &mut log)?;
        if let Some(l) = logs.last() {
            eprintln!("iter {:>6}  l_construction {:.5}  l_consistency {:.5}", l.iteration + 1, l.reconstruction, l.consistency);
        }
        if stop < total {
            state.save(&out.join(format!("checkpoint_{stop}.bin")))?;
        }
    }
    log.flush()?;
    state.save(&out.join("checkpoint.bin"))?;
    println!("trained {} iterations, checkpoint in {}", state.iteration, out.display());
    Ok(())
}

fn render(common: &Common, checkpoint: &Path, data: &Path, out: &Path, split: SplitArg, size: Option<&str>) -> Result<()> {
    let mut state = TrainState::load(checkpoint)?;
    if let Some(p) = &common.config {
        let cfg = TrainConfig::from_toml(&read(p)?)?;
        state.config.sampling = cfg.sampling;
    }
    let ds = Dataset::load(data)?;
    fs::create_dir_all(out)?;
    for v in selected(&ds, split) {
        let mut cam = v.camera;
        if let Some(s) = size {
            let (w, h) = parse_size(s)?;
            let k = w as f64 / cam.width as f64;
            cam.focal *= k;
            cam.cx = w as f64 / 2.0;
            cam.cy = h as f64 / 2.0;
            cam.width = w;
            cam.height = h;
        }
        let img = render_novel(&state, &cam)?;
        img.save_png(&out.join(format!("{}.png", v.name)))?;
    }
    println!("rendered to {}", out.display());
    Ok(())
}

fn eval(data: &Path, renders: &Path, split: SplitArg, csv: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(data)?;
    let mut pairs = Vec::new();
    for v in selected(&ds, split) {
        let reference = v.clean.as_ref().with_context(|| format!("view {} has no clean reference", v.name))?;
        let render = RgbImage::load_png(&renders.join(format!("{}.png", v.name)))?;
        pairs.push((v.name.clone(), render, reference));
    }
    let report = MetricReport::evaluate(pairs.iter().map(|(n, r, c)| (n.clone(), r, *c)))?;
    println!("{report}");
    if let Some(p) = csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn mask(common: &Common, data: &Path, out: &Path, radius: Option<f64>, threshold: Option<f64>) -> Result<()> {
    let cfg = common.train_config()?;
    let (r, t) = (radius.unwrap_or(cfg.mask.radius), threshold.unwrap_or(cfg.mask.threshold));
    if !(0.0..=255.0).contains(&t) || r < 0.0 {
        bail!("need radius >= 0 and threshold in [0, 255]");
    }
    let ds = Dataset::load(data)?;
    fs::create_dir_all(out)?;
    for v in ds.split_views(Split::Train) {
        let bright = scale_up_auto(&v.image, &cfg.scale_up);
        let (m, low) = ctp_mask_with_lowpass(&bright, r, t);
        m.to_plane().save_png(&out.join(format!("{}_mask.png", v.name)))?;
        low.save_png(&out.join(format!("{}_lowpass.png", v.name)))?;
        println!("{:<12} {:.1}% clear", v.name, 100.0 * m.ones() as f64 / m.values.len() as f64);
    }
    Ok(())
}

/// Offsets as red/green around 0.5 (±`range` pixels spans the full scale),
/// blue 0 where there is no match.
fn flow_image(m: &PairMatch, range: f64) -> RgbImage {
    let mut img = RgbImage::filled(m.width, m.height, [0.0; 3]);
    for r in 0..m.height {
        for c in 0..m.width {
            if let (Some((mr, mc)), _) = m.get(r, c) {
                let enc = |d: f64| (0.5 + 0.5 * d / range).clamp(0.0, 1.0);
                img.set(r, c, [enc(mc - c as f64), enc(mr - r as f64), 1.0]);
            }
        }
    }
    img
}

fn match_pair(common: &Common, data: &Path, out: &Path, a: usize, b: usize, matcher: Option<MatcherArg>) -> Result<()> {
    let cfg = common.train_config()?;
    let ds = Dataset::load(data)?;
    let td = TrainingData::from_dataset(&ds, &cfg)?;
    if a >= td.views() || b >= td.views() {
        bail!("view index out of range (have {} training views)", td.views());
    }
    let kind = match matcher {
        Some(MatcherArg::GroundTruth) => MatcherKind::GroundTruth,
        Some(MatcherArg::Block) => MatcherKind::Block,
        None => cfg.matcher,
    };
    let backend = match kind {
        MatcherKind::GroundTruth => MatchBackend::GroundTruth {
            cam_a: &td.cams[a],
            cam_b: &td.cams[b],
            depth_a: td.depths[a].as_ref(),
            depth_b: td.depths[b].as_ref(),
        },
        MatcherKind::Block => {
            MatchBackend::Block { patch_radius: cfg.match_patch_radius, search_radius: cfg.match_search_radius }
        }
    };
    let m = match_views(&td.targets[a], &td.targets[b], &backend)?;
    fs::create_dir_all(out)?;
    let range = m.width.max(m.height) as f64 / 4.0;
    flow_image(&m, range).save_png(&out.join(format!("flow_{a}_{b}.png")))?;
    m.certainty_plane().save_png(&out.join(format!("certainty_{a}_{b}.png")))?;
    let matched = m.map.iter().filter(|x| x.is_some()).count();
    println!("{matched} of {} pixels matched", m.map.len());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.command {
        Command::Synth { out, views } => synth(c, out, *views),
        Command::Train { data, out, iterations, checkpoint_every, resume } => {
            train(c, data, out, *iterations, *checkpoint_every, resume.as_deref())
        }
        Command::Render { checkpoint, data, out, split, size } => {
            render(c, checkpoint, data, out, *split, size.as_deref())
        }
        Command::Eval { renders, data, split, csv } => eval(data, renders, *split, csv.as_deref()),
        Command::Mask { data, out, radius, threshold } => mask(c, data, out, *radius, *threshold),
        Command::Match { data, out, a, b, matcher } => match_pair(c, data, out, *a, *b, *matcher),
    }
}
