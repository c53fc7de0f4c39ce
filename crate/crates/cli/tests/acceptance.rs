//! Acceptance checks. Each test prints one `criterion N PASS|FAIL` line.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use dimnerf::autodiff::{grad_check, seeded_rng, BlockId, ParameterStore, Tape};
use dimnerf::ctp::{
    blur_compose, ctp_mask, dft2, idft2_real, intensity_mask, lowpass, rbk_motions, BlurKernelConfig, BlurKernelNet,
};
use dimnerf::dataset::{synth_dataset, Dataset, Split, SynthConfig};
use dimnerf::fields::FieldConfig;
use dimnerf::geometry::{camera_ray, se3_exp, Camera, Ray, RigidTransform, ScrewMotion, TranslationMode};
use dimnerf::metrics::psnr;
use dimnerf::raster::{Plane, RgbImage};
use dimnerf::renderer::{volume_render, SamplingConfig};
use dimnerf::snd::consistency_loss;
use dimnerf::trainer::{
    composed_loss, render_novel, sample_batch, step_rng, RayRef, TrainConfig, TrainMode, TrainState, TrainingData,
};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn tiny_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        iterations: 10,
        stage1_fraction: 0.5,
        batch_rays: 4,
        sampling: SamplingConfig { coarse: 8, fine: 0, jitter: true },
        field: FieldConfig {
            depth: 2,
            width: 16,
            encoding: dimnerf::autodiff::EncodingConfig { position_freqs: 3, direction_freqs: 1, include_input: true },
            density_shift: 0.0,
        },
        kernel: BlurKernelConfig { motions: 2, latent_dim: 4, hidden: 8, init_scale: 0.1, ..Default::default() },
        group_size: 3,
        consistency_anchors: 4,
        ..Default::default()
    }
}

fn tiny_scene() -> Dataset {
    synth_dataset(&SynthConfig { views: 4, width: 24, height: 18, seed: 4, ..Default::default() }).unwrap()
}

#[test]
fn criterion_01_gradient_integrity() {
    let t0 = Instant::now();
    let ds = tiny_scene();
    // The noisy-ray detach cuts gradient paths on purpose; criterion 5 covers it.
    let cfg = TrainConfig { detach_noisy: false, ..tiny_config(TrainMode::DenoiseThenSharpen) };
    let data = TrainingData::from_dataset(&ds, &cfg).unwrap();
    let mut state = TrainState::new(cfg.clone(), data.views()).unwrap();
    state.iteration = cfg.stage_boundary();
    state.refresh_matches(&data).unwrap();
    let matches = state.matches();
    assert!(matches.is_some());

    // A batch with at least one aligned group, so every loss term is live.
    let batch: Vec<RayRef> = (0..200)
        .map(|s| sample_batch(&data, 4, &mut step_rng(s, 0)))
        .find(|b| {
            let mut tape = Tape::new(&state.store);
            let t = composed_loss(&mut tape, &state.model, &cfg, &data, matches, b, 1.0, 1e-2, &mut step_rng(9, 0));
            t.unwrap().groups > 0
        })
        .expect("some batch has a matched ray");

    let report = grad_check(
        &state.store,
        |tape| {
            let mut rng = step_rng(9, 0);
            Ok(composed_loss(tape, &state.model, &cfg, &data, matches, &batch, 1.0, 1e-2, &mut rng)?.total)
        },
        1e-6,
        Some(6),
        1,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = report.max_rel_error < 1e-5 && secs < 60.0;
    verdict(
        1,
        "gradient integrity of the composed loss",
        pass,
        &format!("max rel error {:.2e} over {} coordinates, {secs:.1}s", report.max_rel_error, report.coordinates),
    );
    assert!(pass);
}

#[test]
fn criterion_02_volume_rendering_identities() {
    let mut rng = seeded_rng(2);
    let (mut worst_sum, mut monotone) = (0.0f64, true);
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let out = volume_render(&sigma, &delta, &colors);
        let total: f64 = out.weights.iter().sum();
        let optical: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        worst_sum = worst_sum.max((total - (1.0 - (-optical).exp())).abs());
        monotone &= out.transmittance.windows(2).all(|w| w[1] <= w[0]);
    }
    let pass = worst_sum < 1e-12 && monotone;
    verdict(
        2,
        "volume rendering identities",
        pass,
        &format!("max |sum w - (1 - exp(-sum sigma delta))| {worst_sum:.2e}, transmittance non-increasing: {monotone}"),
    );
    assert!(pass);
}

fn naive_dft_centred(p: &Plane) -> Vec<(f64, f64)> {
    let (m, n) = (p.height, p.width);
    let mut out = vec![(0.0, 0.0); m * n];
    for u in 0..m {
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for a in 0..m {
                for b in 0..n {
                    let ang = -2.0 * std::f64::consts::PI * ((u * a) as f64 / m as f64 + (v * b) as f64 / n as f64);
                    re += p.get(a, b) * ang.cos();
                    im += p.get(a, b) * ang.sin();
                }
            }
            out[((u + m / 2) % m) * n + (v + n / 2) % n] = (re, im);
        }
    }
    out
}

#[test]
fn criterion_03_dft_oracle() {
    let mut rng = seeded_rng(3);
    let (mut oracle, mut idem, mut round) = (0.0f64, 0.0f64, 0.0f64);
    for (w, h) in [(8, 8), (16, 12)] {
        let p = Plane::new(w, h, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect());
        let s = dft2(&p);
        for (i, (re, im)) in naive_dft_centred(&p).into_iter().enumerate() {
            oracle = oracle.max((s.data[i].re - re).abs()).max((s.data[i].im - im).abs());
        }
        let once = lowpass(&s, 3.0);
        let twice = lowpass(&once, 3.0);
        for (a, b) in once.data.iter().zip(&twice.data) {
            idem = idem.max((a - b).norm());
        }
        let back = idft2_real(&s);
        for (a, b) in back.data.iter().zip(&p.data) {
            round = round.max((a - b).abs());
        }
    }
    let pass = oracle < 1e-9 && idem == 0.0 && round < 1e-9;
    verdict(
        3,
        "DFT against the brute-force oracle",
        pass,
        &format!("max coefficient error {oracle:.2e}, lowpass idempotence gap {idem:.1e}, round trip {round:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_se3_and_blur_kernel() {
    let identity = se3_exp(&ScrewMotion::default()) == RigidTransform::IDENTITY;

    let mut store = ParameterStore::new();
    let cfg = BlurKernelConfig { motions: 4, init_scale: 1.0, ..Default::default() };
    let net = BlurKernelNet::build(&mut store, "kernel", 5, cfg, &mut seeded_rng(4)).unwrap();
    let mut worst_sum = 0.0f64;
    for v in 0..5 {
        let (screws, w) = rbk_motions(&store, &net, v).unwrap();
        assert_eq!((screws.len(), w.len()), (4, 5));
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }

    let cam = Camera::new(Camera::look_at([0.0, -3.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]), 20.0, 16, 12, 0.5, 6.0).unwrap();
    let render = |r: &Ray| [r.dir[0].abs(), (r.origin[1] * 0.3).sin().abs(), r.dir[2] * r.dir[2]];
    let mut worst_blur = 0.0f64;
    for (row, col) in [(0, 0), (5, 7), (11, 15)] {
        let ray = camera_ray(&cam, 0, (row, col)).unwrap();
        let still = vec![ScrewMotion::default(); 4];
        let out = blur_compose(&cam.pose, &ray, &still, &[0.1, 0.2, 0.3, 0.25, 0.15], TranslationMode::LeftJacobian, render)
            .unwrap();
        let sharp = render(&ray);
        for c in 0..3 {
            worst_blur = worst_blur.max((out[c] - sharp[c]).abs());
        }
    }
    let pass = identity && worst_sum < 1e-9 && worst_blur < 1e-12;
    verdict(
        4,
        "SE(3) exponential and blur kernel",
        pass,
        &format!("exp(0) = I: {identity}, k=4 weight-sum error {worst_sum:.1e}, identity-screw blur error {worst_blur:.1e}"),
    );
    assert!(pass);
}

fn kernel_grads(state: &TrainState, cfg: &TrainConfig, data: &TrainingData, batch: &[RayRef]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new(&state.store);
    let terms = composed_loss(&mut tape, &state.model, cfg, data, None, batch, 1.0, 0.0, &mut step_rng(0, 0)).unwrap();
    let loss = tape.value(terms.total).data[0] as f64;
    let grads = tape.backward(terms.total).unwrap().params;
    let blocks: Vec<BlockId> = state.model.kernel.blocks();
    let g = blocks.iter().map(|id| grads.dense(&state.store, *id).data.iter().map(|x| *x as f64).collect()).collect();
    (loss, g)
}

#[test]
fn criterion_05_detach_semantics() {
    let ds = tiny_scene();
    let mut cfg = tiny_config(TrainMode::DenoiseThenSharpen);
    cfg.sampling.jitter = false;
    cfg.batch_rays = 8;
    let mut data = TrainingData::from_dataset(&ds, &cfg).unwrap();
    let state = TrainState::new(cfg.clone(), data.views()).unwrap();
    let mut batch = sample_batch(&data, 8, &mut step_rng(5, 0));
    batch.sort_by_key(|r| (r.view, r.pixel));
    batch.dedup();

    // All rays noisy.
    for m in &mut data.masks {
        m.values.iter_mut().for_each(|v| *v = 0);
    }
    let (loss_detached, g_detached) = kernel_grads(&state, &cfg, &data, &batch);
    let free_cfg = TrainConfig { detach_noisy: false, ..cfg.clone() };
    let (loss_free, g_free) = kernel_grads(&state, &free_cfg, &data, &batch);
    let all_zero = g_detached.iter().flatten().all(|x| *x == 0.0);
    let free_moves = g_free.iter().flatten().any(|x| *x != 0.0);
    let same_loss = loss_detached == loss_free;

    // Mixed: every other batch ray is clear.
    let clear: Vec<RayRef> = batch.iter().copied().step_by(2).collect();
    for r in &clear {
        let w = data.masks[r.view].width;
        data.masks[r.view].values[r.pixel.0 * w + r.pixel.1] = 1;
    }
    let (_, g_mixed) = kernel_grads(&state, &cfg, &data, &batch);
    let (_, g_clear) = kernel_grads(&state, &cfg, &data, &clear);
    let ratio = clear.len() as f64 / batch.len() as f64;
    let worst = g_mixed
        .iter()
        .flatten()
        .zip(g_clear.iter().flatten())
        .map(|(m, c)| (m - c * ratio).abs())
        .fold(0.0f64, f64::max);
    let pass = all_zero && free_moves && same_loss && worst < 1e-12;
    verdict(
        5,
        "detach semantics of the noisy-ray mask",
        pass,
        &format!(
            "all-noisy kernel grads zero: {all_zero}, loss unchanged: {same_loss}, mixed vs clear-subset max gap {worst:.1e} ({} of {} clear)",
            clear.len(),
            batch.len()
        ),
    );
    assert!(pass);
}

/// Dark speckle with a narrow bright ramp down the left edge.
fn speckle_card(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = seeded_rng(seed);
    let mut data = Vec::with_capacity(w * h);
    for _r in 0..h {
        for c in 0..w {
            let v = if c < w / 8 {
                (150.0 + 60.0 * c as f64 / (w / 8) as f64) / 255.0
            } else if rng.random::<f64>() < 0.15 {
                120.0 / 255.0
            } else {
                10.0 / 255.0
            };
            data.push([v; 3]);
        }
    }
    RgbImage::new(w, h, data)
}

#[test]
fn criterion_06_ctp_mask_defaults() {
    let (r, t) = (30.0, 48.0);
    let card = speckle_card(192, 144, 6);
    let ctp = ctp_mask(&card, r, t);
    let plain = intensity_mask(&card, t);
    let passed = plain.values.iter().filter(|v| **v == 1).count();
    let excluded = plain.values.iter().zip(&ctp.values).filter(|(p, c)| **p == 1 && **c == 0).count();
    let frac = excluded as f64 / passed as f64;
    let pass = frac >= 0.2;
    verdict(
        6,
        "CTP mask at r=30, T=48 versus a plain threshold",
        pass,
        &format!("{excluded} of {passed} threshold-passing pixels excluded ({:.1}%)", 100.0 * frac),
    );
    assert!(pass);
}

#[test]
fn criterion_07_consistency_loss() {
    let zero = consistency_loss(&[[0.3, 0.6, 0.9]; 5]) == 0.0;
    let pair = consistency_loss(&[[0.0; 3], [1.0; 3]]);
    let mut rng = seeded_rng(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let mut colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let before = consistency_loss(&colors);
        colors.shuffle(&mut rng);
        worst = worst.max((consistency_loss(&colors) - before).abs());
    }
    let pass = zero && pair == 0.5 && worst < 1e-15;
    verdict(
        7,
        "consistency loss",
        pass,
        &format!("identical group zero: {zero}, black/white pair {pair}, permutation gap {worst:.1e}"),
    );
    assert!(pass);
}

/// Budget shared by the three end-to-end runs.
fn desk_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        iterations: 3000,
        batch_rays: 128,
        lr_start: 5e-3,
        lr_end: 5e-4,
        sampling: SamplingConfig { coarse: 32, fine: 0, jitter: true },
        field: FieldConfig {
            depth: 4,
            width: 48,
            encoding: dimnerf::autodiff::EncodingConfig { position_freqs: 6, direction_freqs: 2, include_input: true },
            density_shift: 0.0,
        },
        kernel: BlurKernelConfig { latent_dim: 16, hidden: 32, ..Default::default() },
        consistency_anchors: 32,
        seed: 8,
        ..Default::default()
    }
}

struct EndToEnd {
    plain: f64,
    denoise_first: f64,
    sharpen_first: f64,
    input: f64,
    mean_intensity: f64,
    minutes: f64,
}

fn held_out_psnr(ds: &Dataset, mode: TrainMode) -> f64 {
    let cfg = desk_config(mode);
    let data = TrainingData::from_dataset(ds, &cfg).unwrap();
    let mut state = TrainState::new(cfg.clone(), data.views()).unwrap();
    state.run(&data, cfg.iterations, &mut std::io::sink()).unwrap();
    let eval = ds.split_views(Split::Eval);
    eval.iter().map(|v| psnr(&render_novel(&state, &v.camera).unwrap(), v.clean.as_ref().unwrap()).unwrap()).sum::<f64>()
        / eval.len() as f64
}

fn end_to_end() -> &'static EndToEnd {
    static RUNS: OnceLock<EndToEnd> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let ds = synth_dataset(&SynthConfig::default()).unwrap();
        let mean_intensity = ds.views.iter().map(|v| v.image.mean()).sum::<f64>() / ds.views.len() as f64 * 255.0;
        let eval = ds.split_views(Split::Eval);
        let input = eval
            .iter()
            .map(|v| {
                let bright = dimnerf::degrade::scale_up_auto(&v.image, &Default::default());
                psnr(&bright, v.clean.as_ref().unwrap()).unwrap()
            })
            .sum::<f64>()
            / eval.len() as f64;
        let plain = held_out_psnr(&ds, TrainMode::Plain);
        let denoise_first = held_out_psnr(&ds, TrainMode::DenoiseThenSharpen);
        let sharpen_first = held_out_psnr(&ds, TrainMode::SharpenThenDenoise);
        EndToEnd { plain, denoise_first, sharpen_first, input, mean_intensity, minutes: t0.elapsed().as_secs_f64() / 60.0 }
    })
}

#[test]
fn criterion_08_end_to_end_gain_over_baseline() {
    let r = end_to_end();
    let gain = r.denoise_first - r.plain;
    let pass = r.mean_intensity < 50.0 && gain >= 1.0 && r.minutes < 60.0;
    verdict(
        8,
        "end-to-end gain over brightened plain NeRF",
        pass,
        &format!(
            "full {:.2} dB vs baseline {:.2} dB (gain {gain:+.2}, need +1.00); brightened inputs {:.2} dB; input mean {:.1}/255; {:.1} min",
            r.denoise_first, r.plain, r.input, r.mean_intensity, r.minutes
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_restoration_order() {
    let r = end_to_end();
    let pass = r.denoise_first >= r.sharpen_first;
    verdict(
        9,
        "denoise-then-sharpen at least matches sharpen-then-denoise",
        pass,
        &format!("{:.2} dB vs {:.2} dB", r.denoise_first, r.sharpen_first),
    );
    assert!(pass);
}

const DETERMINISM_CONFIG: &str = r#"
iterations = 16
batch_rays = 32
consistency_anchors = 8
group_size = 4
log_every = 2

[sampling]
coarse = 8
fine = 8

[field]
depth = 2
width = 16

[kernel]
motions = 2
latent_dim = 4
hidden = 8
"#;

fn train_run(data: &Path, cfg: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_dimnerf"))
        .args(["train", "--deterministic", "--seed", "11", "--data"])
        .arg(data)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&SynthConfig { views: 5, width: 32, height: 24, seed: 10, ..Default::default() })
        .unwrap()
        .save(&data)
        .unwrap();
    let cfg = tmp.path().join("train.toml");
    fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_run(&data, &cfg, &a);
    train_run(&data, &cfg, &b);
    let same_ck = fs::read(a.join("checkpoint.bin")).unwrap() == fs::read(b.join("checkpoint.bin")).unwrap();
    let log = fs::read(a.join("train_log.csv")).unwrap();
    let same_log = log == fs::read(b.join("train_log.csv")).unwrap();
    let rows = log.iter().filter(|c| **c == b'\n').count() - 1;
    let pass = same_ck && same_log && rows > 0;
    verdict(
        10,
        "deterministic training",
        pass,
        &format!("checkpoints identical: {same_ck}, logs identical: {same_log} ({rows} rows)"),
    );
    assert!(pass);
}
