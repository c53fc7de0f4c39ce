use std::fs;

use proptest::prelude::*;

use dimnerf::autodiff::{EncodingConfig, Tape};
use dimnerf::ctp::{ctp_mask, BlurKernelConfig};
use dimnerf::dataset::{synth_dataset, Dataset, SynthConfig};
use dimnerf::degrade::scale_up;
use dimnerf::fields::FieldConfig;
use dimnerf::raster::RgbImage;
use dimnerf::renderer::SamplingConfig;
use dimnerf::trainer::{composed_loss, render_novel, sample_batch, step_rng, TrainConfig, TrainMode, TrainState, TrainingData};
use dimnerf::Error;

fn small_scene(views: usize) -> Dataset {
    synth_dataset(&SynthConfig { views, width: 20, height: 16, seed: 1, ..Default::default() }).unwrap()
}

fn small_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        iterations: 8,
        batch_rays: 8,
        stage1_fraction: 0.5,
        sampling: SamplingConfig { coarse: 6, fine: 4, jitter: true },
        field: FieldConfig {
            depth: 2,
            width: 12,
            encoding: EncodingConfig { position_freqs: 2, direction_freqs: 1, include_input: true },
            density_shift: 0.0,
        },
        kernel: BlurKernelConfig { motions: 2, latent_dim: 4, hidden: 8, ..Default::default() },
        group_size: 3,
        consistency_anchors: 4,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trip() {
    let ds = small_scene(4);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.views.len(), ds.views.len());
    for (a, b) in ds.views.iter().zip(&back.views) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.clean, b.clean);
        assert_eq!(a.depth, b.depth);
        assert_eq!((a.split, a.shaken, &a.name), (b.split, b.shaken, &b.name));
        let (p, q) = (a.camera.pose.to_rows(), b.camera.pose.to_rows());
        assert!(p.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}

#[test]
fn missing_png_fails_the_whole_load() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(3).save(dir.path()).unwrap();
    fs::remove_file(dir.path().join("images/view_01.png")).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::Load { path, .. }) => assert!(path.ends_with("images/view_01.png"), "{path:?}"),
        other => panic!("expected a load error, got {:?}", other.map(|d| d.views.len())),
    }
}

#[test]
fn malformed_pose_names_the_view() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(3).save(dir.path()).unwrap();
    let path = dir.path().join("manifest.toml");
    let text = fs::read_to_string(&path).unwrap();
    let broken = text.replacen("pose = [", "pose = [1.0, ", 1);
    fs::write(&path, broken).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("view_00"), "{err}");
}

#[test]
fn render_is_repeatable() {
    let ds = small_scene(3);
    let cfg = small_config(TrainMode::DenoiseThenSharpen);
    let data = TrainingData::from_dataset(&ds, &cfg).unwrap();
    let mut state = TrainState::new(cfg, data.views()).unwrap();
    state.run(&data, 3, &mut std::io::sink()).unwrap();
    let cam = ds.views[0].camera;
    let a = render_novel(&state, &cam).unwrap();
    let b = render_novel(&state, &cam).unwrap();
    assert_eq!(a.to_rgb8(), b.to_rgb8());
}

#[test]
fn colourless_field_renders_a_flat_image() {
    let ds = small_scene(2);
    let cfg = TrainConfig { field: FieldConfig { density_shift: 3.0, ..small_config(TrainMode::Plain).field }, ..small_config(TrainMode::Plain) };
    let mut state = TrainState::new(cfg, 1).unwrap();
    let color = state.model.scene.color.clone();
    for layer in &color.layers {
        state.store.value_mut(layer.weight).data.iter_mut().for_each(|w| *w = 0.0);
    }
    let last = color.layers.last().unwrap().bias;
    state.store.value_mut(last).data = vec![0.0, 1.0, -1.0];
    let img = render_novel(&state, &ds.views[0].camera).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let want = [sig(0.0), sig(1.0), sig(-1.0)];
    for p in &img.data {
        for c in 0..3 {
            // Shifted density makes every ray nearly opaque.
            assert!((p[c] - want[c]).abs() < 1e-3, "{p:?} vs {want:?}");
        }
    }
}

#[test]
fn resumed_step_matches_an_uninterrupted_one() {
    let ds = small_scene(4);
    let cfg = small_config(TrainMode::SharpenThenDenoise);
    let data = TrainingData::from_dataset(&ds, &cfg).unwrap();
    let mut straight = TrainState::new(cfg, data.views()).unwrap();
    straight.run(&data, 5, &mut std::io::sink()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    straight.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    let a = straight.step(&data).unwrap();
    let b = resumed.step(&data).unwrap();
    assert_eq!(a, b);
    assert_eq!(straight.store, resumed.store);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn detaching_noisy_rays_keeps_the_loss(seed in 0u64..10_000, mask_bits in any::<u64>()) {
        let ds = small_scene(3);
        let cfg = small_config(TrainMode::DenoiseThenSharpen);
        let mut data = TrainingData::from_dataset(&ds, &cfg).unwrap();
        for (i, m) in data.masks.iter_mut().enumerate() {
            for (j, v) in m.values.iter_mut().enumerate() {
                *v = ((mask_bits >> ((i * 7 + j) % 64)) & 1) as u8;
            }
        }
        let state = TrainState::new(cfg.clone(), data.views()).unwrap();
        let batch = sample_batch(&data, 8, &mut step_rng(seed, 0));
        let loss = |detach: bool| {
            let c = TrainConfig { detach_noisy: detach, ..cfg.clone() };
            let mut tape = Tape::new(&state.store);
            let t = composed_loss(&mut tape, &state.model, &c, &data, None, &batch, 1.0, 0.0, &mut step_rng(seed, 1)).unwrap();
            tape.value(t.total).data[0]
        };
        prop_assert_eq!(loss(true), loss(false));
    }

    #[test]
    fn masks_are_binary_and_image_shaped(
        w in 2usize..24, h in 2usize..24, seed in any::<u64>(), r in 0.0f64..40.0, t in 0.0f64..255.0,
    ) {
        let mut s = seed;
        let img = RgbImage::new(w, h, (0..w * h).map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            [(s >> 40) as f64 / (1u64 << 24) as f64; 3]
        }).collect());
        let m = ctp_mask(&img, r, t);
        prop_assert_eq!(m.values.len(), w * h);
        prop_assert!(m.values.iter().all(|v| *v <= 1));
    }

    #[test]
    fn scale_up_stays_in_range(v in prop::collection::vec(0.0f64..1.0, 12), gamma in 0.05f64..5.0, eq in any::<bool>()) {
        let img = RgbImage::new(2, 2, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
        let out = scale_up(&img, gamma, eq);
        prop_assert!(out.data.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
    }
}
