use super::*;
use crate::scene_io::{load_dataset, synth_generate, BlobSpec, Motion, RigSpec, SynthSpec};

fn small_spec() -> SynthSpec {
    SynthSpec {
        num_timesteps: 3,
        image_size: 24,
        focal: 28.0,
        rig: RigSpec {
            count: 3,
            radius: 4.0,
            height: 0.5,
            look_at: [0.0; 3],
        },
        blobs: vec![BlobSpec {
            color: [0.9, 0.4, 0.2],
            position: [0.0; 3],
            radius: 0.5,
            gaussians: 6,
            motion: Motion::Linear {
                velocity: [0.4, 0.0, 0.0],
            },
        }],
        ..SynthSpec::default()
    }
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        eval_every: 5,
        field: HexplaneConfig {
            channels: 4,
            spatial_resolution: 8,
            time_resolution: 4,
            mlp_width: 8,
        },
        ..TrainConfig::with_iterations(iterations)
    }
}

fn small_dataset() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&small_spec(), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn loss_is_l1_plus_weighted_tv() {
    let field = HexplaneField::new(small_config(1).field, SceneBounds::new([-1.0; 3], [1.0; 3]).unwrap(), 3).unwrap();
    let a = Image::filled(4, 4, [0.2, 0.4, 0.6]);
    let b = Image::filled(4, 4, [0.3, 0.4, 0.2]);
    let expect = (0.1 + 0.0 + 0.4) / 3.0 + 0.5 * tv_loss(&field);
    assert!((loss_4dgs(&a, &b, &field, 0.5).unwrap() - expect).abs() < 1e-12);
    assert!(loss_4dgs(&a, &Image::filled(3, 4, [0.0; 3]), &field, 0.5).is_err());
}

#[test]
fn l1_vars_matches_value_path() {
    let a = Image::filled(3, 2, [0.1, 0.9, 0.5]);
    let b = Image::filled(3, 2, [0.4, 0.2, 0.5]);
    let mut g = Graph::new();
    let v = g.param(a.to_tensor());
    let l = l1_vars(&mut g, v, &b).unwrap();
    assert!((g.value(l).data()[0] - a.mean_abs_diff(&b).unwrap()).abs() < 1e-15);
}

#[test]
fn training_lowers_the_loss_and_logs_every_step() {
    let (_dir, ds) = small_dataset();
    let config = small_config(40);
    let mut model = initial_model(&ds, &config).unwrap();
    let before = camera_psnr(&model, &ds, 0).unwrap();
    let mut csv = Vec::new();
    let report = train(&ds, &config, &mut model, Some(&mut csv)).unwrap();
    assert_eq!(report.metrics.len(), 40);
    assert_eq!(report.holdout_camera, Some(2));
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 41);
    assert!(report.metrics.last().unwrap().psnr_holdout.is_some());
    assert!(report.metrics[0].psnr_holdout.is_none());
    let head: f64 = report.metrics[..5].iter().map(|m| m.l1).sum();
    let tail: f64 = report.metrics[35..].iter().map(|m| m.l1).sum();
    assert!(tail < head, "{head} -> {tail}");
    assert!(camera_psnr(&model, &ds, 0).unwrap() > before);
}

#[test]
fn coarse_phase_leaves_the_field_alone() {
    let (_dir, ds) = small_dataset();
    let config = TrainConfig {
        coarse_iterations: 4,
        ..small_config(4)
    };
    let mut model = initial_model(&ds, &config).unwrap();
    let field = model.field.clone();
    let cloud = model.cloud.clone();
    train(&ds, &config, &mut model, None).unwrap();
    assert_eq!(model.field, field);
    assert_ne!(model.cloud, cloud);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (_dir, ds) = small_dataset();
    let config = small_config(6);
    let run = || {
        let mut m = initial_model(&ds, &config).unwrap();
        train(&ds, &config, &mut m, None).unwrap();
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_state_keeps_last_good_model() {
    let (_dir, ds) = small_dataset();
    let config = small_config(3);
    let mut model = initial_model(&ds, &config).unwrap();
    model.cloud.positions.data_mut()[0] = f64::NAN;
    let snapshot = model.clone();
    let err = train(&ds, &config, &mut model, None);
    assert!(err.is_err());
    assert_eq!(format!("{model:?}"), format!("{snapshot:?}"));
}

#[test]
fn config_validation_names_fields() {
    let bad = TrainConfig {
        coarse_iterations: 11,
        ..TrainConfig::with_iterations(10)
    };
    assert!(matches!(bad.validate(), Err(Error::Invalid { field, .. }) if field == "coarse_iterations"));
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Invalid { field, .. }) if field == "batch_size"));
}

#[test]
fn model_directory_round_trip() {
    let (_dir, ds) = small_dataset();
    let config = small_config(1);
    let config = TrainConfig {
        background: [0.1, 0.2, 0.3],
        ..config
    };
    let model = initial_model(&ds, &config).unwrap();
    let out = tempfile::tempdir().unwrap();
    model.save(out.path()).unwrap();
    let back = SceneModel::load(out.path()).unwrap();
    assert_eq!(back, model);
    let cam = &ds.cameras[0];
    assert_eq!(back.render(cam, 0.5).unwrap(), model.render(cam, 0.5).unwrap());
}

#[test]
fn initial_model_uses_ground_truth_points_when_present() {
    let (dir, ds) = small_dataset();
    let config = small_config(1);
    let m = initial_model(&ds, &config).unwrap();
    assert_eq!(m.cloud.len(), 6);
    std::fs::remove_dir_all(dir.path().join("gt_model")).unwrap();
    let m = initial_model(&ds, &config).unwrap();
    assert_eq!(m.cloud.len(), config.init_points);
    for i in 0..m.cloud.len() {
        let p = m.cloud.position(i);
        assert!((0..3).all(|a| p[a] >= ds.bounds.min[a] && p[a] <= ds.bounds.max[a]));
    }
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let (_dir, ds) = small_dataset();
    let config = TrainConfig {
        coarse_iterations: 0,
        ..small_config(0)
    };
    let model = initial_model(&ds, &config).unwrap();
    let mut trained = model.clone();
    let report = train(&ds, &config, &mut trained, None).unwrap();
    assert!(report.metrics.is_empty());
    assert_eq!(trained, model);
}

#[test]
fn constant_images_give_a_non_increasing_moving_average() {
    let (_dir, mut ds) = small_dataset();
    let flat = Image::filled(24, 24, [0.3, 0.5, 0.7]);
    for per_cam in &mut ds.frames {
        per_cam.iter_mut().for_each(|f| *f = flat.clone());
    }
    let config = small_config(50);
    let mut model = initial_model(&ds, &config).unwrap();
    let report = train(&ds, &config, &mut model, None).unwrap();
    let losses: Vec<f64> = report.metrics.iter().map(|m| m.loss).collect();
    let avg: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, pair) in avg.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "window {i}: {} then {}", pair[0], pair[1]);
    }
}
