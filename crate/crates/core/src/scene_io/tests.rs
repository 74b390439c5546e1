use super::*;

fn tiny_spec() -> SynthSpec {
    SynthSpec {
        num_timesteps: 4,
        image_size: 20,
        focal: 24.0,
        rig: RigSpec {
            count: 2,
            radius: 4.0,
            height: 1.0,
            look_at: [0.0; 3],
        },
        ..SynthSpec::default()
    }
}

#[test]
fn synth_writes_every_frame_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let out = synth_generate(&spec, dir.path()).unwrap();
    assert_eq!(out.frames.len(), 2);
    assert_eq!(out.canonical.len(), 24);
    for id in 0..2 {
        for t in 0..4 {
            assert!(frame_path(dir.path(), id, t).is_file());
        }
    }
    assert!(dir.path().join("gt_model/cloud.g4dc").is_file());
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.num_cameras(), 2);
    assert_eq!(ds.num_timesteps, 4);
    assert_eq!(ds.time_of(3), 1.0);
    for c in 0..2 {
        for t in 0..4 {
            // Stored frames are quantized to 8 bits.
            let err = ds
                .frame(c, t)
                .data
                .iter()
                .zip(&out.frames[c][t].data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
    }
    assert_eq!(
        load_cameras(&dir.path().join("gt_model/cameras.json")).unwrap(),
        out.cameras
    );
}

#[test]
fn static_scene_frames_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec();
    for b in &mut spec.blobs {
        b.motion = Motion::Static;
    }
    let out = synth_generate(&spec, dir.path()).unwrap();
    for per_cam in &out.frames {
        assert!(per_cam.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn linear_motion_advances_monotonically() {
    let spec = SynthSpec::default();
    let (cloud, owner) = spec.canonical_cloud().unwrap();
    let mut last = f64::NEG_INFINITY;
    for t in 0..=10 {
        let c = spec.cloud_at(&cloud, &owner, t as f64 / 10.0);
        let xs: Vec<f64> = (0..c.len())
            .filter(|&i| owner[i] == 1)
            .map(|i| c.position(i)[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean > last);
        last = mean;
    }
    assert_eq!(spec.cloud_at(&cloud, &owner, 0.0), cloud);
}

#[test]
fn invalid_camera_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&tiny_spec(), dir.path()).unwrap();
    let path = dir.path().join("cameras.json");
    let mut recs: Vec<CameraRecord> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    recs[1].fx = 0.0;
    write_json(&path, &recs).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("fx"), "{err}");
}

#[test]
fn missing_frame_is_named() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&tiny_spec(), dir.path()).unwrap();
    let gone = frame_path(dir.path(), 1, 2);
    std::fs::remove_file(&gone).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::MissingFrame { camera, t, path }) => {
            assert_eq!((camera, t), (1, 2));
            assert_eq!(path, gone);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_meta_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("meta.json");
    std::fs::write(
        &p,
        r#"{"num_timesteps":2,"fps":1,"bbox_min":[0,0,0],"bbox_max":[1,1,1],"extra":1}"#,
    )
    .unwrap();
    assert!(load_meta(&p).is_err());
    std::fs::write(
        &p,
        r#"{"num_timesteps":2,"fps":1,"bbox_min":[0,0,0],"bbox_max":[1,1,1]}"#,
    )
    .unwrap();
    assert_eq!(load_meta(&p).unwrap().num_timesteps, 2);
}

#[test]
fn spec_validation_catches_escaping_paths() {
    let mut spec = SynthSpec::default();
    spec.blobs[1].motion = Motion::Linear {
        velocity: [5.0, 0.0, 0.0],
    };
    let err = spec.validate().unwrap_err();
    assert!(err.to_string().contains("blobs[1].motion"), "{err}");
}

#[test]
fn ground_truth_frames_match_stored_frames_up_to_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_generate(&tiny_spec(), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let gt = ground_truth_frames(&ds).unwrap();
    assert_eq!(gt, out.frames);
    std::fs::remove_file(dir.path().join("gt_model").join(SPEC_FILE)).unwrap();
    assert_eq!(ground_truth_frames(&ds).unwrap(), ds.frames);
}
