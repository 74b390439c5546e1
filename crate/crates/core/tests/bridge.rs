//! Wire-format tests of the bridge client against an in-test mock service
//! that serves the analytic oracle.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dynedit::editor::{apply_operator, collect_first_timestep, EditOperator};
use dynedit::hexplane::HexplaneConfig;
use dynedit::image::Image;
use dynedit::scene_io::{load_dataset, synth_generate, Dataset, RigSpec, SynthSpec};
use dynedit::sds::bridge::*;
use dynedit::sds::{alpha_bar, refine, CfgScales, OracleGuidance, RefineConfig};
use dynedit::trainer::{initial_model, train, SceneModel, TrainConfig};
use dynedit::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Fault {
    None,
    /// Answer the first `n` requests with a 500.
    FailFirst(usize),
    WrongCount,
    WrongShape,
    Garbage,
}

struct Mock {
    url: String,
    requests: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

fn json_response(code: u16, body: String) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    tiny_http::Response::from_string(body)
        .with_status_code(code)
        .with_header("content-type: application/json".parse::<tiny_http::Header>().unwrap())
}

fn error_response(code: u16, msg: &str) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    json_response(code, serde_json::to_string(&ErrorBody { error: msg.into() }).unwrap())
}

fn gray(img: &Image) -> Image {
    EditOperator::Grayscale.apply(img).unwrap()
}

/// The oracle residual `√(ᾱ/(1−ᾱ))·(x − target)` with target =
/// grayscale(original). The composed prediction of an analytic denoiser
/// is the same under every conditioning, so the scales drop out.
fn mock_guidance(req: &GuidanceRequest, fault: Fault) -> Result<GuidanceResponse, String> {
    let a = alpha_bar(req.t).map_err(|e| e.to_string())?;
    let k = (a / (1.0 - a)).sqrt();
    let mut out = Vec::new();
    for (r, o) in req.rendered.iter().zip(&req.originals) {
        let original = png_from_base64(o)?;
        let (h, w) = (original.height as usize, original.width as usize);
        let x = f32_from_base64(r, h, w)?;
        let target = gray(&original);
        let residual: Vec<f64> = x.data().iter().zip(&target.data).map(|(x, y)| k * (x - y)).collect();
        out.push(match fault {
            Fault::WrongShape => f32_to_base64(&residual[3..]),
            _ => f32_to_base64(&residual),
        });
    }
    if fault == Fault::WrongCount {
        out.pop();
    }
    Ok(GuidanceResponse { grad_images: out })
}

fn mock_edit(req: &EditRequest) -> Result<EditResponse, String> {
    let images = req
        .images
        .iter()
        .map(|s| png_from_base64(s).and_then(|i| png_to_base64(&gray(&i)).map_err(|e| e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(EditResponse { images })
}

fn spawn_mock(fault: Fault) -> Mock {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (count, log) = (requests.clone(), bodies.clone());
    thread::spawn(move || {
        for mut rq in server.incoming_requests() {
            let n = count.fetch_add(1, Ordering::SeqCst);
            let mut body = String::new();
            rq.as_reader().read_to_string(&mut body).unwrap();
            log.lock().unwrap().push(body.clone());
            let resp = if let Fault::FailFirst(k) = fault {
                if n < k {
                    Some(error_response(500, "warming up"))
                } else {
                    None
                }
            } else {
                None
            };
            let resp = resp.unwrap_or_else(|| match (rq.method().as_str(), rq.url()) {
                (_, _) if fault == Fault::Garbage => json_response(200, "{\"nope\":1}".into()),
                ("GET", "/v1/health") => json_response(200, r#"{"mode":"mock","ok":true}"#.into()),
                ("POST", "/v1/edit") => match serde_json::from_str::<EditRequest>(&body)
                    .map_err(|e| e.to_string())
                    .and_then(|r| mock_edit(&r))
                {
                    Ok(r) => json_response(200, serde_json::to_string(&r).unwrap()),
                    Err(e) => error_response(400, &e),
                },
                ("POST", "/v1/guidance") => match serde_json::from_str::<GuidanceRequest>(&body)
                    .map_err(|e| e.to_string())
                    .and_then(|r| mock_guidance(&r, fault))
                {
                    Ok(r) => json_response(200, serde_json::to_string(&r).unwrap()),
                    Err(e) => error_response(400, &e),
                },
                _ => error_response(404, "no such endpoint"),
            });
            let _ = rq.respond(resp);
        }
    });
    Mock { url, requests, bodies }
}

fn client(m: &Mock) -> BridgeClient {
    BridgeClient::new(&m.url, Duration::from_secs(10)).unwrap()
}

fn checker(w: u32, h: u32) -> Image {
    // Multiples of 1/255 survive the PNG round trip exactly.
    let data = (0..w * h * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    Image::new(w, h, data).unwrap()
}

#[test]
fn health_reports_mode() {
    let m = spawn_mock(Fault::None);
    let h = client(&m).health().unwrap();
    assert_eq!(
        h,
        Health {
            mode: "mock".into(),
            ok: true
        }
    );
}

#[test]
fn edit_round_trips_pngs_and_names_the_scales() {
    let m = spawn_mock(Fault::None);
    let imgs = vec![checker(5, 4), checker(3, 6)];
    let out = client(&m).edit(&imgs, "make it gray", CfgScales::default(), 7).unwrap();
    assert_eq!(out.len(), 2);
    for (o, i) in out.iter().zip(&imgs) {
        assert_eq!((o.width, o.height), (i.width, i.height));
        let want = gray(&png_from_base64(&png_to_base64(i).unwrap()).unwrap());
        assert!(o.mean_abs_diff(&want).unwrap() <= 0.5 / 255.0 + 1e-12);
    }
    let body: serde_json::Value = serde_json::from_str(&m.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(body["s_I"], 1.2);
    assert_eq!(body["s_T"], 8.5);
    assert_eq!(body["seed"], 7);
    assert_eq!(body["instruction"], "make it gray");
}

#[test]
fn guidance_returns_declared_shapes_and_zero_at_target() {
    let m = spawn_mock(Fault::None);
    let original = checker(6, 5);
    let at_target = gray(&original);
    let elsewhere = checker(6, 5);
    let out = client(&m)
        .guidance(
            &[&at_target, &elsewhere],
            &[&original, &original],
            "",
            CfgScales::default(),
            0.5,
            0,
        )
        .unwrap();
    assert_eq!(out[0].shape(), &[5, 6, 3]);
    // The target is quantized to f32 on the way in, so "zero" means f32
    // rounding of the gray values.
    assert!(
        out[0].data().iter().all(|v| v.abs() < 1e-6),
        "{:?}",
        &out[0].data()[..6]
    );
    assert!(out[1].data().iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn codecs_reject_wrong_sizes() {
    let s = f32_to_base64(&[1.0, 2.0, 3.0]);
    assert!(f32_from_base64(&s, 1, 1).is_ok());
    assert!(f32_from_base64(&s, 1, 2).is_err());
    assert!(f32_from_base64("%%%", 1, 1).is_err());
    assert!(png_from_base64("AAAA").is_err());
}

#[test]
fn two_retries_then_failure() {
    let m = spawn_mock(Fault::FailFirst(2));
    assert!(client(&m).health().unwrap().ok);
    assert_eq!(m.requests.load(Ordering::SeqCst), 3);

    let m = spawn_mock(Fault::FailFirst(3));
    match client(&m).health() {
        Err(Error::Bridge {
            status,
            message,
            endpoint,
        }) => {
            assert_eq!(status, Some(500));
            assert_eq!(message, "warming up");
            assert!(endpoint.ends_with("/v1/health"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(m.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn malformed_payloads_are_bridge_errors() {
    let img = checker(4, 4);
    for fault in [Fault::WrongCount, Fault::WrongShape, Fault::Garbage] {
        let m = spawn_mock(fault);
        let r = client(&m).guidance(&[&img, &img], &[&img, &img], "", CfgScales::default(), 0.3, 0);
        assert!(matches!(r, Err(Error::Bridge { .. })), "{fault:?}: {r:?}");
    }
    let dead = BridgeClient::new("http://127.0.0.1:9", Duration::from_secs(2)).unwrap();
    assert!(matches!(dead.health(), Err(Error::Bridge { status: None, .. })));
    assert!(BridgeClient::new("ftp://x", Duration::from_secs(1)).is_err());
}

fn small_scene(dir: &std::path::Path) -> Dataset {
    let spec = SynthSpec {
        image_size: 24,
        focal: 27.0,
        num_timesteps: 3,
        rig: RigSpec {
            count: 3,
            ..SynthSpec::default().rig
        },
        ..SynthSpec::default()
    };
    synth_generate(&spec, dir).unwrap();
    load_dataset(dir).unwrap()
}

fn small_model(ds: &Dataset) -> SceneModel {
    let cfg = TrainConfig {
        iterations: 20,
        coarse_iterations: 5,
        field: HexplaneConfig {
            channels: 4,
            spatial_resolution: 8,
            time_resolution: 4,
            mlp_width: 8,
        },
        ..TrainConfig::default()
    };
    let mut m = initial_model(ds, &cfg).unwrap();
    train(ds, &cfg, &mut m, None).unwrap();
    m
}

#[test]
fn mock_bridge_reproduces_the_oracle_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_scene(dir.path());
    let start = small_model(&ds);
    // The mock derives its target from the PNG it is sent, so the oracle
    // here uses the stored frames rather than re-rendered ground truth.
    let targets: BTreeMap<(u32, usize), Image> = (0..ds.num_cameras())
        .flat_map(|c| (0..ds.num_timesteps).map(move |t| (c, t)))
        .map(|(c, t)| ((ds.camera_ids[c], t), gray(ds.frame(c, t))))
        .collect();
    let cfg = RefineConfig {
        iterations: 12,
        batch_size: 3,
        per_image_t: true,
        seed: 5,
        ..RefineConfig::default()
    };
    let oracle = OracleGuidance {
        targets,
        schedule: cfg.sds.schedule,
    };
    let mut local = start.clone();
    let local_steps = refine(&mut local, &ds, &oracle, &cfg, None).unwrap();

    let m = spawn_mock(Fault::None);
    let remote_guidance = BridgeGuidance { client: client(&m) };
    let mut remote = start.clone();
    let remote_steps = refine(&mut remote, &ds, &remote_guidance, &cfg, None).unwrap();

    assert_eq!(local_steps.len(), remote_steps.len());
    for (a, b) in local_steps.iter().zip(&remote_steps) {
        assert!(a.skipped.is_none() && b.skipped.is_none());
        let rel = (a.residual_ms - b.residual_ms).abs() / a.residual_ms.max(1e-12);
        assert!(rel < 1e-6, "step {}: {} vs {}", a.step, a.residual_ms, b.residual_ms);
    }
    for (x, y) in local.cloud_tensors().iter().zip(remote.cloud_tensors()) {
        let worst = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "parameter drift {worst:e}");
    }
    // Per-image diffusion times: requests are grouped by t.
    assert!(m.requests.load(Ordering::SeqCst) >= cfg.iterations);
}

#[test]
fn editor_and_cli_use_the_bridge() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = small_scene(&data);
    let m = spawn_mock(Fault::None);

    let views = collect_first_timestep(&ds, Some(&[2, 0])).unwrap();
    let op: EditOperator = m.url.parse().unwrap();
    let edited = apply_operator(&op, &views, "gray", 0).unwrap();
    assert_eq!(edited.views.iter().map(|v| v.camera_id).collect::<Vec<_>>(), [0, 2]);
    for v in &edited.views {
        assert!(
            v.image
                .mean_abs_diff(&gray(ds.frame(ds.camera_index(v.camera_id).unwrap(), 0)))
                .unwrap()
                < 1.0 / 255.0
        );
    }

    let model = dir.path().join("model");
    small_model(&ds).save(&model).unwrap();
    let out = dir.path().join("refined");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_dynedit"))
        .args([
            "refine",
            "--model",
            model.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ])
        .args(["--guidance", &m.url, "--out", out.to_str().unwrap()])
        .args(["--set", "refine.iterations=3", "--set", "refine.batch_size=2"])
        .status()
        .unwrap();
    assert!(status.success());
    let log = std::fs::read_to_string(out.join("refine.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(
        log.lines().skip(1).all(|l| l.ends_with(',')),
        "no skipped steps:\n{log}"
    );
}
