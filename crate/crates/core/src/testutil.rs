//! Small in-memory scenes shared by unit tests.

use std::path::PathBuf;

use crate::gaussians::{sh, Camera};
use crate::hexplane::{HexplaneConfig, SceneBounds};
use crate::scene_io::Dataset;
use crate::trainer::{ModelInfo, SceneModel};

pub fn tiny_field() -> HexplaneConfig {
    HexplaneConfig {
        channels: 2,
        spatial_resolution: 4,
        time_resolution: 2,
        mlp_width: 4,
    }
}

/// Gaussians at `positions` with a fixed color, scale and opacity, seen by
/// one or more `size × size` cameras.
pub fn model_with(positions: Vec<[f64; 3]>, color: [f64; 3]) -> SceneModel {
    let bounds = SceneBounds::new([-1.0; 3], [1.0; 3]).unwrap();
    let info = ModelInfo {
        background: [0.0; 3],
        num_timesteps: 2,
    };
    let mut m = SceneModel::initialize(positions, bounds, tiny_field(), info, 0, 7).unwrap();
    for px in m.cloud.sh_coeffs.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = sh::rgb_to_dc(color[c]);
        }
    }
    m.cloud.log_scales.data_mut().fill(0.25f64.ln());
    m.cloud.opacity_logits.data_mut().fill(crate::gaussians::logit(0.8));
    m
}

pub fn cameras(count: usize, size: u32) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let a = i as f64 * 0.7;
            let eye = [3.0 * a.sin(), 0.4, -3.0 * a.cos()];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], (size as f64, size as f64), (size, size)).unwrap()
        })
        .collect()
}

/// A dataset whose frames are renders of `model` itself.
pub fn dataset_of(model: &SceneModel, cams: Vec<Camera>, num_timesteps: usize) -> Dataset {
    let frames = cams
        .iter()
        .map(|c| {
            (0..num_timesteps)
                .map(|t| {
                    let time = crate::scene_io::normalized_time(t, num_timesteps);
                    model.render(c, time).unwrap().rgb
                })
                .collect()
        })
        .collect();
    Dataset {
        root: PathBuf::new(),
        camera_ids: (0..cams.len() as u32).collect(),
        cameras: cams,
        num_timesteps,
        fps: 1.0,
        bounds: model.bounds().clone(),
        frames,
    }
}
