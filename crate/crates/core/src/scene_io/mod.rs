//! Dataset layout on disk, PNG codec, image metrics and the synthetic scene
//! generator.
//!
//! ```text
//! scene/
//!   meta.json     {"num_timesteps", "fps", "bbox_min", "bbox_max"}
//!   cameras.json  [{"id", "width", "height", "fx", "fy", "cx", "cy", "world_to_cam"}]
//!   frames/cam_<id>/<t:05>.png
//!   gt_model/     optional ground truth for synthetic scenes
//! ```

mod metrics;
mod png_io;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{psnr, ssim, PSNR_CAP};
pub use png_io::{decode_png, encode_png, from_byte, load_png, save_png, to_byte};
pub use synth::{
    ground_truth_frames, render_ground_truth, synth_generate, BlobSpec, Motion, RigSpec, SynthOutput, SynthSpec,
    SPEC_FILE,
};

use crate::gaussians::Camera;
use crate::hexplane::SceneBounds;
use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub num_timesteps: usize,
    pub fps: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: [f64; 16],
}

impl CameraRecord {
    pub fn new(id: u32, cam: &Camera) -> Self {
        Self {
            id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            world_to_cam: cam.world_to_cam,
        }
    }

    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_cam: self.world_to_cam,
        }
    }
}

/// A multiview video: cameras sorted by id, every frame decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub camera_ids: Vec<u32>,
    pub cameras: Vec<Camera>,
    pub num_timesteps: usize,
    pub fps: f64,
    pub bounds: SceneBounds,
    /// `frames[camera index][t]`
    pub frames: Vec<Vec<Image>>,
}

impl Dataset {
    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera_index(&self, id: u32) -> Result<usize> {
        self.camera_ids
            .iter()
            .position(|&c| c == id)
            .ok_or(Error::UnknownCamera(id))
    }

    pub fn frame(&self, camera: usize, t: usize) -> &Image {
        &self.frames[camera][t]
    }

    /// Scene time in [0, 1] of timestep `t`.
    pub fn time_of(&self, t: usize) -> f64 {
        normalized_time(t, self.num_timesteps)
    }
}

pub fn normalized_time(t: usize, num_timesteps: usize) -> f64 {
    if num_timesteps <= 1 {
        0.0
    } else {
        t as f64 / (num_timesteps - 1) as f64
    }
}

pub fn frame_path(root: &Path, camera_id: u32, t: usize) -> PathBuf {
    root.join("frames")
        .join(format!("cam_{camera_id}"))
        .join(format!("{t:05}.png"))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cameras(path: &Path) -> Result<Vec<(u32, Camera)>> {
    let records: Vec<CameraRecord> = read_json(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let cam = r.camera();
        cam.validate().map_err(|e| match e {
            Error::Invalid { field, reason } => Error::invalid(format!("cameras[{i}].{field}"), reason),
            other => other,
        })?;
        out.push((r.id, cam));
    }
    out.sort_by_key(|(id, _)| *id);
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("cameras.id", format!("duplicate camera id {}", w[0].0)));
    }
    Ok(out)
}

pub fn save_cameras(path: &Path, cameras: &[(u32, Camera)]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(|(id, c)| CameraRecord::new(*id, c)).collect();
    write_json(path, &records)
}

pub fn load_meta(path: &Path) -> Result<Meta> {
    let meta: Meta = read_json(path)?;
    if meta.num_timesteps == 0 {
        return Err(Error::invalid("meta.num_timesteps", "must be positive"));
    }
    SceneBounds::new(meta.bbox_min, meta.bbox_max).map_err(|e| match e {
        Error::Invalid { reason, .. } => Error::invalid("meta.bbox_min/bbox_max", reason),
        other => other,
    })?;
    Ok(meta)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta = load_meta(&root.join("meta.json"))?;
    let cams = load_cameras(&root.join("cameras.json"))?;
    if cams.is_empty() {
        return Err(Error::invalid("cameras", "no cameras"));
    }
    let mut frames = Vec::with_capacity(cams.len());
    for (id, cam) in &cams {
        let mut per_cam = Vec::with_capacity(meta.num_timesteps);
        for t in 0..meta.num_timesteps {
            let path = frame_path(root, *id, t);
            if !path.is_file() {
                return Err(Error::MissingFrame { camera: *id, t, path });
            }
            let img = load_png(&path)?;
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::format(
                    &path,
                    format!(
                        "frame is {}×{}, camera {id} declares {}×{}",
                        img.width, img.height, cam.width, cam.height
                    ),
                ));
            }
            per_cam.push(img);
        }
        frames.push(per_cam);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        camera_ids: cams.iter().map(|(id, _)| *id).collect(),
        cameras: cams.into_iter().map(|(_, c)| c).collect(),
        num_timesteps: meta.num_timesteps,
        fps: meta.fps,
        bounds: SceneBounds::new(meta.bbox_min, meta.bbox_max)?,
        frames,
    })
}

/// Writes meta, cameras and frames under `root`.
pub fn write_dataset(root: &Path, meta: &Meta, cameras: &[(u32, Camera)], frames: &[Vec<Image>]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("meta.json"), meta)?;
    save_cameras(&root.join("cameras.json"), cameras)?;
    for ((id, _), per_cam) in cameras.iter().zip(frames) {
        let dir = root.join("frames").join(format!("cam_{id}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, img) in per_cam.iter().enumerate() {
            save_png(img, &frame_path(root, *id, t))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
