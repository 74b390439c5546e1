use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalized_time, write_dataset, write_json, Dataset, Meta};

pub const SPEC_FILE: &str = "synth_spec.json";
use crate::gaussians::{coeff_count, logit, sh, Camera, GaussianCloud};
use crate::hexplane::{HexplaneConfig, HexplaneField, SceneBounds};
use crate::image::Image;
use crate::renderer::{render, RenderSettings};
use crate::{Error, Result};

/// Rigid path of a blob, as an offset from its base position over scene
/// time `t ∈ [0, 1]`. Every path starts at offset zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Static,
    Linear {
        velocity: [f64; 3],
    },
    /// Horizontal circle of `radius`, swept at `angular_rate` radians per
    /// unit time.
    Circular {
        radius: f64,
        angular_rate: f64,
    },
}

impl Motion {
    pub fn offset(&self, t: f64) -> [f64; 3] {
        match *self {
            Motion::Static => [0.0; 3],
            Motion::Linear { velocity } => velocity.map(|v| v * t),
            Motion::Circular { radius, angular_rate } => {
                let a = angular_rate * t;
                [radius * (a.cos() - 1.0), 0.0, radius * a.sin()]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub color: [f64; 3],
    pub position: [f64; 3],
    /// Extent of the blob's Gaussian cluster.
    pub radius: f64,
    pub gaussians: usize,
    pub motion: Motion,
}

/// Cameras evenly spaced on a horizontal circle, all aimed at `look_at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_timesteps: usize,
    pub fps: f64,
    pub image_size: u32,
    pub focal: f64,
    pub rig: RigSpec,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub background: [f64; 3],
    pub sh_degree: u32,
    pub blobs: Vec<BlobSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_timesteps: 10,
            fps: 10.0,
            image_size: 64,
            focal: 72.0,
            rig: RigSpec {
                count: 8,
                radius: 4.0,
                height: 1.0,
                look_at: [0.0; 3],
            },
            bbox_min: [-1.5; 3],
            bbox_max: [1.5; 3],
            background: [0.0; 3],
            sh_degree: 1,
            blobs: vec![
                BlobSpec {
                    color: [0.85, 0.3, 0.2],
                    position: [0.0, -0.1, 0.0],
                    radius: 0.4,
                    gaussians: 8,
                    motion: Motion::Static,
                },
                BlobSpec {
                    color: [0.2, 0.75, 0.35],
                    position: [-0.5, 0.45, 0.4],
                    radius: 0.3,
                    gaussians: 8,
                    motion: Motion::Linear {
                        velocity: [0.6, 0.0, 0.0],
                    },
                },
                BlobSpec {
                    color: [0.25, 0.35, 0.9],
                    position: [0.5, -0.4, -0.45],
                    radius: 0.3,
                    gaussians: 8,
                    motion: Motion::Circular {
                        radius: 0.3,
                        angular_rate: PI,
                    },
                },
            ],
        }
    }
}

impl SynthSpec {
    pub fn bounds(&self) -> Result<SceneBounds> {
        SceneBounds::new(self.bbox_min, self.bbox_max)
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = self.bounds()?;
        if self.num_timesteps == 0 {
            return Err(Error::invalid("num_timesteps", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("image_size", "must be positive"));
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid("focal", "must be positive"));
        }
        if self.rig.count == 0 || !(self.rig.radius > 0.0) {
            return Err(Error::invalid("rig", "needs at least one camera and a positive radius"));
        }
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::invalid("sh_degree", format!("at most {}", sh::MAX_SH_DEGREE)));
        }
        if self.blobs.is_empty() {
            return Err(Error::invalid("blobs", "at least one blob is required"));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if b.gaussians == 0 {
                return Err(Error::invalid(format!("blobs[{i}].gaussians"), "must be positive"));
            }
            if !(b.radius > 0.0) {
                return Err(Error::invalid(format!("blobs[{i}].radius"), "must be positive"));
            }
            if b.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid(
                    format!("blobs[{i}].color"),
                    "components must lie in [0, 1]",
                ));
            }
            for step in 0..=100 {
                let p = blob_center(b, step as f64 / 100.0);
                if (0..3).any(|a| p[a] < bounds.min[a] || p[a] > bounds.max[a]) {
                    return Err(Error::invalid(
                        format!("blobs[{i}].motion"),
                        format!("path leaves the bbox at t = {}", step as f64 / 100.0),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<(u32, Camera)>> {
        (0..self.rig.count)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / self.rig.count as f64;
                let c = self.rig.look_at;
                let eye = [
                    c[0] + self.rig.radius * a.sin(),
                    c[1] + self.rig.height,
                    c[2] - self.rig.radius * a.cos(),
                ];
                let cam = Camera::look_at(
                    eye,
                    c,
                    [0.0, 1.0, 0.0],
                    (self.focal, self.focal),
                    (self.image_size, self.image_size),
                )?;
                Ok((i as u32, cam))
            })
            .collect()
    }

    /// Ground-truth cloud at t = 0 plus the blob index of each Gaussian.
    pub fn canonical_cloud(&self) -> Result<(GaussianCloud, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let k = coeff_count(self.sh_degree);
        let (mut pos, mut scales, mut rots, mut logits, mut coeffs, mut owner) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (bi, b) in self.blobs.iter().enumerate() {
            for _ in 0..b.gaussians {
                let offset = loop {
                    let o: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    if o.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break o;
                    }
                };
                pos.push(std::array::from_fn(|a| b.position[a] + 0.6 * b.radius * offset[a]));
                scales.push(std::array::from_fn(|_| (b.radius * rng.random_range(0.3..0.55)).ln()));
                rots.push(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
                logits.push(logit(rng.random_range(0.85..0.95)));
                let rgb: [f64; 3] =
                    std::array::from_fn(|c| (b.color[c] + rng.random_range(-0.1..0.1)).clamp(0.05, 0.95));
                for basis in 0..k {
                    for c in 0..3 {
                        coeffs.push(if basis == 0 { sh::rgb_to_dc(rgb[c]) } else { 0.0 });
                    }
                }
                owner.push(bi);
            }
        }
        Ok((
            GaussianCloud::new(pos, scales, rots, logits, coeffs, self.sh_degree)?,
            owner,
        ))
    }

    /// Ground-truth cloud at scene time `t`.
    pub fn cloud_at(&self, canonical: &GaussianCloud, owner: &[usize], t: f64) -> GaussianCloud {
        let mut cloud = canonical.clone();
        let offsets: Vec<[f64; 3]> = self.blobs.iter().map(|b| b.motion.offset(t)).collect();
        for (i, p) in cloud.positions.data_mut().chunks_exact_mut(3).enumerate() {
            for a in 0..3 {
                p[a] += offsets[owner[i]][a];
            }
        }
        cloud
    }
}

fn blob_center(b: &BlobSpec, t: f64) -> [f64; 3] {
    let o = b.motion.offset(t);
    std::array::from_fn(|a| b.position[a] + o[a])
}

/// Every `frames[camera][t]` of the spec's scene, before quantization.
pub fn render_ground_truth(spec: &SynthSpec, cameras: &[(u32, Camera)]) -> Result<Vec<Vec<Image>>> {
    let (canonical, owner) = spec.canonical_cloud()?;
    let settings = RenderSettings::with_background(spec.background);
    let clouds: Vec<GaussianCloud> = (0..spec.num_timesteps)
        .map(|t| spec.cloud_at(&canonical, &owner, normalized_time(t, spec.num_timesteps)))
        .collect();
    cameras
        .par_iter()
        .map(|(_, cam)| {
            clouds
                .par_iter()
                .map(|c| render(c, cam, &settings).map(|r| r.rgb))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Unquantized ground truth for a dataset made by [`synth_generate`], or
/// its stored frames when it carries no synthesis spec.
pub fn ground_truth_frames(dataset: &Dataset) -> Result<Vec<Vec<Image>>> {
    let path = dataset.root.join("gt_model").join(SPEC_FILE);
    if !path.is_file() {
        return Ok(dataset.frames.clone());
    }
    let spec: SynthSpec = super::read_json(&path)?;
    let cams: Vec<(u32, Camera)> = dataset
        .camera_ids
        .iter()
        .copied()
        .zip(dataset.cameras.iter().cloned())
        .collect();
    if spec.num_timesteps != dataset.num_timesteps {
        return Err(Error::format(&path, "timestep count disagrees with the dataset"));
    }
    render_ground_truth(&spec, &cams)
}

pub struct SynthOutput {
    pub root: PathBuf,
    pub cameras: Vec<(u32, Camera)>,
    pub frames: Vec<Vec<Image>>,
    pub canonical: GaussianCloud,
}

/// Renders the ground-truth scene from every camera at every timestep and
/// writes the dataset plus a `gt_model/` directory.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let (canonical, _) = spec.canonical_cloud()?;
    let frames = render_ground_truth(spec, &cameras)?;

    let meta = Meta {
        num_timesteps: spec.num_timesteps,
        fps: spec.fps,
        bbox_min: spec.bbox_min,
        bbox_max: spec.bbox_max,
    };
    write_dataset(out, &meta, &cameras, &frames)?;

    let gt = out.join("gt_model");
    fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
    canonical.save(&gt.join(crate::trainer::CLOUD_FILE))?;
    // Motion is analytic, so the stored field is a minimal identity.
    let identity = HexplaneField::new(
        HexplaneConfig {
            channels: 1,
            spatial_resolution: 2,
            time_resolution: 2,
            mlp_width: 1,
        },
        spec.bounds()?,
        spec.seed,
    )?;
    identity.save(&gt.join(crate::trainer::FIELD_FILE))?;
    crate::trainer::ModelInfo {
        background: spec.background,
        num_timesteps: spec.num_timesteps,
    }
    .save(&gt)?;
    super::save_cameras(&gt.join("cameras.json"), &cameras)?;
    write_json(&gt.join(SPEC_FILE), spec)?;

    Ok(SynthOutput {
        root: out.to_path_buf(),
        cameras,
        frames,
        canonical,
    })
}
