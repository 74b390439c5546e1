//! First-timestep editing: edit the t = 0 views, then refit the canonical
//! cloud to them with the deformation field frozen.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeng::Graph;
use crate::gaussians::Camera;
use crate::image::{Image, LUMA};
use crate::scene_io::Dataset;
use crate::sds::bridge::BridgeClient;
use crate::sds::CfgScales;
use crate::trainer::{grads_of, l1_vars, render_deformed, CloudOptimizer, LearningRates, SceneModel};
use crate::{Error, Result};

const SEPIA: [[f64; 3]; 3] = [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]];

/// A deterministic image-to-image edit. Parsed from `identity`,
/// `grayscale`, `sepia`, `hue:<degrees>`, `posterize:<levels>`,
/// `vignette:<strength>` or a bridge base URL.
#[derive(Clone, Debug, PartialEq)]
pub enum EditOperator {
    Identity,
    Grayscale,
    Sepia,
    /// Rotation about the gray axis of RGB space.
    HueRotate {
        degrees: f64,
    },
    /// Snap each channel to the nearest of `levels` evenly spaced values.
    Posterize {
        levels: u32,
    },
    /// Darken by `1 − strength·(r / r_max)²` from the image center.
    Vignette {
        strength: f64,
    },
    Bridge {
        url: String,
    },
}

impl FromStr for EditOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::invalid("operator", reason);
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Self::Bridge { url: s.to_string() });
        }
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| bad(format!("{name} needs a value, as in {name}:<value>")))?;
            a.trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("{a:?} is not a number")))
        };
        let op = match name {
            "identity" if arg.is_none() => Self::Identity,
            "grayscale" if arg.is_none() => Self::Grayscale,
            "sepia" if arg.is_none() => Self::Sepia,
            "hue" => Self::HueRotate { degrees: num(arg)? },
            "posterize" => {
                let v = num(arg)?;
                if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                    return Err(bad(format!("posterize levels must be a whole number, got {v}")));
                }
                Self::Posterize { levels: v as u32 }
            }
            "vignette" => Self::Vignette { strength: num(arg)? },
            _ => return Err(bad(format!("unknown operator {s:?}"))),
        };
        op.validate()?;
        Ok(op)
    }
}

impl fmt::Display for EditOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Grayscale => write!(f, "grayscale"),
            Self::Sepia => write!(f, "sepia"),
            Self::HueRotate { degrees } => write!(f, "hue:{degrees}"),
            Self::Posterize { levels } => write!(f, "posterize:{levels}"),
            Self::Vignette { strength } => write!(f, "vignette:{strength}"),
            Self::Bridge { url } => write!(f, "{url}"),
        }
    }
}

impl EditOperator {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::HueRotate { degrees } if !degrees.is_finite() => {
                Err(Error::invalid("operator", "hue angle must be finite"))
            }
            Self::Posterize { levels } if levels < 2 => {
                Err(Error::invalid("operator", "posterize needs at least 2 levels"))
            }
            Self::Vignette { strength } if !(0.0..=1.0).contains(&strength) => {
                Err(Error::invalid("operator", "vignette strength must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Applies a built-in operator. Bridge operators need [`apply_operator`].
    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        let mut out = img.clone();
        match *self {
            Self::Identity => {}
            Self::Grayscale => map_pixels(&mut out, |p| [luma(p); 3]),
            Self::Sepia => map_pixels(&mut out, |p| mat_apply(&SEPIA, p)),
            Self::HueRotate { degrees } => {
                let m = hue_matrix(degrees);
                map_pixels(&mut out, |p| mat_apply(&m, p))
            }
            Self::Posterize { levels } => {
                let n = (levels - 1) as f64;
                for v in &mut out.data {
                    *v = (v.clamp(0.0, 1.0) * n).round() / n;
                }
            }
            Self::Vignette { strength } => {
                let (w, h) = (img.width as f64, img.height as f64);
                let r_max2 = (w * w + h * h) / 4.0;
                for r in 0..img.height {
                    for c in 0..img.width {
                        let dx = c as f64 + 0.5 - w / 2.0;
                        let dy = r as f64 + 0.5 - h / 2.0;
                        let k = 1.0 - strength * (dx * dx + dy * dy) / r_max2;
                        let p = out.pixel(r, c);
                        out.set_pixel(r, c, p.map(|v| v * k));
                    }
                }
            }
            Self::Bridge { .. } => {
                return Err(Error::invalid(
                    "operator",
                    "bridge operators run through apply_operator",
                ))
            }
        }
        Ok(out)
    }
}

fn luma(p: [f64; 3]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn map_pixels(img: &mut Image, f: impl Fn([f64; 3]) -> [f64; 3]) {
    for px in img.data.chunks_exact_mut(3) {
        let out = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&out);
    }
}

fn mat_apply(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2]).clamp(0.0, 1.0))
}

/// Rodrigues rotation by `degrees` about `(1, 1, 1)/√3`; exactly the
/// identity at zero.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let u = 1.0 / 3f64.sqrt();
    let k = (1.0 - c) / 3.0;
    let cross = [[0.0, -u, u], [u, 0.0, -u], [-u, u, 0.0]];
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { c } else { 0.0 } + k + s * cross[i][j]))
}

/// One supervision view: a camera and its image at t = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera_id: u32,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditedViewSet {
    pub views: Vec<View>,
    pub instruction: String,
}

/// The t = 0 frames of `subset` (all cameras when `None`), in camera-id
/// order.
pub fn collect_first_timestep(dataset: &Dataset, subset: Option<&[u32]>) -> Result<Vec<View>> {
    let mut ids: Vec<u32> = match subset {
        Some(s) => s.to_vec(),
        None => dataset.camera_ids.clone(),
    };
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid("subset", format!("camera {} listed twice", w[0])));
    }
    ids.into_iter()
        .map(|id| {
            let c = dataset.camera_index(id)?;
            Ok(View {
                camera_id: id,
                camera: dataset.cameras[c].clone(),
                image: dataset.frame(c, 0).clone(),
            })
        })
        .collect()
}

pub fn apply_operator(op: &EditOperator, views: &[View], instruction: &str, seed: u64) -> Result<EditedViewSet> {
    if views.is_empty() {
        return Err(Error::invalid("views", "nothing to edit"));
    }
    let images: Vec<Image> = match op {
        EditOperator::Bridge { url } => {
            let client = BridgeClient::new(url, Duration::from_secs(120))?;
            let originals: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
            client.edit(&originals, instruction, CfgScales::default(), seed)?
        }
        _ => views.par_iter().map(|v| op.apply(&v.image)).collect::<Result<_>>()?,
    };
    Ok(EditedViewSet {
        views: views
            .iter()
            .zip(images)
            .map(|(v, image)| View { image, ..v.clone() })
            .collect(),
        instruction: instruction.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    /// Stage-0 rates; the SH rate is multiplied by `sh_lr_scale`.
    pub lr: LearningRates,
    pub sh_lr_scale: f64,
    /// Views per step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            lr: LearningRates::default(),
            sh_lr_scale: 4.0,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.sh_lr_scale > 0.0) {
            return Err(Error::invalid("sh_lr_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn effective_lr(&self) -> LearningRates {
        LearningRates {
            sh: self.lr.sh * self.sh_lr_scale,
            ..self.lr.clone()
        }
    }
}

/// Mean L1 between t = 0 renders and the edited views.
pub fn t0_l1(model: &SceneModel, edited: &EditedViewSet) -> Result<f64> {
    let mut total = 0.0;
    for v in &edited.views {
        total += model.render(&v.camera, 0.0)?.rgb.mean_abs_diff(&v.image)?;
    }
    Ok(total / edited.views.len() as f64)
}

pub const FIT_HEADER: &str = "step,l1";

/// Fits the canonical cloud so the t = 0 deformation of it reproduces the
/// edited views. The field never changes. Returns the per-step batch L1.
pub fn fit_canonical(
    model: &mut SceneModel,
    edited: &EditedViewSet,
    config: &FitConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if edited.views.is_empty() {
        return Err(Error::invalid("edited", "no views"));
    }
    let settings = model.settings();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = CloudOptimizer::new(model, &config.effective_lr());
    let mut history = Vec::with_capacity(config.iterations);
    if let Some(w) = log.as_mut() {
        writeln!(w, "{FIT_HEADER}").map_err(|e| Error::io("fit log", e))?;
    }
    for step in 0..config.iterations {
        let mut graph = Graph::new();
        let cv = model.cloud.to_vars(&mut graph, true);
        let fv = model.field.to_vars(&mut graph, false);
        let mut total = None;
        for _ in 0..config.batch_size {
            let v = &edited.views[rng.random_range(0..edited.views.len())];
            let (img, _) = render_deformed(&mut graph, &cv, &fv, model.bounds(), &v.camera, 0.0, &settings)?;
            let l1 = l1_vars(&mut graph, img, &v.image)?;
            total = Some(match total {
                Some(acc) => graph.add(acc, l1)?,
                None => l1,
            });
        }
        let loss = graph.scale(total.expect("batch_size > 0"), 1.0 / config.batch_size as f64);
        let value = graph.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("L1 at step {step}")));
        }
        graph.backward(loss)?;
        opt.step(model, &grads_of(&graph, &cv.as_array())?)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step},{value:.9}").map_err(|e| Error::io("fit log", e))?;
        }
        history.push(value);
    }
    Ok(history)
}
