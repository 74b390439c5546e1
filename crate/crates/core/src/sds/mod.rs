//! Score-distillation refinement of a pseudo-edited scene.
//!
//! Each step renders a batch of (camera, timestep) views, asks a guidance
//! source for the noise residual `ε̂ − ε` of every render, and pushes that
//! residual back through the renderer into the canonical cloud. The field
//! only ever enters the graph as constants.

pub mod bridge;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffeng::{Graph, Tensor};
use crate::image::Image;
use crate::scene_io::Dataset;
use crate::trainer::{grads_of, render_deformed, CloudOptimizer, LearningRates, SceneModel};
use crate::{Error, Result};

/// Cosine signal schedule `ᾱ(t̃) = cos²(π t̃ / 2)`, sampled on
/// `[t_min, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min <= self.t_max && self.t_max < 1.0) {
            return Err(Error::invalid("schedule", "need 0 < t_min ≤ t_max < 1"));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !(self.t_min..=self.t_max).contains(&t) {
            return Err(Error::OutOfRange {
                what: "diffusion time",
                value: t,
                min: self.t_min,
                max: self.t_max,
            });
        }
        Ok((std::f64::consts::FRAC_PI_2 * t).cos().powi(2))
    }

    /// `√ᾱ·x + √(1−ᾱ)·ε`
    pub fn add_noise(&self, x: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
        same_shape("noise", x, eps)?;
        let a = self.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x.data().iter().zip(eps.data()).map(|(x, e)| sa * x + sn * e).collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.t_min == self.t_max {
            self.t_min
        } else {
            rng.random_range(self.t_min..=self.t_max)
        }
    }
}

/// `ᾱ(t̃)` under the default schedule.
pub fn alpha_bar(t: f64) -> Result<f64> {
    DiffusionSchedule::default().alpha_bar(t)
}

/// Classifier-free guidance scales for the image and text conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfgScales {
    pub image: f64,
    pub text: f64,
}

impl Default for CfgScales {
    fn default() -> Self {
        Self { image: 1.2, text: 8.5 }
    }
}

impl CfgScales {
    pub fn validate(&self) -> Result<()> {
        if !(self.image.is_finite() && self.text.is_finite()) {
            return Err(Error::invalid("cfg scales", "must be finite"));
        }
        Ok(())
    }
}

fn same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            what,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `e_u + s_I·(e_i − e_u) + s_T·(e_f − e_i)`, evaluated as
/// `s_T·e_f + (s_I − s_T)·e_i + (1 − s_I)·e_u` with zero-weight terms
/// skipped, so unit scales return `e_full` bit for bit.
pub fn cfg_compose(e_uncond: &Tensor, e_img: &Tensor, e_full: &Tensor, scales: CfgScales) -> Result<Tensor> {
    same_shape("cfg inputs", e_uncond, e_img)?;
    same_shape("cfg inputs", e_img, e_full)?;
    let (cf, ci, cu) = (scales.text, scales.image - scales.text, 1.0 - scales.image);
    let data = e_full
        .data()
        .iter()
        .zip(e_img.data())
        .zip(e_uncond.data())
        .map(|((&f, &i), &u)| {
            let mut acc = cf * f;
            if ci != 0.0 {
                acc += ci * i;
            }
            if cu != 0.0 {
                acc += cu * u;
            }
            acc
        })
        .collect();
    Ok(Tensor::new(e_full.shape().to_vec(), data)?)
}

/// Which conditions a noise prediction sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Unconditional,
    ImageOnly,
    Full,
}

/// A noise-prediction network `ε_θ(x_t̃, c_I, c_T; t̃)` for one image whose
/// conditions are bound at construction.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: f64, cond: Conditioning) -> Result<Tensor>;
}

/// Optimal denoiser for a data distribution concentrated on `target`.
/// Conditioning is ignored.
#[derive(Clone, Debug)]
pub struct AnalyticDenoiser {
    target: Tensor,
    schedule: DiffusionSchedule,
}

pub fn analytic_denoiser(target: &Image, schedule: DiffusionSchedule) -> AnalyticDenoiser {
    AnalyticDenoiser {
        target: target.to_tensor(),
        schedule,
    }
}

impl NoisePredictor for AnalyticDenoiser {
    fn predict(&self, x_t: &Tensor, t: f64, _cond: Conditioning) -> Result<Tensor> {
        same_shape("denoiser input", x_t, &self.target)?;
        let a = self.schedule.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(x, y)| (x - sa * y) / sn)
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), data)?)
    }
}

/// Noises `x`, queries the predictor under all three conditionings,
/// composes them and returns `ε̂ − ε`.
pub fn guided_residual(
    predictor: &dyn NoisePredictor,
    x: &Tensor,
    eps: &Tensor,
    t: f64,
    scales: CfgScales,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let x_t = schedule.add_noise(x, eps, t)?;
    let e_u = predictor.predict(&x_t, t, Conditioning::Unconditional)?;
    let e_i = predictor.predict(&x_t, t, Conditioning::ImageOnly)?;
    let e_f = predictor.predict(&x_t, t, Conditioning::Full)?;
    let eps_hat = cfg_compose(&e_u, &e_i, &e_f, scales)?;
    same_shape("guidance output", &eps_hat, x)?;
    let data = eps_hat.data().iter().zip(eps.data()).map(|(a, b)| a - b).collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// One render handed to a guidance source.
pub struct GuidanceItem<'a> {
    pub camera_id: u32,
    pub timestep: usize,
    pub rendered: &'a Image,
    /// The unedited dataset frame, the image condition.
    pub original: &'a Image,
    pub noise: &'a Tensor,
    pub t: f64,
}

pub struct GuidanceQuery<'a> {
    pub items: Vec<GuidanceItem<'a>>,
    pub instruction: &'a str,
    pub scales: CfgScales,
    pub seed: u64,
}

/// Anything that can turn renders into image-space residuals `ε̂ − ε`.
pub trait GuidanceModel {
    fn residuals(&self, query: &GuidanceQuery) -> Result<Vec<Tensor>>;
}

/// In-process guidance: an analytic denoiser per (camera id, timestep)
/// target image.
#[derive(Clone, Debug)]
pub struct OracleGuidance {
    pub targets: BTreeMap<(u32, usize), Image>,
    pub schedule: DiffusionSchedule,
}

impl GuidanceModel for OracleGuidance {
    fn residuals(&self, query: &GuidanceQuery) -> Result<Vec<Tensor>> {
        query
            .items
            .iter()
            .map(|item| {
                let target = self.targets.get(&(item.camera_id, item.timestep)).ok_or_else(|| {
                    Error::Guidance(format!(
                        "no oracle target for camera {} at timestep {}",
                        item.camera_id, item.timestep
                    ))
                })?;
                let denoiser = analytic_denoiser(target, self.schedule);
                guided_residual(
                    &denoiser,
                    &item.rendered.to_tensor(),
                    item.noise,
                    item.t,
                    query.scales,
                    &self.schedule,
                )
            })
            .collect()
    }
}

/// Per-sample weight `w(t̃)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Unit,
    /// `1 − ᾱ(t̃)`
    NoiseVariance,
}

impl Weighting {
    pub fn weight(&self, schedule: &DiffusionSchedule, t: f64) -> Result<f64> {
        Ok(match self {
            Weighting::Unit => 1.0,
            Weighting::NoiseVariance => 1.0 - schedule.alpha_bar(t)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSample {
    /// Index into the dataset's cameras.
    pub camera: usize,
    pub timestep: usize,
    pub t: f64,
    pub noise: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineBatch {
    pub samples: Vec<BatchSample>,
}

/// Draws `size` views uniformly over cameras and timesteps. One `t̃` is
/// shared by the batch unless `per_image_t`.
pub fn sample_batch(
    dataset: &Dataset,
    size: usize,
    schedule: &DiffusionSchedule,
    per_image_t: bool,
    rng: &mut impl Rng,
) -> RefineBatch {
    let shared = schedule.sample(rng);
    let samples = (0..size)
        .map(|_| {
            let camera = rng.random_range(0..dataset.num_cameras());
            let timestep = rng.random_range(0..dataset.num_timesteps);
            let t = if per_image_t { schedule.sample(rng) } else { shared };
            let cam = &dataset.cameras[camera];
            let len = cam.width as usize * cam.height as usize * 3;
            let noise: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            let noise = Tensor::new([cam.height as usize, cam.width as usize, 3], noise).expect("sized above");
            BatchSample {
                camera,
                timestep,
                t,
                noise,
            }
        })
        .collect();
    RefineBatch { samples }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdsConfig {
    pub scales: CfgScales,
    pub schedule: DiffusionSchedule,
    pub weighting: Weighting,
    pub instruction: String,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            scales: CfgScales::default(),
            schedule: DiffusionSchedule::default(),
            weighting: Weighting::Unit,
            instruction: String::new(),
        }
    }
}

/// Cloud gradients from one batch plus the renders that produced them.
pub struct SdsGradient {
    pub cloud: Vec<Tensor>,
    pub renders: Vec<Image>,
    /// Mean squared residual over the batch, for logging.
    pub residual_ms: f64,
}

/// Gradient of `(1/B) Σ w(t̃)·mean(sg(ε̂ − ε) ⊙ Ĩ)` with respect to the
/// canonical cloud. The residual is a constant in the graph, and the field
/// is recorded without gradients.
pub fn sds_step(
    model: &SceneModel,
    dataset: &Dataset,
    batch: &RefineBatch,
    guidance: &dyn GuidanceModel,
    config: &SdsConfig,
    seed: u64,
) -> Result<SdsGradient> {
    if batch.samples.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    let settings = model.settings();
    let mut graph = Graph::new();
    let cv = model.cloud.to_vars(&mut graph, true);
    let fv = model.field.to_vars(&mut graph, false);
    let mut images = Vec::with_capacity(batch.samples.len());
    let mut renders = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        let (img, rendered) = render_deformed(
            &mut graph,
            &cv,
            &fv,
            model.bounds(),
            &dataset.cameras[s.camera],
            dataset.time_of(s.timestep),
            &settings,
        )?;
        images.push(img);
        renders.push(rendered.rgb);
    }
    let query = GuidanceQuery {
        items: batch
            .samples
            .iter()
            .zip(&renders)
            .map(|(s, r)| GuidanceItem {
                camera_id: dataset.camera_ids[s.camera],
                timestep: s.timestep,
                rendered: r,
                original: dataset.frame(s.camera, s.timestep),
                noise: &s.noise,
                t: s.t,
            })
            .collect(),
        instruction: &config.instruction,
        scales: config.scales,
        seed,
    };
    let residuals = guidance.residuals(&query)?;
    if residuals.len() != renders.len() {
        return Err(Error::Guidance(format!(
            "expected {} residuals, got {}",
            renders.len(),
            residuals.len()
        )));
    }
    let mut total = None;
    let mut residual_ms = 0.0;
    for ((s, &img), r) in batch.samples.iter().zip(&images).zip(residuals) {
        same_shape("residual", &r, graph.value(img))?;
        if !r.is_finite() {
            return Err(Error::Guidance("non-finite residual".into()));
        }
        residual_ms += r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let w = config.weighting.weight(&config.schedule, s.t)?;
        let rc = graph.constant(r.map(|v| v * w));
        let prod = graph.mul(rc, img)?;
        let term = graph.mean(prod);
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    let n = batch.samples.len() as f64;
    let surrogate = graph.scale(total.expect("non-empty batch"), 1.0 / n);
    graph.backward(surrogate)?;
    Ok(SdsGradient {
        cloud: grads_of(&graph, &cv.as_array())?,
        renders,
        residual_ms: residual_ms / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub seed: u64,
    /// Draw `t̃` per image instead of once per batch.
    pub per_image_t: bool,
    /// Abort after this many guidance failures in a row.
    pub max_consecutive_failures: usize,
    pub sds: SdsConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            batch_size: 4,
            lr: LearningRates::default(),
            seed: 0,
            per_image_t: false,
            max_consecutive_failures: 3,
            sds: SdsConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.max_consecutive_failures == 0 {
            return Err(Error::invalid("max_consecutive_failures", "must be positive"));
        }
        self.sds.schedule.validate()?;
        self.sds.scales.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineStep {
    pub step: usize,
    pub residual_ms: f64,
    /// Guidance error that caused this step to be skipped.
    pub skipped: Option<String>,
}

pub const REFINE_HEADER: &str = "step,residual_ms,skipped";

/// Stage-2 loop. Only the cloud is updated; `model` keeps the last state
/// whose step succeeded.
pub fn refine(
    model: &mut SceneModel,
    dataset: &Dataset,
    guidance: &dyn GuidanceModel,
    config: &RefineConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<RefineStep>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = CloudOptimizer::new(model, &config.lr);
    let mut steps = Vec::with_capacity(config.iterations);
    let mut failures = 0;
    if let Some(w) = log.as_mut() {
        writeln!(w, "{REFINE_HEADER}").map_err(|e| Error::io("refine log", e))?;
    }
    for step in 0..config.iterations {
        let batch = sample_batch(
            dataset,
            config.batch_size,
            &config.sds.schedule,
            config.per_image_t,
            &mut rng,
        );
        let step_seed = config.seed.wrapping_add(step as u64);
        let record = match sds_step(model, dataset, &batch, guidance, &config.sds, step_seed) {
            Ok(g) => {
                failures = 0;
                opt.step(model, &g.cloud)?;
                RefineStep {
                    step,
                    residual_ms: g.residual_ms,
                    skipped: None,
                }
            }
            Err(e @ (Error::Guidance(_) | Error::Bridge { .. })) => {
                failures += 1;
                if failures >= config.max_consecutive_failures {
                    return Err(e);
                }
                RefineStep {
                    step,
                    residual_ms: f64::NAN,
                    skipped: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        if let Some(w) = log.as_mut() {
            let skipped = record.skipped.as_deref().unwrap_or("").replace([',', '\n'], " ");
            writeln!(w, "{},{:.9e},{}", step, record.residual_ms, skipped).map_err(|e| Error::io("refine log", e))?;
        }
        steps.push(record);
    }
    Ok(steps)
}

/// Mean over every (camera, timestep) of the render-to-target MSE.
pub fn mean_l2_to_targets(
    model: &SceneModel,
    dataset: &Dataset,
    targets: &BTreeMap<(u32, usize), Image>,
) -> Result<f64> {
    let mut total = 0.0;
    for (c, cam) in dataset.cameras.iter().enumerate() {
        for t in 0..dataset.num_timesteps {
            let id = dataset.camera_ids[c];
            let target = targets
                .get(&(id, t))
                .ok_or_else(|| Error::invalid("targets", format!("missing camera {id} timestep {t}")))?;
            total += model.render(cam, dataset.time_of(t))?.rgb.mse(target)?;
        }
    }
    Ok(total / (dataset.num_cameras() * dataset.num_timesteps) as f64)
}
