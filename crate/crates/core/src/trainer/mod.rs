//! Fitting a canonical cloud and deformation field to multiview video.
//!
//! Training runs in two phases. During the coarse phase the field is frozen
//! and only the cloud moves; afterwards both are optimized jointly. The loss
//! is mean absolute pixel error plus a weighted total-variation term on the
//! feature planes.

mod adam;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};

use crate::diffeng::{Graph, Tensor, Var};
use crate::gaussians::{activate_vars, logit, Camera, CloudVars, GaussianCloud};
use crate::hexplane::{
    cloud_at, deform_vars, tv_loss, tv_loss_vars, FieldVars, HexplaneConfig, HexplaneField, SceneBounds,
};
use crate::image::Image;
use crate::renderer::{render, render_vars, RenderSettings, RenderedImage};
use crate::scene_io::{psnr, Dataset};
use crate::{Error, Result};

pub const CLOUD_FILE: &str = "cloud.g4dc";
pub const FIELD_FILE: &str = "field.g4df";
pub const INFO_FILE: &str = "model.json";

/// Scene-level settings stored next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub background: [f64; 3],
    pub num_timesteps: usize,
}

impl ModelInfo {
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::scene_io::write_json(&dir.join(INFO_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INFO_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// Canonical cloud plus deformation field; the field carries the bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub cloud: GaussianCloud,
    pub field: HexplaneField,
    pub info: ModelInfo,
}

impl SceneModel {
    pub fn bounds(&self) -> &SceneBounds {
        &self.field.bounds
    }

    pub fn settings(&self) -> RenderSettings {
        RenderSettings::with_background(self.info.background)
    }

    pub fn cloud_at(&self, t: f64) -> Result<GaussianCloud> {
        cloud_at(&self.cloud, &self.field, t)
    }

    pub fn render(&self, cam: &Camera, t: f64) -> Result<RenderedImage> {
        render(&self.cloud_at(t)?, cam, &self.settings())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.cloud.save(&dir.join(CLOUD_FILE))?;
        self.field.save(&dir.join(FIELD_FILE))?;
        self.info.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            cloud: GaussianCloud::load(&dir.join(CLOUD_FILE))?,
            field: HexplaneField::load(&dir.join(FIELD_FILE))?,
            info: ModelInfo::load(dir)?,
        })
    }

    /// A fresh model: Gaussians at `positions` with neutral appearance and a
    /// field whose heads output zero.
    pub fn initialize(
        positions: Vec<[f64; 3]>,
        bounds: SceneBounds,
        field_config: HexplaneConfig,
        info: ModelInfo,
        sh_degree: u32,
        seed: u64,
    ) -> Result<Self> {
        let n = positions.len();
        let extent = (0..3).map(|a| bounds.max[a] - bounds.min[a]).fold(0.0, f64::max);
        // Roughly the spacing of n points spread through the box.
        let scale = (extent / (n.max(1) as f64).cbrt() * 0.25).ln();
        let k = crate::gaussians::coeff_count(sh_degree);
        let cloud = GaussianCloud::new(
            positions,
            vec![[scale; 3]; n],
            vec![[1.0, 0.0, 0.0, 0.0]; n],
            vec![logit(0.5); n],
            vec![0.0; n * k * 3],
            sh_degree,
        )?;
        Ok(Self {
            cloud,
            field: HexplaneField::new(field_config, bounds, seed)?,
            info,
        })
    }
}

/// Per-group Adam learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub positions: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scales: f64,
    pub rotations: f64,
    pub grids: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: 1.6e-4,
            sh: 2.5e-3,
            opacity: 5e-2,
            scales: 5e-3,
            rotations: 5e-3,
            grids: 1.6e-3,
            mlp: 1.6e-4,
        }
    }
}

impl LearningRates {
    /// In [`CloudVars::as_array`] order.
    pub fn cloud(&self) -> [f64; 5] {
        [self.positions, self.scales, self.rotations, self.opacity, self.sh]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Leading steps with the field frozen.
    pub coarse_iterations: usize,
    pub lr: LearningRates,
    pub lambda_tv: f64,
    /// Views per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Exclude the highest camera id from training and report PSNR on it.
    pub hold_out_last_camera: bool,
    /// Held-out PSNR cadence in steps; the final step is always evaluated.
    pub eval_every: usize,
    pub init_points: usize,
    pub sh_degree: u32,
    pub background: [f64; 3],
    pub field: HexplaneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_iterations(3000)
    }
}

impl TrainConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            coarse_iterations: iterations / 5,
            lr: LearningRates::default(),
            lambda_tv: 1e-4,
            batch_size: 2,
            seed: 0,
            hold_out_last_camera: true,
            eval_every: 250,
            init_points: 256,
            sh_degree: 1,
            background: [0.0; 3],
            field: HexplaneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_iterations > self.iterations {
            return Err(Error::invalid("coarse_iterations", "must not exceed iterations"));
        }
        if !(self.lambda_tv >= 0.0) {
            return Err(Error::invalid("lambda_tv", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background", "components must lie in [0, 1]"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every", "must be positive"));
        }
        self.field.validate()
    }
}

/// One metrics row; `psnr_holdout` is only set on evaluation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub l1: f64,
    pub tv: f64,
    pub psnr_holdout: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,l1,tv,psnr_holdout";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let psnr = self.psnr_holdout.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!("{},{:.9},{:.9},{:.9e},{}", self.step, self.loss, self.l1, self.tv, psnr)
    }
}

/// Mean absolute difference plus `λ_tv` times the plane TV.
pub fn loss_4dgs(rendered: &Image, target: &Image, field: &HexplaneField, lambda_tv: f64) -> Result<f64> {
    Ok(rendered.mean_abs_diff(target)? + lambda_tv * tv_loss(field))
}

/// Mean absolute error of an image var against a constant target.
pub fn l1_vars(graph: &mut Graph, image: Var, target: &Image) -> Result<Var> {
    if graph.value(image).shape() != [target.height as usize, target.width as usize, 3] {
        return Err(Error::DimensionMismatch {
            what: "rendered vs target",
            left: graph.value(image).shape().to_vec(),
            right: vec![target.height as usize, target.width as usize, 3],
        });
    }
    let t = graph.constant(target.to_tensor());
    let d = graph.sub(image, t)?;
    let a = graph.abs(d);
    Ok(graph.mean(a))
}

/// Records render of the deformed cloud at scene time `t`.
pub fn render_deformed(
    graph: &mut Graph,
    cloud: &CloudVars,
    field: &FieldVars,
    bounds: &SceneBounds,
    cam: &Camera,
    t: f64,
    settings: &RenderSettings,
) -> Result<(Var, RenderedImage)> {
    let deformed = deform_vars(graph, cloud, field, bounds, t)?;
    let act = activate_vars(graph, &deformed)?;
    render_vars(graph, &act, cam, settings)
}

/// Initial Stage-0 model for `dataset`: Gaussians at the ground-truth point
/// set when the dataset ships one, otherwise uniform in the box.
pub fn initial_model(dataset: &Dataset, config: &TrainConfig) -> Result<SceneModel> {
    let gt = dataset.root.join("gt_model").join(CLOUD_FILE);
    let positions = if gt.is_file() {
        let cloud = GaussianCloud::load(&gt)?;
        (0..cloud.len()).map(|i| cloud.position(i)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let b = &dataset.bounds;
        (0..config.init_points)
            .map(|_| std::array::from_fn(|a| rng.random_range(b.min[a]..b.max[a])))
            .collect()
    };
    SceneModel::initialize(
        positions,
        dataset.bounds.clone(),
        config.field.clone(),
        ModelInfo {
            background: config.background,
            num_timesteps: dataset.num_timesteps,
        },
        config.sh_degree,
        config.seed,
    )
}

pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub holdout_camera: Option<u32>,
}

/// Mean PSNR over all timesteps of one camera.
pub fn camera_psnr(model: &SceneModel, dataset: &Dataset, camera: usize) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..dataset.num_timesteps {
        let img = model.render(&dataset.cameras[camera], dataset.time_of(t))?;
        total += psnr(&img.rgb, dataset.frame(camera, t))?;
    }
    Ok(total / dataset.num_timesteps as f64)
}

/// Stage-0 optimization. `model` always holds the last state whose step
/// succeeded, so on error the caller still has a usable checkpoint.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    model: &mut SceneModel,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.num_cameras() == 0 || dataset.num_timesteps == 0 {
        return Err(Error::invalid("dataset", "no frames"));
    }
    let holdout = (config.hold_out_last_camera && dataset.num_cameras() > 1).then(|| dataset.num_cameras() - 1);
    let train_cams: Vec<usize> = (0..dataset.num_cameras()).filter(|&c| Some(c) != holdout).collect();
    let settings = model.settings();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig::default();
    let mut cloud_state = OptimizerState::new(model.cloud_tensors());
    let mut field_state = OptimizerState::new(model.field.grids.iter().chain(&model.field.mlp));
    let cloud_lrs = config.lr.cloud();
    let field_lrs: Vec<f64> = model
        .field
        .grids
        .iter()
        .map(|_| config.lr.grids)
        .chain(model.field.mlp.iter().map(|_| config.lr.mlp))
        .collect();

    if let Some(w) = log.as_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    }
    let mut metrics = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let fine = step >= config.coarse_iterations;
        let mut graph = Graph::new();
        let cv = model.cloud.to_vars(&mut graph, true);
        let fv = model.field.to_vars(&mut graph, fine);
        let mut l1_total: Option<Var> = None;
        for _ in 0..config.batch_size {
            let cam = train_cams[rng.random_range(0..train_cams.len())];
            let t = rng.random_range(0..dataset.num_timesteps);
            let (img, _) = render_deformed(
                &mut graph,
                &cv,
                &fv,
                model.bounds(),
                &dataset.cameras[cam],
                dataset.time_of(t),
                &settings,
            )?;
            let l1 = l1_vars(&mut graph, img, dataset.frame(cam, t))?;
            l1_total = Some(match l1_total {
                Some(acc) => graph.add(acc, l1)?,
                None => l1,
            });
        }
        let l1 = graph.scale(l1_total.expect("batch_size > 0"), 1.0 / config.batch_size as f64);
        let tv = tv_loss_vars(&mut graph, &fv.grids);
        let weighted = graph.scale(tv, config.lambda_tv);
        let loss = graph.add(l1, weighted)?;
        let (loss_v, l1_v, tv_v) = (
            graph.value(loss).data()[0],
            graph.value(l1).data()[0],
            graph.value(tv).data()[0],
        );
        if !loss_v.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        graph.backward(loss)?;

        let cloud_grads = grads_of(&graph, &cv.as_array())?;
        let field_grads = if fine {
            Some(grads_of(&graph, &fv.all().collect::<Vec<_>>())?)
        } else {
            None
        };
        // Check everything first so a rejected step leaves the model intact.
        if let Some(bad) = cloud_grads
            .iter()
            .chain(field_grads.iter().flatten())
            .position(|g| !g.is_finite())
        {
            return Err(Error::NonFinite(format!("gradient group {bad} at step {step}")));
        }
        adam_step(
            &mut model.cloud_tensors_mut(),
            &cloud_grads,
            &mut cloud_state,
            &cloud_lrs,
            &adam,
        )?;
        if let Some(g) = field_grads {
            let mut params: Vec<&mut Tensor> = model.field.grids.iter_mut().chain(model.field.mlp.iter_mut()).collect();
            adam_step(&mut params, &g, &mut field_state, &field_lrs, &adam)?;
        }

        let last = step + 1 == config.iterations;
        let psnr_holdout = match holdout {
            Some(c) if last || (step + 1) % config.eval_every == 0 => Some(camera_psnr(model, dataset, c)?),
            _ => None,
        };
        let row = StepMetrics {
            step,
            loss: loss_v,
            l1: l1_v,
            tv: tv_v,
            psnr_holdout,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", row.csv_row()).map_err(|e| Error::io("metrics", e))?;
        }
        metrics.push(row);
    }
    Ok(TrainReport {
        metrics,
        holdout_camera: holdout.map(|c| dataset.camera_ids[c]),
    })
}

pub(crate) fn grads_of(graph: &Graph, vars: &[Var]) -> Result<Vec<Tensor>> {
    vars.iter()
        .map(|&v| {
            graph
                .grad(v)
                .ok_or_else(|| Error::invalid("gradient", "parameter is not trainable"))
        })
        .collect()
}

impl SceneModel {
    /// Cloud tensors in [`CloudVars::as_array`] order.
    pub fn cloud_tensors(&self) -> [&Tensor; 5] {
        let c = &self.cloud;
        [
            &c.positions,
            &c.log_scales,
            &c.rotations,
            &c.opacity_logits,
            &c.sh_coeffs,
        ]
    }

    pub fn cloud_tensors_mut(&mut self) -> [&mut Tensor; 5] {
        let c = &mut self.cloud;
        [
            &mut c.positions,
            &mut c.log_scales,
            &mut c.rotations,
            &mut c.opacity_logits,
            &mut c.sh_coeffs,
        ]
    }
}

/// Adam over the cloud tensors alone, for the stages that keep the field
/// frozen.
#[derive(Clone, Debug)]
pub struct CloudOptimizer {
    state: OptimizerState,
    lrs: [f64; 5],
    adam: AdamConfig,
}

impl CloudOptimizer {
    pub fn new(model: &SceneModel, lr: &LearningRates) -> Self {
        Self {
            state: OptimizerState::new(model.cloud_tensors()),
            lrs: lr.cloud(),
            adam: AdamConfig::default(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    /// Rejects non-finite gradients without touching `model`.
    pub fn step(&mut self, model: &mut SceneModel, grads: &[Tensor]) -> Result<()> {
        adam_step(
            &mut model.cloud_tensors_mut(),
            grads,
            &mut self.state,
            &self.lrs,
            &self.adam,
        )
    }
}

#[cfg(test)]
mod tests;
