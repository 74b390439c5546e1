//! The `dynedit` command line: synth → train → edit → refine → render → eval.
//!
//! Every command that writes artifacts also writes a `run.json` record, and
//! `dynedit rerun <run.json>` replays it. Exit codes: 0 success, 2 bad
//! input, 3 runtime failure (non-finite state, guidance or I/O errors).

pub mod config;
pub mod provenance;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::editor::{apply_operator, collect_first_timestep, fit_canonical, t0_l1, EditOperator};
use crate::gaussians::Camera;
use crate::image::Image;
use crate::scene_io::{
    frame_path, ground_truth_frames, load_cameras, load_dataset, load_png, psnr, save_png, ssim, synth_generate,
    Dataset, SynthSpec,
};
use crate::sds::bridge::{BridgeClient, BridgeGuidance};
use crate::sds::{mean_l2_to_targets, refine, GuidanceModel, OracleGuidance};
use crate::trainer::{initial_model, train, SceneModel};
use crate::{Error, Result};
use config::RunConfig;
use provenance::{hash_inputs, RunRecord, RECORD_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const CAMERAS_FILE: &str = "cameras.json";
const EDIT_FILE: &str = "edit.json";

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
pub struct ConfigArgs {
    /// Flat `key = value` config file, or a previous `run.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed of the stage this command runs.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Render a synthetic multiview dataset.
    Synth {
        /// JSON scene spec; the built-in default scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a dynamic model to a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Edit the first-timestep views and fit the canonical cloud to them.
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `grayscale`, `sepia`, `hue:<deg>`, `posterize:<n>`,
        /// `vignette:<s>`, `identity` or a bridge URL.
        #[arg(long)]
        operator: String,
        #[arg(long, default_value = "")]
        instruction: String,
        /// Comma-separated camera ids; all cameras when omitted.
        #[arg(long, value_delimiter = ',')]
        cameras: Option<Vec<u32>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score-distillation refinement of an edited model.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `oracle` or a bridge base URL.
        #[arg(long)]
        guidance: String,
        /// Oracle target operator; defaults to the one recorded by `edit`.
        #[arg(long)]
        operator: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render one view or an orbit of numbered frames.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "orbit", requires = "t")]
        camera: Option<u32>,
        /// Timestep index.
        #[arg(long, conflicts_with = "orbit")]
        t: Option<usize>,
        /// Number of frames on a circle through the model's cameras, with
        /// scene time sweeping from 0 to 1.
        #[arg(long, required_unless_present = "camera")]
        orbit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of every (camera, t) against reference frames.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "images", required_unless_present = "images")]
        model: Option<PathBuf>,
        /// Frames in the dataset layout (`frames/cam_<id>/<t>.png`).
        #[arg(long)]
        images: Option<PathBuf>,
        /// Reference frames in the dataset layout; the dataset's ground
        /// truth when omitted.
        #[arg(long)]
        ref_images: Option<PathBuf>,
        /// Edit applied to the reference frames first.
        #[arg(long)]
        ref_operator: Option<String>,
        /// CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Replay a `run.json` record.
    Rerun {
        record: PathBuf,
        /// Write to this location instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "dynedit",
    version,
    about = "Instruction-guided editing of dynamic Gaussian-splat scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth { .. } => "synth",
            Self::Train { .. } => "train",
            Self::Edit { .. } => "edit",
            Self::Refine { .. } => "refine",
            Self::Render { .. } => "render",
            Self::Eval { .. } => "eval",
            Self::Config { .. } => "config",
            Self::Rerun { .. } => "rerun",
        }
    }

    fn config_args(&self) -> ConfigArgs {
        match self {
            Self::Synth { cfg, .. }
            | Self::Train { cfg, .. }
            | Self::Edit { cfg, .. }
            | Self::Refine { cfg, .. }
            | Self::Config { cfg } => cfg.clone(),
            _ => ConfigArgs::default(),
        }
    }

    fn out_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Self::Synth { out, .. }
            | Self::Train { out, .. }
            | Self::Edit { out, .. }
            | Self::Refine { out, .. }
            | Self::Render { out, .. }
            | Self::Eval { out, .. } => Some(out),
            Self::Config { .. } | Self::Rerun { .. } => None,
        }
    }

    /// Every path argument, made absolute so the record replays from any
    /// working directory.
    fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
            Ok(())
        };
        let opt = |p: &mut Option<PathBuf>| p.as_mut().map_or(Ok(()), abs);
        match self {
            Self::Synth { spec, out, cfg } => {
                opt(spec)?;
                opt(&mut cfg.config)?;
                abs(out)
            }
            Self::Train { data, out, cfg } => {
                abs(data)?;
                opt(&mut cfg.config)?;
                abs(out)
            }
            Self::Edit {
                model, data, out, cfg, ..
            }
            | Self::Refine {
                model, data, out, cfg, ..
            } => {
                abs(model)?;
                abs(data)?;
                opt(&mut cfg.config)?;
                abs(out)
            }
            Self::Render { model, out, .. } => {
                abs(model)?;
                abs(out)
            }
            Self::Eval {
                data,
                model,
                images,
                ref_images,
                out,
                ..
            } => {
                abs(data)?;
                opt(model)?;
                opt(images)?;
                opt(ref_images)?;
                abs(out)
            }
            Self::Config { cfg } => opt(&mut cfg.config),
            Self::Rerun { record, out } => {
                abs(record)?;
                opt(out)
            }
        }
    }

    /// Inputs whose hashes go in the record. Config files are left out: the
    /// resolved config is recorded in full instead.
    fn inputs(&self) -> Vec<&Path> {
        match self {
            Self::Synth { spec, .. } => spec.iter().map(PathBuf::as_path).collect(),
            Self::Train { data, .. } => vec![data],
            Self::Edit { model, data, .. } | Self::Refine { model, data, .. } => vec![model, data],
            Self::Render { model, .. } => vec![model],
            Self::Eval {
                data,
                model,
                images,
                ref_images,
                ..
            } => std::iter::once(data.as_path())
                .chain(model.as_deref())
                .chain(images.as_deref())
                .chain(ref_images.as_deref())
                .collect(),
            Self::Config { .. } | Self::Rerun { .. } => Vec::new(),
        }
    }

    /// Where the record goes: inside the output directory, or beside an
    /// output file.
    fn record_path(&self) -> Option<PathBuf> {
        match self {
            Self::Eval { out, .. } => Some(out.with_extension("run.json")),
            Self::Config { .. } | Self::Rerun { .. } => None,
            Self::Synth { out, .. }
            | Self::Train { out, .. }
            | Self::Edit { out, .. }
            | Self::Refine { out, .. }
            | Self::Render { out, .. } => Some(out.join(RECORD_FILE)),
        }
    }
}

/// Resolves defaults, then the config file, then the synth spec, then
/// `--set` overrides, then `--seed`.
pub fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let args = cmd.config_args();
    let mut cfg = match &args.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    if let Command::Synth { spec: Some(spec), .. } = cmd {
        cfg.synth = crate::scene_io::read_json::<SynthSpec>(spec)?;
    }
    let settings = args
        .set
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    cfg = config::resolve(&cfg, &settings)?;
    if let Some(seed) = args.seed {
        match cmd {
            Command::Synth { .. } => cfg.synth.seed = seed,
            Command::Train { .. } => cfg.train.seed = seed,
            Command::Edit { .. } => cfg.edit.seed = seed,
            Command::Refine { .. } => cfg.refine.seed = seed,
            _ => {}
        }
    }
    Ok(cfg)
}

fn stage_seed(cmd: &Command, cfg: &RunConfig) -> u64 {
    match cmd {
        Command::Synth { .. } => cfg.synth.seed,
        Command::Train { .. } => cfg.train.seed,
        Command::Edit { .. } => cfg.edit.seed,
        Command::Refine { .. } => cfg.refine.seed,
        _ => 0,
    }
}

/// An output directory must be new or empty so no run overwrites another's
/// artifacts or its own inputs.
fn prepare_out_dir(out: &Path) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            return Err(Error::invalid(
                "--out",
                format!("{} exists and is not empty", out.display()),
            ));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn create_log(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn copy_if_present(from: &Path, to: &Path) -> Result<()> {
    if from.is_file() {
        fs::copy(from, to).map_err(|e| Error::io(from, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRecord {
    pub operator: String,
    pub instruction: String,
    pub cameras: Vec<u32>,
    pub t0_l1: f64,
}

fn parse_operator(s: &str) -> Result<EditOperator> {
    EditOperator::from_str(s)
}

fn run_synth(out: &Path, cfg: &RunConfig) -> Result<()> {
    synth_generate(&cfg.synth, out)?;
    Ok(())
}

fn run_train(data: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.train.validate()?;
    let ds = load_dataset(data)?;
    let mut model = initial_model(&ds, &cfg.train)?;
    let mut log = create_log(&out.join("metrics.csv"))?;
    let result = train(&ds, &cfg.train, &mut model, Some(&mut log));
    log.flush().map_err(|e| Error::io(out.join("metrics.csv"), e))?;
    // On failure the last good state is still worth keeping.
    model.save(out)?;
    copy_if_present(&data.join(CAMERAS_FILE), &out.join(CAMERAS_FILE))?;
    result.map(|_| ())
}

fn run_edit(
    model_dir: &Path,
    data: &Path,
    operator: &str,
    instruction: &str,
    cameras: Option<&[u32]>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let op = parse_operator(operator)?;
    cfg.edit.validate()?;
    let ds = load_dataset(data)?;
    let mut model = SceneModel::load(model_dir)?;
    let views = collect_first_timestep(&ds, cameras)?;
    let edited = apply_operator(&op, &views, instruction, cfg.edit.seed)?;

    let edited_dir = out.join("edited");
    fs::create_dir_all(&edited_dir).map_err(|e| Error::io(&edited_dir, e))?;
    for v in &edited.views {
        save_png(&v.image, &edited_dir.join(format!("cam_{}.png", v.camera_id)))?;
    }
    let mut log = create_log(&out.join("fit.csv"))?;
    let result = fit_canonical(&mut model, &edited, &cfg.edit, Some(&mut log));
    log.flush().map_err(|e| Error::io(out.join("fit.csv"), e))?;
    model.save(out)?;
    copy_if_present(&model_dir.join(CAMERAS_FILE), &out.join(CAMERAS_FILE))?;
    result?;
    let record = EditRecord {
        operator: op.to_string(),
        instruction: instruction.to_string(),
        cameras: edited.views.iter().map(|v| v.camera_id).collect(),
        t0_l1: t0_l1(&model, &edited)?,
    };
    crate::scene_io::write_json(&out.join(EDIT_FILE), &record)
}

/// `operator(ground truth)` for every (camera, t).
pub fn oracle_targets(ds: &Dataset, op: &EditOperator) -> Result<BTreeMap<(u32, usize), Image>> {
    if matches!(op, EditOperator::Bridge { .. }) {
        return Err(Error::invalid("operator", "oracle targets need a built-in operator"));
    }
    let gt = ground_truth_frames(ds)?;
    let mut out = BTreeMap::new();
    for (c, frames) in gt.iter().enumerate() {
        for (t, img) in frames.iter().enumerate() {
            out.insert((ds.camera_ids[c], t), op.apply(img)?);
        }
    }
    Ok(out)
}

/// Summary written next to an oracle refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub operator: String,
    pub mean_l2_before: f64,
    pub mean_l2_after: f64,
    pub skipped_steps: usize,
}

fn run_refine(
    model_dir: &Path,
    data: &Path,
    guidance: &str,
    operator: Option<&str>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let mut rcfg = cfg.refine.clone();
    rcfg.validate()?;
    let ds = load_dataset(data)?;
    let mut model = SceneModel::load(model_dir)?;
    let edit_path = model_dir.join(EDIT_FILE);
    let edit: Option<EditRecord> = if edit_path.is_file() {
        Some(crate::scene_io::read_json(&edit_path)?)
    } else {
        None
    };
    if rcfg.sds.instruction.is_empty() {
        if let Some(e) = &edit {
            rcfg.sds.instruction = e.instruction.clone();
        }
    }

    let mut oracle_op = None;
    let guide: Box<dyn GuidanceModel> = if guidance == "oracle" {
        let name = operator
            .map(str::to_string)
            .or_else(|| edit.as_ref().map(|e| e.operator.clone()))
            .ok_or_else(|| {
                Error::invalid(
                    "--operator",
                    "oracle guidance needs an operator and the model has no edit.json",
                )
            })?;
        let op = parse_operator(&name)?;
        let targets = oracle_targets(&ds, &op)?;
        oracle_op = Some((op, targets.clone()));
        Box::new(OracleGuidance {
            targets,
            schedule: rcfg.sds.schedule,
        })
    } else {
        let client = BridgeClient::new(guidance, Duration::from_secs(cfg.bridge_timeout_secs))?;
        Box::new(BridgeGuidance { client })
    };

    let before = match &oracle_op {
        Some((_, targets)) => Some(mean_l2_to_targets(&model, &ds, targets)?),
        None => None,
    };
    let mut log = create_log(&out.join("refine.csv"))?;
    let result = refine(&mut model, &ds, guide.as_ref(), &rcfg, Some(&mut log));
    log.flush().map_err(|e| Error::io(out.join("refine.csv"), e))?;
    model.save(out)?;
    copy_if_present(&model_dir.join(CAMERAS_FILE), &out.join(CAMERAS_FILE))?;
    copy_if_present(&edit_path, &out.join(EDIT_FILE))?;
    let steps = result?;
    if let (Some((op, targets)), Some(before)) = (&oracle_op, before) {
        let summary = RefineSummary {
            operator: op.to_string(),
            mean_l2_before: before,
            mean_l2_after: mean_l2_to_targets(&model, &ds, targets)?,
            skipped_steps: steps.iter().filter(|s| s.skipped.is_some()).count(),
        };
        crate::scene_io::write_json(&out.join("refine.json"), &summary)?;
    }
    Ok(())
}

fn model_cameras(model_dir: &Path) -> Result<Vec<(u32, Camera)>> {
    let path = model_dir.join(CAMERAS_FILE);
    if !path.is_file() {
        return Err(Error::invalid(
            "--model",
            format!("{} has no {CAMERAS_FILE}", model_dir.display()),
        ));
    }
    load_cameras(&path)
}

/// `frames` cameras on the circle through the mean camera height and
/// distance, all looking at the scene center.
pub fn orbit_cameras(cams: &[(u32, Camera)], center: [f64; 3], frames: usize) -> Result<Vec<Camera>> {
    let first = &cams
        .first()
        .ok_or_else(|| Error::invalid("cameras", "none to orbit"))?
        .1;
    let n = cams.len() as f64;
    let centers: Vec<[f64; 3]> = cams.iter().map(|(_, c)| c.center()).collect();
    let height = centers.iter().map(|c| c[1]).sum::<f64>() / n;
    let radius = centers
        .iter()
        .map(|c| (c[0] - center[0]).hypot(c[2] - center[2]))
        .sum::<f64>()
        / n;
    (0..frames)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / frames as f64;
            let eye = [center[0] + radius * a.sin(), height, center[2] - radius * a.cos()];
            Camera::look_at(
                eye,
                center,
                [0.0, 1.0, 0.0],
                (first.fx, first.fy),
                (first.width, first.height),
            )
        })
        .collect()
}

fn run_render(model_dir: &Path, camera: Option<u32>, t: Option<usize>, orbit: Option<usize>, out: &Path) -> Result<()> {
    let model = SceneModel::load(model_dir)?;
    let cams = model_cameras(model_dir)?;
    let steps = model.info.num_timesteps;
    match (camera, t, orbit) {
        (Some(id), Some(t), None) => {
            if t >= steps {
                return Err(Error::invalid(
                    "--t",
                    format!("timestep {t} out of range (model has {steps})"),
                ));
            }
            let cam = &cams.iter().find(|(c, _)| *c == id).ok_or(Error::UnknownCamera(id))?.1;
            let img = model.render(cam, crate::scene_io::normalized_time(t, steps))?;
            save_png(&img.rgb, &out.join(format!("cam_{id}_t{t:05}.png")))
        }
        (None, None, Some(n)) => {
            if n == 0 {
                return Err(Error::invalid("--orbit", "needs at least one frame"));
            }
            let b = model.bounds();
            let center = std::array::from_fn(|a| 0.5 * (b.min[a] + b.max[a]));
            for (i, cam) in orbit_cameras(&cams, center, n)?.iter().enumerate() {
                let time = crate::scene_io::normalized_time(i, n);
                save_png(&model.render(cam, time)?.rgb, &out.join(format!("frame_{i:04}.png")))?;
            }
            Ok(())
        }
        _ => Err(Error::invalid("render", "give --camera with --t, or --orbit")),
    }
}

fn load_frames(root: &Path, ds: &Dataset) -> Result<Vec<Vec<Image>>> {
    ds.camera_ids
        .iter()
        .map(|&id| {
            (0..ds.num_timesteps)
                .map(|t| load_png(&frame_path(root, id, t)))
                .collect()
        })
        .collect()
}

pub const EVAL_HEADER: &str = "camera,t,psnr,ssim";

fn run_eval(
    data: &Path,
    model: Option<&Path>,
    images: Option<&Path>,
    ref_images: Option<&Path>,
    ref_operator: Option<&str>,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let op = ref_operator.map(parse_operator).transpose()?;
    let mut reference = match ref_images {
        Some(dir) => load_frames(dir, &ds)?,
        None => ground_truth_frames(&ds)?,
    };
    if let Some(op) = &op {
        if matches!(op, EditOperator::Bridge { .. }) {
            return Err(Error::invalid("--ref-operator", "must be a built-in operator"));
        }
        for frames in &mut reference {
            for img in frames.iter_mut() {
                *img = op.apply(img)?;
            }
        }
    }
    let predicted = match (model, images) {
        (Some(dir), None) => {
            let m = SceneModel::load(dir)?;
            ds.cameras
                .iter()
                .map(|cam| {
                    (0..ds.num_timesteps)
                        .map(|t| Ok(m.render(cam, ds.time_of(t))?.rgb))
                        .collect()
                })
                .collect::<Result<Vec<Vec<Image>>>>()?
        }
        (None, Some(dir)) => load_frames(dir, &ds)?,
        _ => return Err(Error::invalid("eval", "give exactly one of --model or --images")),
    };
    let mut csv = format!("{EVAL_HEADER}\n");
    for (c, id) in ds.camera_ids.iter().enumerate() {
        for t in 0..ds.num_timesteps {
            let (p, r) = (&predicted[c][t], &reference[c][t]);
            csv.push_str(&format!("{id},{t},{:.6},{:.6}\n", psnr(p, r)?, ssim(p, r)?));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_text(out, &csv)
}

/// Runs one command with its resolved config. Output directories are
/// prepared by the caller.
fn execute(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Synth { out, .. } => run_synth(out, cfg),
        Command::Train { data, out, .. } => run_train(data, out, cfg),
        Command::Edit {
            model,
            data,
            operator,
            instruction,
            cameras,
            out,
            ..
        } => run_edit(model, data, operator, instruction, cameras.as_deref(), out, cfg),
        Command::Refine {
            model,
            data,
            guidance,
            operator,
            out,
            ..
        } => run_refine(model, data, guidance, operator.as_deref(), out, cfg),
        Command::Render {
            model,
            camera,
            t,
            orbit,
            out,
        } => run_render(model, *camera, *t, *orbit, out),
        Command::Eval {
            data,
            model,
            images,
            ref_images,
            ref_operator,
            out,
        } => run_eval(
            data,
            model.as_deref(),
            images.as_deref(),
            ref_images.as_deref(),
            ref_operator.as_deref(),
            out,
        ),
        Command::Config { .. } | Command::Rerun { .. } => unreachable!("handled by run"),
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

/// Runs a command and writes its record. `argv` is what gets recorded as
/// typed.
fn run_recorded(mut cmd: Command, cfg: RunConfig, argv: Vec<String>) -> Result<()> {
    cmd.absolutize()?;
    if let Some(missing) = cmd.inputs().into_iter().find(|p| !p.exists()) {
        return Err(Error::invalid("input", format!("{} does not exist", missing.display())));
    }
    let inputs = hash_inputs(&cmd.inputs())?;
    match &cmd {
        Command::Eval { .. } => {}
        _ => prepare_out_dir(cmd.out_mut().expect("artifact commands have --out"))?,
    }
    let start = Instant::now();
    let result = execute(&cmd, &cfg);
    let record = RunRecord {
        command: cmd.name().to_string(),
        argv,
        seed: stage_seed(&cmd, &cfg),
        config: cfg,
        inputs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        status: match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        },
        version: env!("CARGO_PKG_VERSION").to_string(),
        args: cmd.clone(),
    };
    if let Some(path) = cmd.record_path() {
        // A validation failure before any output leaves nothing to describe.
        if path.parent().is_some_and(Path::is_dir) {
            record.save(&path)?;
        }
    }
    result
}

fn rerun(record_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let rec = RunRecord::load(record_path)?;
    let mut cmd = rec.args.clone();
    if matches!(cmd, Command::Rerun { .. } | Command::Config { .. }) {
        return Err(Error::invalid("record", "does not describe an artifact command"));
    }
    for p in cmd.inputs() {
        let key = p.to_string_lossy().into_owned();
        let now = provenance::hash_path(p)?;
        if rec.inputs.get(&key) != Some(&now) {
            return Err(Error::invalid(
                "inputs",
                format!("{key} changed since the recorded run"),
            ));
        }
    }
    if let Some(o) = out {
        *cmd.out_mut().expect("artifact commands have --out") = o;
    }
    let argv = std::env::args().collect();
    run_recorded(cmd, rec.config, argv)
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Config { .. } => {
            let cfg = resolve_config(&cli.command)?;
            print!("{}", config::to_text(&cfg));
            Ok(())
        }
        Command::Rerun { record, out } => rerun(&record, out),
        cmd => {
            let cfg = resolve_config(&cmd)?;
            run_recorded(cmd, cfg, argv)
        }
    }
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}
