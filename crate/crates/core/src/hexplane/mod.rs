//! Spatio-temporal deformation field.
//!
//! Six feature planes over the axis pairs of `(x, y, z, t)` at two
//! resolutions. A query samples every plane bilinearly, multiplies the six
//! samples of a level elementwise and concatenates the levels. A small MLP
//! encodes the result and three heads decode position, log-scale and
//! quaternion offsets.

mod planes;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::diffeng::{Graph, Tensor, Var};
use crate::gaussians::{CloudVars, GaussianCloud};
use crate::{Error, Result};

/// Axis pairs of the six planes; axis 3 is time.
pub const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
pub const LEVELS: usize = 2;
pub const NUM_GRIDS: usize = PAIRS.len() * LEVELS;

const FIELD_MAGIC: &[u8; 4] = b"G4DF";
const FIELD_VERSION: u32 = 1;

/// Spread of the initial grid features around one.
const GRID_INIT_SPREAD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite() {
                return Err(Error::invalid(
                    "bbox",
                    format!("bbox_max must exceed bbox_min on every axis (axis {a})"),
                ));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HexplaneConfig {
    /// Feature channels per plane (`h`).
    pub channels: usize,
    /// Level-1 nodes along each spatial axis.
    pub spatial_resolution: usize,
    /// Level-1 nodes along time.
    pub time_resolution: usize,
    pub mlp_width: usize,
}

impl Default for HexplaneConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            spatial_resolution: 64,
            time_resolution: 32,
            mlp_width: 64,
        }
    }
}

impl HexplaneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("spatial_resolution", self.spatial_resolution),
            ("time_resolution", self.time_resolution),
            ("mlp_width", self.mlp_width),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Level-1 `(ru, rv)` of plane `k`.
    pub fn plane_resolution(&self, k: usize) -> (usize, usize) {
        let r = |axis: usize| {
            if axis == 3 {
                self.time_resolution
            } else {
                self.spatial_resolution
            }
        };
        let (a, b) = PAIRS[k];
        (r(a), r(b))
    }

    fn grid_shape(&self, level: usize, k: usize) -> [usize; 3] {
        let (ru, rv) = self.plane_resolution(k);
        let m = 1 << level;
        [ru * m, rv * m, self.channels]
    }

    /// Shapes of the MLP tensors in storage order: the encoder's two layers,
    /// then each head's two layers, each as weight `[in, out]` and bias
    /// `[1, out]`.
    fn mlp_shapes(&self) -> Vec<[usize; 2]> {
        let (h2, w) = (LEVELS * self.channels, self.mlp_width);
        let mut shapes = vec![[h2, w], [1, w], [w, w], [1, w]];
        for out in HEAD_OUTPUTS {
            shapes.extend([[w, w], [1, w], [w, out], [1, out]]);
        }
        shapes
    }
}

/// Output widths of the position, scale and rotation heads.
pub const HEAD_OUTPUTS: [usize; 3] = [3, 3, 4];

/// Feature planes plus encoder and decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HexplaneField {
    pub config: HexplaneConfig,
    pub bounds: SceneBounds,
    /// `[ru, rv, h]` each; level-major, [`PAIRS`] order within a level.
    pub grids: Vec<Tensor>,
    /// See [`HexplaneConfig`] for the order.
    pub mlp: Vec<Tensor>,
}

/// Per-Gaussian offsets produced by the field.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationDelta {
    /// `N × 3`
    pub dp: Tensor,
    /// `N × 3`, in log-scale space.
    pub ds: Tensor,
    /// `N × 4`, added to raw quaternions.
    pub dr: Tensor,
}

impl HexplaneField {
    /// Grids start near one so the six-way product sits at the
    /// multiplicative identity; hidden layers use a uniform fan-in init and
    /// head output layers are zero.
    pub fn new(config: HexplaneConfig, bounds: SceneBounds, seed: u64) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grids = Vec::with_capacity(NUM_GRIDS);
        for level in 0..LEVELS {
            for k in 0..PAIRS.len() {
                let shape = config.grid_shape(level, k);
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| 1.0 + rng.random_range(-GRID_INIT_SPREAD..=GRID_INIT_SPREAD))
                    .collect();
                grids.push(Tensor::new(shape, data)?);
            }
        }
        let shapes = config.mlp_shapes();
        let mut mlp = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let is_bias = shape[0] == 1;
            let is_head_output = i >= 4 && (i - 4) % 4 >= 2;
            let data = if is_bias || is_head_output {
                vec![0.0; shape[0] * shape[1]]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..shape[0] * shape[1])
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect()
            };
            mlp.push(Tensor::new(shape.to_vec(), data)?);
        }
        Ok(Self {
            config,
            bounds,
            grids,
            mlp,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.bounds.validate()?;
        if self.grids.len() != NUM_GRIDS {
            return Err(Error::DimensionMismatch {
                what: "grid count",
                left: vec![self.grids.len()],
                right: vec![NUM_GRIDS],
            });
        }
        for level in 0..LEVELS {
            for k in 0..PAIRS.len() {
                let g = &self.grids[level * PAIRS.len() + k];
                let expect = self.config.grid_shape(level, k);
                if g.shape() != expect {
                    return Err(Error::DimensionMismatch {
                        what: "grid",
                        left: g.shape().to_vec(),
                        right: expect.to_vec(),
                    });
                }
            }
        }
        let shapes = self.config.mlp_shapes();
        if self.mlp.len() != shapes.len() || self.mlp.iter().zip(&shapes).any(|(t, s)| t.shape() != s) {
            return Err(Error::DimensionMismatch {
                what: "mlp",
                left: self.mlp.iter().map(|t| t.len()).collect(),
                right: shapes.iter().map(|s| s[0] * s[1]).collect(),
            });
        }
        Ok(())
    }

    /// Registers grids and MLP tensors on `graph`.
    pub fn to_vars(&self, graph: &mut Graph, trainable: bool) -> FieldVars {
        FieldVars {
            grids: self.grids.iter().map(|g| graph.leaf(g.clone(), trainable)).collect(),
            mlp: self.mlp.iter().map(|t| graph.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(FIELD_MAGIC)?;
        binio::write_u32(w, FIELD_VERSION)?;
        binio::write_u32(w, c.channels as u32)?;
        for k in 0..PAIRS.len() {
            let (ru, rv) = c.plane_resolution(k);
            binio::write_u32(w, ru as u32)?;
            binio::write_u32(w, rv as u32)?;
        }
        binio::write_u32(w, c.mlp_width as u32)?;
        binio::write_f64s(w, &self.bounds.min)?;
        binio::write_f64s(w, &self.bounds.max)?;
        for t in self.grids.iter().chain(&self.mlp) {
            binio::write_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::invalid("field checkpoint", reason);
        let io = |e: std::io::Error| bad(&e.to_string());
        if &binio::read_magic(r).map_err(io)? != FIELD_MAGIC {
            return Err(bad("bad magic"));
        }
        if binio::read_u32(r).map_err(io)? != FIELD_VERSION {
            return Err(bad("unsupported version"));
        }
        let channels = binio::read_u32(r).map_err(io)? as usize;
        let mut res = [(0usize, 0usize); 6];
        for slot in &mut res {
            *slot = (
                binio::read_u32(r).map_err(io)? as usize,
                binio::read_u32(r).map_err(io)? as usize,
            );
        }
        let mlp_width = binio::read_u32(r).map_err(io)? as usize;
        let config = HexplaneConfig {
            channels,
            spatial_resolution: res[0].0,
            time_resolution: res[3].1,
            mlp_width,
        };
        config.validate()?;
        if (0..PAIRS.len()).any(|k| config.plane_resolution(k) != res[k]) {
            return Err(bad("plane resolutions are inconsistent"));
        }
        let min = binio::read_f64s(r, 3).map_err(io)?;
        let max = binio::read_f64s(r, 3).map_err(io)?;
        let bounds = SceneBounds::new([min[0], min[1], min[2]], [max[0], max[1], max[2]])?;
        let mut grids = Vec::with_capacity(NUM_GRIDS);
        for level in 0..LEVELS {
            for k in 0..PAIRS.len() {
                let shape = config.grid_shape(level, k);
                let data = binio::read_f64s(r, shape.iter().product()).map_err(io)?;
                grids.push(Tensor::new(shape, data)?);
            }
        }
        let mut mlp = Vec::new();
        for shape in config.mlp_shapes() {
            mlp.push(Tensor::new(
                shape.to_vec(),
                binio::read_f64s(r, shape[0] * shape[1]).map_err(io)?,
            )?);
        }
        binio::expect_eof(r).map_err(io)?;
        Ok(Self {
            config,
            bounds,
            grids,
            mlp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Invalid { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

/// Graph handles for a field's parameters.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub grids: Vec<Var>,
    pub mlp: Vec<Var>,
}

impl FieldVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.grids.iter().chain(&self.mlp).copied()
    }
}

/// Graph handles for a [`DeformationDelta`].
#[derive(Clone, Copy, Debug)]
pub struct DeltaVars {
    pub dp: Var,
    pub ds: Var,
    pub dr: Var,
}

/// Maps a world position and time into the unit hypercube, clamping.
pub fn normalize_coords(p: [f64; 3], t: f64, bounds: &SceneBounds) -> [f64; 4] {
    planes::normalize(p, t, bounds).0
}

/// Bilinear sample of a `[ru, rv, h]` grid at `(u, v) ∈ [0, 1]²`.
pub fn plane_interp(grid: &Tensor, u: f64, v: f64) -> Vec<f64> {
    let (ru, rv, h) = planes::grid_dims(grid);
    let mut out = vec![0.0; h];
    planes::Stencil::new(u, v, ru, rv).sample(grid.data(), rv, h, &mut out);
    out
}

/// The `2h` fused feature at one point.
pub fn query(field: &HexplaneField, p: [f64; 3], t: f64) -> Vec<f64> {
    let grids: Vec<&Tensor> = field.grids.iter().collect();
    let positions = Tensor::new([1, 3], p.to_vec()).expect("1×3");
    planes::Query::forward(&grids, &positions, t, &field.bounds)
        .1
        .into_vec()
}

/// Fused plane features for `N × 3` positions, `N × 2h`.
pub fn query_vars(graph: &mut Graph, field: &FieldVars, bounds: &SceneBounds, positions: Var, t: f64) -> Var {
    let grids: Vec<&Tensor> = field.grids.iter().map(|&g| graph.value(g)).collect();
    let (op, out) = planes::Query::forward(&grids, graph.value(positions), t, bounds);
    let mut inputs = field.grids.clone();
    inputs.push(positions);
    graph.custom(op, &inputs, out)
}

fn linear(graph: &mut Graph, x: Var, w: Var, b: Var, ones: Var) -> Result<Var> {
    let xw = graph.matmul(x, w)?;
    let bias = graph.matmul(ones, b)?;
    Ok(graph.add(xw, bias)?)
}

/// Offsets for every row of `positions` at time `t`.
pub fn deformation_vars(
    graph: &mut Graph,
    field: &FieldVars,
    bounds: &SceneBounds,
    positions: Var,
    t: f64,
) -> Result<DeltaVars> {
    let n = graph.value(positions).shape()[0];
    let ones = graph.constant(Tensor::ones([n, 1]));
    let m = &field.mlp;
    let fh = query_vars(graph, field, bounds, positions, t);
    let h1 = linear(graph, fh, m[0], m[1], ones)?;
    let h1 = graph.relu(h1);
    let fd = linear(graph, h1, m[2], m[3], ones)?;
    let fd = graph.relu(fd);
    let mut outs = [fd; 3];
    for (head, out) in outs.iter_mut().enumerate() {
        let base = 4 + head * 4;
        let hidden = linear(graph, fd, m[base], m[base + 1], ones)?;
        let hidden = graph.relu(hidden);
        *out = linear(graph, hidden, m[base + 2], m[base + 3], ones)?;
    }
    Ok(DeltaVars {
        dp: outs[0],
        ds: outs[1],
        dr: outs[2],
    })
}

/// Adds the field's offsets at time `t` to position, log-scale and raw
/// rotation. Opacity and SH handles pass through untouched.
pub fn deform_vars(
    graph: &mut Graph,
    cloud: &CloudVars,
    field: &FieldVars,
    bounds: &SceneBounds,
    t: f64,
) -> Result<CloudVars> {
    let delta = deformation_vars(graph, field, bounds, cloud.positions, t)?;
    Ok(CloudVars {
        positions: graph.add(cloud.positions, delta.dp)?,
        log_scales: graph.add(cloud.log_scales, delta.ds)?,
        rotations: graph.add(cloud.rotations, delta.dr)?,
        ..*cloud
    })
}

pub fn deformation(field: &HexplaneField, positions: &Tensor, t: f64) -> Result<DeformationDelta> {
    let mut graph = Graph::new();
    let vars = field.to_vars(&mut graph, false);
    let p = graph.constant(positions.clone());
    let d = deformation_vars(&mut graph, &vars, &field.bounds, p, t)?;
    Ok(DeformationDelta {
        dp: graph.value(d.dp).clone(),
        ds: graph.value(d.ds).clone(),
        dr: graph.value(d.dr).clone(),
    })
}

pub fn deform_cloud(cloud: &GaussianCloud, delta: &DeformationDelta) -> Result<GaussianCloud> {
    let add = |a: &Tensor, b: &Tensor, what: &'static str| -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch {
                what,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .map_err(Into::into)
    };
    Ok(GaussianCloud {
        positions: add(&cloud.positions, &delta.dp, "dp")?,
        log_scales: add(&cloud.log_scales, &delta.ds, "ds")?,
        rotations: add(&cloud.rotations, &delta.dr, "dr")?,
        opacity_logits: cloud.opacity_logits.clone(),
        sh_coeffs: cloud.sh_coeffs.clone(),
        sh_degree: cloud.sh_degree,
    })
}

/// The cloud as seen at time `t`.
pub fn cloud_at(cloud: &GaussianCloud, field: &HexplaneField, t: f64) -> Result<GaussianCloud> {
    deform_cloud(cloud, &deformation(field, &cloud.positions, t)?)
}

pub fn tv_loss(field: &HexplaneField) -> f64 {
    field.grids.iter().map(|g| planes::grid_tv(g, None)).sum::<f64>() / field.grids.len() as f64
}

/// [`tv_loss`] over the given grid vars.
pub fn tv_loss_vars(graph: &mut Graph, grids: &[Var]) -> Var {
    let value = grids
        .iter()
        .map(|&g| planes::grid_tv(graph.value(g), None))
        .sum::<f64>()
        / grids.len() as f64;
    graph.custom(planes::TotalVariation, grids, Tensor::scalar(value))
}

/// TV of a single grid under the same normalization.
pub fn grid_tv(grid: &Tensor) -> f64 {
    planes::grid_tv(grid, None)
}

#[cfg(test)]
mod tests;
