//! Gaussian primitives: storage in unconstrained form, activation to
//! physical parameters, quaternion algebra and SH color.
//!
//! Raw parameters are what the optimizer sees: log-scales, opacity logits and
//! unnormalized quaternions. [`activate`] maps them to positive scales,
//! opacities in (0, 1) and unit quaternions; [`activate_vars`] does the same
//! on a [`Graph`] so gradients flow back to the raw form.

mod camera;
mod rotation;
pub mod sh;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub use camera::Camera;
pub use rotation::{covariance3d, quat_to_rotmat, Mat3};
pub use sh::{coeff_count, sh_to_rgb};

pub(crate) use rotation::{mat_mul, rotmat_unchecked, rotmat_vjp, transpose};

use crate::binio;
use crate::diffeng::{sigmoid, BackwardContext, Function, Graph, Tensor, Var};
use crate::{Error, Result};

const CLOUD_MAGIC: &[u8; 4] = b"G4DC";
const CLOUD_VERSION: u32 = 1;
const MIN_QUAT_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    /// `N × 3`
    pub positions: Tensor,
    /// `N × 3`
    pub log_scales: Tensor,
    /// `N × 4`, `(w, x, y, z)`, not necessarily unit length.
    pub rotations: Tensor,
    /// `N × 1`
    pub opacity_logits: Tensor,
    /// `N × k × 3`
    pub sh_coeffs: Tensor,
    pub sh_degree: u32,
}

/// Physical parameters after activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Activated {
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub rotations: Vec<[f64; 4]>,
}

impl GaussianCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        log_scales: Vec<[f64; 3]>,
        rotations: Vec<[f64; 4]>,
        opacity_logits: Vec<f64>,
        sh_coeffs: Vec<f64>,
        sh_degree: u32,
    ) -> Result<Self> {
        let n = positions.len();
        let k = coeff_count(sh_degree);
        let cloud = Self {
            positions: Tensor::new([n, 3], positions.concat())?,
            log_scales: Tensor::new([log_scales.len(), 3], log_scales.concat())?,
            rotations: Tensor::new([rotations.len(), 4], rotations.concat())?,
            opacity_logits: Tensor::new([opacity_logits.len(), 1], opacity_logits)?,
            sh_coeffs: Tensor::new([sh_coeffs.len() / (3 * k).max(1), k, 3], sh_coeffs)
                .map_err(|_| Error::invalid("sh_coeffs", format!("length must be a multiple of {}", 3 * k)))?,
            sh_degree,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn empty(sh_degree: u32) -> Self {
        let k = coeff_count(sh_degree);
        Self {
            positions: Tensor::zeros([0, 3]),
            log_scales: Tensor::zeros([0, 3]),
            rotations: Tensor::zeros([0, 4]),
            opacity_logits: Tensor::zeros([0, 1]),
            sh_coeffs: Tensor::zeros([0, k, 3]),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coeffs_per_channel(&self) -> usize {
        coeff_count(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::OutOfRange {
                what: "sh_degree",
                value: self.sh_degree as f64,
                min: 0.0,
                max: sh::MAX_SH_DEGREE as f64,
            });
        }
        let n = self.len();
        let k = self.coeffs_per_channel();
        let expect: [(&'static str, &Tensor, Vec<usize>); 5] = [
            ("positions", &self.positions, vec![n, 3]),
            ("log_scales", &self.log_scales, vec![n, 3]),
            ("rotations", &self.rotations, vec![n, 4]),
            ("opacity_logits", &self.opacity_logits, vec![n, 1]),
            ("sh_coeffs", &self.sh_coeffs, vec![n, k, 3]),
        ];
        for (what, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::DimensionMismatch {
                    what,
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
        }
        Ok(())
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let d = &self.positions.data()[i * 3..i * 3 + 3];
        [d[0], d[1], d[2]]
    }

    pub fn activate(&self) -> Result<Activated> {
        let n = self.len();
        let ls = self.log_scales.data();
        let q = self.rotations.data();
        let mut rotations = Vec::with_capacity(n);
        for i in 0..n {
            let raw = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
            rotations.push(normalize_quat(raw).ok_or(Error::DegenerateQuaternion {
                index: i,
                norm: quat_norm(raw),
            })?);
        }
        Ok(Activated {
            scales: (0..n)
                .map(|i| [ls[i * 3].exp(), ls[i * 3 + 1].exp(), ls[i * 3 + 2].exp()])
                .collect(),
            opacities: self.opacity_logits.data().iter().map(|&v| sigmoid(v)).collect(),
            rotations,
        })
    }

    /// Registers every parameter tensor as a graph leaf.
    pub fn to_vars(&self, graph: &mut Graph, trainable: bool) -> CloudVars {
        CloudVars {
            positions: graph.leaf(self.positions.clone(), trainable),
            log_scales: graph.leaf(self.log_scales.clone(), trainable),
            rotations: graph.leaf(self.rotations.clone(), trainable),
            opacity_logits: graph.leaf(self.opacity_logits.clone(), trainable),
            sh_coeffs: graph.leaf(self.sh_coeffs.clone(), trainable),
            sh_degree: self.sh_degree,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CLOUD_MAGIC)?;
        binio::write_u32(w, CLOUD_VERSION)?;
        binio::write_u32(w, self.len() as u32)?;
        binio::write_u32(w, self.sh_degree)?;
        for t in [
            &self.positions,
            &self.log_scales,
            &self.rotations,
            &self.opacity_logits,
            &self.sh_coeffs,
        ] {
            binio::write_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let magic = binio::read_magic(r)?;
        if &magic != CLOUD_MAGIC {
            return Err(IoError::new(ErrorKind::InvalidData, "bad magic, expected G4DC"));
        }
        let version = binio::read_u32(r)?;
        if version != CLOUD_VERSION {
            return Err(IoError::new(
                ErrorKind::InvalidData,
                format!("unsupported version {version}"),
            ));
        }
        let n = binio::read_u32(r)? as usize;
        let sh_degree = binio::read_u32(r)?;
        if sh_degree > sh::MAX_SH_DEGREE {
            return Err(IoError::new(
                ErrorKind::InvalidData,
                format!("sh_degree {sh_degree} unsupported"),
            ));
        }
        let k = coeff_count(sh_degree);
        let mut tensor = |shape: Vec<usize>| -> std::io::Result<Tensor> {
            let len = shape.iter().product();
            let data = binio::read_f64s(r, len)?;
            Tensor::new(shape, data).map_err(|e| IoError::new(ErrorKind::InvalidData, e.to_string()))
        };
        let cloud = Self {
            positions: tensor(vec![n, 3])?,
            log_scales: tensor(vec![n, 3])?,
            rotations: tensor(vec![n, 4])?,
            opacity_logits: tensor(vec![n, 1])?,
            sh_coeffs: tensor(vec![n, k, 3])?,
            sh_degree,
        };
        binio::expect_eof(r)?;
        Ok(cloud)
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
        Self::read_from(&mut BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Graph handles for the five raw parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct CloudVars {
    pub positions: Var,
    pub log_scales: Var,
    pub rotations: Var,
    pub opacity_logits: Var,
    pub sh_coeffs: Var,
    pub sh_degree: u32,
}

impl CloudVars {
    pub fn len(&self, graph: &Graph) -> usize {
        graph.value(self.positions).shape()[0]
    }

    pub fn as_array(&self) -> [Var; 5] {
        [
            self.positions,
            self.log_scales,
            self.rotations,
            self.opacity_logits,
            self.sh_coeffs,
        ]
    }
}

/// Graph handles for activated parameters.
#[derive(Clone, Copy, Debug)]
pub struct ActivatedVars {
    pub positions: Var,
    /// `N × 3`, positive.
    pub scales: Var,
    /// `N × 4`, unit rows.
    pub rotations: Var,
    /// `N × 1`, in (0, 1).
    pub opacities: Var,
    pub sh_coeffs: Var,
    pub sh_degree: u32,
}

pub fn activate_vars(graph: &mut Graph, cloud: &CloudVars) -> Result<ActivatedVars> {
    let scales = graph.exp(cloud.log_scales);
    let opacities = graph.sigmoid(cloud.opacity_logits);
    let rotations = normalize_rows(graph, cloud.rotations)?;
    Ok(ActivatedVars {
        positions: cloud.positions,
        scales,
        rotations,
        opacities,
        sh_coeffs: cloud.sh_coeffs,
        sh_degree: cloud.sh_degree,
    })
}

/// Row-wise `q / ‖q‖` for an `N × 4` tensor.
pub fn normalize_rows(graph: &mut Graph, rows: Var) -> Result<Var> {
    let value = graph.value(rows);
    let width = *value.shape().last().unwrap_or(&1);
    let mut out = value.data().to_vec();
    for (i, row) in out.chunks_exact_mut(width).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_QUAT_NORM) {
            return Err(Error::DegenerateQuaternion { index: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let out = Tensor::new(value.shape().to_vec(), out)?;
    Ok(graph.custom(NormalizeRows { width }, &[rows], out))
}

struct NormalizeRows {
    width: usize,
}

impl Function for NormalizeRows {
    fn name(&self) -> &str {
        "normalize_rows"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let y = ctx.output.data();
        let g = ctx.grad_output.data();
        let mut d = vec![0.0; x.len()];
        for (r, row) in x.data().chunks_exact(self.width).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let span = r * self.width..(r + 1) * self.width;
            let yg: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
            for j in span {
                d[j] = (g[j] - y[j] * yg) / norm;
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d).expect("input shape"))]
    }
}

fn quat_norm(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize_quat(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = quat_norm(q);
    (n >= MIN_QUAT_NORM).then(|| q.map(|v| v / n))
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeng::{finite_diff, max_relative_error};
    use proptest::prelude::*;

    fn one(log_scale: f64, logit: f64, q: [f64; 4]) -> GaussianCloud {
        GaussianCloud::new(
            vec![[0.0, 0.0, 1.0]],
            vec![[log_scale; 3]],
            vec![q],
            vec![logit],
            vec![0.0; 3],
            0,
        )
        .unwrap()
    }

    #[test]
    fn activation_examples() {
        let a = one(0.0, 0.0, [2.0, 0.0, 0.0, 0.0]).activate().unwrap();
        assert_eq!(a.scales[0], [1.0; 3]);
        assert_eq!(a.opacities[0], 0.5);
        assert_eq!(a.rotations[0], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_quaternion_rejected() {
        let err = one(0.0, 0.0, [0.0; 4]).activate().unwrap_err();
        assert!(matches!(err, Error::DegenerateQuaternion { index: 0, .. }));
        let mut g = Graph::new();
        let vars = one(0.0, 0.0, [1e-13, 0.0, 0.0, 0.0]).to_vars(&mut g, true);
        assert!(activate_vars(&mut g, &vars).is_err());
    }

    #[test]
    fn mismatched_leading_extent_rejected() {
        let err = GaussianCloud::new(
            vec![[0.0; 3]; 2],
            vec![[0.0; 3]],
            vec![[1.0, 0.0, 0.0, 0.0]; 2],
            vec![0.0; 2],
            vec![0.0; 6],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "log_scales", .. }));
    }

    #[test]
    fn normalize_rows_backward_matches_finite_differences() {
        let q0 = Tensor::new([2, 4], vec![0.3, -1.2, 0.5, 2.0, 1.0, 0.1, -0.4, 0.2]).unwrap();
        let w = [0.7, -0.3, 1.1, 0.5, -0.9, 0.4, 0.2, 1.3];
        let mut g = Graph::new();
        let q = g.param(q0.clone());
        let y = normalize_rows(&mut g, q).unwrap();
        let wv = g.constant(Tensor::new([2, 4], w.to_vec()).unwrap());
        let p = g.mul(y, wv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let numeric = finite_diff(
            |t| {
                t.data()
                    .chunks(4)
                    .zip(w.chunks(4))
                    .map(|(r, w)| {
                        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        r.iter().zip(w).map(|(a, b)| a / n * b).sum::<f64>()
                    })
                    .sum()
            },
            &q0,
            1e-6,
        );
        assert!(max_relative_error(g.grad(q).unwrap().data(), numeric.data()) < 1e-6);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_bad_magic() {
        let cloud = one(0.1, -0.3, [1.0, 0.0, 0.0, 0.0]);
        let bytes = cloud.to_bytes();
        assert_eq!(&bytes[..4], b"G4DC");
        assert_eq!(bytes.len(), 16 + 8 * (3 + 3 + 4 + 1 + 3));
        assert!(GaussianCloud::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(GaussianCloud::read_from(&mut bad.as_slice()).is_err());
        assert_eq!(GaussianCloud::read_from(&mut bytes.as_slice()).unwrap(), cloud);
    }

    proptest! {
        #[test]
        fn activation_round_trips(
            ls in -5.0f64..2.0,
            lg in -8.0f64..8.0,
            q in prop::array::uniform4(-3.0f64..3.0),
        ) {
            prop_assume!(quat_norm(q) > 1e-3);
            let a = one(ls, lg, q).activate().unwrap();
            prop_assert!(a.scales[0][0] > 0.0);
            prop_assert!(a.opacities[0] > 0.0 && a.opacities[0] < 1.0);
            prop_assert!((quat_norm(a.rotations[0]) - 1.0).abs() < 1e-12);
            prop_assert!((a.scales[0][0].ln() - ls).abs() < 1e-10);
            prop_assert!((logit(a.opacities[0]) - lg).abs() < 1e-10);
            let renorm = normalize_quat(a.rotations[0]).unwrap();
            for (x, y) in renorm.iter().zip(a.rotations[0]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn checkpoint_round_trip(n in 0usize..5, deg in 0u32..3, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = coeff_count(deg);
            let mut v = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let cloud = GaussianCloud {
                positions: Tensor::new([n, 3], v(n * 3)).unwrap(),
                log_scales: Tensor::new([n, 3], v(n * 3)).unwrap(),
                rotations: Tensor::new([n, 4], v(n * 4)).unwrap(),
                opacity_logits: Tensor::new([n, 1], v(n)).unwrap(),
                sh_coeffs: Tensor::new([n, k, 3], v(n * k * 3)).unwrap(),
                sh_degree: deg,
            };
            let bytes = cloud.to_bytes();
            let back = GaussianCloud::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
