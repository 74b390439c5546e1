use rayon::prelude::*;

use super::{check_positive_definite, RenderSettings, RenderedImage};
use crate::diffeng::{BackwardContext, Function, Tensor};
use crate::gaussians::{
    coeff_count, covariance3d, mat_mul, rotmat_unchecked, rotmat_vjp, sh, transpose, ActivatedVars, Camera,
    GaussianCloud, Mat3,
};
use crate::image::Image;
use crate::{Error, Result};

/// Rows composited by one parallel task. Fixed so that the gradient merge
/// order does not depend on the thread count.
const ROWS_PER_CHUNK: usize = 4;

#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub cam_point: [f64; 3],
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// `J · W`, the 2×3 linearized projection.
    pub jw: [[f64; 3]; 2],
}

pub(crate) fn project_geometry(p: [f64; 3], cov3d: &Mat3, cam: &Camera, settings: &RenderSettings) -> Option<Geometry> {
    let t = cam.world_to_camera(p);
    let [x, y, z] = t;
    if !(z > settings.near) {
        return None;
    }
    let w = cam.rotation();
    let j = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    let mut cov2d = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    s += jw[a][k] * cov3d[k][l] * jw[b][l];
                }
            }
            cov2d[a][b] = s;
        }
    }
    // Exact symmetry regardless of summation order.
    let off = 0.5 * (cov2d[0][1] + cov2d[1][0]);
    cov2d[0][1] = off;
    cov2d[1][0] = off;
    cov2d[0][0] += settings.dilation;
    cov2d[1][1] += settings.dilation;
    Some(Geometry {
        cam_point: t,
        mean2d: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
        cov2d,
        jw,
    })
}

pub(crate) fn invert_cov2d(cov: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = check_positive_definite(cov)?;
    Ok([[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]])
}

#[derive(Clone, Debug)]
pub(crate) struct PixelSplat {
    pub mean2d: [f64; 2],
    pub conic: [[f64; 2]; 2],
    pub opacity: f64,
    /// Clamped to [0, 1].
    pub color: [f64; 3],
    pub depth: f64,
}

pub(crate) struct PixelResult {
    pub rgb: [f64; 3],
    pub transmittance: f64,
    pub depth: f64,
}

#[derive(Clone, Copy)]
struct AlphaEval {
    alpha: f64,
    clamped: bool,
    gauss: f64,
    d: [f64; 2],
}

#[inline]
fn mahalanobis(s: &PixelSplat, pixel: [f64; 2]) -> ([f64; 2], f64) {
    let d = [pixel[0] - s.mean2d[0], pixel[1] - s.mean2d[1]];
    let q = &s.conic;
    let m = q[0][0] * d[0] * d[0] + (q[0][1] + q[1][0]) * d[0] * d[1] + q[1][1] * d[1] * d[1];
    (d, m)
}

#[inline]
fn eval_alpha(s: &PixelSplat, pixel: [f64; 2], settings: &RenderSettings) -> Option<AlphaEval> {
    let (d, m) = mahalanobis(s, pixel);
    if m > settings.truncation_sigma * settings.truncation_sigma {
        return None;
    }
    let gauss = (-0.5 * m).exp();
    let raw = s.opacity * gauss;
    let (alpha, clamped) = if raw > settings.alpha_max {
        (settings.alpha_max, true)
    } else {
        (raw, false)
    };
    if alpha < settings.alpha_min {
        return None;
    }
    Some(AlphaEval {
        alpha,
        clamped,
        gauss,
        d,
    })
}

pub(crate) fn composite<'a>(
    splats: impl Iterator<Item = &'a PixelSplat>,
    pixel: [f64; 2],
    settings: &RenderSettings,
) -> PixelResult {
    let mut rgb = [0.0; 3];
    let mut trans = 1.0;
    let mut depth = 0.0;
    for s in splats {
        let Some(a) = eval_alpha(s, pixel, settings) else {
            continue;
        };
        let w = a.alpha * trans;
        for c in 0..3 {
            rgb[c] += s.color[c] * w;
        }
        depth += s.depth * w;
        trans *= 1.0 - a.alpha;
    }
    for c in 0..3 {
        rgb[c] += trans * settings.background[c];
    }
    let covered = 1.0 - trans;
    PixelResult {
        rgb,
        transmittance: trans,
        depth: if covered > 1e-12 { depth / covered } else { 0.0 },
    }
}

struct Visible {
    index: usize,
    geo: Geometry,
    pixel: PixelSplat,
    quat: [f64; 4],
    rot: Mat3,
    scale: [f64; 3],
    cov3d: Mat3,
    color_raw: [f64; 3],
    view_dir: [f64; 3],
    view_dist: f64,
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [[f64; 2]; 2],
    color: [f64; 3],
    opacity: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
            for j in 0..2 {
                self.conic[i][j] += o.conic[i][j];
            }
        }
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.opacity += o.opacity;
    }
}

/// The rasterizer as a graph operation over activated parameters.
pub(crate) struct Rasterize {
    cam: Camera,
    settings: RenderSettings,
    sh_degree: u32,
    n: usize,
    visible: Vec<Visible>,
    /// Per pixel, positions in `visible` in depth order.
    pixel_lists: Vec<Vec<u32>>,
}

fn check_shape(what: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::DimensionMismatch {
            what,
            left: t.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    Ok(())
}

fn pixel_center(row: usize, col: usize) -> [f64; 2] {
    [col as f64 + 0.5, row as f64 + 0.5]
}

impl Rasterize {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        positions: &Tensor,
        scales: &Tensor,
        rotations: &Tensor,
        opacities: &Tensor,
        sh_coeffs: &Tensor,
        sh_degree: u32,
        cam: &Camera,
        settings: &RenderSettings,
    ) -> Result<(Self, RenderedImage)> {
        let n = positions.shape().first().copied().unwrap_or(0);
        let k = coeff_count(sh_degree);
        check_shape("positions", positions, &[n, 3])?;
        check_shape("scales", scales, &[n, 3])?;
        check_shape("rotations", rotations, &[n, 4])?;
        check_shape("opacities", opacities, &[n, 1])?;
        check_shape("sh_coeffs", sh_coeffs, &[n, k, 3])?;

        let center = cam.center();
        let (pd, sd, qd, od, cd) = (
            positions.data(),
            scales.data(),
            rotations.data(),
            opacities.data(),
            sh_coeffs.data(),
        );
        let mut visible = Vec::new();
        for i in 0..n {
            let p = [pd[i * 3], pd[i * 3 + 1], pd[i * 3 + 2]];
            let scale = [sd[i * 3], sd[i * 3 + 1], sd[i * 3 + 2]];
            let quat = [qd[i * 4], qd[i * 4 + 1], qd[i * 4 + 2], qd[i * 4 + 3]];
            let rot = rotmat_unchecked(quat);
            let cov3d = covariance3d(scale, &rot);
            let Some(geo) = project_geometry(p, &cov3d, cam, settings) else {
                continue;
            };
            let conic = invert_cov2d(&geo.cov2d)?;
            let v = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let view_dist = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let view_dir = v.map(|c| c / view_dist);
            let color_raw = sh::eval(&cd[i * k * 3..(i + 1) * k * 3], view_dir, sh_degree);
            visible.push(Visible {
                index: i,
                pixel: PixelSplat {
                    mean2d: geo.mean2d,
                    conic,
                    opacity: od[i],
                    color: color_raw.map(|c| c.clamp(0.0, 1.0)),
                    depth: geo.cam_point[2],
                },
                geo,
                quat,
                rot,
                scale,
                cov3d,
                color_raw,
                view_dir,
                view_dist,
            });
        }
        visible.sort_by(|a, b| {
            a.geo.cam_point[2]
                .total_cmp(&b.geo.cam_point[2])
                .then(a.index.cmp(&b.index))
        });

        let (width, height) = (cam.width as usize, cam.height as usize);
        let mut pixel_lists: Vec<Vec<u32>> = vec![Vec::new(); width * height];
        let trunc = settings.truncation_sigma;
        for (pos, v) in visible.iter().enumerate() {
            let [mx, my] = v.pixel.mean2d;
            let rx = trunc * v.geo.cov2d[0][0].sqrt();
            let ry = trunc * v.geo.cov2d[1][1].sqrt();
            let Some(cols) = pixel_span(mx - rx, mx + rx, width) else {
                continue;
            };
            let Some(rows) = pixel_span(my - ry, my + ry, height) else {
                continue;
            };
            for r in rows.0..=rows.1 {
                for c in cols.0..=cols.1 {
                    pixel_lists[r * width + c].push(pos as u32);
                }
            }
        }

        let op = Self {
            cam: cam.clone(),
            settings: settings.clone(),
            sh_degree,
            n,
            visible,
            pixel_lists,
        };

        let mut rgb = vec![0.0; width * height * 3];
        let mut alpha = vec![0.0; width * height];
        let mut depth = vec![0.0; width * height];
        rgb.par_chunks_mut(width * 3)
            .zip(alpha.par_chunks_mut(width))
            .zip(depth.par_chunks_mut(width))
            .enumerate()
            .for_each(|(row, ((rgb_row, a_row), d_row))| {
                for col in 0..width {
                    let list = &op.pixel_lists[row * width + col];
                    let res = composite(
                        list.iter().map(|&p| &op.visible[p as usize].pixel),
                        pixel_center(row, col),
                        &op.settings,
                    );
                    rgb_row[col * 3..col * 3 + 3].copy_from_slice(&res.rgb);
                    a_row[col] = 1.0 - res.transmittance;
                    d_row[col] = res.depth;
                }
            });
        let image = RenderedImage {
            rgb: Image::new(cam.width, cam.height, rgb)?,
            alpha,
            depth,
        };
        Ok((op, image))
    }

    /// Gradients wrt the 2D splat parameters for a band of rows.
    fn backward_rows(&self, rows: std::ops::Range<usize>, grad: &[f64]) -> Vec<SplatGrad> {
        let width = self.cam.width as usize;
        let bg = self.settings.background;
        let mut acc = vec![SplatGrad::default(); self.visible.len()];
        let mut contribs: Vec<(u32, AlphaEval, f64)> = Vec::new();
        for row in rows {
            for col in 0..width {
                let pix = row * width + col;
                let g = [grad[pix * 3], grad[pix * 3 + 1], grad[pix * 3 + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let center = pixel_center(row, col);
                contribs.clear();
                let mut trans = 1.0;
                for &p in &self.pixel_lists[pix] {
                    if let Some(a) = eval_alpha(&self.visible[p as usize].pixel, center, &self.settings) {
                        contribs.push((p, a, trans));
                        trans *= 1.0 - a.alpha;
                    }
                }
                // `behind` is the color seen through splat i, normalized by
                // the transmittance in front of it.
                let mut behind = bg;
                for &(p, a, t_i) in contribs.iter().rev() {
                    let s = &self.visible[p as usize].pixel;
                    let out = &mut acc[p as usize];
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        out.color[c] += a.alpha * t_i * g[c];
                        d_alpha += g[c] * (s.color[c] - behind[c]);
                    }
                    d_alpha *= t_i;
                    for c in 0..3 {
                        behind[c] = a.alpha * s.color[c] + (1.0 - a.alpha) * behind[c];
                    }
                    if a.clamped {
                        continue;
                    }
                    out.opacity += d_alpha * a.gauss;
                    let d_power = d_alpha * s.opacity * a.gauss;
                    // power = -½ dᵀ Q d, d = pixel - mean
                    let q = &s.conic;
                    let qd = [q[0][0] * a.d[0] + q[0][1] * a.d[1], q[1][0] * a.d[0] + q[1][1] * a.d[1]];
                    out.mean2d[0] += d_power * qd[0];
                    out.mean2d[1] += d_power * qd[1];
                    for i in 0..2 {
                        for j in 0..2 {
                            out.conic[i][j] += -0.5 * d_power * a.d[i] * a.d[j];
                        }
                    }
                }
            }
        }
        acc
    }
}

/// Inclusive pixel index range whose centers fall in `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, extent: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(extent as f64 - 1.0);
    (first <= last && last >= 0.0 && first < extent as f64).then_some((first as usize, last as usize))
}

impl Function for Rasterize {
    fn name(&self) -> &str {
        "rasterize"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let height = self.cam.height as usize;
        let grad = ctx.grad_output.data();
        let chunks: Vec<Vec<SplatGrad>> = (0..height.div_ceil(ROWS_PER_CHUNK))
            .into_par_iter()
            .map(|c| self.backward_rows(c * ROWS_PER_CHUNK..((c + 1) * ROWS_PER_CHUNK).min(height), grad))
            .collect();
        let mut splat_grads = vec![SplatGrad::default(); self.visible.len()];
        for chunk in &chunks {
            for (acc, g) in splat_grads.iter_mut().zip(chunk) {
                acc.add(g);
            }
        }

        let n = self.n;
        let k = coeff_count(self.sh_degree);
        let sh_values = ctx.inputs[4].data();
        let mut d_pos = vec![0.0; n * 3];
        let mut d_scale = vec![0.0; n * 3];
        let mut d_rot = vec![0.0; n * 4];
        let mut d_opacity = vec![0.0; n];
        let mut d_sh = vec![0.0; n * k * 3];
        let w = self.cam.rotation();
        let (fx, fy) = (self.cam.fx, self.cam.fy);

        for (v, g) in self.visible.iter().zip(&splat_grads) {
            let i = v.index;
            d_opacity[i] = g.opacity;

            // Color: clamp, then SH.
            let mut d_raw = [0.0; 3];
            for c in 0..3 {
                if v.color_raw[c] > 0.0 && v.color_raw[c] < 1.0 {
                    d_raw[c] = g.color[c];
                }
            }
            let basis = sh::basis(v.view_dir, self.sh_degree);
            let mut d_dir = [0.0; 3];
            let jac = sh::basis_jacobian(v.view_dir, self.sh_degree);
            for b in 0..k {
                let coeff = &sh_values[(i * k + b) * 3..(i * k + b) * 3 + 3];
                let mut d_basis = 0.0;
                for c in 0..3 {
                    d_sh[(i * k + b) * 3 + c] = basis[b] * d_raw[c];
                    d_basis += d_raw[c] * coeff[c];
                }
                for a in 0..3 {
                    d_dir[a] += d_basis * jac[b][a];
                }
            }
            let dir_dot: f64 = (0..3).map(|a| v.view_dir[a] * d_dir[a]).sum();
            let mut d_p = [0.0; 3];
            for a in 0..3 {
                d_p[a] += (d_dir[a] - v.view_dir[a] * dir_dot) / v.view_dist;
            }

            // Conic -> 2D covariance: dΣ = -Q G Q.
            let q = &v.pixel.conic;
            let gq = &g.conic;
            let mut d_cov2 = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for d in 0..2 {
                            s += q[a][c] * gq[c][d] * q[d][b];
                        }
                    }
                    d_cov2[a][b] = -s;
                }
            }

            // Σ2 = T Σ3 Tᵀ + λI
            let t = &v.geo.jw;
            let mut d_cov3 = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for d in 0..2 {
                            s += t[c][a] * d_cov2[c][d] * t[d][b];
                        }
                    }
                    d_cov3[a][b] = s;
                }
            }
            // dT = G T Σ3ᵀ + Gᵀ T Σ3
            let mut t_cov = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    t_cov[r][c] = (0..3).map(|m| t[r][m] * v.cov3d[m][c]).sum();
                }
            }
            let mut d_t = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    d_t[r][c] = (0..2).map(|m| (d_cov2[r][m] + d_cov2[m][r]) * t_cov[m][c]).sum();
                }
            }
            // T = J W, so dJ = dT Wᵀ.
            let mut d_j = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    d_j[r][c] = (0..3).map(|m| d_t[r][m] * w[c][m]).sum();
                }
            }
            let [x, y, z] = v.geo.cam_point;
            let (z2, z3) = (z * z, z * z * z);
            let mut d_cam = [0.0; 3];
            d_cam[0] += d_j[0][2] * (-fx / z2);
            d_cam[1] += d_j[1][2] * (-fy / z2);
            d_cam[2] += d_j[0][0] * (-fx / z2)
                + d_j[0][2] * (2.0 * fx * x / z3)
                + d_j[1][1] * (-fy / z2)
                + d_j[1][2] * (2.0 * fy * y / z3);
            // Mean.
            d_cam[0] += g.mean2d[0] * fx / z;
            d_cam[1] += g.mean2d[1] * fy / z;
            d_cam[2] += -g.mean2d[0] * fx * x / z2 - g.mean2d[1] * fy * y / z2;
            for a in 0..3 {
                d_p[a] += (0..3).map(|m| w[m][a] * d_cam[m]).sum::<f64>();
            }
            d_pos[i * 3..i * 3 + 3].copy_from_slice(&d_p);

            // Σ3 = M Mᵀ with M = R diag(s).
            let sym = {
                let tr = transpose(&d_cov3);
                let mut s = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        s[a][b] = d_cov3[a][b] + tr[a][b];
                    }
                }
                s
            };
            let mut m = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    m[a][b] = v.rot[a][b] * v.scale[b];
                }
            }
            let d_m = mat_mul(&sym, &m);
            let mut d_r = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    d_scale[i * 3 + b] += d_m[a][b] * v.rot[a][b];
                    d_r[a][b] = d_m[a][b] * v.scale[b];
                }
            }
            d_rot[i * 4..i * 4 + 4].copy_from_slice(&rotmat_vjp(v.quat, &d_r));
        }

        let shape = |t: &Tensor| t.shape().to_vec();
        let mk = |i: usize, data: Vec<f64>| {
            ctx.needs_grad[i].then(|| Tensor::new(shape(ctx.inputs[i]), data).expect("input shape"))
        };
        vec![
            mk(0, d_pos),
            mk(1, d_scale),
            mk(2, d_rot),
            mk(3, d_opacity),
            mk(4, d_sh),
        ]
    }
}

/// Marks pixels where some splat sits within `eps` of a non-differentiable
/// point: the opacity clamp, the skip threshold or the truncation radius.
pub fn threshold_pixels(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings, eps: f64) -> Result<Vec<bool>> {
    let mut graph = crate::diffeng::Graph::new();
    let vars = cloud.to_vars(&mut graph, false);
    let act: ActivatedVars = crate::gaussians::activate_vars(&mut graph, &vars)?;
    let (op, _) = Rasterize::forward(
        graph.value(act.positions),
        graph.value(act.scales),
        graph.value(act.rotations),
        graph.value(act.opacities),
        graph.value(act.sh_coeffs),
        act.sh_degree,
        cam,
        settings,
    )?;
    let width = cam.width as usize;
    let trunc2 = settings.truncation_sigma * settings.truncation_sigma;
    Ok(op
        .pixel_lists
        .iter()
        .enumerate()
        .map(|(pix, list)| {
            let center = pixel_center(pix / width, pix % width);
            list.iter().any(|&p| {
                let s = &op.visible[p as usize].pixel;
                let (_, m) = mahalanobis(s, center);
                let raw = s.opacity * (-0.5 * m).exp();
                (m - trunc2).abs() < eps * trunc2
                    || (raw - settings.alpha_max).abs() < eps
                    || (raw.min(settings.alpha_max) - settings.alpha_min).abs() < eps
            })
        })
        .collect())
}
