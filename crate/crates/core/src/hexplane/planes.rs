use rayon::prelude::*;

use super::{SceneBounds, PAIRS};
use crate::diffeng::{BackwardContext, Function, Tensor};

/// Bilinear stencil of one query on an `ru × rv` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    wu: f64,
    wv: f64,
}

fn axis(x: f64, r: usize) -> (usize, usize, f64) {
    if r < 2 {
        return (0, 0, 0.0);
    }
    let f = x.clamp(0.0, 1.0) * (r - 1) as f64;
    let i0 = (f.floor() as usize).min(r - 2);
    (i0, i0 + 1, f - i0 as f64)
}

impl Stencil {
    pub(crate) fn new(u: f64, v: f64, ru: usize, rv: usize) -> Self {
        let (i0, i1, wu) = axis(u, ru);
        let (j0, j1, wv) = axis(v, rv);
        Self { i0, i1, j0, j1, wu, wv }
    }

    fn corners(&self, rv: usize) -> [(usize, f64); 4] {
        let (wu, wv) = (self.wu, self.wv);
        [
            (self.i0 * rv + self.j0, (1.0 - wu) * (1.0 - wv)),
            (self.i1 * rv + self.j0, wu * (1.0 - wv)),
            (self.i0 * rv + self.j1, (1.0 - wu) * wv),
            (self.i1 * rv + self.j1, wu * wv),
        ]
    }

    pub(crate) fn sample(&self, grid: &[f64], rv: usize, h: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (node, w) in self.corners(rv) {
            let f = &grid[node * h..(node + 1) * h];
            for c in 0..h {
                out[c] += w * f[c];
            }
        }
    }
}

/// Shape `[ru, rv, h]` of a grid tensor.
pub(crate) fn grid_dims(grid: &Tensor) -> (usize, usize, usize) {
    match grid.shape() {
        [ru, rv, h] => (*ru, *rv, *h),
        other => panic!("grid tensor must be rank 3, got {other:?}"),
    }
}

/// Normalized `(x, y, z, t)` plus a per-axis flag telling whether the
/// coordinate was inside the box (and therefore differentiable).
pub(crate) fn normalize(p: [f64; 3], t: f64, bounds: &SceneBounds) -> ([f64; 4], [bool; 3]) {
    let mut out = [0.0; 4];
    let mut inside = [false; 3];
    for a in 0..3 {
        let x = (p[a] - bounds.min[a]) / (bounds.max[a] - bounds.min[a]);
        inside[a] = (0.0..=1.0).contains(&x);
        out[a] = x.clamp(0.0, 1.0);
    }
    out[3] = t.clamp(0.0, 1.0);
    (out, inside)
}

/// Multi-level plane query over `N` points at one time value. Inputs are the
/// grids (level-major, pair order of [`PAIRS`]) followed by `N × 3`
/// positions; the output is `N × (levels · h)`.
pub(crate) struct Query {
    bounds: SceneBounds,
    coords: Vec<([f64; 4], [bool; 3])>,
}

impl Query {
    pub(crate) fn forward(grids: &[&Tensor], positions: &Tensor, t: f64, bounds: &SceneBounds) -> (Self, Tensor) {
        let n = positions.shape()[0];
        let levels = grids.len() / PAIRS.len();
        let h = grid_dims(grids[0]).2;
        let p = positions.data();
        let coords: Vec<_> = (0..n)
            .map(|i| normalize([p[i * 3], p[i * 3 + 1], p[i * 3 + 2]], t, bounds))
            .collect();
        let width = levels * h;
        let mut out = vec![0.0; n * width];
        out.par_chunks_mut(width.max(1)).zip(&coords).for_each(|(row, (x, _))| {
            let mut sample = vec![0.0; h];
            for l in 0..levels {
                let block = &mut row[l * h..(l + 1) * h];
                block.fill(1.0);
                for (k, &(a, b)) in PAIRS.iter().enumerate() {
                    let grid = grids[l * PAIRS.len() + k];
                    let (ru, rv, _) = grid_dims(grid);
                    Stencil::new(x[a], x[b], ru, rv).sample(grid.data(), rv, h, &mut sample);
                    for c in 0..h {
                        block[c] *= sample[c];
                    }
                }
            }
        });
        let out = Tensor::new([n, width], out).expect("query output shape");
        (
            Self {
                bounds: bounds.clone(),
                coords,
            },
            out,
        )
    }
}

impl Function for Query {
    fn name(&self) -> &str {
        "plane_query"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let num_grids = ctx.inputs.len() - 1;
        let levels = num_grids / PAIRS.len();
        let grids = &ctx.inputs[..num_grids];
        let h = grid_dims(grids[0]).2;
        let n = self.coords.len();
        let g = ctx.grad_output.data();
        let want_pos = ctx.needs_grad[num_grids];
        let mut grid_grads: Vec<Option<Vec<f64>>> = (0..num_grids)
            .map(|i| ctx.needs_grad[i].then(|| vec![0.0; grids[i].len()]))
            .collect();
        let mut pos_grad = vec![0.0; n * 3];

        let mut samples = vec![vec![0.0; h]; PAIRS.len()];
        let mut others = vec![0.0; h];
        for (i, (x, inside)) in self.coords.iter().enumerate() {
            for l in 0..levels {
                let go = &g[(i * levels + l) * h..(i * levels + l + 1) * h];
                let stencils: Vec<Stencil> = PAIRS
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, b))| {
                        let (ru, rv, _) = grid_dims(grids[l * PAIRS.len() + k]);
                        Stencil::new(x[a], x[b], ru, rv)
                    })
                    .collect();
                for k in 0..PAIRS.len() {
                    let grid = grids[l * PAIRS.len() + k];
                    stencils[k].sample(grid.data(), grid_dims(grid).1, h, &mut samples[k]);
                }
                for (k, &(a, b)) in PAIRS.iter().enumerate() {
                    let gi = l * PAIRS.len() + k;
                    let (ru, rv, _) = grid_dims(grids[gi]);
                    for c in 0..h {
                        let mut prod = go[c];
                        for (m, s) in samples.iter().enumerate() {
                            if m != k {
                                prod *= s[c];
                            }
                        }
                        others[c] = prod;
                    }
                    let st = &stencils[k];
                    if let Some(gg) = grid_grads[gi].as_mut() {
                        for (node, w) in st.corners(rv) {
                            for c in 0..h {
                                gg[node * h + c] += w * others[c];
                            }
                        }
                    }
                    if !want_pos {
                        continue;
                    }
                    let data = grids[gi].data();
                    let f = |iu: usize, jv: usize, c: usize| data[(iu * rv + jv) * h + c];
                    let (mut du, mut dv) = (0.0, 0.0);
                    for c in 0..h {
                        let (f00, f10, f01, f11) = (
                            f(st.i0, st.j0, c),
                            f(st.i1, st.j0, c),
                            f(st.i0, st.j1, c),
                            f(st.i1, st.j1, c),
                        );
                        du += others[c] * ((1.0 - st.wv) * (f10 - f00) + st.wv * (f11 - f01));
                        dv += others[c] * ((1.0 - st.wu) * (f01 - f00) + st.wu * (f11 - f10));
                    }
                    for (axis, d, r) in [(a, du, ru), (b, dv, rv)] {
                        if axis < 3 && inside[axis] && r > 1 {
                            pos_grad[i * 3 + axis] +=
                                d * (r - 1) as f64 / (self.bounds.max[axis] - self.bounds.min[axis]);
                        }
                    }
                }
            }
        }

        let mut out: Vec<Option<Tensor>> = grid_grads
            .into_iter()
            .zip(grids)
            .map(|(g, t)| g.map(|g| Tensor::new(t.shape().to_vec(), g).expect("grid grad shape")))
            .collect();
        out.push(want_pos.then(|| Tensor::new([n, 3], pos_grad).expect("position grad shape")));
        out
    }
}

/// Mean squared difference between neighbours along each axis of one grid,
/// averaged over the axes that have at least two nodes.
pub(crate) fn grid_tv(grid: &Tensor, grad: Option<(&mut [f64], f64)>) -> f64 {
    let (ru, rv, h) = grid_dims(grid);
    let d = grid.data();
    // (along u, stride, number of squared terms)
    let axes: Vec<(bool, usize, usize)> = [
        (true, rv * h, ru.saturating_sub(1) * rv * h),
        (false, h, ru * rv.saturating_sub(1) * h),
    ]
    .into_iter()
    .filter(|&(_, _, count)| count > 0)
    .collect();
    if axes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut grad = grad;
    for &(along_u, stride, count) in &axes {
        let weight = 1.0 / (count as f64 * axes.len() as f64);
        let mut sum = 0.0;
        for i in 0..ru {
            for j in 0..rv {
                let base = (i * rv + j) * h;
                let next = base + stride;
                let valid = if along_u { i + 1 < ru } else { j + 1 < rv };
                if !valid {
                    continue;
                }
                for c in 0..h {
                    let diff = d[next + c] - d[base + c];
                    sum += diff * diff;
                    if let Some((g, scale)) = grad.as_mut() {
                        let v = 2.0 * diff * weight * *scale;
                        g[next + c] += v;
                        g[base + c] -= v;
                    }
                }
            }
        }
        total += sum * weight;
    }
    total
}

/// Mean of [`grid_tv`] over all input grids; scalar output.
pub(crate) struct TotalVariation;

impl Function for TotalVariation {
    fn name(&self) -> &str {
        "total_variation"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_output.data()[0] / ctx.inputs.len() as f64;
        ctx.inputs
            .iter()
            .zip(ctx.needs_grad)
            .map(|(grid, &need)| {
                need.then(|| {
                    let mut out = vec![0.0; grid.len()];
                    grid_tv(grid, Some((&mut out, g)));
                    Tensor::new(grid.shape().to_vec(), out).expect("tv grad shape")
                })
            })
            .collect()
    }
}
