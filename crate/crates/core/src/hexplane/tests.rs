use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffeng::{finite_diff, max_relative_error};
use crate::gaussians::{activate_vars, logit, sh, Camera};
use crate::renderer::{render, render_vars, RenderSettings};

fn small_config() -> HexplaneConfig {
    HexplaneConfig {
        channels: 3,
        spatial_resolution: 4,
        time_resolution: 3,
        mlp_width: 6,
    }
}

fn unit_bounds() -> SceneBounds {
    SceneBounds::new([-1.0; 3], [1.0; 3]).unwrap()
}

/// A field with random grids and non-zero heads, so every path carries
/// gradient.
fn busy_field(seed: u64) -> HexplaneField {
    let mut f = HexplaneField::new(small_config(), unit_bounds(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for g in &mut f.grids {
        for v in g.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
    }
    for t in &mut f.mlp {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    f
}

fn grid_of(ru: usize, rv: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::new();
    for i in 0..ru {
        for j in 0..rv {
            for c in 0..h {
                data.push(f(i, j, c));
            }
        }
    }
    Tensor::new([ru, rv, h], data).unwrap()
}

#[test]
fn normalize_corners_center_and_clamp() {
    let b = SceneBounds::new([-1.0, 0.0, 2.0], [1.0, 4.0, 3.0]).unwrap();
    assert_eq!(normalize_coords([-1.0, 0.0, 2.0], 0.3, &b), [0.0, 0.0, 0.0, 0.3]);
    assert_eq!(normalize_coords([0.0, 2.0, 2.5], 0.3, &b), [0.5, 0.5, 0.5, 0.3]);
    assert_eq!(normalize_coords([5.0, -3.0, 2.5], 1.7, &b), [1.0, 0.0, 0.5, 1.0]);
}

#[test]
fn bounds_must_be_ordered() {
    assert!(SceneBounds::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
}

#[test]
fn interp_is_exact_at_nodes_and_averages_at_centers() {
    let g = grid_of(3, 4, 2, |i, j, c| (i * 10 + j) as f64 + 0.5 * c as f64);
    assert_eq!(plane_interp(&g, 0.5, 1.0 / 3.0), vec![11.0, 11.5]);
    assert_eq!(plane_interp(&g, 1.0, 1.0), vec![23.0, 23.5]);
    let center = plane_interp(&g, 0.25, 0.5 / 3.0);
    let expect = (0.0 + 1.0 + 10.0 + 11.0) / 4.0;
    assert!((center[0] - expect).abs() < 1e-12);
    let constant = grid_of(5, 3, 4, |_, _, _| 2.5);
    for (u, v) in [(0.1, 0.9), (0.77, 0.33), (1.0, 0.0)] {
        assert!(plane_interp(&constant, u, v).iter().all(|&x| (x - 2.5).abs() < 1e-15));
    }
}

#[test]
fn unit_grids_give_unit_features() {
    let mut f = HexplaneField::new(small_config(), unit_bounds(), 1).unwrap();
    for g in &mut f.grids {
        g.data_mut().fill(1.0);
    }
    assert_eq!(query(&f, [0.3, -0.2, 0.9], 0.4), vec![1.0; 6]);
}

#[test]
fn zero_plane_annihilates_its_level_only() {
    let mut f = HexplaneField::new(small_config(), unit_bounds(), 1).unwrap();
    for g in &mut f.grids {
        g.data_mut().fill(1.0);
    }
    f.grids[2].data_mut().fill(0.0);
    assert_eq!(query(&f, [0.1, 0.2, 0.3], 0.5), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn level_one_product_by_hand() {
    let mut f = HexplaneField::new(small_config(), unit_bounds(), 1).unwrap();
    for g in &mut f.grids {
        g.data_mut().fill(1.0);
    }
    f.grids[0].data_mut().fill(2.0);
    f.grids[4].data_mut().fill(3.0);
    assert_eq!(&query(&f, [0.0; 3], 0.0)[..3], &[6.0; 3]);
}

#[test]
fn default_layout() {
    let f = HexplaneField::new(HexplaneConfig::default(), unit_bounds(), 0).unwrap();
    assert_eq!(f.grids.len(), 12);
    assert_eq!(f.grids[0].shape(), &[64, 64, 32]);
    assert_eq!(f.grids[3].shape(), &[64, 32, 32]);
    assert_eq!(f.grids[6].shape(), &[128, 128, 32]);
    assert_eq!(f.grids[11].shape(), &[128, 64, 32]);
    for (head, out) in HEAD_OUTPUTS.iter().enumerate() {
        assert_eq!(f.mlp[4 + head * 4 + 2].shape(), &[64, *out]);
    }
}

#[test]
fn fresh_field_is_identity() {
    let f = HexplaneField::new(small_config(), unit_bounds(), 3).unwrap();
    let p = Tensor::new([3, 3], vec![0.1, 0.2, 0.3, -0.5, 0.9, 0.0, 2.0, -2.0, 0.5]).unwrap();
    let d = deformation(&f, &p, 0.7).unwrap();
    assert!(d
        .dp
        .data()
        .iter()
        .chain(d.ds.data())
        .chain(d.dr.data())
        .all(|&v| v == 0.0));
}

#[test]
fn coincident_points_get_identical_deltas() {
    let f = busy_field(4);
    let p = Tensor::new([2, 3], vec![0.25, -0.4, 0.6, 0.25, -0.4, 0.6]).unwrap();
    let d = deformation(&f, &p, 0.3).unwrap();
    for t in [&d.dp, &d.ds, &d.dr] {
        let row = t.shape()[1];
        assert_eq!(&t.data()[..row], &t.data()[row..]);
    }
}

fn sample_cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sh::coeff_count(1);
    GaussianCloud::new(
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5)))
            .collect(),
        (0..n).map(|_| [0.1f64.ln(); 3]).collect(),
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
        (0..n).map(|_| logit(0.7)).collect(),
        (0..n * k * 3).map(|_| rng.random_range(-0.5..0.5)).collect(),
        1,
    )
    .unwrap()
}

#[test]
fn deform_cloud_shifts_and_leaves_appearance_alone() {
    let cloud = sample_cloud(4, 1);
    let delta = DeformationDelta {
        dp: Tensor::new([4, 3], [1.0, 0.0, 0.0].repeat(4)).unwrap(),
        ds: Tensor::full([4, 3], 0.2),
        dr: Tensor::full([4, 4], -0.1),
    };
    let moved = deform_cloud(&cloud, &delta).unwrap();
    for i in 0..4 {
        let (a, b) = (cloud.position(i), moved.position(i));
        assert_eq!([b[0] - a[0], b[1] - a[1], b[2] - a[2]], [1.0, 0.0, 0.0]);
    }
    assert!(moved.opacity_logits.bit_eq(&cloud.opacity_logits));
    assert!(moved.sh_coeffs.bit_eq(&cloud.sh_coeffs));

    let zero = DeformationDelta {
        dp: Tensor::zeros([4, 3]),
        ds: Tensor::zeros([4, 3]),
        dr: Tensor::zeros([4, 4]),
    };
    assert_eq!(deform_cloud(&cloud, &zero).unwrap(), cloud);
    assert!(deform_cloud(&sample_cloud(3, 1), &zero).is_err());
}

#[test]
fn zero_heads_render_canonical_at_every_time() {
    let field = HexplaneField::new(small_config(), unit_bounds(), 9).unwrap();
    let cloud = sample_cloud(10, 2);
    let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], (20.0, 20.0), (16, 16)).unwrap();
    let settings = RenderSettings::default();
    let canonical = render(&cloud, &cam, &settings).unwrap();
    for t in [0.0, 0.25, 0.5, 1.0] {
        let deformed = render(&cloud_at(&cloud, &field, t).unwrap(), &cam, &settings).unwrap();
        assert!(canonical
            .rgb
            .data
            .iter()
            .zip(&deformed.rgb.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn tv_of_constant_grids_is_zero() {
    let mut f = busy_field(1);
    for g in &mut f.grids {
        g.data_mut().fill(0.7);
    }
    assert_eq!(tv_loss(&f), 0.0);
}

#[test]
fn tv_of_two_node_grid() {
    let a = [1.0, 2.0, 3.0];
    let b = [1.5, 0.0, 3.0];
    let g = Tensor::new([2, 1, 3], [a, b].concat()).unwrap();
    let expect = ((0.5f64).powi(2) + 4.0) / 3.0;
    assert!((grid_tv(&g) - expect).abs() < 1e-15);
}

#[test]
fn tv_is_quadratic_and_shift_invariant() {
    let f = busy_field(5);
    let base = tv_loss(&f);
    let mut doubled = f.clone();
    let mut shifted = f.clone();
    for g in &mut doubled.grids {
        g.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    for g in &mut shifted.grids {
        g.data_mut().iter_mut().for_each(|v| *v += 3.0);
    }
    assert!((tv_loss(&doubled) - 4.0 * base).abs() < 1e-12 * base.max(1.0));
    assert!((tv_loss(&shifted) - base).abs() < 1e-12);
}

/// `‖Δp‖² + Σ w·Δs + Σ w·Δr`, with gradients for every field tensor and the
/// positions.
fn deformation_loss(field: &HexplaneField, positions: &Tensor, t: f64) -> (f64, Vec<Tensor>, Tensor) {
    let mut graph = Graph::new();
    let vars = field.to_vars(&mut graph, true);
    let p = graph.param(positions.clone());
    let d = deformation_vars(&mut graph, &vars, &field.bounds, p, t).unwrap();
    let sq = graph.mul(d.dp, d.dp).unwrap();
    let a = graph.sum(sq);
    let ws = graph.constant(
        Tensor::new(
            graph.value(d.ds).shape().to_vec(),
            (0..graph.value(d.ds).len()).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap(),
    );
    let wr = graph.constant(
        Tensor::new(
            graph.value(d.dr).shape().to_vec(),
            (0..graph.value(d.dr).len()).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap(),
    );
    let s = graph.mul(d.ds, ws).unwrap();
    let s = graph.sum(s);
    let r = graph.mul(d.dr, wr).unwrap();
    let r = graph.sum(r);
    let ab = graph.add(a, s).unwrap();
    let loss = graph.add(ab, r).unwrap();
    graph.backward(loss).unwrap();
    (
        graph.value(loss).data()[0],
        vars.all().map(|v| graph.grad(v).unwrap()).collect(),
        graph.grad(p).unwrap(),
    )
}

#[test]
fn deformation_gradients_match_finite_differences() {
    let field = busy_field(7);
    let positions = Tensor::new([3, 3], vec![0.13, -0.41, 0.72, -0.66, 0.08, 0.29, 0.51, 0.37, -0.83]).unwrap();
    let t = 0.37;
    let (_, grads, pos_grad) = deformation_loss(&field, &positions, t);
    let n_grids = field.grids.len();
    for (i, analytic) in grads.iter().enumerate() {
        let base = if i < n_grids {
            &field.grids[i]
        } else {
            &field.mlp[i - n_grids]
        };
        let numeric = finite_diff(
            |x| {
                let mut f = field.clone();
                if i < n_grids {
                    f.grids[i] = x.clone();
                } else {
                    f.mlp[i - n_grids] = x.clone();
                }
                deformation_loss(&f, &positions, t).0
            },
            base,
            1e-6,
        );
        let e = max_relative_error(analytic.data(), numeric.data());
        assert!(e < 1e-4, "tensor {i}: relative error {e}");
    }
    let numeric = finite_diff(|x| deformation_loss(&field, x, t).0, &positions, 1e-6);
    let e = max_relative_error(pos_grad.data(), numeric.data());
    assert!(e < 1e-4, "positions: relative error {e}");
}

#[test]
fn tv_gradient_matches_finite_differences() {
    let field = busy_field(8);
    let mut graph = Graph::new();
    let vars = field.to_vars(&mut graph, true);
    let tv = tv_loss_vars(&mut graph, &vars.grids);
    assert!((graph.value(tv).data()[0] - tv_loss(&field)).abs() < 1e-15);
    graph.backward(tv).unwrap();
    for i in [0, 5, 9] {
        let numeric = finite_diff(
            |x| {
                let mut f = field.clone();
                f.grids[i] = x.clone();
                tv_loss(&f)
            },
            &field.grids[i],
            1e-6,
        );
        let e = max_relative_error(graph.grad(vars.grids[i]).unwrap().data(), numeric.data());
        assert!(e < 1e-5, "grid {i}: {e}");
    }
}

#[test]
fn gradients_reach_canonical_through_frozen_field() {
    let field = busy_field(2);
    let cloud = sample_cloud(6, 3);
    let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], (20.0, 20.0), (12, 12)).unwrap();
    let mut graph = Graph::new();
    let cv = cloud.to_vars(&mut graph, true);
    let fv = field.to_vars(&mut graph, false);
    let deformed = deform_vars(&mut graph, &cv, &fv, &field.bounds, 0.5).unwrap();
    let act = activate_vars(&mut graph, &deformed).unwrap();
    let (img, _) = render_vars(&mut graph, &act, &cam, &RenderSettings::default()).unwrap();
    let loss = graph.mean(img);
    graph.backward(loss).unwrap();
    assert!(graph.grad(cv.positions).unwrap().data().iter().any(|&g| g != 0.0));
    assert!(fv.all().all(|v| graph.grad(v).is_none()));
}

#[test]
fn checkpoint_rejects_garbage() {
    let f = busy_field(1);
    let bytes = f.to_bytes();
    assert!(HexplaneField::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(HexplaneField::read_from(&mut &extra[..]).is_err());
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(HexplaneField::read_from(&mut &magic[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000) {
        let f = busy_field(seed);
        let back = HexplaneField::read_from(&mut &f.to_bytes()[..]).unwrap();
        prop_assert_eq!(back.to_bytes(), f.to_bytes());
        prop_assert_eq!(back, f);
    }

    #[test]
    fn query_is_lipschitz(
        seed in 0u64..100,
        p in prop::array::uniform3(-0.9f64..0.9),
        t in 0.0f64..1.0,
        dir in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let f = busy_field(seed);
        let delta = 1e-6;
        let q0 = query(&f, p, t);
        let p1 = [p[0] + delta * dir[0], p[1] + delta * dir[1], p[2] + delta * dir[2]];
        let q1 = query(&f, p1, t + delta * dir[3]);
        // Features in [0.5, 1.5]: each of six factors is at most 1.5 and
        // moves at most (r - 1)·1.0 per unit of normalized coordinate.
        let max_res = 2.0 * small_config().spatial_resolution as f64;
        let bound = 6.0 * 1.5f64.powi(5) * max_res * delta * 2.0;
        for (a, b) in q0.iter().zip(&q1) {
            prop_assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn deformation_never_touches_appearance(seed in 0u64..100, t in 0.0f64..1.0) {
        let cloud = sample_cloud(5, seed);
        let moved = cloud_at(&cloud, &busy_field(seed), t).unwrap();
        prop_assert!(moved.opacity_logits.bit_eq(&cloud.opacity_logits));
        prop_assert!(moved.sh_coeffs.bit_eq(&cloud.sh_coeffs));
    }
}
