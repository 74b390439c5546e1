//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they are evaluated and replays them in
//! reverse from a scalar root. Besides the built-in elementwise, matmul and
//! reduction ops, heavier kernels (the rasterizer, the Hexplane encoder)
//! register themselves through [`Function`] with a hand-written backward.

mod graph;
mod tensor;

pub use graph::{sigmoid, BackwardContext, ElementwiseOp, Function, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs a different element count than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected {expected} operand(s)")]
    Arity { op: &'static str, expected: usize },
    #[error("{op}: backward produced gradient of shape {got:?} for input of shape {expected:?}")]
    GradientShape {
        op: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// Largest coordinate-wise relative error between two gradient estimates.
///
/// Each coordinate is normalized by `max(|a|, |b|, floor)` where the floor is
/// `1e-4` of the largest reference magnitude; coordinates many orders below
/// the gradient's scale are dominated by finite-difference round-off.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-4 * scale).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let g = finite_diff(|x| x.sum(), &x, 1e-6);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_of_half_norm_squared() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff(|x| 0.5 * x.data()[0] * x.data()[0], &x, 1e-6);
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
    }

    /// f(x) = ½ xᵀ A x + bᵀ x built from graph ops, checked against
    /// central differences across several seeds.
    #[test]
    fn backward_agrees_with_finite_diff_on_random_quadratics() {
        const DIM: usize = 10;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..DIM * DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x0: Vec<f64> = (0..DIM).map(|_| rng.random_range(-2.0..2.0)).collect();

            let mut g = Graph::new();
            let x = g.param(Tensor::new([DIM, 1], x0.clone()).unwrap());
            let am = g.constant(Tensor::new([DIM, DIM], a.clone()).unwrap());
            let bv = g.constant(Tensor::new([DIM, 1], b.clone()).unwrap());
            let ax = g.matmul(am, x).unwrap();
            let xax = g.mul(x, ax).unwrap();
            let quad = g.sum(xax);
            let quad = g.scale(quad, 0.5);
            let bx = g.mul(bv, x).unwrap();
            let lin = g.sum(bx);
            let f = g.add(quad, lin).unwrap();
            g.backward(f).unwrap();
            let analytic = g.grad(x).unwrap();

            let oracle = |x: &Tensor| {
                let x = x.data();
                let mut v = 0.0;
                for i in 0..DIM {
                    for j in 0..DIM {
                        v += 0.5 * x[i] * a[i * DIM + j] * x[j];
                    }
                    v += b[i] * x[i];
                }
                v
            };
            let numeric = finite_diff(oracle, &Tensor::new([DIM, 1], x0).unwrap(), 1e-6);
            let err = max_relative_error(analytic.data(), numeric.data());
            assert!(err < 1e-6, "seed {seed}: relative error {err}");
        }
    }
}
