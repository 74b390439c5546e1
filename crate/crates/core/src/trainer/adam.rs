use crate::diffeng::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { step: 0, m, v }
    }
}

/// One bias-corrected Adam update. `lrs[i]` applies to `params[i]`. If any
/// gradient is non-finite nothing is modified and the step is rejected.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lrs: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != lrs.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            what: "optimizer groups",
            left: vec![params.len(), grads.len(), lrs.len()],
            right: vec![state.m.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer parameter",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for parameter group {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let lr = lrs[i];
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grads: &[Vec<f64>], lr: f64) -> (Tensor, OptimizerState) {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let mut state = OptimizerState::new([&p]);
        for g in grads {
            adam_step(
                &mut [&mut p],
                &[Tensor::from_vec(g.clone())],
                &mut state,
                &[lr],
                &AdamConfig::default(),
            )
            .unwrap();
        }
        (p, state)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (p, state) = run(&[vec![0.0; 3]], 0.1);
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (p, _) = run(&[vec![3.0, -0.01, 1e3]], 0.1);
        let expect = [1.0 - 0.1, -2.0 + 0.1, 0.5 - 0.1];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn second_identical_step_is_no_larger() {
        // By hand, with constant g: m̂ = g, v̂ = g², so both steps are
        // lr·g/(|g| + ε); the second step matches the first and the
        // effective per-step move does not grow.
        let lr = 0.1;
        let g = vec![0.5, -0.5, 2.0];
        let (p1, _) = run(std::slice::from_ref(&g), lr);
        let (p2, _) = run(&[g.clone(), g], lr);
        let start = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let s1 = (p1.data()[i] - start[i]).abs();
            let s2 = (p2.data()[i] - p1.data()[i]).abs();
            assert!(s2 <= s1 + 1e-15);
            assert!((s1 - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn alternating_gradient_shrinks_the_step() {
        // m₂ = 0.9·0.1·g − 0.1·g = −0.01·g, m̂₂ = −0.01g/0.19;
        // v̂₂ = g², so |step₂| = lr·0.01/0.19 < lr.
        let lr = 0.1;
        let (p1, _) = run(&[vec![1.0; 3]], lr);
        let (p2, _) = run(&[vec![1.0; 3], vec![-1.0; 3]], lr);
        let s2 = (p2.data()[0] - p1.data()[0]).abs();
        assert!((s2 - lr * 0.01 / 0.19).abs() < 1e-6, "{s2}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut state = OptimizerState::new([&p]);
        let err = adam_step(
            &mut [&mut p],
            &[Tensor::from_vec(vec![f64::NAN, 1.0])],
            &mut state,
            &[0.1],
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(state.step, 0);
    }
}
