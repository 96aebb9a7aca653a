//! Central finite-difference checks for the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::mlp::{GradTarget, GradientBuffer, ResidualMlp};
use crate::error::Result;

/// Below this magnitude the relative error is measured against the floor
/// instead, so gradients that are zero up to round-off do not blow up.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`; exact zeros on both sides give 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient<F>(x: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe)?;
        probe[i] = orig - step;
        let lo = f(&probe)?;
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}

/// Fixed pseudo-random upstream weights so the checked scalar is `sum(u * y)`.
fn upstream_for(net: &ResidualMlp<f64>, rows: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_0u64);
    let dist = Uniform::new(-1.0, 1.0);
    (0..rows * net.shape().output_dim).map(|_| dist.sample(&mut rng)).collect()
}

/// Largest relative error between [`ResidualMlp::backward`] and central
/// differences, over every parameter and every input coordinate.
pub fn finite_diff_check(net: &ResidualMlp<f64>, inputs: &[f64], step: f64) -> Result<f64> {
    finite_diff_check_with(net, inputs, step, |n, x, u| n.gradients(x, u, GradTarget::ParamsAndInputs))
}

/// Same as [`finite_diff_check`] with a caller-supplied backward pass.
pub fn finite_diff_check_with<B>(net: &ResidualMlp<f64>, inputs: &[f64], step: f64, backward: B) -> Result<f64>
where
    B: Fn(&ResidualMlp<f64>, &[f64], &[f64]) -> Result<GradientBuffer<f64>>,
{
    let rows = inputs.len() / net.shape().input_dim.max(1);
    let upstream = upstream_for(net, rows);
    let analytic = backward(net, inputs, &upstream)?;
    let dot = |y: Vec<f64>| y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>();

    let mut probe = net.clone();
    let numeric_params = numeric_gradient(net.params(), step, |p| {
        probe.params_mut().copy_from_slice(p);
        Ok(dot(probe.forward(inputs)?))
    })?;
    let numeric_inputs = numeric_gradient(inputs, step, |x| Ok(dot(net.forward(x)?)))?;

    Ok(max_relative_error(&analytic.param_grads, &numeric_params)
        .max(max_relative_error(&analytic.input_grads, &numeric_inputs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::MlpShape;

    fn inputs(rows: usize, dim: usize) -> Vec<f64> {
        (0..rows * dim).map(|i| ((i * 7 + 3) as f64 * 0.37).sin() * 1.5).collect()
    }

    #[test]
    fn zero_net_has_zero_error() {
        let net = ResidualMlp::<f64>::zeros(MlpShape::new(8, 3, 16, 2)).unwrap();
        assert_eq!(finite_diff_check(&net, &inputs(4, 8), 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn seeded_random_net_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = ResidualMlp::<f64>::init(MlpShape::new(8, 5, 16, 2), &mut rng).unwrap();
        let err = finite_diff_check(&net, &inputs(6, 8), 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sign_flip_in_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = ResidualMlp::<f64>::init(MlpShape::new(8, 5, 16, 2), &mut rng).unwrap();
        let err = finite_diff_check_with(&net, &inputs(6, 8), 1e-5, |n, x, u| {
            let mut g = n.gradients(x, u, GradTarget::ParamsAndInputs)?;
            g.param_grads[0] = -g.param_grads[0];
            Ok(g)
        })
        .unwrap();
        assert!(err > 1e-1, "mutation went unnoticed: {err}");
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }
}
