//! First-order linearized model around the base parameters and the
//! linearization-error diagnostic for weight ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arithmetic::TaskVector;
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::net::{forward_raw, forward_with_tangent, Inputs, NetworkSpec, ParameterVector};
use crate::stats::Summary;

/// `f(x; θ0) + J f(x; θ0) τ`, the teacher of a distillation run.
#[derive(Debug, Clone)]
pub struct LinearizedModel<'a> {
    spec: &'a NetworkSpec,
    theta0: &'a ParameterVector,
    tau: &'a TaskVector,
}

impl<'a> LinearizedModel<'a> {
    pub fn new(spec: &'a NetworkSpec, theta0: &'a ParameterVector, tau: &'a TaskVector) -> Result<Self> {
        theta0.check(spec)?;
        ensure_len("task vector", theta0.len(), tau.len())?;
        Ok(Self { spec, theta0, tau })
    }

    /// Evaluates the linearized model at `θ0 + α τ`.
    pub fn forward(&self, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
        if !alpha.is_finite() {
            return Err(Error::InvalidConfig("scale must be finite".into()));
        }
        ensure_len("input vector", self.spec.input_dim(), x.len())?;
        ensure_finite("input vector", x)?;
        Ok(linear_forward_raw(self.spec, self.theta0.values(), self.tau.values(), x, alpha))
    }
}

pub(crate) fn linear_forward_raw(spec: &NetworkSpec, theta0: &[f64], tau: &[f64], x: &[f64], alpha: f64) -> Vec<f64> {
    let (f0, jv) = forward_with_tangent(spec, theta0, x, tau);
    f0.iter().zip(&jv).map(|(a, b)| a + alpha * b).collect()
}

/// Free-function form of [`LinearizedModel::forward`].
pub fn linear_forward(model: &LinearizedModel<'_>, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    model.forward(x, alpha)
}

fn check_ensemble(spec: &NetworkSpec, thetas: &[ParameterVector]) -> Result<()> {
    if thetas.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "linearization error needs at least 2 models, got {}",
            thetas.len()
        )));
    }
    for t in thetas {
        t.check(spec)?;
    }
    Ok(())
}

fn mean_params(thetas: &[ParameterVector]) -> Vec<f64> {
    let inv = 1.0 / thetas.len() as f64;
    let mut mean = vec![0.0; thetas[0].len()];
    for t in thetas {
        for (m, v) in mean.iter_mut().zip(t.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

fn xi_lin(spec: &NetworkSpec, thetas: &[ParameterVector], mean: &[f64], x: &[f64]) -> f64 {
    let inv = 1.0 / thetas.len() as f64;
    let mut avg = vec![0.0; spec.feature_dim()];
    for t in thetas {
        for (a, v) in avg.iter_mut().zip(forward_raw(spec, t.values(), x)) {
            *a += v;
        }
    }
    let at_mean = forward_raw(spec, mean, x);
    avg.iter().zip(&at_mean).map(|(a, m)| (a * inv - m).abs()).sum()
}

/// `‖mean_t f(x; θ_t) − f(x; mean_t θ_t)‖₁`.
pub fn linearization_error(spec: &NetworkSpec, thetas: &[ParameterVector], x: &[f64]) -> Result<f64> {
    check_ensemble(spec, thetas)?;
    ensure_len("input vector", spec.input_dim(), x.len())?;
    ensure_finite("input vector", x)?;
    Ok(xi_lin(spec, thetas, &mean_params(thetas), x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationProfile {
    /// One value per input, in dataset order.
    pub per_sample: Vec<f64>,
    pub summary: Summary,
}

/// Per-sample linearization error over a set of inputs plus summary statistics.
pub fn linearization_error_profile(spec: &NetworkSpec, thetas: &[ParameterVector], inputs: Inputs<'_>) -> Result<LinearizationProfile> {
    check_ensemble(spec, thetas)?;
    if inputs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    ensure_len("input vector", spec.input_dim(), inputs.dim())?;
    let mean = mean_params(thetas);
    let per_sample: Vec<f64> = (0..inputs.len())
        .into_par_iter()
        .map(|i| xi_lin(spec, thetas, &mean, inputs.row(i)))
        .collect();
    let summary = Summary::of(&per_sample).expect("non-empty");
    Ok(LinearizationProfile { per_sample, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward, jvp, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_params(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> ParameterVector {
        ParameterVector::new(spec, (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn base_point_examples() {
        let spec = NetworkSpec::new(vec![3, 5, 2], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta0 = rand_params(&spec, &mut rng);
        let zero = TaskVector::zeros(&theta0, "t", "m");
        let tau = TaskVector::new(&theta0, rand_params(&spec, &mut rng).into_values(), "t", "m").unwrap();
        let x = [0.3, -0.2, 0.9];
        let f0 = forward(&spec, &theta0, &x).unwrap();
        let m0 = LinearizedModel::new(&spec, &theta0, &zero).unwrap();
        assert_eq!(m0.forward(&x, 3.7).unwrap(), f0);
        let m = LinearizedModel::new(&spec, &theta0, &tau).unwrap();
        assert_eq!(m.forward(&x, 0.0).unwrap(), f0);
        assert!(m.forward(&x, f64::NAN).is_err());
    }

    #[test]
    fn single_layer_identity_linearization_is_exact() {
        let spec = NetworkSpec::new(vec![3, 2], Activation::Identity, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta0 = rand_params(&spec, &mut rng);
        let tau = TaskVector::new(&theta0, rand_params(&spec, &mut rng).into_values(), "t", "m").unwrap();
        let x = [1.0, -2.0, 0.5];
        let moved = ParameterVector::new(&spec, theta0.values().iter().zip(tau.values()).map(|(a, b)| a + b).collect()).unwrap();
        let lin = LinearizedModel::new(&spec, &theta0, &tau).unwrap().forward(&x, 1.0).unwrap();
        let direct = forward(&spec, &moved, &x).unwrap();
        for (a, b) in lin.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scale_and_vector_are_interchangeable() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta0 = rand_params(&spec, &mut rng);
        let raw = rand_params(&spec, &mut rng).into_values();
        let alpha = 0.625;
        let tau = TaskVector::new(&theta0, raw.clone(), "t", "m").unwrap();
        let scaled = TaskVector::new(&theta0, raw.iter().map(|v| v * alpha).collect(), "t", "m").unwrap();
        let x = [0.1, 0.2, 0.3];
        let a = LinearizedModel::new(&spec, &theta0, &tau).unwrap().forward(&x, alpha).unwrap();
        let b = LinearizedModel::new(&spec, &theta0, &scaled).unwrap().forward(&x, 1.0).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-14);
        }
        let jv = jvp(&spec, &theta0, &x, tau.values()).unwrap();
        let f0 = forward(&spec, &theta0, &x).unwrap();
        for k in 0..2 {
            assert!((a[k] - (f0[k] + alpha * jv[k])).abs() <= 1e-14);
        }
    }

    #[test]
    fn equal_ensemble_has_zero_error() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_params(&spec, &mut rng);
        let err = linearization_error(&spec, &[t.clone(), t.clone(), t], &[0.5, 0.5, -1.0]).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relu_hand_computed_example() {
        let spec = NetworkSpec::new(vec![2, 1], Activation::Relu, false).unwrap();
        let t1 = ParameterVector::new(&spec, vec![1.0, 0.0]).unwrap();
        let t2 = ParameterVector::new(&spec, vec![-1.0, 0.0]).unwrap();
        let err = linearization_error(&spec, &[t1, t2], &[1.0, 0.0]).unwrap();
        assert_eq!(err, 0.5);
    }

    #[test]
    fn needs_two_models() {
        let spec = NetworkSpec::new(vec![2, 1], Activation::Relu, false).unwrap();
        let t1 = ParameterVector::new(&spec, vec![1.0, 0.0]).unwrap();
        assert!(linearization_error(&spec, &[t1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn profile_examples() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts = vec![rand_params(&spec, &mut rng), rand_params(&spec, &mut rng), rand_params(&spec, &mut rng)];
        let x = [0.7, -0.4];
        let single = linearization_error_profile(&spec, &ts, Inputs::new(&x, 2).unwrap()).unwrap();
        let direct = linearization_error(&spec, &ts, &x).unwrap();
        assert_eq!(single.per_sample, vec![direct]);
        assert_eq!(single.summary.mean, direct);
        assert_eq!(single.summary.median, direct);

        let same = vec![ts[0].clone(), ts[0].clone()];
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.1 - 1.0).collect();
        let prof = linearization_error_profile(&spec, &same, Inputs::new(&xs, 2).unwrap()).unwrap();
        assert!(prof.per_sample.iter().all(|&v| v == 0.0));
        assert!(linearization_error_profile(&spec, &same, Inputs::new(&[], 2).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn single_layer_identity_nets_have_zero_error(seed in 0u64..300, t in 2usize..6, bias in any::<bool>()) {
                let spec = NetworkSpec::new(vec![4, 3], Activation::Identity, bias).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let thetas: Vec<_> = (0..t).map(|_| rand_params(&spec, &mut rng)).collect();
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                prop_assert!(linearization_error(&spec, &thetas, &x).unwrap() <= 1e-8);
            }

            #[test]
            fn error_is_nonnegative_and_permutation_invariant(seed in 0u64..300) {
                let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, true).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut thetas: Vec<_> = (0..4).map(|_| rand_params(&spec, &mut rng)).collect();
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let a = linearization_error(&spec, &thetas, &x).unwrap();
                thetas.reverse();
                thetas.swap(0, 2);
                let b = linearization_error(&spec, &thetas, &x).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            }
        }
    }
}
