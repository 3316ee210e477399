//! Finite-difference oracles, independent of the analytic propagation.
//!
//! The sensitivity oracle replays a filter with a *frozen* gain sequence
//! recorded from a nominal run, perturbing only the model parameters. This
//! matches the assumption built into the analytic recursion that the gain
//! does not depend on `p`; recomputing gains in the perturbed runs would
//! measure a different derivative.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter_discrete::{self, FilterState, WeightingScheme};
use crate::model::{self, ParameterVector, ParametricModel};

/// Default perturbation for [`fd_sensitivity`].
pub const SENSITIVITY_DELTA: f64 = 1e-6;

/// Gains and measurements from a nominal run, replayed at `p_perturbed`.
#[derive(Debug, Clone)]
pub struct FrozenGainReplay {
    pub gains: Vec<DMatrix<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub p_perturbed: ParameterVector,
}

impl FrozenGainReplay {
    pub fn new(gains: Vec<DMatrix<f64>>, measurements: Vec<DVector<f64>>, p_perturbed: ParameterVector) -> Result<Self> {
        if gains.len() != measurements.len() {
            return Err(Error::dim("frozen-gain replay sequences", gains.len(), measurements.len()));
        }
        Ok(Self { gains, measurements, p_perturbed })
    }

    /// Posterior estimates `x̂⁺_1 .. x̂⁺_N` starting from `x0` at epoch 0:
    /// `x̂⁻ = Φ(p)x̂⁺`, `x̂⁺ = x̂⁻ + K_k(z_k − H(p)x̂⁻)`.
    pub fn run(&self, model: &dyn ParametricModel, x0: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(self.gains.len());
        for (k, (gain, z)) in self.gains.iter().zip(&self.measurements).enumerate() {
            let prior = model::eval_phi(model, &self.p_perturbed, k)? * &x;
            let h = model::eval_h(model, &self.p_perturbed, k + 1)?;
            x = &prior + gain * (z - h * &prior);
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Central-difference sensitivities `∂x̂⁺_k/∂p` (n×ℓ per epoch) with the
/// gain sequence held fixed.
pub fn fd_sensitivity(
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    x0: &DVector<f64>,
    gains: &[DMatrix<f64>],
    measurements: &[DVector<f64>],
    delta: f64,
) -> Result<Vec<DMatrix<f64>>> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {delta}")));
    }
    let (n, l) = (model.state_dim(), model.param_dim());
    let mut out = vec![DMatrix::zeros(n, l); gains.len()];
    for i in 0..l {
        let plus = FrozenGainReplay::new(gains.to_vec(), measurements.to_vec(), p_hat.offset(i, delta))?.run(model, x0)?;
        let minus = FrozenGainReplay::new(gains.to_vec(), measurements.to_vec(), p_hat.offset(i, -delta))?.run(model, x0)?;
        for (k, (a, b)) in plus.iter().zip(&minus).enumerate() {
            out[k].set_column(i, &((a - b) / (2.0 * delta)));
        }
    }
    Ok(out)
}

/// Entrywise central-difference gradient of `cost` at `k`.
pub fn fd_cost_gradient<F>(cost: F, k: &DMatrix<f64>, eps: f64) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    let mut grad = DMatrix::zeros(k.nrows(), k.ncols());
    let mut probe = k.clone();
    for j in 0..k.ncols() {
        for i in 0..k.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + eps;
            let up = cost(&probe);
            probe[(i, j)] = orig - eps;
            let down = cost(&probe);
            probe[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * eps);
        }
    }
    grad
}

/// A filter run at the nominal parameters with its gains recorded.
#[derive(Debug, Clone)]
pub struct NominalRun {
    pub posteriors: Vec<FilterState>,
    pub gains: Vec<DMatrix<f64>>,
}

pub fn record_nominal_run(
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    initial: &FilterState,
    measurements: &[DVector<f64>],
    scheme: &WeightingScheme,
) -> Result<NominalRun> {
    let steps = filter_discrete::run(initial, measurements, model, p_hat, scheme)?;
    let (posteriors, gains) = steps.into_iter().map(|(s, r)| (s, r.gain)).unzip();
    Ok(NominalRun { posteriors, gains })
}

/// Worst relative error `max_k ‖S_fd,k − S_k‖_max / max_k ‖S_k‖_max` between
/// the analytic sensitivities of a nominal run and the frozen-gain oracle.
///
/// A run whose sensitivity is identically zero is compared in absolute terms.
pub fn sensitivity_agreement(
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    initial: &FilterState,
    measurements: &[DVector<f64>],
    scheme: &WeightingScheme,
    delta: f64,
) -> Result<f64> {
    let run = record_nominal_run(model, p_hat, initial, measurements, scheme)?;
    let fd = fd_sensitivity(model, p_hat, &initial.xhat, &run.gains, measurements, delta)?;
    // Normalized by the largest |S| seen over the run: for stable models S can decay
    // towards zero, where an epoch-local ratio only measures finite-difference roundoff.
    let scale = run.posteriors.iter().map(|post| post.s.amax()).fold(0.0, f64::max);
    let worst = run
        .posteriors
        .iter()
        .zip(&fd)
        .map(|(post, fd)| (&post.s - fd).amax())
        .fold(0.0, f64::max);
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_benchmark, AffineModel};

    #[test]
    fn replay_lengths_must_match() {
        let p = ParameterVector::zeros(1).unwrap();
        assert!(FrozenGainReplay::new(vec![DMatrix::zeros(1, 1)], vec![], p).is_err());
    }

    #[test]
    fn parameter_independent_model_has_zero_sensitivity() {
        let model = AffineModel::constant(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            2,
        )
        .unwrap();
        let p = ParameterVector::zeros(2).unwrap();
        let gains = vec![DMatrix::identity(2, 2) * 0.3; 4];
        let zs = vec![DVector::from_vec(vec![1.0, 2.0]); 4];
        for delta in [1e-3, 1e-6] {
            let s = fd_sensitivity(&model, &p, &DVector::from_vec(vec![5.0, -1.0]), &gains, &zs, delta).unwrap();
            assert!(s.iter().all(|m| m.amax() == 0.0));
        }
    }

    #[test]
    fn single_epoch_without_measurement_matches_jacobian_action() {
        let (model, setup) = make_benchmark();
        let gains = vec![DMatrix::zeros(2, 2)];
        let zs = vec![DVector::zeros(2)];
        let s = fd_sensitivity(&model, &setup.nominal, &setup.x0, &gains, &zs, 1e-6).unwrap();
        let expected = model::phi_jacobian_action(&model, &setup.nominal, &setup.x0, 0).unwrap();
        assert!((&s[0] - expected).amax() < 1e-8);
    }

    #[test]
    fn trace_rule_gradients() {
        let p = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let k = DMatrix::from_row_slice(2, 3, &[0.2, -0.4, 1.0, 0.7, 0.1, -0.3]);
        let g = fd_cost_gradient(|k| (k * &p).trace(), &k, 1e-5);
        assert!((g - p.transpose()).amax() < 1e-9);

        let sym = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.2, 0.1, -0.2, 3.0]);
        let g = fd_cost_gradient(|k| (k * &sym * k.transpose()).trace(), &k, 1e-5);
        assert!((g - &k * &sym * 2.0).amax() < 1e-8);
    }

    #[test]
    fn benchmark_sensitivities_match_oracle() {
        let (model, setup) = make_benchmark();
        let init = FilterState::new(setup.x0.clone(), setup.p0_cov.clone(), 2);
        let zs: Vec<_> = (0..50)
            .map(|k| DVector::from_vec(vec![(k as f64 * 0.37).sin() * 4.0, (k as f64 * 0.91).cos() * 6.0]))
            .collect();
        let scheme = WeightingScheme::Adkf { w_a: DMatrix::from_row_slice(2, 2, &[0.003, 0.0, 0.0, 0.075]) };
        let err = sensitivity_agreement(&model, &setup.nominal, &init, &zs, &scheme, SENSITIVITY_DELTA).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }
}
