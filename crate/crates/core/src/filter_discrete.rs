//! Discrete-time desensitized Kalman filtering.
//!
//! The recursion carries the usual estimate and covariance plus the n×ℓ
//! sensitivity matrix `S = ∂x̂/∂p`. Three gain strategies are supported:
//!
//! - [`WeightingScheme::Conventional`]: minimum-variance Kalman gain,
//!   `K = P⁻Hᵀ(HP⁻Hᵀ + R)⁻¹`.
//! - [`WeightingScheme::Adkf`]: minimizes `Tr(P⁺) + Tr(S⁺ W_a S⁺ᵀ)` with a
//!   single ℓ×ℓ weight, which has the closed form
//!   `K = (P⁻Hᵀ + S⁻W_aγᵀ)(HP⁻Hᵀ + R + γW_aγᵀ)⁻¹`.
//! - [`WeightingScheme::Ksdkf`]: minimizes `Tr(P⁺) + Σ σᵢ⁺ᵀ Wᵢ σᵢ⁺` with one
//!   n×n weight per parameter; the gain solves a linear matrix equation,
//!   handled here by Kronecker vectorization.
//!
//! Gains are treated as parameter-independent when propagating `S`. The
//! covariance update always uses the Joseph form because the desensitized
//! gains are not minimum-variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};
use crate::model::{self, ParameterVector, ParametricModel};

/// Tolerance for the symmetric-PSD check on weighting matrices.
const WEIGHT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub xhat: DVector<f64>,
    pub p_cov: DMatrix<f64>,
    /// n×ℓ sensitivity; column `i` is `∂x̂/∂p_i`.
    pub s: DMatrix<f64>,
    pub epoch: usize,
}

impl FilterState {
    /// Initial state at epoch 0 with zero sensitivity (the initial estimate
    /// does not depend on the parameters).
    pub fn new(xhat: DVector<f64>, p_cov: DMatrix<f64>, n_params: usize) -> Self {
        let n = xhat.len();
        Self {
            xhat,
            p_cov,
            s: DMatrix::zeros(n, n_params),
            epoch: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.xhat.len()
    }

    fn check_against(&self, model: &dyn ParametricModel) -> Result<()> {
        let (n, l) = (model.state_dim(), model.param_dim());
        if self.xhat.len() != n {
            return Err(Error::dim("filter state estimate", n, self.xhat.len()));
        }
        if self.p_cov.shape() != (n, n) {
            return Err(Error::dim("filter covariance", format!("{n}x{n}"), format!("{:?}", self.p_cov.shape())));
        }
        if self.s.shape() != (n, l) {
            return Err(Error::dim("sensitivity matrix", format!("{n}x{l}"), format!("{:?}", self.s.shape())));
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        linalg::all_finite_vec(&self.xhat) && linalg::all_finite(&self.p_cov) && linalg::all_finite(&self.s)
    }
}

/// Gain strategy and its sensitivity weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightingScheme {
    Conventional,
    /// Analytical-gain desensitized filter with an ℓ×ℓ parameter weight.
    Adkf {
        #[serde(with = "serde_rows")]
        w_a: DMatrix<f64>,
    },
    /// Linear-solve desensitized filter with one n×n weight per parameter.
    Ksdkf {
        #[serde(with = "serde_rows::list")]
        w_list: Vec<DMatrix<f64>>,
    },
}

impl WeightingScheme {
    /// Checks shapes against the model dimensions and that every weight is
    /// symmetric positive semidefinite.
    pub fn validate(&self, n: usize, n_params: usize) -> Result<()> {
        match self {
            WeightingScheme::Conventional => Ok(()),
            WeightingScheme::Adkf { w_a } => {
                if w_a.shape() != (n_params, n_params) {
                    return Err(Error::InvalidWeighting(format!(
                        "W_a must be {n_params}x{n_params}, got {}x{}",
                        w_a.nrows(),
                        w_a.ncols()
                    )));
                }
                if !linalg::is_symmetric_psd(w_a, WEIGHT_TOL) {
                    return Err(Error::InvalidWeighting("W_a is not symmetric positive semidefinite".into()));
                }
                Ok(())
            }
            WeightingScheme::Ksdkf { w_list } => {
                if w_list.len() != n_params {
                    return Err(Error::InvalidWeighting(format!(
                        "expected {n_params} per-parameter weights, got {}",
                        w_list.len()
                    )));
                }
                for (i, w) in w_list.iter().enumerate() {
                    if w.shape() != (n, n) {
                        return Err(Error::InvalidWeighting(format!(
                            "W_{} must be {n}x{n}, got {}x{}",
                            i + 1,
                            w.nrows(),
                            w.ncols()
                        )));
                    }
                    if !linalg::is_symmetric_psd(w, WEIGHT_TOL) {
                        return Err(Error::InvalidWeighting(format!(
                            "W_{} is not symmetric positive semidefinite",
                            i + 1
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WeightingScheme::Conventional => "conventional",
            WeightingScheme::Adkf { .. } => "adkf",
            WeightingScheme::Ksdkf { .. } => "ksdkf",
        }
    }
}

/// Diagnostics for one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub gain: DMatrix<f64>,
    pub innovation: DVector<f64>,
    pub gamma: DMatrix<f64>,
    /// `trace_p + cost_penalty`.
    pub cost_total: f64,
    /// Scheme-specific sensitivity penalty; zero for the conventional filter.
    pub cost_penalty: f64,
    pub trace_p: f64,
}

fn check_finite(state: FilterState, what: &'static str) -> Result<FilterState> {
    if state.is_finite() {
        Ok(state)
    } else {
        Err(Error::NumericFailure { epoch: state.epoch, what })
    }
}

/// Prediction: `x̂⁻ = Φx̂⁺`, `P⁻ = ΦP⁺Φᵀ + Q`, `S⁻ = ΦS⁺ + (∂Φ/∂p)x̂⁺`.
///
/// Uses the model at the current epoch and advances the epoch by one.
pub fn time_update(state: &FilterState, model: &dyn ParametricModel, p_hat: &ParameterVector) -> Result<FilterState> {
    state.check_against(model)?;
    let phi = model::eval_phi(model, p_hat, state.epoch)?;
    let psi = model::phi_jacobian_action(model, p_hat, &state.xhat, state.epoch)?;
    let p_cov = &phi * &state.p_cov * phi.transpose() + model.q();
    let prior = FilterState {
        xhat: &phi * &state.xhat,
        p_cov: linalg::symmetrize(&p_cov),
        s: &phi * &state.s + psi,
        epoch: state.epoch + 1,
    };
    check_finite(prior, "non-finite prior after time update")
}

/// `γ = H S⁻ + (∂H/∂p) x̂⁻` (m×ℓ). Column `i` is the per-parameter `γᵢ`.
pub fn innovation_matrix(
    prior: &FilterState,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
) -> Result<DMatrix<f64>> {
    prior.check_against(model)?;
    let h = model::eval_h(model, p_hat, prior.epoch)?;
    let hp = model::h_jacobian_action(model, p_hat, &prior.xhat, prior.epoch)?;
    Ok(h * &prior.s + hp)
}

fn innovation_covariance(prior: &FilterState, h: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    h * &prior.p_cov * h.transpose() + r
}

fn check_gamma(gamma: &DMatrix<f64>, model: &dyn ParametricModel) -> Result<()> {
    let shape = (model.meas_dim(), model.param_dim());
    if gamma.shape() != shape {
        return Err(Error::dim("γ matrix", format!("{}x{}", shape.0, shape.1), format!("{:?}", gamma.shape())));
    }
    Ok(())
}

/// Minimum-variance Kalman gain.
pub fn gain_kf(prior: &FilterState, model: &dyn ParametricModel, p_hat: &ParameterVector) -> Result<DMatrix<f64>> {
    prior.check_against(model)?;
    let h = model::eval_h(model, p_hat, prior.epoch)?;
    let xi = innovation_covariance(prior, &h, model.r());
    let rhs = &prior.p_cov * h.transpose();
    linalg::solve_right(&rhs, &xi).map_err(|condition| Error::SingularInnovation { epoch: prior.epoch, condition })
}

/// Closed-form desensitized gain
/// `K = (P⁻Hᵀ + S⁻W_aγᵀ)(HP⁻Hᵀ + R + γW_aγᵀ)⁻¹`.
pub fn gain_adkf(
    prior: &FilterState,
    gamma: &DMatrix<f64>,
    w_a: &DMatrix<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
) -> Result<DMatrix<f64>> {
    prior.check_against(model)?;
    check_gamma(gamma, model)?;
    let l = model.param_dim();
    if w_a.shape() != (l, l) {
        return Err(Error::dim("W_a", format!("{l}x{l}"), format!("{:?}", w_a.shape())));
    }
    let h = model::eval_h(model, p_hat, prior.epoch)?;
    let gw = gamma * w_a;
    let denom = innovation_covariance(prior, &h, model.r()) + &gw * gamma.transpose();
    let rhs = &prior.p_cov * h.transpose() + &prior.s * w_a * gamma.transpose();
    linalg::solve_right(&rhs, &denom).map_err(|condition| Error::SingularInnovation { epoch: prior.epoch, condition })
}

/// Right-hand side `P⁻Hᵀ + Σ Wᵢσᵢ⁻γᵢᵀ` and system matrix
/// `Ξᵀ ⊗ I + Σ (γᵢγᵢᵀ)ᵀ ⊗ Wᵢ` of the vectorized linear-solve gain equation.
fn ksdkf_system(
    prior: &FilterState,
    gamma: &DMatrix<f64>,
    w_list: &[DMatrix<f64>],
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = prior.state_dim();
    let xi = innovation_covariance(prior, h, r);
    let mut rhs = &prior.p_cov * h.transpose();
    let mut system = xi.transpose().kronecker(&DMatrix::<f64>::identity(n, n));
    for (i, w) in w_list.iter().enumerate() {
        let g = gamma.column(i);
        let ggt = &g * g.transpose();
        system += ggt.transpose().kronecker(w);
        rhs += w * prior.s.column(i) * g.transpose();
    }
    (xi, rhs, system)
}

fn check_w_list(w_list: &[DMatrix<f64>], model: &dyn ParametricModel) -> Result<()> {
    let (n, l) = (model.state_dim(), model.param_dim());
    if w_list.len() != l {
        return Err(Error::dim("per-parameter weights", l, w_list.len()));
    }
    if let Some(w) = w_list.iter().find(|w| w.shape() != (n, n)) {
        return Err(Error::dim("per-parameter weight", format!("{n}x{n}"), format!("{:?}", w.shape())));
    }
    Ok(())
}

/// Linear-solve desensitized gain: the `K` satisfying
/// `KΞ + Σ WᵢKγᵢγᵢᵀ = P⁻Hᵀ + Σ Wᵢσᵢ⁻γᵢᵀ`, solved as a dense (nm)×(nm)
/// system in `vec(K)`.
pub fn gain_ksdkf(
    prior: &FilterState,
    gamma: &DMatrix<f64>,
    w_list: &[DMatrix<f64>],
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
) -> Result<DMatrix<f64>> {
    prior.check_against(model)?;
    check_gamma(gamma, model)?;
    check_w_list(w_list, model)?;
    let h = model::eval_h(model, p_hat, prior.epoch)?;
    let (_, rhs, system) = ksdkf_system(prior, gamma, w_list, &h, model.r());
    let vec_k = linalg::solve(&system, &linalg::vec(&rhs))
        .map_err(|condition| Error::SingularEquation { epoch: prior.epoch, condition })?;
    Ok(linalg::unvec(&vec_k, model.state_dim(), model.meas_dim()))
}

/// Relative Frobenius residual of `K` in the linear-solve gain equation:
/// `‖KΞ + Σ WᵢKγᵢγᵢᵀ − RHS‖_F / ‖RHS‖_F`.
pub fn ksdkf_residual(
    prior: &FilterState,
    gamma: &DMatrix<f64>,
    w_list: &[DMatrix<f64>],
    gain: &DMatrix<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
) -> Result<f64> {
    prior.check_against(model)?;
    check_gamma(gamma, model)?;
    check_w_list(w_list, model)?;
    let h = model::eval_h(model, p_hat, prior.epoch)?;
    let (xi, rhs, _) = ksdkf_system(prior, gamma, w_list, &h, model.r());
    let mut lhs = gain * xi;
    for (i, w) in w_list.iter().enumerate() {
        let g = gamma.column(i);
        lhs += w * gain * &g * g.transpose();
    }
    let denom = rhs.norm();
    let resid = (lhs - &rhs).norm();
    Ok(if denom > 0.0 { resid / denom } else { resid })
}

/// Gain for `scheme`, given the prior and its `γ`.
pub fn scheme_gain(
    prior: &FilterState,
    gamma: &DMatrix<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
) -> Result<DMatrix<f64>> {
    match scheme {
        WeightingScheme::Conventional => gain_kf(prior, model, p_hat),
        WeightingScheme::Adkf { w_a } => gain_adkf(prior, gamma, w_a, model, p_hat),
        WeightingScheme::Ksdkf { w_list } => gain_ksdkf(prior, gamma, w_list, model, p_hat),
    }
}

/// `(Tr(P⁺) + Tr(S⁺W_aS⁺ᵀ), Tr(S⁺W_aS⁺ᵀ))`.
pub fn cost_adkf(posterior: &FilterState, w_a: &DMatrix<f64>) -> (f64, f64) {
    let penalty = (&posterior.s * w_a * posterior.s.transpose()).trace();
    (posterior.p_cov.trace() + penalty, penalty)
}

/// `(Tr(P⁺) + Σ σᵢ⁺ᵀWᵢσᵢ⁺, Σ σᵢ⁺ᵀWᵢσᵢ⁺)` over the columns of `S⁺`.
pub fn cost_ksdkf(posterior: &FilterState, w_list: &[DMatrix<f64>]) -> (f64, f64) {
    let penalty: f64 = w_list
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let sigma = posterior.s.column(i);
            (sigma.transpose() * w * sigma)[(0, 0)]
        })
        .sum();
    (posterior.p_cov.trace() + penalty, penalty)
}

/// Scheme-specific `(total, penalty)`; the conventional filter has no penalty.
pub fn scheme_cost(posterior: &FilterState, scheme: &WeightingScheme) -> (f64, f64) {
    match scheme {
        WeightingScheme::Conventional => (posterior.p_cov.trace(), 0.0),
        WeightingScheme::Adkf { w_a } => cost_adkf(posterior, w_a),
        WeightingScheme::Ksdkf { w_list } => cost_ksdkf(posterior, w_list),
    }
}

/// Joseph-form covariance `(I−KH)P⁻(I−KH)ᵀ + KRKᵀ`, symmetrized.
pub fn joseph_update(p_prior: &DMatrix<f64>, gain: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p_prior.nrows();
    let a = DMatrix::<f64>::identity(n, n) - gain * h;
    let p = &a * p_prior * a.transpose() + gain * r * gain.transpose();
    linalg::symmetrize(&p)
}

/// Applies gain `gain` to measurement `z`:
/// `x̂⁺ = x̂⁻ + K(z − Hx̂⁻)`, Joseph-form `P⁺`, `S⁺ = S⁻ − Kγ`.
pub fn measurement_update(
    prior: &FilterState,
    gain: &DMatrix<f64>,
    z: &DVector<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
) -> Result<(FilterState, StepRecord)> {
    prior.check_against(model)?;
    let (n, m) = (model.state_dim(), model.meas_dim());
    if gain.shape() != (n, m) {
        return Err(Error::dim("gain", format!("{n}x{m}"), format!("{:?}", gain.shape())));
    }
    if z.len() != m {
        return Err(Error::dim("measurement", m, z.len()));
    }
    if !linalg::all_finite(gain) {
        return Err(Error::NumericFailure { epoch: prior.epoch, what: "non-finite gain" });
    }
    let h = model::eval_h(model, p_hat, prior.epoch)?;
    let gamma = innovation_matrix(prior, model, p_hat)?;
    let innovation = z - &h * &prior.xhat;
    let posterior = FilterState {
        xhat: &prior.xhat + gain * &innovation,
        p_cov: joseph_update(&prior.p_cov, gain, &h, model.r()),
        s: &prior.s - gain * &gamma,
        epoch: prior.epoch,
    };
    let posterior = check_finite(posterior, "non-finite posterior after measurement update")?;
    let (cost_total, cost_penalty) = scheme_cost(&posterior, scheme);
    let record = StepRecord {
        gain: gain.clone(),
        innovation,
        gamma,
        cost_total,
        cost_penalty,
        trace_p: posterior.p_cov.trace(),
    };
    Ok((posterior, record))
}

/// Scheme cost after updating `prior` with an arbitrary gain. The
/// measurement value does not enter the cost.
pub fn cost_after_gain(
    prior: &FilterState,
    gain: &DMatrix<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
) -> Result<f64> {
    let z = DVector::zeros(model.meas_dim());
    Ok(measurement_update(prior, gain, &z, model, p_hat, scheme)?.1.cost_total)
}

/// One predict–update cycle.
pub fn step(
    state: &FilterState,
    z: &DVector<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
) -> Result<(FilterState, StepRecord)> {
    let prior = time_update(state, model, p_hat)?;
    let gamma = innovation_matrix(&prior, model, p_hat)?;
    let gain = scheme_gain(&prior, &gamma, model, p_hat, scheme)?;
    measurement_update(&prior, &gain, z, model, p_hat, scheme)
}

/// Runs [`step`] over a measurement sequence, returning the posteriors and
/// records for epochs `1..=measurements.len()`.
pub fn run(
    initial: &FilterState,
    measurements: &[DVector<f64>],
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
) -> Result<Vec<(FilterState, StepRecord)>> {
    let mut out = Vec::with_capacity(measurements.len());
    let mut state = initial.clone();
    for z in measurements {
        let (next, record) = step(&state, z, model, p_hat, scheme)?;
        state = next.clone();
        out.push((next, record));
    }
    Ok(out)
}
