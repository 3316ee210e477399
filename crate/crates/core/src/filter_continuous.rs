//! Continuous-time desensitized filtering.
//!
//! The estimate, covariance and sensitivity obey coupled ODEs
//!
//! ```text
//! dx̂/dt = Φx̂ + K(z − Hx̂)
//! dP/dt = (Φ − KH)P + P(Φ − KH)ᵀ + Q + KRKᵀ
//! dS/dt = ΦS + (∂Φ/∂p)x̂ − Kγ,      γ = HS + (∂H/∂p)x̂
//! ```
//!
//! with the gain re-evaluated from the current state at every RK4 stage.
//! Measurements are held constant across a step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter_discrete::WeightingScheme;
use crate::linalg;
use crate::model::{self, ParameterVector, ParametricModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousFilterState {
    pub t: f64,
    pub xhat: DVector<f64>,
    pub p_cov: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl ContinuousFilterState {
    /// State at `t = 0` with zero sensitivity.
    pub fn new(xhat: DVector<f64>, p_cov: DMatrix<f64>, n_params: usize) -> Self {
        let n = xhat.len();
        Self {
            t: 0.0,
            xhat,
            p_cov,
            s: DMatrix::zeros(n, n_params),
        }
    }

    fn check_against(&self, model: &dyn ParametricModel) -> Result<()> {
        let (n, l) = (model.state_dim(), model.param_dim());
        if self.xhat.len() != n {
            return Err(Error::dim("continuous state estimate", n, self.xhat.len()));
        }
        if self.p_cov.shape() != (n, n) {
            return Err(Error::dim("continuous covariance", format!("{n}x{n}"), format!("{:?}", self.p_cov.shape())));
        }
        if self.s.shape() != (n, l) {
            return Err(Error::dim("continuous sensitivity", format!("{n}x{l}"), format!("{:?}", self.s.shape())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMethod {
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub method: IntegrationMethod,
}

impl IntegratorConfig {
    pub fn rk4(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("integration step must be positive, got {dt}")));
        }
        Ok(Self { dt, method: IntegrationMethod::Rk4 })
    }
}

fn solve_noise(rhs: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::solve_right(rhs, r).map_err(|condition| Error::SingularNoise { condition })
}

/// Kalman–Bucy gain `PHᵀR⁻¹`.
pub fn continuous_gain_kb(p_cov: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    solve_noise(&(p_cov * h.transpose()), r)
}

/// `K = (PHᵀ + S W_a γᵀ) R⁻¹`.
pub fn continuous_gain_adkf(
    p_cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    w_a: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let rhs = p_cov * h.transpose() + s * w_a * gamma.transpose();
    solve_noise(&rhs, r)
}

/// `K = (PHᵀ + Σ Wᵢσᵢγᵢᵀ) R⁻¹` with `σᵢ`, `γᵢ` the columns of `s`, `gamma`.
pub fn continuous_gain_ksdkf(
    p_cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    w_list: &[DMatrix<f64>],
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if w_list.len() != s.ncols() || gamma.ncols() != s.ncols() {
        return Err(Error::dim("per-parameter weights", s.ncols(), w_list.len()));
    }
    let mut rhs = p_cov * h.transpose();
    for (i, w) in w_list.iter().enumerate() {
        rhs += w * s.column(i) * gamma.column(i).transpose();
    }
    solve_noise(&rhs, r)
}

/// Right-hand side of the coupled filter ODEs at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub dxhat: DVector<f64>,
    pub dp: DMatrix<f64>,
    pub ds: DMatrix<f64>,
    /// Gain used to form the derivative.
    pub gain: DMatrix<f64>,
}

pub fn derivatives(
    state: &ContinuousFilterState,
    z: &DVector<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
) -> Result<StateDerivative> {
    state.check_against(model)?;
    if z.len() != model.meas_dim() {
        return Err(Error::dim("measurement", model.meas_dim(), z.len()));
    }
    let phi = model::eval_phi(model, p_hat, 0)?;
    let h = model::eval_h(model, p_hat, 0)?;
    let psi = model::phi_jacobian_action(model, p_hat, &state.xhat, 0)?;
    let gamma = &h * &state.s + model::h_jacobian_action(model, p_hat, &state.xhat, 0)?;
    let r = model.r();
    let gain = match scheme {
        WeightingScheme::Conventional => continuous_gain_kb(&state.p_cov, &h, r)?,
        WeightingScheme::Adkf { w_a } => continuous_gain_adkf(&state.p_cov, &h, &state.s, &gamma, w_a, r)?,
        WeightingScheme::Ksdkf { w_list } => continuous_gain_ksdkf(&state.p_cov, &h, &state.s, &gamma, w_list, r)?,
    };
    let closed = &phi - &gain * &h;
    let dp = &closed * &state.p_cov + &state.p_cov * closed.transpose() + model.q() + &gain * r * gain.transpose();
    Ok(StateDerivative {
        dxhat: &phi * &state.xhat + &gain * (z - &h * &state.xhat),
        dp,
        ds: &phi * &state.s + psi - &gain * gamma,
        gain,
    })
}

fn advance(state: &ContinuousFilterState, d: &StateDerivative, h: f64) -> ContinuousFilterState {
    ContinuousFilterState {
        t: state.t + h,
        xhat: &state.xhat + &d.dxhat * h,
        p_cov: &state.p_cov + &d.dp * h,
        s: &state.s + &d.ds * h,
    }
}

/// One classical RK4 step of length `cfg.dt` with `z` held constant.
pub fn integrate_step(
    state: &ContinuousFilterState,
    z: &DVector<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
    cfg: &IntegratorConfig,
) -> Result<ContinuousFilterState> {
    let IntegrationMethod::Rk4 = cfg.method;
    let dt = cfg.dt;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("integration step must be positive, got {dt}")));
    }
    let k1 = derivatives(state, z, model, p_hat, scheme)?;
    let k2 = derivatives(&advance(state, &k1, dt / 2.0), z, model, p_hat, scheme)?;
    let k3 = derivatives(&advance(state, &k2, dt / 2.0), z, model, p_hat, scheme)?;
    let k4 = derivatives(&advance(state, &k3, dt), z, model, p_hat, scheme)?;
    let w = dt / 6.0;
    let next = ContinuousFilterState {
        t: state.t + dt,
        xhat: &state.xhat + (&k1.dxhat + (&k2.dxhat + &k3.dxhat) * 2.0 + &k4.dxhat) * w,
        p_cov: linalg::symmetrize(&(&state.p_cov + (&k1.dp + (&k2.dp + &k3.dp) * 2.0 + &k4.dp) * w)),
        s: &state.s + (&k1.ds + (&k2.ds + &k3.ds) * 2.0 + &k4.ds) * w,
    };
    if !(linalg::all_finite_vec(&next.xhat) && linalg::all_finite(&next.p_cov) && linalg::all_finite(&next.s)) {
        return Err(Error::NumericFailureAt { time: next.t, what: "non-finite continuous filter state" });
    }
    Ok(next)
}

/// Integrates `steps` RK4 steps with a constant measurement `z`.
pub fn integrate(
    state: &ContinuousFilterState,
    z: &DVector<f64>,
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    scheme: &WeightingScheme,
    cfg: &IntegratorConfig,
    steps: usize,
) -> Result<ContinuousFilterState> {
    let mut s = state.clone();
    for _ in 0..steps {
        s = integrate_step(&s, z, model, p_hat, scheme, cfg)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AffineModel;

    fn scalar_riccati_model() -> AffineModel {
        // ẋ = −x, z = x, Q = R = 1
        AffineModel::constant(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            1,
        )
        .unwrap()
    }

    fn p0() -> ParameterVector {
        ParameterVector::zeros(1).unwrap()
    }

    #[test]
    fn adkf_gain_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        let k = continuous_gain_adkf(&i, &i, &DMatrix::zeros(2, 1), &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 1), &i).unwrap();
        assert_eq!(k, i);

        let one = DMatrix::from_element(1, 1, 1.0);
        let k = continuous_gain_adkf(&one, &one, &one, &one, &one, &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-15);
        let k = continuous_gain_ksdkf(&one, &one, &one, &one, &[one.clone()], &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_kalman_bucy_gain() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let r = DMatrix::from_element(1, 1, 0.7);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let gamma = &h * &s;
        let kb = continuous_gain_kb(&p, &h, &r).unwrap();
        let ks = continuous_gain_ksdkf(&p, &h, &s, &gamma, &[DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)], &r).unwrap();
        let ka = continuous_gain_adkf(&p, &h, &s, &gamma, &DMatrix::zeros(2, 2), &r).unwrap();
        assert_eq!(kb, ks);
        assert_eq!(kb, ka);
        let zero_s = DMatrix::zeros(2, 2);
        let ka = continuous_gain_adkf(&p, &h, &zero_s, &(&h * &zero_s), &DMatrix::identity(2, 2), &r).unwrap();
        assert_eq!(kb, ka);
    }

    #[test]
    fn singular_noise_is_rejected() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::zeros(1, 1);
        assert!(matches!(continuous_gain_kb(&one, &one, &r), Err(Error::SingularNoise { .. })));
    }

    #[test]
    fn equilibrium_has_zero_derivative() {
        let model = AffineModel::constant(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            1,
        )
        .unwrap();
        let state = ContinuousFilterState::new(DVector::from_vec(vec![1.0, -3.0]), DMatrix::identity(2, 2), 1);
        let z = DVector::from_element(1, 5.0);
        let d = derivatives(&state, &z, &model, &p0(), &WeightingScheme::Conventional).unwrap();
        assert_eq!(d.dxhat, DVector::zeros(2));
        assert_eq!(d.dp, DMatrix::zeros(2, 2));
        assert_eq!(d.ds, DMatrix::zeros(2, 1));
        let next = integrate_step(&state, &z, &model, &p0(), &WeightingScheme::Conventional, &IntegratorConfig::rk4(0.1).unwrap()).unwrap();
        assert_eq!(next.xhat, state.xhat);
        assert_eq!(next.p_cov, state.p_cov);
        assert_eq!(next.s, state.s);
        assert!((next.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn parameter_independent_sensitivity_stays_zero() {
        let model = scalar_riccati_model();
        let mut state = ContinuousFilterState::new(DVector::from_element(1, 3.0), DMatrix::identity(1, 1), 1);
        let cfg = IntegratorConfig::rk4(0.05).unwrap();
        let scheme = WeightingScheme::Adkf { w_a: DMatrix::identity(1, 1) };
        for _ in 0..100 {
            state = integrate_step(&state, &DVector::from_element(1, 0.4), &model, &p0(), &scheme, &cfg).unwrap();
            assert_eq!(state.s, DMatrix::zeros(1, 1));
        }
    }

    #[test]
    fn scalar_riccati_reaches_steady_state() {
        let model = scalar_riccati_model();
        let state = ContinuousFilterState::new(DVector::zeros(1), DMatrix::zeros(1, 1), 1);
        let cfg = IntegratorConfig::rk4(0.01).unwrap();
        let end = integrate(&state, &DVector::zeros(1), &model, &p0(), &WeightingScheme::Conventional, &cfg, 2000).unwrap();
        assert!((end.p_cov[(0, 0)] - (2f64.sqrt() - 1.0)).abs() <= 1e-6);
    }

    #[test]
    fn invalid_step_rejected() {
        assert!(IntegratorConfig::rk4(0.0).is_err());
        assert!(IntegratorConfig::rk4(-1.0).is_err());
        assert!(IntegratorConfig::rk4(f64::NAN).is_err());
    }
}
