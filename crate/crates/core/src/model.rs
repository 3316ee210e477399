//! Parametric linear system models.
//!
//! A model maps an uncertain parameter vector `p` (length ℓ) to the state
//! transition matrix `Φ(p)` (n×n) and measurement matrix `H(p)` (m×n), and
//! supplies their partial derivatives with respect to each `p_i`. The same
//! trait serves discrete-time filters (where `Φ` is the one-step transition)
//! and continuous-time filters (where `Φ` is the ODE system matrix and `Q`,
//! `R` are spectral densities).
//!
//! Every method takes an epoch index so time-varying models can be added
//! later; the models in this crate are time-invariant and ignore it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};

/// Tolerance used when validating that noise covariances are symmetric PSD.
const COVARIANCE_TOL: f64 = 1e-10;

/// Uncertain model parameters. Non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(DVector<f64>);

impl ParameterVector {
    pub fn new(values: impl Into<Vec<f64>>) -> Result<Self> {
        let values = values.into();
        if values.is_empty() {
            return Err(Error::InvalidParameter("parameter vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("entry {i} is not finite")));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Copy with `delta` added to entry `i`.
    pub fn offset(&self, i: usize, delta: f64) -> Self {
        let mut v = self.0.clone();
        v[i] += delta;
        Self(v)
    }
}

/// A linear system whose matrices depend on uncertain parameters.
///
/// Implementations must be immutable after construction; the Monte-Carlo
/// harness shares one model across worker threads.
pub trait ParametricModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    fn phi(&self, p: &ParameterVector, epoch: usize) -> DMatrix<f64>;
    fn h(&self, p: &ParameterVector, epoch: usize) -> DMatrix<f64>;
    /// `∂Φ/∂p_i` at `p`.
    fn dphi(&self, p: &ParameterVector, index: usize, epoch: usize) -> DMatrix<f64>;
    /// `∂H/∂p_i` at `p`.
    fn dh(&self, p: &ParameterVector, index: usize, epoch: usize) -> DMatrix<f64>;

    fn q(&self) -> &DMatrix<f64>;
    fn r(&self) -> &DMatrix<f64>;
}

fn check_params(model: &dyn ParametricModel, p: &ParameterVector) -> Result<()> {
    if p.len() != model.param_dim() {
        return Err(Error::dim("parameter vector", model.param_dim(), p.len()));
    }
    Ok(())
}

fn check_state(model: &dyn ParametricModel, x: &DVector<f64>) -> Result<()> {
    if x.len() != model.state_dim() {
        return Err(Error::dim("state vector", model.state_dim(), x.len()));
    }
    Ok(())
}

/// `Φ(p)` with dimension and finiteness checks.
pub fn eval_phi(model: &dyn ParametricModel, p: &ParameterVector, epoch: usize) -> Result<DMatrix<f64>> {
    check_params(model, p)?;
    let phi = model.phi(p, epoch);
    if !linalg::all_finite(&phi) {
        return Err(Error::NumericFailure { epoch, what: "non-finite transition matrix" });
    }
    Ok(phi)
}

/// `H(p)` with dimension and finiteness checks.
pub fn eval_h(model: &dyn ParametricModel, p: &ParameterVector, epoch: usize) -> Result<DMatrix<f64>> {
    check_params(model, p)?;
    let h = model.h(p, epoch);
    if !linalg::all_finite(&h) {
        return Err(Error::NumericFailure { epoch, what: "non-finite measurement matrix" });
    }
    Ok(h)
}

/// n×ℓ matrix whose column `i` is `(∂Φ/∂p_i) x`.
pub fn phi_jacobian_action(
    model: &dyn ParametricModel,
    p: &ParameterVector,
    x: &DVector<f64>,
    epoch: usize,
) -> Result<DMatrix<f64>> {
    check_params(model, p)?;
    check_state(model, x)?;
    let mut out = DMatrix::zeros(model.state_dim(), model.param_dim());
    for i in 0..model.param_dim() {
        out.set_column(i, &(model.dphi(p, i, epoch) * x));
    }
    Ok(out)
}

/// m×ℓ matrix whose column `i` is `(∂H/∂p_i) x`.
pub fn h_jacobian_action(
    model: &dyn ParametricModel,
    p: &ParameterVector,
    x: &DVector<f64>,
    epoch: usize,
) -> Result<DMatrix<f64>> {
    check_params(model, p)?;
    check_state(model, x)?;
    let mut out = DMatrix::zeros(model.meas_dim(), model.param_dim());
    for i in 0..model.param_dim() {
        out.set_column(i, &(model.dh(p, i, epoch) * x));
    }
    Ok(out)
}

/// Worst normalized mismatch between the analytic derivative stacks and
/// central finite differences of `Φ` and `H`:
/// `max_i ‖d − fd‖_max / (1 + ‖d‖_max)`.
pub fn derivative_consistency(
    model: &dyn ParametricModel,
    p: &ParameterVector,
    epoch: usize,
    step: f64,
) -> Result<f64> {
    check_params(model, p)?;
    let mut worst = 0.0_f64;
    for i in 0..model.param_dim() {
        let (plus, minus) = (p.offset(i, step), p.offset(i, -step));
        let fd_phi = (model.phi(&plus, epoch) - model.phi(&minus, epoch)) / (2.0 * step);
        let fd_h = (model.h(&plus, epoch) - model.h(&minus, epoch)) / (2.0 * step);
        let dphi = model.dphi(p, i, epoch);
        let dh = model.dh(p, i, epoch);
        worst = worst.max((&dphi - fd_phi).amax() / (1.0 + dphi.amax()));
        worst = worst.max((&dh - fd_h).amax() / (1.0 + dh.amax()));
    }
    Ok(worst)
}

fn validate_noise(q: &DMatrix<f64>, r: &DMatrix<f64>, n: usize, m: usize) -> Result<()> {
    if q.shape() != (n, n) {
        return Err(Error::dim("process noise Q", format!("{n}x{n}"), format!("{}x{}", q.nrows(), q.ncols())));
    }
    if r.shape() != (m, m) {
        return Err(Error::dim("measurement noise R", format!("{m}x{m}"), format!("{}x{}", r.nrows(), r.ncols())));
    }
    if !linalg::is_symmetric_psd(q, COVARIANCE_TOL) {
        return Err(Error::InvalidModel("Q must be symmetric positive semidefinite".into()));
    }
    if !linalg::is_symmetric_psd(r, COVARIANCE_TOL) {
        return Err(Error::InvalidModel("R must be symmetric positive semidefinite".into()));
    }
    Ok(())
}

/// Model affine in the parameters:
/// `Φ(p) = Φ₀ + Σ p_i Φ_i`, `H(p) = H₀ + Σ p_i H_i`.
///
/// The derivative stacks are the constant matrices `Φ_i`, `H_i`. This covers
/// the built-in benchmark and models loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffineModelSpec", into = "AffineModelSpec")]
pub struct AffineModel {
    phi0: DMatrix<f64>,
    dphi: Vec<DMatrix<f64>>,
    h0: DMatrix<f64>,
    dh: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl AffineModel {
    pub fn new(
        phi0: DMatrix<f64>,
        dphi: Vec<DMatrix<f64>>,
        h0: DMatrix<f64>,
        dh: Vec<DMatrix<f64>>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let n = phi0.nrows();
        if n == 0 || !phi0.is_square() {
            return Err(Error::InvalidModel("Φ₀ must be square and non-empty".into()));
        }
        let m = h0.nrows();
        if m == 0 || h0.ncols() != n {
            return Err(Error::dim("measurement matrix H₀", format!("m x {n}"), format!("{}x{}", m, h0.ncols())));
        }
        if dphi.is_empty() || dphi.len() != dh.len() {
            return Err(Error::InvalidModel(format!(
                "derivative stacks must be non-empty and equal length (got {} and {})",
                dphi.len(),
                dh.len()
            )));
        }
        if let Some(i) = dphi.iter().position(|d| d.shape() != (n, n)) {
            return Err(Error::dim("∂Φ/∂p stack", format!("{n}x{n}"), format!("entry {i} {:?}", dphi[i].shape())));
        }
        if let Some(i) = dh.iter().position(|d| d.shape() != (m, n)) {
            return Err(Error::dim("∂H/∂p stack", format!("{m}x{n}"), format!("entry {i} {:?}", dh[i].shape())));
        }
        let finite = [&phi0, &h0, &q, &r]
            .into_iter()
            .chain(dphi.iter())
            .chain(dh.iter())
            .all(linalg::all_finite);
        if !finite {
            return Err(Error::InvalidModel("model matrices must be finite".into()));
        }
        validate_noise(&q, &r, n, m)?;
        Ok(Self { phi0, dphi, h0, dh, q, r })
    }

    /// Parameter-independent model: all derivative matrices are zero.
    pub fn constant(
        phi: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        n_params: usize,
    ) -> Result<Self> {
        let (n, m) = (phi.nrows(), h.nrows());
        let dphi = vec![DMatrix::zeros(n, n); n_params];
        let dh = vec![DMatrix::zeros(m, phi.ncols()); n_params];
        Self::new(phi, dphi, h, dh, q, r)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl ParametricModel for AffineModel {
    fn state_dim(&self) -> usize {
        self.phi0.nrows()
    }

    fn meas_dim(&self) -> usize {
        self.h0.nrows()
    }

    fn param_dim(&self) -> usize {
        self.dphi.len()
    }

    fn phi(&self, p: &ParameterVector, _epoch: usize) -> DMatrix<f64> {
        self.dphi
            .iter()
            .zip(p.as_slice())
            .fold(self.phi0.clone(), |acc, (d, &pi)| acc + d * pi)
    }

    fn h(&self, p: &ParameterVector, _epoch: usize) -> DMatrix<f64> {
        self.dh
            .iter()
            .zip(p.as_slice())
            .fold(self.h0.clone(), |acc, (d, &pi)| acc + d * pi)
    }

    fn dphi(&self, _p: &ParameterVector, index: usize, _epoch: usize) -> DMatrix<f64> {
        self.dphi[index].clone()
    }

    fn dh(&self, _p: &ParameterVector, index: usize, _epoch: usize) -> DMatrix<f64> {
        self.dh[index].clone()
    }

    fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// JSON layout of an [`AffineModel`]. Matrices are nested row arrays.
///
/// Either derivative stack may be omitted (treated as zeros); when both are
/// omitted `n_params` gives the parameter count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineModelSpec {
    #[serde(with = "serde_rows")]
    pub phi0: DMatrix<f64>,
    #[serde(default, with = "serde_rows::list")]
    pub dphi: Vec<DMatrix<f64>>,
    #[serde(with = "serde_rows")]
    pub h0: DMatrix<f64>,
    #[serde(default, with = "serde_rows::list")]
    pub dh: Vec<DMatrix<f64>>,
    #[serde(with = "serde_rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub r: DMatrix<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_params: Option<usize>,
}

impl TryFrom<AffineModelSpec> for AffineModel {
    type Error = Error;

    fn try_from(spec: AffineModelSpec) -> Result<Self> {
        let n_params = match (spec.dphi.len(), spec.dh.len(), spec.n_params) {
            (0, 0, Some(l)) => l,
            (0, 0, None) => {
                return Err(Error::InvalidModel(
                    "no derivative stacks given; set n_params".into(),
                ))
            }
            (a, 0, _) | (0, a, _) => a,
            (a, _, _) => a,
        };
        if let Some(l) = spec.n_params {
            if l != n_params {
                return Err(Error::InvalidModel(format!(
                    "n_params = {l} disagrees with derivative stacks of length {n_params}"
                )));
            }
        }
        let (n, m) = (spec.phi0.nrows(), spec.h0.nrows());
        let dphi = if spec.dphi.is_empty() {
            vec![DMatrix::zeros(n, n); n_params]
        } else {
            spec.dphi
        };
        let dh = if spec.dh.is_empty() {
            vec![DMatrix::zeros(m, spec.h0.ncols()); n_params]
        } else {
            spec.dh
        };
        AffineModel::new(spec.phi0, dphi, spec.h0, dh, spec.q, spec.r)
    }
}

impl From<AffineModel> for AffineModelSpec {
    fn from(m: AffineModel) -> Self {
        Self {
            phi0: m.phi0,
            dphi: m.dphi,
            h0: m.h0,
            dh: m.dh,
            q: m.q,
            r: m.r,
            n_params: None,
        }
    }
}

type MatrixFn = Box<dyn Fn(&ParameterVector) -> DMatrix<f64> + Send + Sync>;

/// Model defined by closures for `Φ(p)` and `H(p)` only; the derivative
/// stacks come from central finite differences with a fixed step.
pub struct FiniteDifferenceModel {
    phi_fn: MatrixFn,
    h_fn: MatrixFn,
    n: usize,
    m: usize,
    n_params: usize,
    step: f64,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl FiniteDifferenceModel {
    pub const DEFAULT_STEP: f64 = 1e-5;

    /// Builds the model, probing the closures at `p_ref` to learn dimensions.
    pub fn new(
        phi_fn: impl Fn(&ParameterVector) -> DMatrix<f64> + Send + Sync + 'static,
        h_fn: impl Fn(&ParameterVector) -> DMatrix<f64> + Send + Sync + 'static,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p_ref: &ParameterVector,
    ) -> Result<Self> {
        let phi = phi_fn(p_ref);
        let h = h_fn(p_ref);
        let n = phi.nrows();
        if n == 0 || !phi.is_square() {
            return Err(Error::InvalidModel("Φ(p) must be square and non-empty".into()));
        }
        let m = h.nrows();
        if m == 0 || h.ncols() != n {
            return Err(Error::dim("measurement matrix H(p)", format!("m x {n}"), format!("{}x{}", m, h.ncols())));
        }
        validate_noise(&q, &r, n, m)?;
        Ok(Self {
            phi_fn: Box::new(phi_fn),
            h_fn: Box::new(h_fn),
            n,
            m,
            n_params: p_ref.len(),
            step: Self::DEFAULT_STEP,
            q,
            r,
        })
    }

    pub fn with_step(mut self, step: f64) -> Self {
        assert!(step > 0.0, "finite-difference step must be positive");
        self.step = step;
        self
    }
}

impl std::fmt::Debug for FiniteDifferenceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiniteDifferenceModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("n_params", &self.n_params)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl ParametricModel for FiniteDifferenceModel {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn meas_dim(&self) -> usize {
        self.m
    }

    fn param_dim(&self) -> usize {
        self.n_params
    }

    fn phi(&self, p: &ParameterVector, _epoch: usize) -> DMatrix<f64> {
        (self.phi_fn)(p)
    }

    fn h(&self, p: &ParameterVector, _epoch: usize) -> DMatrix<f64> {
        (self.h_fn)(p)
    }

    fn dphi(&self, p: &ParameterVector, index: usize, _epoch: usize) -> DMatrix<f64> {
        let (plus, minus) = (p.offset(index, self.step), p.offset(index, -self.step));
        ((self.phi_fn)(&plus) - (self.phi_fn)(&minus)) / (2.0 * self.step)
    }

    fn dh(&self, p: &ParameterVector, index: usize, _epoch: usize) -> DMatrix<f64> {
        let (plus, minus) = (p.offset(index, self.step), p.offset(index, -self.step));
        ((self.h_fn)(&plus) - (self.h_fn)(&minus)) / (2.0 * self.step)
    }

    fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Initial conditions and parameter ranges for the two-state benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkSetup {
    /// Nominal parameters `(α̂, β̂) = (0, 0)`.
    pub nominal: ParameterVector,
    pub x0: DVector<f64>,
    pub p0_cov: DMatrix<f64>,
    /// Uniform bounds: `α ∈ [−0.1, 0.1]`, `β ∈ [−0.5, 0.5]`.
    pub param_bounds: Vec<(f64, f64)>,
}

/// The two-state benchmark with parameters `(α, β)`:
///
/// ```text
/// Φ(α, β) = [ 1        0.1 + α ]      H = I₂,  Q = 0.1·I₂,  R = I₂
///           [ β − 0.5  0.9     ]
/// ```
pub fn make_benchmark() -> (AffineModel, BenchmarkSetup) {
    let phi0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.5, 0.9]);
    let d_alpha = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let d_beta = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
    let model = AffineModel::new(
        phi0,
        vec![d_alpha, d_beta],
        DMatrix::identity(2, 2),
        vec![DMatrix::zeros(2, 2); 2],
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(2, 2),
    )
    .expect("benchmark model is well formed");
    let setup = BenchmarkSetup {
        nominal: ParameterVector::zeros(2).expect("non-empty"),
        x0: DVector::from_vec(vec![10.0, -10.0]),
        p0_cov: DMatrix::identity(2, 2) * 0.1,
        param_bounds: vec![(-0.1, 0.1), (-0.5, 0.5)],
    };
    (model, setup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    fn toy_h_model() -> AffineModel {
        // H(p) = [p₁, 0; 0, 1]
        AffineModel::new(
            DMatrix::identity(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn parameter_vector_validation() {
        assert!(ParameterVector::new(Vec::<f64>::new()).is_err());
        assert!(ParameterVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParameterVector::new(vec![0.0]).is_ok());
    }

    #[test]
    fn benchmark_phi_values() {
        let (model, setup) = make_benchmark();
        let phi = eval_phi(&model, &setup.nominal, 0).unwrap();
        assert_eq!(phi, DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.5, 0.9]));
        let phi = eval_phi(&model, &params(&[0.1, 0.5]), 0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]);
        assert!((phi - expected).amax() < 1e-15);
    }

    #[test]
    fn benchmark_constants() {
        let (model, setup) = make_benchmark();
        assert_eq!(model.q(), &(DMatrix::identity(2, 2) * 0.1));
        assert_eq!(model.r(), &DMatrix::<f64>::identity(2, 2));
        assert_eq!(model.h(&setup.nominal, 0), DMatrix::<f64>::identity(2, 2));
        assert_eq!(setup.x0.as_slice(), &[10.0, -10.0]);
        assert_eq!(setup.p0_cov, DMatrix::identity(2, 2) * 0.1);
        assert_eq!(setup.param_bounds, vec![(-0.1, 0.1), (-0.5, 0.5)]);
        let a = model.dphi(&params(&[0.05, -0.3]), 0, 0);
        let b = model.dphi(&params(&[-0.07, 0.4]), 0, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn eval_rejects_wrong_parameter_length() {
        let (model, _) = make_benchmark();
        assert!(matches!(eval_phi(&model, &params(&[0.0]), 0), Err(Error::Dimension { .. })));
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(phi_jacobian_action(&model, &params(&[0.0, 0.0]), &x, 0).is_err());
    }

    #[test]
    fn constant_model_ignores_parameters() {
        let phi = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, 0.7]);
        let model = AffineModel::constant(
            phi.clone(),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            3,
        )
        .unwrap();
        let p = params(&[0.3, -2.0, 7.0]);
        assert_eq!(eval_phi(&model, &p, 4).unwrap(), phi);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(phi_jacobian_action(&model, &p, &x, 0).unwrap(), DMatrix::zeros(2, 3));
    }

    #[test]
    fn benchmark_phi_action() {
        let (model, setup) = make_benchmark();
        let x = DVector::from_vec(vec![10.0, -10.0]);
        let act = phi_jacobian_action(&model, &setup.nominal, &x, 0).unwrap();
        assert_eq!(act, DMatrix::from_row_slice(2, 2, &[-10.0, 0.0, 0.0, 10.0]));

        // cross-check against central differences of Φ(p)x
        let step = 1e-5;
        for i in 0..2 {
            let fd = (model.phi(&setup.nominal.offset(i, step), 0) * &x
                - model.phi(&setup.nominal.offset(i, -step), 0) * &x)
                / (2.0 * step);
            assert!((fd - act.column(i)).amax() < 1e-9);
        }

        let zero = DVector::zeros(2);
        assert_eq!(phi_jacobian_action(&model, &setup.nominal, &zero, 0).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn h_action_examples() {
        let (model, setup) = make_benchmark();
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(h_jacobian_action(&model, &setup.nominal, &x, 0).unwrap(), DMatrix::zeros(2, 2));

        let toy = toy_h_model();
        let p = params(&[0.7]);
        let act = h_jacobian_action(&toy, &p, &DVector::from_vec(vec![2.0, 3.0]), 0).unwrap();
        assert_eq!(act, DMatrix::from_column_slice(2, 1, &[2.0, 0.0]));
        let zero = h_jacobian_action(&toy, &p, &DVector::zeros(2), 0).unwrap();
        assert_eq!(zero, DMatrix::zeros(2, 1));
    }

    #[test]
    fn fd_model_matches_affine_derivatives() {
        let (bench, setup) = make_benchmark();
        let b = bench.clone();
        let fd = FiniteDifferenceModel::new(
            move |p| b.phi(p, 0),
            |_| DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::identity(2, 2),
            &setup.nominal,
        )
        .unwrap();
        let p = params(&[0.03, -0.2]);
        for i in 0..2 {
            assert!((fd.dphi(&p, i, 0) - bench.dphi(&p, i, 0)).amax() < 1e-9);
            assert!(fd.dh(&p, i, 0).amax() < 1e-12);
        }
    }

    #[test]
    fn fd_model_nonlinear_in_parameter() {
        // Φ(p) = [[cos p, sin p], [0, e^p]]
        let model = FiniteDifferenceModel::new(
            |p| {
                let a = p.get(0);
                DMatrix::from_row_slice(2, 2, &[a.cos(), a.sin(), 0.0, a.exp()])
            },
            |_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            &params(&[0.0]),
        )
        .unwrap();
        let p = params(&[0.4]);
        let d = model.dphi(&p, 0, 0);
        let exact = DMatrix::from_row_slice(2, 2, &[-(0.4f64).sin(), (0.4f64).cos(), 0.0, (0.4f64).exp()]);
        assert!((d - exact).amax() < 1e-9);
    }

    #[test]
    fn model_validation_errors() {
        let bad_q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = AffineModel::constant(DMatrix::identity(2, 2), DMatrix::identity(2, 2), bad_q, DMatrix::identity(2, 2), 1);
        assert!(matches!(r, Err(Error::InvalidModel(_))));
        let r = AffineModel::new(
            DMatrix::identity(2, 2),
            vec![DMatrix::zeros(3, 3)],
            DMatrix::identity(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn json_model_round_trip() {
        let text = r#"{
            "phi0": [[1.0, 0.1], [-0.5, 0.9]],
            "dphi": [[[0, 1], [0, 0]], [[0, 0], [1, 0]]],
            "h0": [[1, 0], [0, 1]],
            "q": [[0.1, 0], [0, 0.1]],
            "r": [[1, 0], [0, 1]]
        }"#;
        let model = AffineModel::from_json(text).unwrap();
        assert_eq!(model, make_benchmark().0);
        let again: AffineModel = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn json_model_needs_parameter_count() {
        let text = r#"{"phi0": [[1]], "h0": [[1]], "q": [[1]], "r": [[1]]}"#;
        assert!(AffineModel::from_json(text).is_err());
        let text = r#"{"phi0": [[1]], "h0": [[1]], "q": [[1]], "r": [[1]], "n_params": 2}"#;
        assert_eq!(AffineModel::from_json(text).unwrap().param_dim(), 2);
    }

    proptest! {
        #[test]
        fn benchmark_matches_closed_form(alpha in -1.0f64..1.0, beta in -1.0f64..1.0) {
            let (model, _) = make_benchmark();
            let phi = eval_phi(&model, &params(&[alpha, beta]), 0).unwrap();
            let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.1 + alpha, beta - 0.5, 0.9]);
            prop_assert_eq!(phi, expected);
        }

        #[test]
        fn jacobian_action_is_linear(
            x in proptest::collection::vec(-50.0f64..50.0, 2),
            y in proptest::collection::vec(-50.0f64..50.0, 2),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let (model, setup) = make_benchmark();
            let (x, y) = (DVector::from_vec(x), DVector::from_vec(y));
            let lhs = phi_jacobian_action(&model, &setup.nominal, &(&x * a + &y * b), 0).unwrap();
            let rhs = phi_jacobian_action(&model, &setup.nominal, &x, 0).unwrap() * a
                + phi_jacobian_action(&model, &setup.nominal, &y, 0).unwrap() * b;
            prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + x.amax().max(y.amax()) * 3.0));
        }

        #[test]
        fn derivative_stacks_match_finite_differences(alpha in -0.1f64..0.1, beta in -0.5f64..0.5) {
            let (model, _) = make_benchmark();
            let p = params(&[alpha, beta]);
            prop_assert!(derivative_consistency(&model, &p, 0, 1e-5).unwrap() <= 1e-6);
            prop_assert!(derivative_consistency(&toy_h_model(), &params(&[alpha]), 0, 1e-5).unwrap() <= 1e-6);
        }
    }
}
