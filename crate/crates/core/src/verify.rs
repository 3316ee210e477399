//! Self-check suite: each check draws random problems from a seeded RNG,
//! compares the filter against an independent route, and reports its worst
//! margin against a fixed tolerance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::filter_discrete::{self as fd, FilterState, WeightingScheme};
use crate::model::{make_benchmark, AffineModel, ParameterVector, ParametricModel};
use crate::montecarlo::{case_rng, draw_parameters, simulate_truth};
use crate::sensitivity_oracle::{self, fd_cost_gradient, SENSITIVITY_DELTA};

pub const REDUCTION_TOL: f64 = 1e-12;
pub const STATIONARITY_TOL: f64 = 1e-5;
pub const RESIDUAL_TOL: f64 = 1e-9;
pub const EQUIVALENCE_TOL: f64 = 1e-9;
pub const SENSITIVITY_TOL: f64 = 1e-4;
pub const TRACE_RULE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst normalized error observed.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckOutcome {
    fn new(name: &'static str, worst: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            name,
            passed: worst <= tolerance,
            worst,
            tolerance,
            cases,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub reduction_cases: usize,
    pub stationarity_cases: usize,
    pub residual_cases: usize,
    pub equivalence_cases: usize,
    pub random_models: usize,
    pub trace_pairs: usize,
    /// Added to every gain entry before the stationarity checks. Zero in
    /// normal use; a non-zero value is a negative control that must fail.
    pub gain_perturbation: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            reduction_cases: 1000,
            stationarity_cases: 100,
            residual_cases: 100,
            equivalence_cases: 100,
            random_models: 20,
            trace_pairs: 10,
            gain_perturbation: 0.0,
        }
    }
}

/// A random model together with a random prior at its nominal parameters.
#[derive(Debug, Clone)]
pub struct RandomProblem {
    pub model: AffineModel,
    pub p_hat: ParameterVector,
    pub prior: FilterState,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Random symmetric PSD matrix `BBᵀ/k` with `B` of rank `rank`.
pub fn random_psd<R: Rng>(rng: &mut R, size: usize, rank: usize) -> DMatrix<f64> {
    let b = normal_matrix(rng, size, rank.max(1), 1.0);
    let w = &b * b.transpose() / rank.max(1) as f64;
    (&w + w.transpose()) * 0.5
}

fn random_spd<R: Rng>(rng: &mut R, size: usize, floor: f64) -> DMatrix<f64> {
    random_psd(rng, size, size) + DMatrix::identity(size, size) * floor
}

/// Random stable transition matrix (spectral norm at most 0.95).
fn random_stable<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, n, n, 1.0 / (n as f64).sqrt());
    let norm = a.clone().svd(false, false).singular_values.max();
    if norm > 0.95 {
        a * (0.95 / norm)
    } else {
        a
    }
}

/// Random affine model with `n` states, `m` measurements and `l` parameters.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, m: usize, l: usize) -> AffineModel {
    let phi0 = random_stable(rng, n);
    let dphi = (0..l).map(|_| normal_matrix(rng, n, n, 0.3)).collect();
    let h0 = normal_matrix(rng, m, n, 1.0);
    let dh = (0..l).map(|_| normal_matrix(rng, m, n, 0.3)).collect();
    let q = random_spd(rng, n, 0.05);
    let r = random_spd(rng, m, 0.5);
    AffineModel::new(phi0, dphi, h0, dh, q, r).expect("random model is well formed")
}

/// Random problem with dimensions drawn from n∈1..=4, m∈1..=3 and the given
/// parameter count (or ℓ∈1..=3 when `None`).
pub fn random_problem<R: Rng>(rng: &mut R, n_params: Option<usize>) -> RandomProblem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=3);
    let l = n_params.unwrap_or_else(|| rng.random_range(1..=3));
    let model = random_model(rng, n, m, l);
    let p_hat = ParameterVector::new((0..l).map(|_| rng.random_range(-0.2..=0.2)).collect::<Vec<_>>())
        .expect("non-empty");
    let prior = FilterState {
        xhat: DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 5.0),
        p_cov: random_spd(rng, n, 0.1),
        s: normal_matrix(rng, n, l, 1.0),
        epoch: 1,
    };
    RandomProblem { model, p_hat, prior }
}

fn rng_for(seed: u64, check: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(check);
    rng
}

/// Weighted gains with all weights zero against the Kalman gain:
/// worst `‖K_w − K‖_max / (1 + ‖K‖_max)`.
pub fn check_reduction(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let RandomProblem { model, p_hat, prior } = random_problem(&mut rng, None);
        let (n, l) = (model.state_dim(), model.param_dim());
        let gamma = fd::innovation_matrix(&prior, &model, &p_hat)?;
        let k = fd::gain_kf(&prior, &model, &p_hat)?;
        let k_a = fd::gain_adkf(&prior, &gamma, &DMatrix::zeros(l, l), &model, &p_hat)?;
        let k_s = fd::gain_ksdkf(&prior, &gamma, &vec![DMatrix::zeros(n, n); l], &model, &p_hat)?;
        let scale = 1.0 + k.amax();
        worst = worst.max((&k_a - &k).amax() / scale).max((&k_s - &k).amax() / scale);
    }
    Ok(CheckOutcome::new("reduction identities", worst, REDUCTION_TOL, cases))
}

fn stationarity_margin(
    problem: &RandomProblem,
    gain: &DMatrix<f64>,
    scheme: &WeightingScheme,
) -> Result<f64> {
    let RandomProblem { model, p_hat, prior } = problem;
    let j = fd::cost_after_gain(prior, gain, model, p_hat, scheme)?;
    let eps = 1e-4 * (1.0 + gain.amax());
    let grad = fd_cost_gradient(
        |k| fd::cost_after_gain(prior, k, model, p_hat, scheme).unwrap_or(f64::NAN),
        gain,
        eps,
    );
    let g = grad.amax();
    Ok(if g.is_finite() { g / (1.0 + j.abs()) } else { f64::INFINITY })
}

/// Finite-difference gradient of each scheme's cost at its own gain:
/// worst `max|∇J| / (1 + |J|)` for ADKF and KSDKF separately.
pub fn check_stationarity(seed: u64, cases: usize, gain_perturbation: f64) -> Result<(CheckOutcome, CheckOutcome)> {
    let mut rng = rng_for(seed, 2);
    let (mut worst_a, mut worst_s) = (0.0_f64, 0.0_f64);
    for _ in 0..cases {
        let problem = random_problem(&mut rng, None);
        let (n, l) = (problem.model.state_dim(), problem.model.param_dim());
        let rank = rng.random_range(1..=l);
        let w_a = random_psd(&mut rng, l, rank);
        let w_list: Vec<_> = (0..l).map(|_| random_psd(&mut rng, n, n)).collect();
        let RandomProblem { model, p_hat, prior } = &problem;
        let gamma = fd::innovation_matrix(prior, model, p_hat)?;
        let bump = DMatrix::from_element(n, model.meas_dim(), gain_perturbation);

        let k_a = fd::gain_adkf(prior, &gamma, &w_a, model, p_hat)? + &bump;
        worst_a = worst_a.max(stationarity_margin(&problem, &k_a, &WeightingScheme::Adkf { w_a })?);

        let k_s = fd::gain_ksdkf(prior, &gamma, &w_list, model, p_hat)? + &bump;
        worst_s = worst_s.max(stationarity_margin(&problem, &k_s, &WeightingScheme::Ksdkf { w_list })?);
    }
    Ok((
        CheckOutcome::new("stationarity (ADKF)", worst_a, STATIONARITY_TOL, cases),
        CheckOutcome::new("stationarity (KSDKF)", worst_s, STATIONARITY_TOL, cases),
    ))
}

/// Relative Frobenius residual of the linear-solve gain in its own equation.
pub fn check_ksdkf_residual(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 3);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let RandomProblem { model, p_hat, prior } = random_problem(&mut rng, None);
        let (n, l) = (model.state_dim(), model.param_dim());
        let w_list: Vec<_> = (0..l).map(|_| random_psd(&mut rng, n, n)).collect();
        let gamma = fd::innovation_matrix(&prior, &model, &p_hat)?;
        let k = fd::gain_ksdkf(&prior, &gamma, &w_list, &model, &p_hat)?;
        worst = worst.max(fd::ksdkf_residual(&prior, &gamma, &w_list, &k, &model, &p_hat)?);
    }
    Ok(CheckOutcome::new("KSDKF gain-equation residual", worst, RESIDUAL_TOL, cases))
}

/// Single-parameter models: KSDKF with `W₁ = w·I` against ADKF with
/// `W_a = [w]`, worst `‖K_s − K_a‖_max / (1 + ‖K_a‖_max)`.
pub fn check_scalar_equivalence(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 4);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let RandomProblem { model, p_hat, prior } = random_problem(&mut rng, Some(1));
        let n = model.state_dim();
        let w: f64 = rng.random_range(0.0..=2.0);
        let gamma = fd::innovation_matrix(&prior, &model, &p_hat)?;
        let k_a = fd::gain_adkf(&prior, &gamma, &DMatrix::from_element(1, 1, w), &model, &p_hat)?;
        let k_s = fd::gain_ksdkf(&prior, &gamma, &[DMatrix::identity(n, n) * w], &model, &p_hat)?;
        worst = worst.max((&k_s - &k_a).amax() / (1.0 + k_a.amax()));
    }
    Ok(CheckOutcome::new("single-parameter KSDKF/ADKF equivalence", worst, EQUIVALENCE_TOL, cases))
}

/// Analytic sensitivities against the frozen-gain finite-difference oracle
/// on a 50-epoch benchmark run and on random models.
pub fn check_sensitivity_oracle(seed: u64, random_models: usize) -> Result<CheckOutcome> {
    const EPOCHS: usize = 50;
    let mut worst = 0.0_f64;

    let (bench, setup) = make_benchmark();
    let mut rng = case_rng(seed, 0);
    let p_true = draw_parameters(&mut rng, &setup.param_bounds)?;
    let truth = simulate_truth(&bench, &p_true, &setup.x0, &mut rng, EPOCHS)?;
    let init = FilterState::new(setup.x0.clone(), setup.p0_cov.clone(), 2);
    let w_a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.003, 0.075]));
    for scheme in [
        WeightingScheme::Conventional,
        WeightingScheme::Adkf { w_a: w_a.clone() },
        WeightingScheme::Ksdkf { w_list: vec![DMatrix::identity(2, 2) * 0.1; 2] },
    ] {
        let e = sensitivity_oracle::sensitivity_agreement(
            &bench,
            &setup.nominal,
            &init,
            &truth.measurements,
            &scheme,
            SENSITIVITY_DELTA,
        )?;
        worst = worst.max(e);
    }

    let mut rng = rng_for(seed, 5);
    for _ in 0..random_models {
        let (n, m, l) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
        let model = random_model(&mut rng, n, m, l);
        let p_hat = ParameterVector::new((0..l).map(|_| rng.random_range(-0.2..=0.2)).collect::<Vec<_>>())?;
        let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 5.0);
        let truth = simulate_truth(&model, &p_hat, &x0, &mut rng, EPOCHS)?;
        let init = FilterState::new(x0, random_spd(&mut rng, n, 0.1), l);
        let w_a = random_psd(&mut rng, l, l);
        let e = sensitivity_oracle::sensitivity_agreement(
            &model,
            &p_hat,
            &init,
            &truth.measurements,
            &WeightingScheme::Adkf { w_a },
            SENSITIVITY_DELTA,
        )?;
        worst = worst.max(e);
    }
    Ok(CheckOutcome::new("frozen-gain sensitivity oracle", worst, SENSITIVITY_TOL, 3 + random_models))
}

/// Matrix trace derivative rules against finite differences:
/// `∂Tr(KP)/∂K = Pᵀ`, `∂Tr(PKᵀ)/∂K = P`, `∂Tr(KPKᵀ)/∂K = KPᵀ + KP`.
pub fn check_trace_identities(seed: u64, pairs: usize) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 6);
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = normal_matrix(&mut rng, r, c, 1.0);
        let p_lin = normal_matrix(&mut rng, c, r, 1.0);
        let p_same = normal_matrix(&mut rng, r, c, 1.0);
        let p_sq = normal_matrix(&mut rng, c, c, 1.0);
        let eps = 1e-5;

        let g = fd_cost_gradient(|k| (k * &p_lin).trace(), &k, eps);
        worst = worst.max((g - p_lin.transpose()).amax() / (1.0 + p_lin.amax()));

        let g = fd_cost_gradient(|k| (&p_same * k.transpose()).trace(), &k, eps);
        worst = worst.max((g - &p_same).amax() / (1.0 + p_same.amax()));

        let g = fd_cost_gradient(|k| (k * &p_sq * k.transpose()).trace(), &k, eps);
        let exact = &k * p_sq.transpose() + &k * &p_sq;
        worst = worst.max((g - &exact).amax() / (1.0 + exact.amax()));
    }
    Ok(CheckOutcome::new("trace derivative identities", worst, TRACE_RULE_TOL, pairs))
}

/// Runs every check with the given options.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let (stat_a, stat_s) = check_stationarity(opts.seed, opts.stationarity_cases, opts.gain_perturbation)?;
    Ok(vec![
        check_sensitivity_oracle(opts.seed, opts.random_models)?,
        stat_a,
        stat_s,
        check_ksdkf_residual(opts.seed, opts.residual_cases)?,
        check_scalar_equivalence(opts.seed, opts.equivalence_cases)?,
        check_reduction(opts.seed, opts.reduction_cases)?,
        check_trace_identities(opts.seed, opts.trace_pairs)?,
    ])
}
