//! Seeded Monte-Carlo comparison of filters under parameter uncertainty.
//!
//! Each case draws the true parameters once from independent uniform
//! distributions, simulates a truth trajectory at those parameters, and runs
//! every configured scheme on the *same* measurement sequence with the
//! filters fixed at the nominal parameters.
//!
//! Random numbers come from a ChaCha8 generator seeded from the experiment
//! seed with the case index as the stream id, so a case's draws do not depend
//! on which worker runs it or in what order.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_discrete::{self, FilterState, WeightingScheme};
use crate::linalg::{self, serde_rows};
use crate::model::{make_benchmark, AffineModel, ParameterVector, ParametricModel};

pub const DEFAULT_CASES: usize = 5000;
pub const DEFAULT_EPOCHS: usize = 50;

/// Scheme with a display name used in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScheme {
    pub name: String,
    #[serde(flatten)]
    pub scheme: WeightingScheme,
}

impl NamedScheme {
    pub fn new(name: impl Into<String>, scheme: WeightingScheme) -> Self {
        Self { name: name.into(), scheme }
    }
}

fn default_cases() -> usize {
    DEFAULT_CASES
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

fn default_x0() -> Vec<f64> {
    vec![10.0, -10.0]
}

fn default_p0() -> DMatrix<f64> {
    DMatrix::identity(2, 2) * 0.1
}

fn default_bounds() -> Vec<(f64, f64)> {
    vec![(-0.1, 0.1), (-0.5, 0.5)]
}

/// Experiment description. Fields left out of a JSON config take the
/// benchmark values; `model` defaults to the built-in two-state system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_cases")]
    pub n_cases: usize,
    #[serde(default = "default_epochs")]
    pub n_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
    #[serde(default = "default_p0", with = "serde_rows")]
    pub p0_cov: DMatrix<f64>,
    /// Nominal parameters used by the filters; zeros when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<Vec<f64>>,
    /// Per-parameter uniform bounds `[low, high]` for the true parameters.
    #[serde(default = "default_bounds")]
    pub param_bounds: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<AffineModel>,
    /// Start each filter at `x0` plus a draw from `N(0, P₀)` instead of `x0`.
    #[serde(default)]
    pub init_error_draw: bool,
    pub schemes: Vec<NamedScheme>,
}

impl ExperimentConfig {
    /// Benchmark setup with the given schemes.
    pub fn benchmark(seed: u64, schemes: Vec<NamedScheme>) -> Self {
        Self {
            n_cases: DEFAULT_CASES,
            n_epochs: DEFAULT_EPOCHS,
            seed,
            x0: default_x0(),
            p0_cov: default_p0(),
            nominal: None,
            param_bounds: default_bounds(),
            model: None,
            init_error_draw: false,
            schemes,
        }
    }

    /// The four filters of the uncertain-parameter comparison: conventional,
    /// ADKF with `W_a = diag(0.003, 0.075)`, and KSDKF with either
    /// `W₁ = W₂ = diag(0.003, 0.075)` or `W₁ = W₂ = 0.1·I`.
    ///
    /// `W_a` is ninety percent of the uniform-distribution variances of the
    /// true parameters, `(0.2²/12, 1²/12) ≈ (0.00333, 0.0833)`.
    pub fn paper_schemes() -> Vec<NamedScheme> {
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![0.003, 0.075]));
        vec![
            NamedScheme::new("kf", WeightingScheme::Conventional),
            NamedScheme::new("adkf", WeightingScheme::Adkf { w_a: diag.clone() }),
            NamedScheme::new("ksdkf_diag", WeightingScheme::Ksdkf { w_list: vec![diag.clone(), diag] }),
            NamedScheme::new(
                "ksdkf_0.1I",
                WeightingScheme::Ksdkf { w_list: vec![DMatrix::identity(2, 2) * 0.1; 2] },
            ),
        ]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The model the experiment runs on.
    pub fn resolved_model(&self) -> AffineModel {
        self.model.clone().unwrap_or_else(|| make_benchmark().0)
    }

    pub fn nominal_params(&self, model: &dyn ParametricModel) -> Result<ParameterVector> {
        match &self.nominal {
            Some(v) => ParameterVector::new(v.clone()),
            None => ParameterVector::zeros(model.param_dim()),
        }
    }

    /// Checks counts, dimensions, bounds and every scheme's weights. Errors
    /// name the offending scheme.
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::Config("n_cases must be at least 1".into()));
        }
        if self.n_epochs == 0 {
            return Err(Error::Config("n_epochs must be at least 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        let model = self.resolved_model();
        let (n, l) = (model.state_dim(), model.param_dim());
        if self.x0.len() != n {
            return Err(Error::Config(format!("x0 has length {}, model state dimension is {n}", self.x0.len())));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if self.p0_cov.shape() != (n, n) || !linalg::is_symmetric_psd(&self.p0_cov, 1e-10) {
            return Err(Error::Config(format!("p0_cov must be a symmetric PSD {n}x{n} matrix")));
        }
        if self.param_bounds.len() != l {
            return Err(Error::Config(format!(
                "param_bounds has {} entries, model has {l} parameters",
                self.param_bounds.len()
            )));
        }
        for (i, &(lo, hi)) in self.param_bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("param_bounds[{i}] must satisfy low < high, got [{lo}, {hi}]")));
            }
        }
        let nominal = self.nominal_params(&model).map_err(|e| Error::Config(format!("nominal: {e}")))?;
        if nominal.len() != l {
            return Err(Error::Config(format!("nominal has length {}, model has {l} parameters", nominal.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.schemes {
            if s.name.is_empty() || s.name.contains(',') {
                return Err(Error::Config(format!("scheme name {:?} must be non-empty and contain no commas", s.name)));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate scheme name {:?}", s.name)));
            }
            s.scheme
                .validate(n, l)
                .map_err(|e| Error::Config(format!("scheme {:?}: {e}", s.name)))?;
        }
        Ok(())
    }
}

/// RNG for case `case_index`: stream `case_index` of the experiment seed.
pub fn case_rng(seed: u64, case_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case_index);
    rng
}

/// True parameters for one case, each uniform on its `[low, high]`.
pub fn draw_parameters<R: Rng + ?Sized>(rng: &mut R, bounds: &[(f64, f64)]) -> Result<ParameterVector> {
    ParameterVector::new(bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect::<Vec<_>>())
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, factor: &DMatrix<f64>) -> DVector<f64> {
    let xi = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * xi
}

/// Truth states `x_0 .. x_N` and measurements `z_1 .. z_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

/// `x_{k} = Φ(p)x_{k−1} + w_{k−1}`, `z_k = H(p)x_k + v_k`, with Gaussian
/// noise drawn from `rng` in the order `w, v` per epoch.
pub fn simulate_truth<R: Rng + ?Sized>(
    model: &dyn ParametricModel,
    p_true: &ParameterVector,
    x0: &DVector<f64>,
    rng: &mut R,
    n_epochs: usize,
) -> Result<Trajectory> {
    let phi = crate::model::eval_phi(model, p_true, 0)?;
    let h = crate::model::eval_h(model, p_true, 0)?;
    let q_factor = linalg::covariance_factor(model.q());
    let r_factor = linalg::covariance_factor(model.r());
    let mut states = Vec::with_capacity(n_epochs + 1);
    let mut measurements = Vec::with_capacity(n_epochs);
    states.push(x0.clone());
    let mut x = x0.clone();
    for _ in 0..n_epochs {
        x = &phi * &x + gaussian(rng, &q_factor);
        let z = &h * &x + gaussian(rng, &r_factor);
        states.push(x.clone());
        measurements.push(z);
    }
    Ok(Trajectory { states, measurements })
}

/// FNV-1a over the bit patterns of a vector sequence.
pub fn digest(vectors: &[DVector<f64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in vectors {
        for x in v.iter() {
            for b in x.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Per-epoch output of one scheme on one case (epochs `1..=N`).
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeTrace {
    /// Squared estimation error per epoch and state.
    pub sq_err: Vec<DVector<f64>>,
    pub cost: Vec<f64>,
    pub penalty: Vec<f64>,
    pub trace_p: Vec<f64>,
    /// Worst `max|P−Pᵀ|/max|P|` over the run.
    pub max_asymmetry: f64,
    /// Worst `λ_min(P)/Tr(P)` over the run.
    pub min_eig_ratio: f64,
    /// Digest of the measurement sequence this scheme consumed.
    pub measurement_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub p_true: ParameterVector,
    pub truth_digest: u64,
    pub traces: Vec<SchemeTrace>,
}

fn run_scheme(
    model: &dyn ParametricModel,
    p_hat: &ParameterVector,
    initial: &FilterState,
    truth: &Trajectory,
    scheme: &WeightingScheme,
) -> Result<SchemeTrace> {
    let n_epochs = truth.measurements.len();
    let mut trace = SchemeTrace {
        sq_err: Vec::with_capacity(n_epochs),
        cost: Vec::with_capacity(n_epochs),
        penalty: Vec::with_capacity(n_epochs),
        trace_p: Vec::with_capacity(n_epochs),
        max_asymmetry: 0.0,
        min_eig_ratio: f64::INFINITY,
        measurement_digest: digest(&truth.measurements),
    };
    let mut state = initial.clone();
    for (k, z) in truth.measurements.iter().enumerate() {
        let (next, record) = filter_discrete::step(&state, z, model, p_hat, scheme)?;
        let err = &next.xhat - &truth.states[k + 1];
        trace.sq_err.push(err.component_mul(&err));
        trace.cost.push(record.cost_total);
        trace.penalty.push(record.cost_penalty);
        trace.trace_p.push(record.trace_p);
        trace.max_asymmetry = trace.max_asymmetry.max(linalg::relative_asymmetry(&next.p_cov));
        let tr = next.p_cov.trace();
        let ratio = if tr > 0.0 { linalg::min_eigenvalue(&next.p_cov) / tr } else { 0.0 };
        trace.min_eig_ratio = trace.min_eig_ratio.min(ratio);
        state = next;
    }
    Ok(trace)
}

/// Runs every scheme on case `case_index`. All schemes see the same truth
/// trajectory and measurements.
pub fn run_case(cfg: &ExperimentConfig, model: &dyn ParametricModel, case_index: usize) -> Result<CaseResult> {
    let mut rng = case_rng(cfg.seed, case_index as u64);
    let p_true = draw_parameters(&mut rng, &cfg.param_bounds)?;
    let p_hat = cfg.nominal_params(model)?;
    let x0 = DVector::from_vec(cfg.x0.clone());
    let xhat0 = if cfg.init_error_draw {
        &x0 + gaussian(&mut rng, &linalg::covariance_factor(&cfg.p0_cov))
    } else {
        x0.clone()
    };
    let truth = simulate_truth(model, &p_true, &x0, &mut rng, cfg.n_epochs)?;
    let initial = FilterState::new(xhat0, cfg.p0_cov.clone(), model.param_dim());
    let traces = cfg
        .schemes
        .iter()
        .map(|s| run_scheme(model, &p_hat, &initial, &truth, &s.scheme))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseResult {
        p_true,
        truth_digest: digest(&truth.states),
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedCase {
    pub case_index: usize,
    pub reason: String,
}

/// Aggregated results. Series are indexed `[scheme][epoch − 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub scheme_names: Vec<String>,
    pub n_epochs: usize,
    pub n_states: usize,
    pub n_cases: usize,
    /// Root-mean-square error, `[scheme][epoch − 1][state]`.
    pub rms: Vec<Vec<Vec<f64>>>,
    pub mean_cost: Vec<Vec<f64>>,
    pub mean_penalty: Vec<Vec<f64>>,
    pub mean_trace_p: Vec<Vec<f64>>,
    pub failed: Vec<FailedCase>,
    /// Worst relative covariance asymmetry across all cases and schemes.
    pub max_asymmetry: f64,
    /// Worst `λ_min(P)/Tr(P)` across all cases and schemes.
    pub min_eig_ratio: f64,
}

impl ExperimentReport {
    pub fn n_ok(&self) -> usize {
        self.n_cases - self.failed.len()
    }

    pub fn scheme_index(&self, name: &str) -> Option<usize> {
        self.scheme_names.iter().position(|s| s == name)
    }

    /// Mean of `series` over epochs `from_epoch..=n_epochs` (1-based).
    pub fn epoch_average(series: &[f64], from_epoch: usize) -> f64 {
        let start = from_epoch.max(1) - 1;
        let tail = &series[start.min(series.len())..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn rms_series(&self, scheme: usize, state: usize) -> Vec<f64> {
        self.rms[scheme].iter().map(|e| e[state]).collect()
    }

    pub fn average_rms(&self, scheme: usize, state: usize, from_epoch: usize) -> f64 {
        Self::epoch_average(&self.rms_series(scheme, state), from_epoch)
    }
}

/// Reduces case results in the given order.
pub fn aggregate(
    scheme_names: Vec<String>,
    n_epochs: usize,
    n_states: usize,
    results: Vec<(usize, Result<CaseResult>)>,
) -> Result<ExperimentReport> {
    let n_schemes = scheme_names.len();
    let n_cases = results.len();
    let mut sum_sq = vec![vec![DVector::<f64>::zeros(n_states); n_epochs]; n_schemes];
    let mut sum_cost = vec![vec![0.0; n_epochs]; n_schemes];
    let mut sum_pen = vec![vec![0.0; n_epochs]; n_schemes];
    let mut sum_tr = vec![vec![0.0; n_epochs]; n_schemes];
    let mut failed = Vec::new();
    let mut max_asymmetry = 0.0_f64;
    let mut min_eig_ratio = f64::INFINITY;
    for (case_index, result) in results {
        match result {
            Ok(case) => {
                for (s, trace) in case.traces.iter().enumerate() {
                    for k in 0..n_epochs {
                        sum_sq[s][k] += &trace.sq_err[k];
                        sum_cost[s][k] += trace.cost[k];
                        sum_pen[s][k] += trace.penalty[k];
                        sum_tr[s][k] += trace.trace_p[k];
                    }
                    max_asymmetry = max_asymmetry.max(trace.max_asymmetry);
                    min_eig_ratio = min_eig_ratio.min(trace.min_eig_ratio);
                }
            }
            Err(e) => failed.push(FailedCase { case_index, reason: e.to_string() }),
        }
    }
    let n_ok = n_cases - failed.len();
    if n_ok == 0 {
        return Err(Error::ExperimentFailed(n_cases));
    }
    let denom = n_ok as f64;
    let mean = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        v.into_iter().map(|s| s.into_iter().map(|x| x / denom).collect()).collect()
    };
    let rms = sum_sq
        .into_iter()
        .map(|s| s.into_iter().map(|v| v.iter().map(|x| (x / denom).sqrt()).collect()).collect())
        .collect();
    Ok(ExperimentReport {
        scheme_names,
        n_epochs,
        n_states,
        n_cases,
        rms,
        mean_cost: mean(sum_cost),
        mean_penalty: mean(sum_pen),
        mean_trace_p: mean(sum_tr),
        failed,
        max_asymmetry,
        min_eig_ratio,
    })
}

/// Runs all cases, in parallel on `jobs` threads (rayon's default when
/// `None`). The report depends only on the config, not on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let model = cfg.resolved_model();
    let run_all = || -> Vec<(usize, Result<CaseResult>)> {
        (0..cfg.n_cases)
            .into_par_iter()
            .map(|i| (i, run_case(cfg, &model, i)))
            .collect()
    };
    let results = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };
    aggregate(
        cfg.schemes.iter().map(|s| s.name.clone()).collect(),
        cfg.n_epochs,
        model.state_dim(),
        results,
    )
}

/// [`run_experiment`] plus its wall-clock duration in seconds.
pub fn run_experiment_timed(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<(ExperimentReport, f64)> {
    let start = Instant::now();
    let report = run_experiment(cfg, jobs)?;
    Ok((report, start.elapsed().as_secs_f64()))
}
