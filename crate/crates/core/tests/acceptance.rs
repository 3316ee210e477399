//! Acceptance gate. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use desense_kf::export::{write_cost_csv, write_rms_csv};
use desense_kf::filter_continuous::{self as fc, ContinuousFilterState, IntegratorConfig};
use desense_kf::filter_discrete::{self as fd, FilterState, WeightingScheme};
use desense_kf::model::{make_benchmark, AffineModel, ParameterVector, ParametricModel};
use desense_kf::montecarlo::{case_rng, draw_parameters, run_experiment, simulate_truth, ExperimentConfig, ExperimentReport};
use desense_kf::verify;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_611;
const EXPERIMENT_SEED: u64 = 2013;
const AVERAGE_FROM_EPOCH: usize = 10;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: &'static str, title: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, title, passed, detail }
}

fn c1_reduction() -> Outcome {
    let start = Instant::now();
    let r = verify::check_reduction(SEED, 1000).expect("reduction check runs");
    let secs = start.elapsed().as_secs_f64();
    let passed = r.worst <= 1e-12 && secs < 1.0;
    outcome("C1", "reduction identity", passed, format!("worst {:.3e} (tol 1e-12), {secs:.3}s (< 1s)", r.worst))
}

fn c2_stationarity() -> Outcome {
    let start = Instant::now();
    let (a, s) = verify::check_stationarity(SEED, 100, 0.0).expect("stationarity check runs");
    let secs = start.elapsed().as_secs_f64();
    let passed = a.worst <= 1e-5 && s.worst <= 1e-5 && secs < 5.0;
    outcome(
        "C2",
        "gain stationarity",
        passed,
        format!("ADKF {:.3e}, KSDKF {:.3e} (tol 1e-5), {secs:.3}s (< 5s)", a.worst, s.worst),
    )
}

fn c3_residual() -> Outcome {
    let start = Instant::now();
    let r = verify::check_ksdkf_residual(SEED, 100).expect("residual check runs");
    let secs = start.elapsed().as_secs_f64();
    let passed = r.worst <= 1e-9 && secs < 1.0;
    outcome("C3", "KSDKF equation residual", passed, format!("worst {:.3e} (tol 1e-9), {secs:.3}s (< 1s)", r.worst))
}

fn c4_equivalence() -> Outcome {
    let r = verify::check_scalar_equivalence(SEED, 100).expect("equivalence check runs");
    outcome("C4", "single-parameter equivalence", r.worst <= 1e-9, format!("worst {:.3e} (tol 1e-9)", r.worst))
}

fn c5_sensitivity() -> Outcome {
    let r = verify::check_sensitivity_oracle(SEED, 20).expect("sensitivity check runs");
    outcome(
        "C5",
        "frozen-gain sensitivity oracle",
        r.worst <= 1e-4,
        format!("worst relative error {:.3e} over {} runs (tol 1e-4)", r.worst, r.cases),
    )
}

fn c6_one_step_optimality() -> Outcome {
    let (model, setup) = make_benchmark();
    let w_a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.003, 0.075]));
    let scheme = WeightingScheme::Adkf { w_a: w_a.clone() };
    let mut rng = case_rng(SEED, 0);
    let p_true = draw_parameters(&mut rng, &setup.param_bounds).unwrap();
    let truth = simulate_truth(&model, &p_true, &setup.x0, &mut rng, 50).unwrap();
    let mut state = FilterState::new(setup.x0.clone(), setup.p0_cov.clone(), 2);
    let p_hat = &setup.nominal;
    let mut failures = 0;
    let mut min_gap = f64::INFINITY;
    for z in &truth.measurements {
        let prior = fd::time_update(&state, &model, p_hat).unwrap();
        let gamma = fd::innovation_matrix(&prior, &model, p_hat).unwrap();
        let k_a = fd::gain_adkf(&prior, &gamma, &w_a, &model, p_hat).unwrap();
        let k_kf = fd::gain_kf(&prior, &model, p_hat).unwrap();
        let j_a = fd::cost_after_gain(&prior, &k_a, &model, p_hat, &scheme).unwrap();
        let j_kf = fd::cost_after_gain(&prior, &k_kf, &model, p_hat, &scheme).unwrap();
        let gap = j_kf - j_a;
        let strict = prior.s.amax() > 0.0;
        if gap < 0.0 || (strict && gap <= 0.0) {
            failures += 1;
        }
        min_gap = min_gap.min(gap);
        state = fd::measurement_update(&prior, &k_a, z, &model, p_hat, &scheme).unwrap().0;
    }
    outcome(
        "C6",
        "one-step optimality",
        failures == 0,
        format!("50 epochs, {failures} violations, smallest J_a(KF) − J_a(ADKF) = {min_gap:.3e}"),
    )
}

fn paper_config() -> ExperimentConfig {
    ExperimentConfig::benchmark(EXPERIMENT_SEED, ExperimentConfig::paper_schemes())
}

fn avg(report: &ExperimentReport, series: &[Vec<f64>], name: &str) -> f64 {
    ExperimentReport::epoch_average(&series[report.scheme_index(name).unwrap()], AVERAGE_FROM_EPOCH)
}

fn avg_rms(report: &ExperimentReport, name: &str, state: usize) -> f64 {
    report.average_rms(report.scheme_index(name).unwrap(), state, AVERAGE_FROM_EPOCH)
}

fn c7_monte_carlo(report: &ExperimentReport, secs: f64) -> Vec<Outcome> {
    let (a1, k1) = (avg_rms(report, "adkf", 0), avg_rms(report, "ksdkf_diag", 0));
    let (a2, k2) = (avg_rms(report, "adkf", 1), avg_rms(report, "ksdkf_diag", 1));
    let (ac, kc) = (avg(report, &report.mean_cost, "adkf"), avg(report, &report.mean_cost, "ksdkf_diag"));
    let (ap, kp) = (avg(report, &report.mean_penalty, "adkf"), avg(report, &report.mean_penalty, "ksdkf_diag"));
    let x2_gap = (a2 - k2).abs() / k2;
    let a_pass = a1 <= k1 && x2_gap <= 0.05 && ac <= kc && ap <= kp && secs < 60.0;
    let a = outcome(
        "C7a",
        "equal-weights comparison",
        a_pass,
        format!(
            "RMS x1 ADKF {a1:.6} vs KSDKF {k1:.6}; RMS x2 {a2:.6} vs {k2:.6} (gap {:.2}%, ≤ 5%); \
             cost {ac:.6} vs {kc:.6}; penalty {ap:.6} vs {kp:.6}; run {secs:.1}s (< 60s)",
            x2_gap * 100.0
        ),
    );

    let k1b = avg_rms(report, "ksdkf_0.1I", 0);
    let (kcb, kpb) = (avg(report, &report.mean_cost, "ksdkf_0.1I"), avg(report, &report.mean_penalty, "ksdkf_0.1I"));
    let b = outcome(
        "C7b",
        "second-weights comparison",
        a1 <= k1b && ac < kcb && ap < kpb,
        format!("RMS x1 ADKF {a1:.6} vs KSDKF {k1b:.6}; cost {ac:.6} vs {kcb:.6}; penalty {ap:.6} vs {kpb:.6}"),
    );

    let c = outcome(
        "C7c",
        "zero failed cases",
        report.failed.is_empty(),
        format!("{} of {} cases failed", report.failed.len(), report.n_cases),
    );
    vec![a, b, c]
}

fn scalar_riccati() -> AffineModel {
    AffineModel::constant(
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        1,
    )
    .unwrap()
}

fn riccati_endpoint(dt: f64, horizon: f64) -> f64 {
    let model = scalar_riccati();
    let p_hat = ParameterVector::zeros(1).unwrap();
    let state = ContinuousFilterState::new(DVector::zeros(1), DMatrix::zeros(1, 1), 1);
    let steps = (horizon / dt).round() as usize;
    let cfg = IntegratorConfig::rk4(dt).unwrap();
    fc::integrate(&state, &DVector::zeros(1), &model, &p_hat, &WeightingScheme::Conventional, &cfg, steps)
        .unwrap()
        .p_cov[(0, 0)]
}

fn c8_continuous() -> Outcome {
    let p_inf = 2f64.sqrt() - 1.0;
    let steady_err = (riccati_endpoint(0.01, 30.0) - p_inf).abs();

    let (e1, e2, e3) = (riccati_endpoint(0.2, 2.0), riccati_endpoint(0.1, 2.0), riccati_endpoint(0.05, 2.0));
    let order = ((e1 - e2).abs() / (e2 - e3).abs()).log2();

    // single-parameter model, ADKF trajectory, both gains at every step
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let model = verify::random_model(&mut rng, 3, 2, 1);
    let p_hat = ParameterVector::new(vec![0.05]).unwrap();
    let w: f64 = rng.random_range(0.1..=2.0);
    let scheme = WeightingScheme::Adkf { w_a: DMatrix::from_element(1, 1, w) };
    let cfg = IntegratorConfig::rk4(0.01).unwrap();
    let mut state = ContinuousFilterState::new(DVector::from_vec(vec![3.0, -2.0, 1.0]), DMatrix::identity(3, 3), 1);
    let z = DVector::from_vec(vec![0.5, -0.25]);
    let mut worst_equiv = 0.0_f64;
    for _ in 0..500 {
        let h = model.h(&p_hat, 0);
        let gamma = &h * &state.s + desense_kf::model::h_jacobian_action(&model, &p_hat, &state.xhat, 0).unwrap();
        let k_a = fc::continuous_gain_adkf(&state.p_cov, &h, &state.s, &gamma, &DMatrix::from_element(1, 1, w), model.r()).unwrap();
        let k_s = fc::continuous_gain_ksdkf(&state.p_cov, &h, &state.s, &gamma, &[DMatrix::identity(3, 3) * w], model.r()).unwrap();
        worst_equiv = worst_equiv.max((&k_s - &k_a).amax() / (1.0 + k_a.amax()));
        state = fc::integrate_step(&state, &z, &model, &p_hat, &scheme, &cfg).unwrap();
    }
    let passed = steady_err <= 1e-6 && (3.5..=4.5).contains(&order) && worst_equiv <= 1e-9;
    outcome(
        "C8",
        "continuous-time checks",
        passed,
        format!(
            "|P∞ − (√2−1)| = {steady_err:.3e} (≤ 1e-6); RK4 order {order:.3} (in [3.5, 4.5]); \
             ℓ=1 gain equivalence {worst_equiv:.3e} (≤ 1e-9)"
        ),
    )
}

fn c9_covariance_health(report: &ExperimentReport) -> Outcome {
    let passed = report.max_asymmetry <= 1e-10 && report.min_eig_ratio >= -1e-10;
    outcome(
        "C9",
        "covariance health",
        passed,
        format!(
            "max relative asymmetry {:.3e} (≤ 1e-10), min λ/Tr {:.3e} (≥ −1e-10)",
            report.max_asymmetry, report.min_eig_ratio
        ),
    )
}

fn csv_bytes(report: &ExperimentReport) -> (Vec<u8>, Vec<u8>) {
    let (mut rms, mut cost) = (Vec::new(), Vec::new());
    write_rms_csv(report, &mut rms).unwrap();
    write_cost_csv(report, &mut cost).unwrap();
    (rms, cost)
}

fn c10_determinism(reference: &ExperimentReport) -> Outcome {
    let cfg = paper_config();
    let base = csv_bytes(reference);
    let mut detail = Vec::new();
    let mut passed = true;
    for jobs in [1, 4] {
        let again = run_experiment(&cfg, Some(jobs)).expect("experiment runs");
        let same = csv_bytes(&again) == base;
        passed &= same;
        detail.push(format!("jobs={jobs}: {}", if same { "identical" } else { "DIFFERENT" }));
    }
    outcome("C10", "determinism across worker counts", passed, detail.join(", "))
}

fn main() -> ExitCode {
    let mut outcomes = vec![c1_reduction(), c2_stationarity(), c3_residual(), c4_equivalence(), c5_sensitivity(), c6_one_step_optimality()];

    let start = Instant::now();
    let report = run_experiment(&paper_config(), None).expect("paper experiment runs");
    let secs = start.elapsed().as_secs_f64();
    outcomes.extend(c7_monte_carlo(&report, secs));
    outcomes.push(c8_continuous());
    outcomes.push(c9_covariance_health(&report));
    outcomes.push(c10_determinism(&report));

    println!();
    for o in &outcomes {
        println!("[{}] {:<4} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.title, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\nacceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
