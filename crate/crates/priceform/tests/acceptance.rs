//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS/FAIL` line (visible with `--nocapture`).
//!
//! Run with `cargo test --test acceptance -- --nocapture`.

use priceform::calibrate::{
    deterministic_price, fit_fourier_mean, fit_ou_mle, fit_price_params,
};
use priceform::cli::{convergence_experiment, covariance_monte_carlo, ConvergenceConfig};
use priceform::continuum::{
    closed_form_a2, covariance_closed_form, hjb_residual, integrate_coefficients,
    simulate_price_with, MeanRevertingSupply,
};
use priceform::market::{lq_cost, MarketParams};
use priceform::supply::{
    binomial_path_increments, build_lattice, noise_rng, FourierSeries, FourierTerm,
};
use priceform::tree::{
    brute_force_oracle, discrete_adjoint, solve_general, solve_lq, TreeProblem, TreeSolution,
};
use rand::Rng;
use rand_distr::StandardNormal;

/// Reference parameter set of the convergence study: `T = 1`,
/// `eta = c = 1`, `kappa = zeta = 0.25`, `gamma = e^2`.
fn reference_params() -> MarketParams {
    MarketParams::new(1.0, 1.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap()
}

fn reference_q_bar() -> FourierSeries {
    FourierSeries {
        constant: 0.0,
        terms: vec![FourierTerm {
            k: 1,
            sin: 1.0,
            cos: 0.0,
        }],
        period: 1.0,
    }
}

fn report(criterion: usize, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

/// Variable counts of the finite-player program at M = 11 match
/// `(N + 1)(2^11 - 1)` both by formula and by enumeration.
#[test]
fn criterion_01_variable_counts() {
    let params = reference_params();
    let supply = reference_q_bar();
    let model =
        priceform::supply::LinearSupplyModel::mean_reverting(1.0, move |t| supply.eval(t), 0.05);
    let lattice = build_lattice(&model, 0.1, 11, 1.0).unwrap();
    let expected = [(10usize, 22517usize), (30, 63457), (50, 104397)];
    let mut ok = true;
    let mut detail = String::new();
    for (n, want) in expected {
        let problem = TreeProblem {
            cost: lq_cost(&params),
            params,
            lattice: lattice.clone(),
            x0: vec![0.0; n],
        };
        let formula = (n + 1) * ((1usize << 11) - 1);
        let enumerated = problem.variable_count();
        ok &= formula == want && enumerated == want;
        detail.push_str(&format!("N={n}: {enumerated} (want {want}); "));
    }
    report(1, ok, detail.trim_end());
}

/// Finite-player prices approach the continuum price over N in {10, 30, 50}
/// (M = 11, seeded Normal(0, 0.1) initial draws): the mean pathwise L2
/// distance and the initial-mean error both decrease in at least 9 of 10
/// seeds, and the magnitudes stay within a factor of 3 of the reference
/// values (0.895 / 0.426 / 0.260) for a majority of seeds.
#[test]
fn criterion_02_convergence_trend() {
    let reference_l2 = [0.894968, 0.425748, 0.259851];
    let mut l2_monotone = 0usize;
    let mut x0_monotone = 0usize;
    let mut within_band = [0usize; 3];
    let mut lines = Vec::new();
    let seeds: Vec<u64> = (0..10).collect();
    for &seed in &seeds {
        let cfg = ConvergenceConfig {
            params: reference_params(),
            q_bar: reference_q_bar(),
            sigma_s: 0.05,
            q0: 0.1,
            mu0: 0.0,
            m_steps: 11,
            n_agents: vec![10, 30, 50],
            x0_sd: 0.1,
            ode_steps: 1000,
            seed,
        };
        let rows = convergence_experiment(&cfg).unwrap();
        let l2: Vec<f64> = rows.iter().map(|r| r.mean_l2).collect();
        let x0e: Vec<f64> = rows.iter().map(|r| r.xbar0_abs_error).collect();
        if l2[0] > l2[1] && l2[1] > l2[2] {
            l2_monotone += 1;
        }
        if x0e[0] > x0e[1] && x0e[1] > x0e[2] {
            x0_monotone += 1;
        }
        for col in 0..3 {
            if l2[col] >= reference_l2[col] / 3.0 && l2[col] <= reference_l2[col] * 3.0 {
                within_band[col] += 1;
            }
        }
        lines.push(format!(
            "seed {seed}: L2 = [{:.4}, {:.4}, {:.4}], |xbar0| = [{:.4}, {:.4}, {:.4}]",
            l2[0], l2[1], l2[2], x0e[0], x0e[1], x0e[2]
        ));
    }
    for line in &lines {
        println!("  {line}");
    }
    let band_ok = within_band.iter().all(|&c| c >= 6);
    let ok = l2_monotone >= 9 && x0_monotone >= 9 && band_ok;
    report(
        2,
        ok,
        &format!(
            "L2 decreasing in {l2_monotone}/10 seeds, |xbar0 - mu0| decreasing in \
             {x0_monotone}/10 seeds, magnitude within 3x of reference in \
             {within_band:?} of 10 seeds per column (need >= 9, >= 9, majority)"
        ),
    );
}

/// The closed-form quadratic coefficients match the backward RK4 integration
/// to 1e-6 on the whole grid at step 1e-3, for eta = 0 with several terminal
/// weights and for an eta > 0 case inside the closed form's domain.
#[test]
fn criterion_03_closed_form_vs_ode() {
    let cases: Vec<MarketParams> = vec![
        MarketParams::new(1.0, 0.0, 1.0, 0.5, 0.0, 0.0).unwrap(),
        MarketParams::new(1.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap(),
        MarketParams::new(1.0, 0.0, 1.0, (2.0f64).exp(), 0.0, 0.0).unwrap(),
        MarketParams::new(1.0, 1.0, 1.0, 0.5, 0.0, 0.0).unwrap(),
    ];
    let supply = MeanRevertingSupply::new(|_| 0.0, 0.05).unwrap();
    let mut worst = 0.0f64;
    for params in &cases {
        let table = integrate_coefficients(params, &supply, 1000).unwrap();
        for (idx, &t) in table.grid.iter().enumerate() {
            let cf = closed_form_a2(params, t).unwrap();
            for j in 0..4 {
                worst = worst.max((cf[j] - table.values[idx][5 + j]).abs());
            }
        }
    }
    report(
        3,
        worst <= 1e-6,
        &format!("max |closed form - RK4| over a2 coefficients = {worst:.3e} (tol 1e-6)"),
    );
}

/// Terminal conditions are stored exactly: `a0(T) = gamma zeta^2 / 2`,
/// `a1(T) = -gamma zeta` on the mean-reserve slot, `a2(T) = gamma / 2` on
/// the quadratic reserve slot, and the other twelve entries are exactly 0.
#[test]
fn criterion_04_terminal_conditions_exact() {
    let params = reference_params();
    let supply = MeanRevertingSupply::new(|t| (2.0 * std::f64::consts::PI * t).sin(), 0.05)
        .unwrap();
    let table = integrate_coefficients(&params, &supply, 500).unwrap();
    let terminal = table.values.last().unwrap();
    let gz = params.gamma * params.zeta;
    let mut ok = terminal[0] == gz * params.zeta / 2.0;
    ok &= terminal[1] == -gz;
    ok &= terminal[5] == params.gamma / 2.0;
    for (idx, &v) in terminal.iter().enumerate() {
        if ![0usize, 1, 5].contains(&idx) {
            ok &= v == 0.0;
        }
    }
    report(
        4,
        ok,
        "terminal coefficient vector equals [gamma zeta^2/2, -gamma zeta, 0.., gamma/2, 0..] exactly",
    );
}

/// Supply-price covariance: the eta = 0 closed form agrees with a
/// 1e5-path Euler Monte Carlo (step 1e-3) within 3 standard errors at the
/// quarter points, and the endpoint identities Cov(0) = 0 and (without
/// running and terminal penalties) Cov(T) = -sigma^2 c (1 - e^{-2T}) / 2
/// hold to 1e-12.
#[test]
fn criterion_05_covariance() {
    let params = MarketParams::new(1.0, 0.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap();
    let sigma_s = 0.05;
    let supply = MeanRevertingSupply::new(|_| 0.0, sigma_s).unwrap();
    let table = integrate_coefficients(&params, &supply, 1000).unwrap();
    let times = [0.25, 0.5, 0.75, 1.0];
    let mc =
        covariance_monte_carlo(&params, &table, sigma_s, &times, 100_000, 1000, 7).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for (i, &t) in times.iter().enumerate() {
        let cf = covariance_closed_form(&params, sigma_s, t).unwrap();
        let z = (mc[i].0 - cf) / mc[i].1;
        ok &= z.abs() <= 3.0;
        detail.push_str(&format!("t={t}: z={z:.2}; "));
    }
    // Cov(0) = 0 for any admissible parameters.
    let at_zero = covariance_closed_form(&params, sigma_s, 0.0).unwrap();
    ok &= at_zero.abs() <= 1e-12;
    // The terminal identity holds when eta = gamma = 0 (with a terminal
    // penalty the closed form differs from this expression).
    let free = MarketParams::new(1.0, 0.0, 1.0, 0.0, 0.0, 0.0).unwrap();
    let at_t = covariance_closed_form(&free, sigma_s, 1.0).unwrap();
    let identity = -sigma_s * sigma_s * free.c * (1.0 - (-2.0f64).exp()) / 2.0;
    ok &= (at_t - identity).abs() <= 1e-12;
    detail.push_str(&format!(
        "Cov(0)={at_zero:.1e}, |Cov(T) - identity| = {:.1e}",
        (at_t - identity).abs()
    ));
    report(5, ok, detail.trim_end());
}

fn oracle_instances() -> Vec<TreeProblem> {
    let mut instances = Vec::new();
    let series = reference_q_bar();
    for &eta in &[0.0, 1.0] {
        for &gamma in &[0.0, 1.0] {
            for m in 1..=3usize {
                for n in 1..=3usize {
                    for draw in 0..2u64 {
                        let params =
                            MarketParams::new(1.0, eta, 1.0, gamma, 0.25, 0.25).unwrap();
                        let q_bar = series.clone();
                        let model = priceform::supply::LinearSupplyModel::mean_reverting(
                            1.0,
                            move |t| q_bar.eval(t),
                            0.05,
                        );
                        let lattice = build_lattice(&model, 0.1, m, 1.0).unwrap();
                        let mut rng = noise_rng(90 + draw, (eta as u64) * 31 + m as u64);
                        let x0: Vec<f64> = (0..n)
                            .map(|_| {
                                let z: f64 = rng.sample(StandardNormal);
                                0.1 * z
                            })
                            .collect();
                        instances.push(TreeProblem {
                            cost: lq_cost(&params),
                            params,
                            lattice,
                            x0,
                        });
                    }
                }
            }
        }
    }
    instances
}

fn max_field_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut worst = 0.0f64;
    for (ai, bi) in a.iter().zip(b) {
        for (ak, bk) in ai.iter().zip(bi) {
            for (x, y) in ak.iter().zip(bk) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

fn balance_violation(problem: &TreeProblem, solution: &TreeSolution) -> f64 {
    let mut worst = 0.0f64;
    let n = problem.n_agents() as f64;
    for k in 0..problem.lattice.m_steps {
        for j in 0..problem.lattice.levels[k].len() {
            let mean: f64 = solution.v.iter().map(|vi| vi[k][j]).sum::<f64>() / n;
            worst = worst.max((mean - problem.lattice.levels[k][j]).abs());
        }
    }
    worst
}

/// The structural solver and the projected-gradient solver agree with the
/// dense reference solver on every small LQ instance (M <= 3, N <= 3,
/// eta and gamma in {0, 1}, two initial draws each).
#[test]
fn criterion_06_oracle_equivalence() {
    let mut worst_v = 0.0f64;
    let mut worst_p = 0.0f64;
    let mut worst_balance = 0.0f64;
    let mut worst_stationarity = 0.0f64;
    let instances = oracle_instances();
    let count = instances.len();
    for problem in &instances {
        let oracle = brute_force_oracle(problem).unwrap();
        for solution in [
            solve_lq(problem).unwrap(),
            solve_general(problem, 1e-10, 200_000).unwrap(),
        ] {
            worst_v = worst_v.max(max_field_diff(&solution.v, &oracle.v));
            let price_diff = solution
                .price
                .iter()
                .zip(&oracle.price)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0f64, f64::max);
            worst_p = worst_p.max(price_diff);
            worst_balance = worst_balance.max(balance_violation(problem, &solution));
            worst_stationarity = worst_stationarity.max(solution.kkt_residual);
        }
    }
    let ok = worst_v <= 1e-6
        && worst_p <= 1e-6
        && worst_balance <= 1e-10
        && worst_stationarity <= 1e-8;
    report(
        6,
        ok,
        &format!(
            "{count} instances: max |v - oracle| = {worst_v:.1e} (tol 1e-6), \
             max |price - oracle| = {worst_p:.1e} (tol 1e-6), balance = \
             {worst_balance:.1e} (tol 1e-10), stationarity = {worst_stationarity:.1e} (tol 1e-8)"
        ),
    );
}

/// On every solved instance the price equals `-(L_v + P^i)` for each agent
/// at each node (P recomputed independently), and the value is
/// agent-independent, both to 1e-8.
#[test]
fn criterion_07_multiplier_adjoint_identity() {
    let mut worst_identity = 0.0f64;
    let mut worst_spread = 0.0f64;
    for problem in &oracle_instances() {
        let solution = solve_lq(problem).unwrap();
        let adjoint = discrete_adjoint(problem, &solution);
        for k in 0..problem.lattice.m_steps {
            for j in 0..problem.lattice.levels[k].len() {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..problem.n_agents() {
                    let implied = -(problem.cost.l_v(solution.x[i][k][j], solution.v[i][k][j])
                        + adjoint[i][k][j]);
                    worst_identity =
                        worst_identity.max((implied - solution.price[k][j]).abs());
                    lo = lo.min(implied);
                    hi = hi.max(implied);
                }
                worst_spread = worst_spread.max(hi - lo);
            }
        }
    }
    let ok = worst_identity <= 1e-8 && worst_spread <= 1e-8;
    report(
        7,
        ok,
        &format!(
            "max |price + (L_v + P)| = {worst_identity:.1e}, max agent spread = \
             {worst_spread:.1e} (tol 1e-8)"
        ),
    );
}

/// Over the enumerated binomial ensemble with the reference parameters, the
/// empirical correlation between supply and the continuum price is negative
/// at the quarter points of the horizon.
#[test]
fn criterion_08_negative_supply_price_correlation() {
    let params = reference_params();
    let series = reference_q_bar();
    let supply = MeanRevertingSupply::new(move |t| series.eval(t), 0.05).unwrap();
    let table = integrate_coefficients(&params, &supply, 1000).unwrap();
    let m = 11usize;
    let h = params.t_horizon / m as f64;
    let leaves = 1usize << (m - 1);
    let scenarios: Vec<_> = (0..leaves)
        .map(|leaf| {
            let incs = binomial_path_increments(h, m - 1, leaf);
            simulate_price_with(&params, &table, &supply, 0.0, 0.1, h, &incs).unwrap()
        })
        .collect();
    let mut ok = true;
    let mut detail = String::new();
    for &t in &[0.25, 0.5, 0.75] {
        let k = ((t / h).round() as usize).min(m - 1);
        let q: Vec<f64> = scenarios.iter().map(|s| s.q[k]).collect();
        let p: Vec<f64> = scenarios.iter().map(|s| s.price[k]).collect();
        let n = q.len() as f64;
        let (mq, mp) = (q.iter().sum::<f64>() / n, p.iter().sum::<f64>() / n);
        let cov: f64 = q.iter().zip(&p).map(|(a, b)| (a - mq) * (b - mp)).sum::<f64>() / n;
        let vq: f64 = q.iter().map(|a| (a - mq) * (a - mq)).sum::<f64>() / n;
        let vp: f64 = p.iter().map(|b| (b - mp) * (b - mp)).sum::<f64>() / n;
        let corr = cov / (vq * vp).sqrt();
        ok &= corr < 0.0;
        detail.push_str(&format!("t={t}: corr={corr:.3}; "));
    }
    report(8, ok, detail.trim_end());
}

/// Calibration round-trips: the Fourier and price-parameter fits recover
/// noiseless synthetic inputs to 1e-8 (the latter over its identifiable
/// coefficients), and the OU maximum-likelihood estimator lands within 10%
/// (theta) and 5% (sigma) on 1e4-step exact-transition paths in at least
/// 18 of 20 seeded replications.
#[test]
fn criterion_09_calibration_round_trips() {
    // Fourier round trip.
    let truth = FourierSeries {
        constant: -0.03,
        terms: vec![
            FourierTerm { k: 1, sin: 0.88, cos: 0.12 },
            FourierTerm { k: 2, sin: -0.21, cos: 0.4 },
            FourierTerm { k: 3, sin: 0.05, cos: -0.07 },
            FourierTerm { k: 4, sin: 0.01, cos: 0.02 },
        ],
        period: 1.0,
    };
    let times: Vec<f64> = (0..24).map(|i| i as f64 / 23.0).collect();
    let values: Vec<f64> = times.iter().map(|&t| truth.eval(t)).collect();
    let fit = fit_fourier_mean(&times, &values, 4, 1.0).unwrap();
    let fourier_err = times
        .iter()
        .map(|&t| (fit.eval(t) - truth.eval(t)).abs())
        .fold(0.0f64, f64::max);

    // Price-parameter round trip on the identifiable coefficients.
    let params = MarketParams::new(1.0, 0.6, 1.1, 0.9, 0.45, -0.15).unwrap();
    let mu0 = 0.2;
    let q = |t: f64| truth.eval(t) + 0.3;
    let prices: Vec<f64> = times
        .iter()
        .map(|&t| deterministic_price(&params, mu0, &q, t))
        .collect();
    let pfit = fit_price_params(&times, &prices, &q, 1.0, mu0).unwrap();
    let price_err = (pfit.eta - params.eta)
        .abs()
        .max((pfit.c - params.c).abs())
        .max((pfit.kappa - params.kappa).abs())
        .max((pfit.zeta_given_gamma(params.gamma) - params.zeta).abs());

    // OU MLE replications with exact AR(1) transitions. The asymptotic
    // relative standard error of theta-hat is sqrt(2 / (n theta h)), about
    // 2.8% here, so the 10% band is a 3.5-sigma event per replication.
    let (theta, mean, sigma, h, steps) = (5.0f64, -0.4, 0.7, 0.05, 10_000usize);
    let rho = (-theta * h).exp();
    let innov = (sigma * sigma * (1.0 - rho * rho) / (2.0 * theta)).sqrt();
    let mut hits = 0usize;
    for rep in 0..20u64 {
        let mut rng = noise_rng(3000 + rep, 0);
        let mut path = Vec::with_capacity(steps + 1);
        let mut x = mean;
        path.push(x);
        for _ in 0..steps {
            let z: f64 = rng.sample(StandardNormal);
            x = mean + rho * (x - mean) + innov * z;
            path.push(x);
        }
        let fit = fit_ou_mle(&[path], h).unwrap();
        if (fit.theta - theta).abs() <= 0.1 * theta
            && (fit.sigma - sigma).abs() <= 0.05 * sigma
        {
            hits += 1;
        }
    }

    let ok = fourier_err <= 1e-8 && price_err <= 1e-8 && hits >= 18;
    report(
        9,
        ok,
        &format!(
            "Fourier error {fourier_err:.1e}, price-fit error {price_err:.1e} \
             (tol 1e-8), OU MLE within band in {hits}/20 replications (need >= 18)"
        ),
    );
}

/// The assembled quadratic value function satisfies the dynamic-programming
/// equation to 1e-5 at 100 random evaluation points (finite differences at
/// step 1e-3).
#[test]
fn criterion_10_hjb_residual() {
    let params = reference_params();
    let series = reference_q_bar();
    let supply = MeanRevertingSupply::new(move |t| series.eval(t), 0.05).unwrap();
    let table = integrate_coefficients(&params, &supply, 1000).unwrap();
    let worst = hjb_residual(&params, &table, &supply, 100, 42).unwrap();
    report(
        10,
        worst <= 1e-5,
        &format!("max dynamic-programming residual = {worst:.3e} (tol 1e-5)"),
    );
}
