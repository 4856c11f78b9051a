//! The continuum (mean-field) limit of the production game with
//! linear-quadratic costs and mean-reverting supply.
//!
//! The representative producer's value function is a quadratic polynomial in
//! the state `(x, xbar, q, w)` — own reserves, mean reserves, supply rate,
//! and price — with time-dependent coefficients solving a backward system of
//! fifteen Riccati-type ODEs. The market-clearing price then follows a
//! diffusion whose drift and volatility are explicit in those coefficients.
//!
//! Supply here is the unit-speed mean-reverting diffusion
//! `dQ = (q_bar(t) - Q) dt + sigma_s dW`, the class for which the
//! coefficient system below is derived.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::market::MarketParams;
use crate::supply::{draw_increments, noise_rng, LinearSupplyModel, NoiseKind};

/// Number of value-function coefficients: `a0`, `a1^1..a1^4`, `a2^1..a2^10`.
pub const STATE_DIM: usize = 15;

/// Threshold below which `a2^4 + 1` is treated as a singularity of the
/// coefficient system (it divides the price volatility and initial price).
pub const SINGULARITY_TOL: f64 = 1e-10;

/// Unit-speed mean-reverting supply `dQ = (q_bar(t) - Q) dt + sigma_s dW`.
#[derive(Clone)]
pub struct MeanRevertingSupply {
    q_bar: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Additive volatility of the supply rate (>= 0).
    pub sigma_s: f64,
}

impl std::fmt::Debug for MeanRevertingSupply {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeanRevertingSupply")
            .field("sigma_s", &self.sigma_s)
            .finish_non_exhaustive()
    }
}

impl MeanRevertingSupply {
    /// Builds the supply model from a target function and volatility.
    pub fn new<F>(q_bar: F, sigma_s: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(sigma_s >= 0.0 && sigma_s.is_finite()) {
            return Err(Error::InvalidParameter("sigma_s must be >= 0".into()));
        }
        Ok(MeanRevertingSupply {
            q_bar: Arc::new(q_bar),
            sigma_s,
        })
    }

    /// The reversion target `q_bar(t)`.
    pub fn q_bar(&self, t: f64) -> f64 {
        (self.q_bar)(t)
    }

    /// Drift `q_bar(t) - q`.
    pub fn drift(&self, q: f64, t: f64) -> f64 {
        self.q_bar(t) - q
    }

    /// The same model as a general affine supply diffusion.
    pub fn to_linear(&self) -> LinearSupplyModel {
        let q_bar = self.q_bar.clone();
        let sigma = self.sigma_s;
        LinearSupplyModel::new(|_| -1.0, move |t| q_bar(t), |_| 0.0, move |_| sigma)
    }
}

/// Time derivatives of the fifteen value-function coefficients.
///
/// Ordering: `[a0, a1_1..a1_4, a2_1..a2_10]`. `q_bar` is the supply target
/// evaluated at the same time as the state.
fn coefficient_rhs(a: &[f64; STATE_DIM], p: &MarketParams, sigma_s: f64, q_bar: f64) -> [f64; STATE_DIM] {
    let (c, eta, kappa) = (p.c, p.eta, p.kappa);
    let sig2 = sigma_s * sigma_s;
    let [a0, a11, a12, a13, a14, a21, a22, a23, a24, a25, a26, a27, a28, a29, a210] = *a;
    let _ = (a0, a25);
    let d24p1 = a24 + 1.0;
    [
        // a0
        a14 * (c * q_bar + eta * kappa) - q_bar * a13 + sig2 * a29 * (a23 + c) / d24p1
            - sig2 * a210 * (a23 + c).powi(2) / (d24p1 * d24p1)
            + a11 * a11 / (2.0 * c)
            - sig2 * a28
            - eta * kappa * kappa / 2.0,
        // a1_1
        q_bar * (c * a24 - a23) + 2.0 * a11 * a21 / c + eta * kappa * d24p1,
        // a1_2
        c * q_bar * a27 - q_bar * a26 + a11 * a22 / c + eta * kappa * a27 - eta * a14,
        // a1_3
        c * q_bar * a29 - 2.0 * q_bar * a28 - c * a14 + a11 * a23 / c + eta * kappa * a29 - a12
            + a13,
        // a1_4
        -q_bar * (a29 - 2.0 * c * a210) + a11 * d24p1 / c + 2.0 * eta * kappa * a210,
        // a2_1
        2.0 * a21 * a21 / c - eta / 2.0,
        // a2_2
        2.0 * a21 * a22 / c - eta * a24,
        // a2_3
        a23 * (2.0 * a21 + c) / c - c * a24 - a22,
        // a2_4
        2.0 * a21 * d24p1 / c,
        // a2_5
        a22 * a22 / (2.0 * c) - eta * a27,
        // a2_6
        a22 * a23 / c - c * a27 - eta * a29 - 2.0 * a25 + a26,
        // a2_7
        a22 * d24p1 / c - 2.0 * eta * a210,
        // a2_8
        a23 * a23 / (2.0 * c) - c * a29 - a26 + 2.0 * a28,
        // a2_9
        a23 * d24p1 / c - 2.0 * c * a210 - a27 + a29,
        // a2_10
        d24p1 * d24p1 / (2.0 * c),
    ]
}

/// Value-function coefficients tabulated on a uniform time grid over
/// `[0, T]`, as produced by [`integrate_coefficients`].
#[derive(Debug, Clone)]
pub struct CoefficientTable {
    /// Terminal time.
    pub t_horizon: f64,
    /// Ascending uniform grid `0 = t_0 < ... < t_n = T`.
    pub grid: Vec<f64>,
    /// Coefficient vectors `[a0, a1_1..a1_4, a2_1..a2_10]`, one per grid point.
    pub values: Vec<[f64; STATE_DIM]>,
}

impl CoefficientTable {
    /// Linear interpolation of the full coefficient vector at time `t`
    /// (exact at grid points; `t` must lie in `[0, T]` up to roundoff).
    pub fn interpolate(&self, t: f64) -> Result<[f64; STATE_DIM]> {
        let t_end = self.t_horizon;
        if !(t >= -1e-9 && t <= t_end + 1e-9) {
            return Err(Error::InvalidParameter(format!(
                "time {t} outside the table range [0, {t_end}]"
            )));
        }
        let t = t.clamp(0.0, t_end);
        let n = self.grid.len() - 1;
        let pos = t / t_end * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let w = pos - i as f64;
        let (lo, hi) = (&self.values[i], &self.values[i + 1]);
        let mut out = [0.0; STATE_DIM];
        for j in 0..STATE_DIM {
            out[j] = lo[j] + w * (hi[j] - lo[j]);
        }
        Ok(out)
    }

    /// Constant term `a0(t)`.
    pub fn a0(&self, t: f64) -> Result<f64> {
        Ok(self.interpolate(t)?[0])
    }

    /// Linear coefficient `a1^j(t)`, `j` in `1..=4`.
    pub fn a1(&self, j: usize, t: f64) -> Result<f64> {
        assert!((1..=4).contains(&j), "a1 index must be 1..=4");
        Ok(self.interpolate(t)?[j])
    }

    /// Quadratic coefficient `a2^j(t)`, `j` in `1..=10`.
    pub fn a2(&self, j: usize, t: f64) -> Result<f64> {
        assert!((1..=10).contains(&j), "a2 index must be 1..=10");
        Ok(self.interpolate(t)?[4 + j])
    }
}

/// Integrates the fifteen-coefficient backward system from the terminal
/// condition at `T` down to 0 with classical fixed-step RK4, storing the
/// solution on a uniform grid of `steps + 1` points.
///
/// Terminal values: `a0(T) = gamma zeta^2 / 2`, `a1^1(T) = -gamma zeta`,
/// `a2^1(T) = gamma / 2`, all other coefficients zero.
pub fn integrate_coefficients(
    params: &MarketParams,
    supply: &MeanRevertingSupply,
    steps: usize,
) -> Result<CoefficientTable> {
    params.validate()?;
    if steps < 100 {
        return Err(Error::InvalidParameter(
            "coefficient integration needs at least 100 steps".into(),
        ));
    }
    let t_end = params.t_horizon;
    let h = t_end / steps as f64;
    let mut a = [0.0; STATE_DIM];
    a[0] = 0.5 * params.gamma * params.zeta * params.zeta;
    a[1] = -params.gamma * params.zeta;
    a[5] = 0.5 * params.gamma;

    let mut values = vec![[0.0; STATE_DIM]; steps + 1];
    values[steps] = a;
    let sig = supply.sigma_s;
    let axpy = |a: &[f64; STATE_DIM], s: f64, k: &[f64; STATE_DIM]| {
        let mut out = *a;
        for j in 0..STATE_DIM {
            out[j] += s * k[j];
        }
        out
    };
    for step in (0..steps).rev() {
        // Integrating backward: the grid time decreases from t to t - h.
        let t = (step + 1) as f64 * t_end / steps as f64;
        let k1 = coefficient_rhs(&a, params, sig, supply.q_bar(t));
        let q_mid = supply.q_bar(t - 0.5 * h);
        let k2 = coefficient_rhs(&axpy(&a, -0.5 * h, &k1), params, sig, q_mid);
        let k3 = coefficient_rhs(&axpy(&a, -0.5 * h, &k2), params, sig, q_mid);
        let k4 = coefficient_rhs(&axpy(&a, -h, &k3), params, sig, supply.q_bar(t - h));
        for j in 0..STATE_DIM {
            a[j] -= h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_new = step as f64 * t_end / steps as f64;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::CoefficientBlowUp { t: t_new });
        }
        if a[8] + 1.0 <= SINGULARITY_TOL {
            return Err(Error::SingularCoefficient {
                t: t_new,
                value: a[8] + 1.0,
            });
        }
        values[step] = a;
    }
    Ok(CoefficientTable {
        t_horizon: t_end,
        grid: (0..=steps).map(|k| k as f64 * t_end / steps as f64).collect(),
        values,
    })
}

/// `(e^{a tau} - 1) / a`, with the limit `tau` as `a -> 0`.
fn exp_ratio(a: f64, tau: f64) -> f64 {
    if a.abs() < 1e-14 {
        tau
    } else {
        (a * tau).exp_m1() / a
    }
}

/// Closed-form values of `(a2^1, a2^2, a2^3, a2^4)` at time `t`.
///
/// Two regimes: `eta = 0` (explicit rational/exponential expressions), and
/// `eta > 0`, which additionally requires `c eta > gamma^2`; outside that
/// region the hyperbolic closed form is invalid and an error is returned.
pub fn closed_form_a2(params: &MarketParams, t: f64) -> Result<[f64; 4]> {
    params.validate()?;
    let (c, eta, gamma, t_end) = (params.c, params.eta, params.gamma, params.t_horizon);
    if !(t >= -1e-12 && t <= t_end + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "time {t} outside [0, {t_end}]"
        )));
    }
    let tau = (t_end - t).max(0.0);
    if eta == 0.0 {
        let denom = c + gamma * tau;
        let a21 = c * gamma / (2.0 * denom);
        let a22 = 0.0;
        let a23 = -c * gamma * (tau - 1.0 + (-tau).exp()) / denom;
        let a24 = -gamma * tau / denom;
        return Ok([a21, a22, a23, a24]);
    }
    let s = (c * eta).sqrt();
    if c * eta - gamma * gamma <= 0.0 {
        return Err(Error::ClosedFormDomain(format!(
            "eta > 0 closed form requires c*eta > gamma^2 (got c*eta = {}, gamma^2 = {})",
            c * eta,
            gamma * gamma
        )));
    }
    let r = (eta / c).sqrt();
    let k_amp = (c * eta / (c * eta - gamma * gamma)).sqrt();
    let at = (gamma / s).atanh();
    let a21 = 0.5 * s * (at + r * tau).tanh();
    let a24p1 = k_amp / (-r * tau - at).cosh();
    let a22 = (s * (-r * tau).sinh() + eta * tau + gamma - gamma * (r * tau).cosh()) * a24p1;
    let i1 = tau.exp_m1();
    let i2 = (tau - 1.0) * tau.exp() + 1.0;
    let i3 = 0.5 * (exp_ratio(1.0 + r, tau) + exp_ratio(1.0 - r, tau));
    let i4 = 0.5 * (exp_ratio(1.0 + r, tau) - exp_ratio(1.0 - r, tau));
    let phi = -(-tau).exp()
        * (-(c + gamma) * i1 - eta * i2 + (c + gamma) * i3 + (gamma / r + s) * i4);
    let a23 = phi * a24p1;
    Ok([a21, a22, a23, a24p1 - 1.0])
}

/// Drift and volatility of the market-clearing price at state
/// `(t, xbar, q)`:
/// `b_P = eta (xbar - kappa) - c b_S(q, t)` and
/// `sigma_P = -(a2^3(t) + c) / (a2^4(t) + 1) * sigma_S`.
pub fn price_coefficients(
    params: &MarketParams,
    table: &CoefficientTable,
    supply: &MeanRevertingSupply,
    t: f64,
    xbar: f64,
    q: f64,
) -> Result<(f64, f64)> {
    let a = table.interpolate(t)?;
    let denom = a[8] + 1.0;
    if denom.abs() <= SINGULARITY_TOL {
        return Err(Error::SingularCoefficient { t, value: denom });
    }
    let b_s = supply.drift(q, t);
    let b_p = params.eta * (xbar - params.kappa) - params.c * b_s;
    let sigma_p = -(a[7] + params.c) / denom * supply.sigma_s;
    Ok((b_p, sigma_p))
}

/// Initial market-clearing price for mean reserves `mu0` and supply `q0`:
/// the unique `w` such that the representative mean extraction rate at time
/// zero equals `q0`.
pub fn initial_price(
    params: &MarketParams,
    table: &CoefficientTable,
    mu0: f64,
    q0: f64,
) -> Result<f64> {
    let a = table.interpolate(0.0)?;
    let denom = a[8] + 1.0;
    if denom.abs() <= SINGULARITY_TOL {
        return Err(Error::SingularCoefficient {
            t: 0.0,
            value: denom,
        });
    }
    Ok(-(mu0 * (2.0 * a[5] + a[6]) + q0 * (a[7] + params.c) + a[1]) / denom)
}

/// One simulated joint path of mean reserves, supply, and price on a uniform
/// grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceScenario {
    /// Time grid (uniform, starting at 0).
    pub grid: Vec<f64>,
    /// Mean reserves path.
    pub xbar: Vec<f64>,
    /// Supply-rate path.
    pub q: Vec<f64>,
    /// Market-clearing price path.
    pub price: Vec<f64>,
}

/// Euler simulation of the joint `(xbar, Q, price)` dynamics driven by the
/// given noise increments with step size `h` (the supply and price share the
/// same Brownian motion). The path may stop before `T`: `h * increments.len()
/// <= T` is required.
pub fn simulate_price_with(
    params: &MarketParams,
    table: &CoefficientTable,
    supply: &MeanRevertingSupply,
    mu0: f64,
    q0: f64,
    h: f64,
    increments: &[f64],
) -> Result<PriceScenario> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("step size must be > 0".into()));
    }
    let m = increments.len();
    if m == 0 {
        return Err(Error::InvalidParameter(
            "at least one increment is required".into(),
        ));
    }
    if h * m as f64 > params.t_horizon * (1.0 + 1e-9) {
        return Err(Error::InvalidParameter(
            "path extends beyond the terminal time".into(),
        ));
    }
    let mut xbar = vec![mu0];
    let mut q = vec![q0];
    let mut price = vec![initial_price(params, table, mu0, q0)?];
    for (k, &dw) in increments.iter().enumerate() {
        let t = k as f64 * h;
        let (x, qq, w) = (xbar[k], q[k], price[k]);
        let (b_p, sigma_p) = price_coefficients(params, table, supply, t, x, qq)?;
        xbar.push(x + h * qq);
        q.push(qq + h * supply.drift(qq, t) + supply.sigma_s * dw);
        let w_next = w + h * b_p + sigma_p * dw;
        if !w_next.is_finite() {
            return Err(Error::NonFinite(format!("price at step {}", k + 1)));
        }
        price.push(w_next);
    }
    Ok(PriceScenario {
        grid: (0..=m).map(|k| k as f64 * h).collect(),
        xbar,
        q,
        price,
    })
}

/// Euler simulation over the whole horizon with `m_steps` steps and a seeded
/// noise stream (scenario index selects an independent stream per seed).
#[allow(clippy::too_many_arguments)]
pub fn simulate_price(
    params: &MarketParams,
    table: &CoefficientTable,
    supply: &MeanRevertingSupply,
    mu0: f64,
    q0: f64,
    m_steps: usize,
    seed: u64,
    scenario: u64,
    kind: NoiseKind,
) -> Result<PriceScenario> {
    if m_steps == 0 {
        return Err(Error::InvalidParameter("m_steps must be >= 1".into()));
    }
    let h = params.t_horizon / m_steps as f64;
    let mut rng = noise_rng(seed, scenario);
    let increments = draw_increments(&mut rng, m_steps, h, kind);
    simulate_price_with(params, table, supply, mu0, q0, h, &increments)
}

/// Closed-form stationary-start covariance `Cov(Q_t, price_t)` for the
/// time-homogeneous case `q_bar(t) = const` (so that `a2` closed forms with
/// `T` the horizon apply), with supply starting at its stationary law of
/// variance `sigma_s^2 / 2`... see `covariance_moment_ode` for the general
/// ODE-based evaluation. Two regimes as in [`closed_form_a2`].
pub fn covariance_closed_form(params: &MarketParams, sigma_s: f64, t: f64) -> Result<f64> {
    params.validate()?;
    let (c, eta, gamma, t_end) = (params.c, params.eta, params.gamma, params.t_horizon);
    if !(t >= 0.0 && t <= t_end + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "time {t} outside [0, {t_end}]"
        )));
    }
    let sig2 = sigma_s * sigma_s;
    let et = t.exp();
    let e_t_end = t_end.exp();
    let front = -0.5 * sig2 * (et - 1.0) * (-2.0 * t - t_end).exp();
    if eta == 0.0 {
        Ok(front
            * (c * (et + 1.0) * e_t_end - gamma * et * (et - 2.0 * e_t_end + 1.0)))
    } else {
        Ok(front
            * (c * (et + 1.0) * e_t_end
                + gamma * et * (et - 2.0 * e_t_end + 1.0)
                + eta
                    * ((t + t_end).exp() * (-2.0 * t + 2.0 * t_end - 1.0) + et + et * et
                        - e_t_end)))
    }
}

/// Covariance `Cov(Q_t, price_t)` by forward integration of the exact moment
/// ODE system for the joint Gaussian dynamics (supply and price started at
/// deterministic values, so all covariances start at zero):
/// `V' = -2V + sigma_s^2`, `C_xq' = V - C_xq`,
/// `C_qw' = eta C_xq + c V - C_qw + sigma_s sigma_P(t)`,
/// where `V = Var(Q)`, `C_xq = Cov(xbar, Q)`, `C_qw = Cov(Q, price)`.
/// Valid for any parameters covered by `table`.
pub fn covariance_moment_ode(
    params: &MarketParams,
    table: &CoefficientTable,
    sigma_s: f64,
    t: f64,
    steps: usize,
) -> Result<f64> {
    if !(t >= 0.0 && t <= params.t_horizon + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "time {t} outside [0, {}]",
            params.t_horizon
        )));
    }
    if steps < 100 {
        return Err(Error::InvalidParameter(
            "moment integration needs at least 100 steps".into(),
        ));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let sig2 = sigma_s * sigma_s;
    let sigma_p = |s: f64| -> Result<f64> {
        let a = table.interpolate(s)?;
        let denom = a[8] + 1.0;
        if denom.abs() <= SINGULARITY_TOL {
            return Err(Error::SingularCoefficient { t: s, value: denom });
        }
        Ok(-(a[7] + params.c) / denom * sigma_s)
    };
    let h = t / steps as f64;
    let (mut v, mut cxq, mut cqw) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..steps {
        let s = k as f64 * h;
        let deriv = |v: f64, cxq: f64, cqw: f64, s: f64| -> Result<(f64, f64, f64)> {
            Ok((
                -2.0 * v + sig2,
                v - cxq,
                params.eta * cxq + params.c * v - cqw + sigma_s * sigma_p(s)?,
            ))
        };
        let k1 = deriv(v, cxq, cqw, s)?;
        let k2 = deriv(
            v + 0.5 * h * k1.0,
            cxq + 0.5 * h * k1.1,
            cqw + 0.5 * h * k1.2,
            s + 0.5 * h,
        )?;
        let k3 = deriv(
            v + 0.5 * h * k2.0,
            cxq + 0.5 * h * k2.1,
            cqw + 0.5 * h * k2.2,
            s + 0.5 * h,
        )?;
        let k4 = deriv(v + h * k3.0, cxq + h * k3.1, cqw + h * k3.2, s + h)?;
        v += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        cxq += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        cqw += h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
    }
    Ok(cqw)
}

/// Result of [`verify_price_adjoint`].
#[derive(Debug, Clone)]
pub struct AdjointCheck {
    /// Ensemble-mean drift residual per step, standardized by its standard
    /// error (should be order one under the model).
    pub standardized: Vec<f64>,
    /// Largest absolute standardized residual.
    pub max_standardized: f64,
}

/// Checks the structural drift identity of the price process on an ensemble
/// of scenarios: under the model, `d(price + c Q) = eta (xbar - kappa) dt`
/// plus a martingale increment, so the per-step ensemble mean of
/// `delta(price + c Q) - h eta (xbar - kappa)` standardized by its standard
/// error should be of order one.
pub fn verify_price_adjoint(
    params: &MarketParams,
    scenarios: &[PriceScenario],
) -> Result<AdjointCheck> {
    let n = scenarios.len();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "at least two scenarios are required".into(),
        ));
    }
    let len = scenarios[0].grid.len();
    if scenarios.iter().any(|s| s.grid.len() != len) {
        return Err(Error::ShapeMismatch(
            "all scenarios must share the same grid".into(),
        ));
    }
    if len < 2 {
        return Err(Error::InvalidParameter("scenarios are too short".into()));
    }
    let h = scenarios[0].grid[1] - scenarios[0].grid[0];
    let mut standardized = Vec::with_capacity(len - 1);
    for k in 0..len - 1 {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for s in scenarios {
            let d = (s.price[k + 1] + params.c * s.q[k + 1])
                - (s.price[k] + params.c * s.q[k])
                - h * params.eta * (s.xbar[k] - params.kappa);
            sum += d;
            sumsq += d * d;
        }
        let mean = sum / n as f64;
        let var = (sumsq - sum * sum / n as f64) / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let z = if se < 1e-300 {
            if mean.abs() < 1e-10 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            mean / se
        };
        standardized.push(z);
    }
    let max_standardized = standardized
        .iter()
        .fold(0.0f64, |acc, z| acc.max(z.abs()));
    Ok(AdjointCheck {
        standardized,
        max_standardized,
    })
}

/// Maximum absolute residual of the dynamic-programming equation for the
/// quadratic value function assembled from `table`, evaluated at `samples`
/// random states on interior grid times (time derivative by a fourth-order
/// five-point stencil on the table grid, spatial derivatives analytic).
pub fn hjb_residual(
    params: &MarketParams,
    table: &CoefficientTable,
    supply: &MeanRevertingSupply,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let n = table.grid.len() - 1;
    if n < 8 {
        return Err(Error::InvalidParameter(
            "table is too coarse for the residual stencil".into(),
        ));
    }
    let h = table.t_horizon / n as f64;
    let mut rng = noise_rng(seed, u64::MAX);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let i = rng.gen_range(2..=(n - 2));
        let t = table.grid[i];
        let x: f64 = rng.gen_range(-2.0..2.0);
        let xbar: f64 = rng.gen_range(-2.0..2.0);
        let q: f64 = rng.gen_range(-2.0..2.0);
        let w: f64 = rng.gen_range(-2.0..2.0);

        // u_t from the five-point stencil applied to each coefficient.
        let mut a_t = [0.0; STATE_DIM];
        for j in 0..STATE_DIM {
            a_t[j] = (table.values[i - 2][j] - 8.0 * table.values[i - 1][j]
                + 8.0 * table.values[i + 1][j]
                - table.values[i + 2][j])
                / (12.0 * h);
        }
        let eval = |a: &[f64; STATE_DIM]| -> f64 {
            a[0] + a[1] * x
                + a[2] * xbar
                + a[3] * q
                + a[4] * w
                + a[5] * x * x
                + a[6] * x * xbar
                + a[7] * x * q
                + a[8] * x * w
                + a[9] * xbar * xbar
                + a[10] * xbar * q
                + a[11] * xbar * w
                + a[12] * q * q
                + a[13] * q * w
                + a[14] * w * w
        };
        let u_t = eval(&a_t);
        let a = &table.values[i];
        let u_x = a[1] + 2.0 * a[5] * x + a[6] * xbar + a[7] * q + a[8] * w;
        let u_xbar = a[2] + a[6] * x + 2.0 * a[9] * xbar + a[10] * q + a[11] * w;
        let u_q = a[3] + a[7] * x + a[10] * xbar + 2.0 * a[12] * q + a[13] * w;
        let u_w = a[4] + a[8] * x + a[11] * xbar + a[13] * q + 2.0 * a[14] * w;
        let (u_qq, u_qw, u_ww) = (2.0 * a[12], a[13], 2.0 * a[14]);

        let b_s = supply.drift(q, t);
        let sig_s = supply.sigma_s;
        let denom = a[8] + 1.0;
        if denom.abs() <= SINGULARITY_TOL {
            return Err(Error::SingularCoefficient { t, value: denom });
        }
        let b_p = params.eta * (xbar - params.kappa) - params.c * b_s;
        let sig_p = -(a[7] + params.c) / denom * sig_s;
        let hamiltonian = -0.5 * params.eta * (x - params.kappa).powi(2)
            + (w + u_x).powi(2) / (2.0 * params.c);
        let residual = -u_t + hamiltonian
            - (q * u_xbar
                + b_s * u_q
                + b_p * u_w
                + 0.5 * sig_s * sig_s * u_qq
                + sig_s * sig_p * u_qw
                + 0.5 * sig_p * sig_p * u_ww);
        worst = worst.max(residual.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn demo_params() -> MarketParams {
        MarketParams::new(1.0, 1.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap()
    }

    fn sine_supply(sigma: f64) -> MeanRevertingSupply {
        MeanRevertingSupply::new(|t: f64| (2.0 * std::f64::consts::PI * t).sin(), sigma).unwrap()
    }

    #[test]
    fn terminal_conditions_are_exact() {
        let params = demo_params();
        let table = integrate_coefficients(&params, &sine_supply(0.05), 500).unwrap();
        let last = table.values.last().unwrap();
        assert_eq!(last[0], 0.5 * params.gamma * params.zeta * params.zeta);
        assert_eq!(last[1], -params.gamma * params.zeta);
        assert_eq!(last[5], 0.5 * params.gamma);
        for j in [2, 3, 4, 6, 7, 8, 9, 10, 11, 12, 13, 14] {
            assert_eq!(last[j], 0.0);
        }
    }

    #[test]
    fn own_state_block_decouples_from_the_rest() {
        // a2^1..a2^4 obey a closed four-dimensional subsystem; integrating it
        // alone must reproduce the corresponding block of the full system.
        let params = MarketParams::new(1.3, 0.8, 1.7, 0.9, -0.3, 0.6).unwrap();
        let steps = 1500;
        let table = integrate_coefficients(&params, &sine_supply(0.4), steps).unwrap();

        let (c, eta) = (params.c, params.eta);
        let rhs4 = |a: [f64; 4]| {
            [
                2.0 * a[0] * a[0] / c - eta / 2.0,
                2.0 * a[0] * a[1] / c - eta * a[3],
                a[2] * (2.0 * a[0] + c) / c - c * a[3] - a[1],
                2.0 * a[0] * (a[3] + 1.0) / c,
            ]
        };
        let h = params.t_horizon / steps as f64;
        let mut a = [0.5 * params.gamma, 0.0, 0.0, 0.0];
        let mut vals = vec![[0.0; 4]; steps + 1];
        vals[steps] = a;
        for sidx in (0..steps).rev() {
            let add = |a: &[f64; 4], s: f64, k: &[f64; 4]| {
                [a[0] + s * k[0], a[1] + s * k[1], a[2] + s * k[2], a[3] + s * k[3]]
            };
            let k1 = rhs4(a);
            let k2 = rhs4(add(&a, -0.5 * h, &k1));
            let k3 = rhs4(add(&a, -0.5 * h, &k2));
            let k4 = rhs4(add(&a, -h, &k3));
            for j in 0..4 {
                a[j] -= h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            vals[sidx] = a;
        }
        for (full, own) in table.values.iter().zip(&vals) {
            for j in 0..4 {
                assert_abs_diff_eq!(full[5 + j], own[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn closed_forms_match_integration_eta_zero() {
        let params = MarketParams::new(1.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let table = integrate_coefficients(&params, &sine_supply(0.0), 2000).unwrap();
        for &t in &[0.0, 0.17, 0.5, 0.885, 1.0] {
            let cf = closed_form_a2(&params, t).unwrap();
            let a = table.interpolate(t).unwrap();
            for j in 0..4 {
                assert_abs_diff_eq!(cf[j], a[5 + j], epsilon = 1e-8);
            }
        }
        // Spot values at t = 0 for c = gamma = T = 1, eta = 0.
        let cf = closed_form_a2(&params, 0.0).unwrap();
        assert_abs_diff_eq!(cf[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(cf[3], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cf[2], -0.5 * (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn closed_forms_match_integration_eta_positive() {
        for (t_h, eta, c, gamma) in [
            (1.0, 1.0, 1.0, 0.5),
            (1.0, 1.0, 2.0, 0.9),
            (2.0, 4.0, 1.0, 1.5),
            (0.7, 0.5, 3.0, 1.1),
        ] {
            let params = MarketParams::new(t_h, eta, c, gamma, 0.1, -0.2).unwrap();
            let table = integrate_coefficients(&params, &sine_supply(0.3), 4000).unwrap();
            for i in [0, 1, 997, 2500, 4000] {
                let t = table.grid[i];
                let cf = closed_form_a2(&params, t).unwrap();
                for j in 0..4 {
                    assert_abs_diff_eq!(cf[j], table.values[i][5 + j], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn closed_form_rejects_parameters_outside_domain() {
        // eta > 0 with c*eta <= gamma^2 has no hyperbolic closed form.
        let params = MarketParams::new(1.0, 1.0, 1.0, 2.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            closed_form_a2(&params, 0.0),
            Err(Error::ClosedFormDomain(_))
        ));
    }

    #[test]
    fn initial_price_clears_the_market_at_time_zero() {
        // The mean optimal extraction rate -(w0 + u_x)/c evaluated at
        // x = xbar = mu0, q = q0, w = w0 must equal q0.
        let params = demo_params();
        let table = integrate_coefficients(&params, &sine_supply(0.05), 1000).unwrap();
        let (mu0, q0) = (0.6, 0.1);
        let w0 = initial_price(&params, &table, mu0, q0).unwrap();
        let a = table.interpolate(0.0).unwrap();
        let u_x = a[1] + 2.0 * a[5] * mu0 + a[6] * mu0 + a[7] * q0 + a[8] * w0;
        let v = -(w0 + u_x) / params.c;
        assert_abs_diff_eq!(v, q0, epsilon = 1e-10);
    }

    #[test]
    fn dynamic_programming_residual_is_small() {
        let params = demo_params();
        let supply = sine_supply(0.05);
        let table = integrate_coefficients(&params, &supply, 1000).unwrap();
        let worst = hjb_residual(&params, &table, &supply, 200, 13).unwrap();
        assert!(worst < 1e-5, "residual {worst}");
    }

    #[test]
    fn covariance_closed_form_matches_moment_ode_eta_zero() {
        let params = MarketParams::new(1.0, 0.0, 1.0, (2.0f64).exp(), 0.0, 0.0).unwrap();
        let sigma_s = 0.05;
        let supply = MeanRevertingSupply::new(|_| 0.0, sigma_s).unwrap();
        let table = integrate_coefficients(&params, &supply, 2000).unwrap();
        for &t in &[0.1, 0.37, 0.72, 1.0] {
            let cf = covariance_closed_form(&params, sigma_s, t).unwrap();
            // The moment ODE carries the linear-interpolation error of the
            // coefficient table, so the match is not at machine precision.
            let ode = covariance_moment_ode(&params, &table, sigma_s, t, 4000).unwrap();
            assert_abs_diff_eq!(cf, ode, epsilon = 1e-8);
        }
    }

    #[test]
    fn covariance_endpoint_identity_without_terminal_penalty() {
        // With eta = gamma = 0 the covariance reduces to
        // -sigma_s^2 c (1 - e^{-2t}) / 2 at every time.
        let params = MarketParams::new(1.0, 0.0, 1.3, 0.0, 0.0, 0.0).unwrap();
        let sigma_s = 0.4;
        for &t in &[0.2, 0.6, 1.0] {
            let cf = covariance_closed_form(&params, sigma_s, t).unwrap();
            let reference = -sigma_s * sigma_s * params.c * (1.0 - (-2.0 * t).exp()) / 2.0;
            assert_abs_diff_eq!(cf, reference, epsilon = 1e-14);
        }
    }

    #[test]
    fn price_drift_identity_holds_on_simulated_ensembles() {
        let params = demo_params();
        let supply = sine_supply(0.05);
        let table = integrate_coefficients(&params, &supply, 1000).unwrap();
        let scenarios: Vec<PriceScenario> = (0..400)
            .map(|s| {
                simulate_price(&params, &table, &supply, 0.5, 0.1, 40, 21, s, NoiseKind::Gaussian)
                    .unwrap()
            })
            .collect();
        let check = verify_price_adjoint(&params, &scenarios).unwrap();
        // Residuals are exact martingale increments under the simulated
        // model, so the standardized means behave like standard normals.
        assert!(check.max_standardized < 5.0, "{}", check.max_standardized);
    }

    #[test]
    fn blowup_is_reported_for_singular_configurations() {
        // Huge gamma with a long horizon drives the own-state Riccati block
        // through its singularity during backward integration.
        let params = MarketParams::new(10.0, 0.0, 0.01, 1e6, 0.0, 0.0).unwrap();
        let result = integrate_coefficients(&params, &sine_supply(0.0), 1000);
        assert!(matches!(
            result,
            Err(Error::SingularCoefficient { .. }) | Err(Error::CoefficientBlowUp { .. })
        ));
    }

    #[test]
    fn interpolation_is_exact_on_grid_points() {
        let params = demo_params();
        let table = integrate_coefficients(&params, &sine_supply(0.05), 500).unwrap();
        for i in [0, 1, 250, 499, 500] {
            let a = table.interpolate(table.grid[i]).unwrap();
            assert_eq!(a, table.values[i]);
        }
        assert!(table.interpolate(-0.5).is_err());
        assert!(table.interpolate(1.5).is_err());
    }
}
