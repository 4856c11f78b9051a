//! Exogenous supply-rate models, path simulation, and the binomial noise
//! lattice used by the finite-player solver.
//!
//! Supply follows a one-dimensional diffusion with affine coefficients,
//! `dQ = (b1(t) Q + b0(t)) dt + (s1(t) Q + s0(t)) dW`. A seasonal
//! Ornstein-Uhlenbeck model (deterministic oscillation plus a mean-reverting
//! residual) reduces exactly to this affine form.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard bound on the number of lattice steps: a non-recombining tree has
/// `2^M` leaves, so memory grows exponentially in `M`.
pub const MAX_LATTICE_STEPS: usize = 22;

type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Supply diffusion with affine drift and volatility:
/// `dQ = (b1(t) Q + b0(t)) dt + (s1(t) Q + s0(t)) dW`.
#[derive(Clone)]
pub struct LinearSupplyModel {
    b1: TimeFn,
    b0: TimeFn,
    s1: TimeFn,
    s0: TimeFn,
}

impl fmt::Debug for LinearSupplyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearSupplyModel").finish_non_exhaustive()
    }
}

impl LinearSupplyModel {
    /// Builds a model from time-dependent coefficient functions.
    pub fn new<B1, B0, S1, S0>(b1: B1, b0: B0, s1: S1, s0: S0) -> Self
    where
        B1: Fn(f64) -> f64 + Send + Sync + 'static,
        B0: Fn(f64) -> f64 + Send + Sync + 'static,
        S1: Fn(f64) -> f64 + Send + Sync + 'static,
        S0: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        LinearSupplyModel {
            b1: Arc::new(b1),
            b0: Arc::new(b0),
            s1: Arc::new(s1),
            s0: Arc::new(s0),
        }
    }

    /// Builds a model with constant coefficients.
    pub fn constant(b1: f64, b0: f64, s1: f64, s0: f64) -> Self {
        Self::new(move |_| b1, move |_| b0, move |_| s1, move |_| s0)
    }

    /// Mean reversion at rate `speed` towards a time-dependent target with
    /// additive volatility: `dQ = speed (target(t) - Q) dt + sigma dW`.
    pub fn mean_reverting<F>(speed: f64, target: F, sigma: f64) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            move |_| -speed,
            move |t| speed * target(t),
            |_| 0.0,
            move |_| sigma,
        )
    }

    /// Drift `b(q, t) = b1(t) q + b0(t)`.
    pub fn drift(&self, q: f64, t: f64) -> f64 {
        (self.b1)(t) * q + (self.b0)(t)
    }

    /// Volatility `sigma(q, t) = s1(t) q + s0(t)`.
    pub fn vol(&self, q: f64, t: f64) -> f64 {
        (self.s1)(t) * q + (self.s0)(t)
    }
}

/// A truncated Fourier series `constant + sum_k (sin_k sin(2 pi k t / period)
/// + cos_k cos(2 pi k t / period))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    /// Constant (mean) term.
    pub constant: f64,
    /// Harmonic coefficients, one record per frequency.
    pub terms: Vec<FourierTerm>,
    /// Fundamental period (strictly positive).
    pub period: f64,
}

/// One harmonic of a [`FourierSeries`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    /// Harmonic index (frequency `k / period`).
    pub k: u32,
    /// Coefficient of `sin(2 pi k t / period)`.
    pub sin: f64,
    /// Coefficient of `cos(2 pi k t / period)`.
    pub cos: f64,
}

impl FourierSeries {
    /// A pure `amplitude * sin(2 pi t / period)` wave.
    pub fn sine(amplitude: f64, period: f64) -> Self {
        FourierSeries {
            constant: 0.0,
            terms: vec![FourierTerm {
                k: 1,
                sin: amplitude,
                cos: 0.0,
            }],
            period,
        }
    }

    /// Evaluates the series at time `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI / self.period;
        let mut acc = self.constant;
        for term in &self.terms {
            let phase = omega * term.k as f64 * t;
            acc += term.sin * phase.sin() + term.cos * phase.cos();
        }
        acc
    }

    /// Evaluates the time derivative of the series at time `t`.
    pub fn deriv(&self, t: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI / self.period;
        let mut acc = 0.0;
        for term in &self.terms {
            let w = omega * term.k as f64;
            let phase = w * t;
            acc += w * (term.sin * phase.cos() - term.cos * phase.sin());
        }
        acc
    }
}

/// Seasonal Ornstein-Uhlenbeck supply: `Q(t) = Q_osc(t) + Y(t)` where
/// `Q_osc` is a deterministic Fourier oscillation and the residual `Y`
/// mean-reverts, `dY = theta (y_bar - Y) dt + sigma_s dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillatoryOUModel {
    /// Deterministic seasonal component `Q_osc`.
    pub fourier: FourierSeries,
    /// Mean-reversion speed of the residual (strictly positive).
    pub theta: f64,
    /// Long-run level of the residual.
    pub y_bar: f64,
    /// Additive volatility of the residual (strictly positive).
    pub sigma_s: f64,
}

impl OscillatoryOUModel {
    /// Validates the structural parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidParameter("theta must be > 0".into()));
        }
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::InvalidParameter("sigma_s must be > 0".into()));
        }
        if !(self.fourier.period > 0.0 && self.fourier.period.is_finite()) {
            return Err(Error::InvalidParameter("period must be > 0".into()));
        }
        Ok(())
    }

    /// Drift of the total supply `Q = Q_osc + Y`, obtained by substituting
    /// `Y = q - Q_osc(t)` into the residual dynamics:
    /// `b(q, t) = Q_osc'(t) + theta (y_bar + Q_osc(t)) - theta q`.
    pub fn drift(&self, q: f64, t: f64) -> f64 {
        self.fourier.deriv(t) + self.theta * (self.y_bar + self.fourier.eval(t) - q)
    }

    /// Volatility of the total supply (additive).
    pub fn vol(&self, _q: f64, _t: f64) -> f64 {
        self.sigma_s
    }

    /// The exact affine representation of the total supply:
    /// `b1 = -theta`, `b0(t) = Q_osc'(t) + theta (y_bar + Q_osc(t))`,
    /// `s1 = 0`, `s0 = sigma_s`.
    pub fn to_linear(&self) -> LinearSupplyModel {
        let m = self.clone();
        let theta = self.theta;
        let sigma = self.sigma_s;
        LinearSupplyModel::new(
            move |_| -theta,
            move |t| m.fourier.deriv(t) + theta * (m.y_bar + m.fourier.eval(t)),
            |_| 0.0,
            move |_| sigma,
        )
    }
}

/// Serializable supply specification used by configuration files; builds the
/// closure-backed [`LinearSupplyModel`] consumed by solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SupplyConfig {
    /// Affine coefficients given as polynomials in `t` (low order first).
    Linear {
        b1: Vec<f64>,
        b0: Vec<f64>,
        s1: Vec<f64>,
        s0: Vec<f64>,
    },
    /// Mean reversion towards a Fourier target with additive volatility.
    MeanReverting {
        speed: f64,
        target: FourierSeries,
        sigma: f64,
    },
    /// Seasonal Ornstein-Uhlenbeck model.
    OscillatoryOu(OscillatoryOUModel),
}

fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

impl SupplyConfig {
    /// Instantiates the affine supply model described by this configuration.
    pub fn build(&self) -> Result<LinearSupplyModel> {
        match self {
            SupplyConfig::Linear { b1, b0, s1, s0 } => {
                let (b1, b0, s1, s0) = (b1.clone(), b0.clone(), s1.clone(), s0.clone());
                Ok(LinearSupplyModel::new(
                    move |t| poly_eval(&b1, t),
                    move |t| poly_eval(&b0, t),
                    move |t| poly_eval(&s1, t),
                    move |t| poly_eval(&s0, t),
                ))
            }
            SupplyConfig::MeanReverting {
                speed,
                target,
                sigma,
            } => {
                if !(*speed > 0.0) {
                    return Err(Error::InvalidParameter("speed must be > 0".into()));
                }
                let target = target.clone();
                Ok(LinearSupplyModel::mean_reverting(
                    *speed,
                    move |t| target.eval(t),
                    *sigma,
                ))
            }
            SupplyConfig::OscillatoryOu(model) => {
                model.validate()?;
                Ok(model.to_linear())
            }
        }
    }
}

/// Distribution of the driving noise increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Gaussian increments `N(0, h)`.
    Gaussian,
    /// Two-point increments `+-sqrt(h)` with equal probability.
    Binomial,
}

/// A simulated supply path on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyPath {
    /// Time grid `t_k = k T / M`, `k = 0..=M`.
    pub grid: Vec<f64>,
    /// Supply values `Q_k`, one per grid point.
    pub values: Vec<f64>,
    /// Noise increments `dW_k`, `k = 0..M` (one fewer than values).
    pub increments: Vec<f64>,
}

impl SupplyPath {
    /// Grid spacing `T / M`.
    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }
}

/// Deterministic RNG stream for a `(seed, scenario)` pair. Distinct
/// scenarios under the same seed use independent streams.
pub fn noise_rng(seed: u64, scenario: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&scenario.to_le_bytes());
    key[16..24].copy_from_slice(b"pricefrm");
    ChaCha12Rng::from_seed(key)
}

/// Draws `m_steps` noise increments for step size `h` from `rng`.
pub fn draw_increments(
    rng: &mut ChaCha12Rng,
    m_steps: usize,
    h: f64,
    kind: NoiseKind,
) -> Vec<f64> {
    let root_h = h.sqrt();
    (0..m_steps)
        .map(|_| match kind {
            NoiseKind::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                z * root_h
            }
            NoiseKind::Binomial => {
                if rng.gen_bool(0.5) {
                    root_h
                } else {
                    -root_h
                }
            }
        })
        .collect()
}

/// Euler-Maruyama simulation of a supply path with a seeded noise stream.
pub fn euler_simulate(
    model: &LinearSupplyModel,
    q0: f64,
    m_steps: usize,
    t_horizon: f64,
    seed: u64,
    scenario: u64,
    kind: NoiseKind,
) -> Result<SupplyPath> {
    if m_steps == 0 {
        return Err(Error::InvalidParameter("m_steps must be >= 1".into()));
    }
    if !(t_horizon > 0.0) {
        return Err(Error::InvalidParameter("t_horizon must be > 0".into()));
    }
    let h = t_horizon / m_steps as f64;
    let mut rng = noise_rng(seed, scenario);
    let increments = draw_increments(&mut rng, m_steps, h, kind);
    euler_simulate_with(model, q0, t_horizon, &increments)
}

/// Euler-Maruyama simulation driven by explicitly supplied increments.
/// The number of steps equals `increments.len()`.
pub fn euler_simulate_with(
    model: &LinearSupplyModel,
    q0: f64,
    t_horizon: f64,
    increments: &[f64],
) -> Result<SupplyPath> {
    let m = increments.len();
    if m == 0 {
        return Err(Error::InvalidParameter(
            "at least one increment is required".into(),
        ));
    }
    if !(t_horizon > 0.0) {
        return Err(Error::InvalidParameter("t_horizon must be > 0".into()));
    }
    let grid: Vec<f64> = (0..=m).map(|k| k as f64 * t_horizon / m as f64).collect();
    let h = t_horizon / m as f64;
    let mut values = Vec::with_capacity(m + 1);
    values.push(q0);
    let mut q = q0;
    for (k, &dw) in increments.iter().enumerate() {
        let t = grid[k];
        q += h * model.drift(q, t) + model.vol(q, t) * dw;
        if !q.is_finite() {
            return Err(Error::NonFinite(format!("supply value at step {}", k + 1)));
        }
        values.push(q);
    }
    Ok(SupplyPath {
        grid,
        values,
        increments: increments.to_vec(),
    })
}

/// Recovers the noise increments that generated an Euler path:
/// `dW_k = (Q_{k+1} - Q_k - h b(Q_k, t_k)) / sigma(Q_k, t_k)`.
pub fn recover_noise(model: &LinearSupplyModel, path: &SupplyPath) -> Result<Vec<f64>> {
    let m = path.values.len().checked_sub(1).unwrap_or(0);
    if m == 0 || path.grid.len() != m + 1 {
        return Err(Error::ShapeMismatch(
            "path must have at least two grid points with matching values".into(),
        ));
    }
    let h = path.step();
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let (t, q) = (path.grid[k], path.values[k]);
        let sigma = model.vol(q, t);
        if sigma.abs() < 1e-12 {
            return Err(Error::ZeroVolatility {
                step: k,
                value: sigma,
            });
        }
        out.push((path.values[k + 1] - q - h * model.drift(q, t)) / sigma);
    }
    Ok(out)
}

/// Supply values on the non-recombining binomial tree.
///
/// Level `k` has `2^k` nodes. Node `j` at level `k` (0-based) has children
/// `2j` (up move, increment `+sqrt(h)`) and `2j + 1` (down move, `-sqrt(h)`)
/// at level `k + 1`. Values are generated by the same Euler step as
/// [`euler_simulate`], so every root-to-node path is an Euler path driven by
/// binomial increments.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLattice {
    /// Number of time steps `M` (levels run `0..=M`).
    pub m_steps: usize,
    /// Terminal time.
    pub t_horizon: f64,
    /// Step size `T / M`.
    pub h: f64,
    /// `levels[k][j]` is the supply value at node `(j, k)`.
    pub levels: Vec<Vec<f64>>,
}

/// Builds the supply lattice for `m_steps` steps over `[0, t_horizon]`.
pub fn build_lattice(
    model: &LinearSupplyModel,
    q0: f64,
    m_steps: usize,
    t_horizon: f64,
) -> Result<NoiseLattice> {
    if m_steps == 0 {
        return Err(Error::InvalidParameter("m_steps must be >= 1".into()));
    }
    if m_steps > MAX_LATTICE_STEPS {
        return Err(Error::CapacityExceeded(format!(
            "lattice with {m_steps} steps exceeds the maximum of {MAX_LATTICE_STEPS}"
        )));
    }
    if !(t_horizon > 0.0) {
        return Err(Error::InvalidParameter("t_horizon must be > 0".into()));
    }
    let h = t_horizon / m_steps as f64;
    let root_h = h.sqrt();
    let mut levels = Vec::with_capacity(m_steps + 1);
    levels.push(vec![q0]);
    for k in 0..m_steps {
        let t = k as f64 * t_horizon / m_steps as f64;
        let prev = &levels[k];
        let mut next = Vec::with_capacity(prev.len() * 2);
        for &q in prev {
            let base = q + h * model.drift(q, t);
            let vol = model.vol(q, t);
            next.push(base + vol * root_h);
            next.push(base - vol * root_h);
            if !next[next.len() - 1].is_finite() || !next[next.len() - 2].is_finite() {
                return Err(Error::NonFinite(format!("lattice value at level {}", k + 1)));
            }
        }
        levels.push(next);
    }
    Ok(NoiseLattice {
        m_steps,
        t_horizon,
        h,
        levels,
    })
}

/// The binomial increments (`+sqrt(h)` for an up move) along the unique
/// root-to-node path ending at node `node` of tree level `level`; bit
/// `level - 1 - k` of `node` selects the move at step `k` (0 = up).
pub fn binomial_path_increments(h: f64, level: usize, node: usize) -> Vec<f64> {
    let root_h = h.sqrt();
    (0..level)
        .map(|k| {
            let bit = (node >> (level - 1 - k)) & 1;
            if bit == 0 {
                root_h
            } else {
                -root_h
            }
        })
        .collect()
}

impl NoiseLattice {
    /// Time of level `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.t_horizon / self.m_steps as f64
    }

    /// The binomial increments along the unique root-to-node path ending at
    /// node `node` of level `level` (`level` increments, `+sqrt(h)` for up).
    pub fn path_increments(&self, level: usize, node: usize) -> Vec<f64> {
        binomial_path_increments(self.h, level, node)
    }

    /// Supply values along the root-to-node path (one value per level
    /// `0..=level`); the ancestor of `node` at level `k` is `node >> (level - k)`.
    pub fn path_values(&self, level: usize, node: usize) -> Vec<f64> {
        (0..=level)
            .map(|k| self.levels[k][node >> (level - k)])
            .collect()
    }
}
