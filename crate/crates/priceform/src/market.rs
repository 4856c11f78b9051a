//! Market primitives: validated model parameters and running/terminal cost
//! structures for the producers' control problem.
//!
//! The canonical cost is linear-quadratic: a running cost
//! `L(x, v) = eta/2 (x - kappa)^2 + c/2 v^2` on the remaining reserves `x`
//! and extraction rate `v`, plus a terminal penalty
//! `Psi(x) = gamma/2 (x - zeta)^2`. Custom convex costs are supported for the
//! finite-player solver through [`CostModel::custom`].
//!
//! ```
//! use priceform::market::MarketParams;
//!
//! let params = MarketParams::new(1.0, 1.0, 1.0, 2.0, 0.25, 0.25).unwrap();
//! let text = serde_json::to_string(&params).unwrap();
//! assert!(text.contains("\"T\":1.0"));
//! assert!(MarketParams::new(1.0, 1.0, 0.0, 2.0, 0.25, 0.25).is_err()); // c > 0
//! ```

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validated linear-quadratic market parameters.
///
/// All producers share these parameters; the market clears when the average
/// extraction rate matches the exogenous supply rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Terminal time of the production horizon (strictly positive).
    #[serde(rename = "T", alias = "t_horizon")]
    pub t_horizon: f64,
    /// Weight of the quadratic reserves penalty in the running cost (>= 0).
    pub eta: f64,
    /// Weight of the quadratic extraction-rate cost (strictly positive).
    pub c: f64,
    /// Weight of the quadratic terminal reserves penalty (>= 0).
    pub gamma: f64,
    /// Preferred reserves level in the running cost.
    pub kappa: f64,
    /// Preferred reserves level at the terminal time.
    pub zeta: f64,
}

impl MarketParams {
    /// Builds a parameter set, rejecting values outside the admissible range.
    pub fn new(t_horizon: f64, eta: f64, c: f64, gamma: f64, kappa: f64, zeta: f64) -> Result<Self> {
        let params = MarketParams {
            t_horizon,
            eta,
            c,
            gamma,
            kappa,
            zeta,
        };
        params.validate()?;
        Ok(params)
    }

    /// Re-checks the admissibility constraints (useful after deserialization).
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("T", self.t_horizon),
            ("eta", self.eta),
            ("c", self.c),
            ("gamma", self.gamma),
            ("kappa", self.kappa),
            ("zeta", self.zeta),
        ] {
            if !value.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if self.t_horizon <= 0.0 {
            return Err(Error::InvalidParameter("T must be > 0".into()));
        }
        if self.c <= 0.0 {
            return Err(Error::InvalidParameter("c must be > 0".into()));
        }
        if self.eta < 0.0 {
            return Err(Error::InvalidParameter("eta must be >= 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidParameter("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// The Hamiltonian of the linear-quadratic control problem,
/// `H(x, p) = -eta/2 (x - kappa)^2 + p^2 / (2 c)`,
/// obtained as the Legendre transform `sup_v { -p v - L(x, v) }`.
pub fn lq_hamiltonian(params: &MarketParams, x: f64, p: f64) -> f64 {
    -0.5 * params.eta * (x - params.kappa).powi(2) + p * p / (2.0 * params.c)
}

/// The maximizing extraction rate in the Hamiltonian: `v*(p) = -p / c`.
pub fn lq_optimal_velocity(params: &MarketParams, p: f64) -> f64 {
    -p / params.c
}

/// Tags whether a cost model is the canonical linear-quadratic one (which
/// unlocks the exact finite-player solver) or a user-supplied convex cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostKind {
    Lq,
    Custom,
}

type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Running and terminal costs with their first derivatives.
///
/// `l(x, v)` is the running cost, `psi(x)` the terminal cost; `l_x`, `l_v`
/// and `psi_prime` are the corresponding partial derivatives used by the
/// adjoint recursion and the optimality conditions.
#[derive(Clone)]
pub struct CostModel {
    l: Fn2,
    l_x: Fn2,
    l_v: Fn2,
    psi: Fn1,
    psi_prime: Fn1,
    /// Whether this is the canonical LQ cost or a custom one.
    pub kind: CostKind,
}

impl fmt::Debug for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostModel").field("kind", &self.kind).finish()
    }
}

impl CostModel {
    /// Running cost `L(x, v)`.
    pub fn l(&self, x: f64, v: f64) -> f64 {
        (self.l)(x, v)
    }

    /// Partial derivative `L_x(x, v)`.
    pub fn l_x(&self, x: f64, v: f64) -> f64 {
        (self.l_x)(x, v)
    }

    /// Partial derivative `L_v(x, v)`.
    pub fn l_v(&self, x: f64, v: f64) -> f64 {
        (self.l_v)(x, v)
    }

    /// Terminal cost `Psi(x)`.
    pub fn psi(&self, x: f64) -> f64 {
        (self.psi)(x)
    }

    /// Terminal cost derivative `Psi'(x)`.
    pub fn psi_prime(&self, x: f64) -> f64 {
        (self.psi_prime)(x)
    }

    /// Wraps user-supplied cost functions and derivatives as a custom model.
    pub fn custom<L, Lx, Lv, P, Pp>(l: L, l_x: Lx, l_v: Lv, psi: P, psi_prime: Pp) -> Self
    where
        L: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Lx: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Lv: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        P: Fn(f64) -> f64 + Send + Sync + 'static,
        Pp: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        CostModel {
            l: Arc::new(l),
            l_x: Arc::new(l_x),
            l_v: Arc::new(l_v),
            psi: Arc::new(psi),
            psi_prime: Arc::new(psi_prime),
            kind: CostKind::Custom,
        }
    }

    /// Probes midpoint convexity of the running cost on a rectangular box and
    /// of the terminal cost on the `x` interval, using `resolution` grid
    /// points per axis (pairs of grid points are tested against their exact
    /// midpoint). Returns a report of the violations found.
    pub fn probe_convexity(
        &self,
        x_range: (f64, f64),
        v_range: (f64, f64),
        resolution: usize,
    ) -> ConvexityReport {
        let n = resolution.max(2);
        let xs: Vec<f64> = (0..n)
            .map(|i| x_range.0 + (x_range.1 - x_range.0) * i as f64 / (n - 1) as f64)
            .collect();
        let vs: Vec<f64> = (0..n)
            .map(|i| v_range.0 + (v_range.1 - v_range.0) * i as f64 / (n - 1) as f64)
            .collect();
        // Tolerance proportional to the magnitude of the values involved.
        let tol_for = |scale: f64| 1e-9 * (1.0 + scale.abs());

        let mut report = ConvexityReport::default();
        // Running cost over all pairs of grid points in the (x, v) box.
        let points: Vec<(f64, f64, f64)> = xs
            .iter()
            .flat_map(|&x| vs.iter().map(move |&v| (x, v, 0.0)))
            .map(|(x, v, _)| (x, v, self.l(x, v)))
            .collect();
        for (ia, &(xa, va, fa)) in points.iter().enumerate() {
            for &(xb, vb, fb) in points.iter().skip(ia + 1) {
                let fm = self.l(0.5 * (xa + xb), 0.5 * (va + vb));
                let gap = fm - 0.5 * (fa + fb);
                if gap > tol_for(fa.abs().max(fb.abs())) {
                    report.record(gap, (0.5 * (xa + xb), 0.5 * (va + vb)));
                }
            }
        }
        // Terminal cost over all pairs on the x axis.
        let pvals: Vec<f64> = xs.iter().map(|&x| self.psi(x)).collect();
        for (ia, &xa) in xs.iter().enumerate() {
            for (ib, &xb) in xs.iter().enumerate().skip(ia + 1) {
                let fm = self.psi(0.5 * (xa + xb));
                let gap = fm - 0.5 * (pvals[ia] + pvals[ib]);
                if gap > tol_for(pvals[ia].abs().max(pvals[ib].abs())) {
                    report.record(gap, (0.5 * (xa + xb), f64::NAN));
                }
            }
        }
        report
    }
}

/// Outcome of [`CostModel::probe_convexity`].
#[derive(Debug, Clone, Default)]
pub struct ConvexityReport {
    /// Number of midpoint-convexity violations detected.
    pub violations: usize,
    /// Largest violation gap `f(midpoint) - (f(a) + f(b)) / 2`.
    pub worst_gap: f64,
    /// Location `(x, v)` of the worst violation (`v` is NaN for the terminal
    /// cost, which depends on `x` alone).
    pub worst_point: Option<(f64, f64)>,
}

impl ConvexityReport {
    fn record(&mut self, gap: f64, point: (f64, f64)) {
        self.violations += 1;
        if gap > self.worst_gap {
            self.worst_gap = gap;
            self.worst_point = Some(point);
        }
    }

    /// True when no violation was found.
    pub fn is_convex(&self) -> bool {
        self.violations == 0
    }
}

/// The canonical linear-quadratic cost model for the given parameters.
pub fn lq_cost(params: &MarketParams) -> CostModel {
    let p = *params;
    CostModel {
        l: Arc::new(move |x, v| {
            0.5 * p.eta * (x - p.kappa).powi(2) + 0.5 * p.c * v * v
        }),
        l_x: Arc::new(move |x, _| p.eta * (x - p.kappa)),
        l_v: Arc::new(move |_, v| p.c * v),
        psi: Arc::new(move |x| 0.5 * p.gamma * (x - p.zeta).powi(2)),
        psi_prime: Arc::new(move |x| p.gamma * (x - p.zeta)),
        kind: CostKind::Lq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn demo_params() -> MarketParams {
        MarketParams::new(1.0, 1.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(MarketParams::new(0.0, 1.0, 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(MarketParams::new(1.0, 1.0, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(MarketParams::new(1.0, -0.1, 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(MarketParams::new(1.0, 1.0, 1.0, -0.1, 0.0, 0.0).is_err());
        assert!(MarketParams::new(1.0, f64::NAN, 1.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_uses_horizon_alias() {
        let p = demo_params();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"T\":"));
        let back: MarketParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn hamiltonian_is_legendre_transform_of_running_cost() {
        // H(x, p) = sup_v { -p v - L(x, v) }, checked by dense scan over v.
        let params = demo_params();
        let cost = lq_cost(&params);
        for &(x, p) in &[(0.3, -0.7), (-1.2, 2.1), (0.0, 0.0), (2.0, -3.5)] {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0.0;
            let mut v = -10.0;
            while v <= 10.0 {
                let val = -p * v - cost.l(x, v);
                if val > best {
                    best = val;
                    arg = v;
                }
                v += 1e-4;
            }
            assert_abs_diff_eq!(lq_hamiltonian(&params, x, p), best, epsilon = 1e-6);
            assert_abs_diff_eq!(lq_optimal_velocity(&params, p), arg, epsilon = 1e-3);
        }
    }

    #[test]
    fn lq_derivatives_match_finite_differences() {
        let params = MarketParams::new(2.0, 0.7, 1.3, 0.4, -0.5, 1.5).unwrap();
        let cost = lq_cost(&params);
        let eps = 1e-6;
        for &(x, v) in &[(0.2, -0.4), (-1.0, 2.0), (3.0, 0.0)] {
            let fd_x = (cost.l(x + eps, v) - cost.l(x - eps, v)) / (2.0 * eps);
            let fd_v = (cost.l(x, v + eps) - cost.l(x, v - eps)) / (2.0 * eps);
            let fd_p = (cost.psi(x + eps) - cost.psi(x - eps)) / (2.0 * eps);
            assert_abs_diff_eq!(cost.l_x(x, v), fd_x, epsilon = 1e-6);
            assert_abs_diff_eq!(cost.l_v(x, v), fd_v, epsilon = 1e-6);
            assert_abs_diff_eq!(cost.psi_prime(x), fd_p, epsilon = 1e-6);
        }
    }

    #[test]
    fn convexity_probe_accepts_lq_and_flags_concave() {
        let params = demo_params();
        let report = lq_cost(&params).probe_convexity((-2.0, 2.0), (-2.0, 2.0), 17);
        assert!(report.is_convex());

        let concave = CostModel::custom(
            |x, v| -(x * x) - v * v,
            |x, _| -2.0 * x,
            |_, v| -2.0 * v,
            |x| -x * x,
            |x| -2.0 * x,
        );
        let report = concave.probe_convexity((-1.0, 1.0), (-1.0, 1.0), 9);
        assert!(!report.is_convex());
        assert!(report.worst_gap > 0.0);
    }
}
