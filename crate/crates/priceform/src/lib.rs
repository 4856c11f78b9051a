//! Market-clearing price formation for a commodity with stochastic supply.
//!
//! The library models a market in which producers store a commodity and
//! choose production rates to meet an exogenous, noisy supply obligation.
//! The clearing price arises as the Lagrange multiplier of the market
//! clearing constraint. Two regimes are implemented:
//!
//! * **Finite-player games** ([`tree`]): N producers trade on a binomial
//!   lattice of supply noise. A structural solver computes the exact
//!   solution of the linear-quadratic game, and a projected-gradient
//!   fallback handles general convex costs.
//! * **Continuum limit** ([`continuum`]): a continuum of identical
//!   producers. The value function is a quartic-free polynomial whose
//!   coefficients satisfy a backward ODE system; the clearing price then
//!   follows an explicit stochastic differential equation.
//!
//! [`calibrate`] fits the supply process and cost parameters to hourly
//! market data, and [`cli`] exposes experiment drivers behind the
//! `priceform` binary.
//!
//! # Example
//!
//! Price at time zero in the continuum model with constant supply target:
//!
//! ```
//! use priceform::continuum::{initial_price, integrate_coefficients, MeanRevertingSupply};
//! use priceform::market::MarketParams;
//!
//! let params = MarketParams::new(1.0, 0.5, 1.0, 2.0, 0.0, 0.0)?;
//! let supply = MeanRevertingSupply::new(|_| 0.3, 0.2)?;
//! let table = integrate_coefficients(&params, &supply, 1000)?;
//! let w0 = initial_price(&params, &table, 0.0, 0.3)?;
//! assert!(w0.is_finite());
//! # Ok::<(), priceform::Error>(())
//! ```
//!
//! The same quantity from the ten-player game on a binomial lattice:
//!
//! ```
//! use priceform::market::{lq_cost, MarketParams};
//! use priceform::supply::{build_lattice, LinearSupplyModel};
//! use priceform::tree::{solve_lq, TreeProblem};
//!
//! let params = MarketParams::new(1.0, 0.5, 1.0, 2.0, 0.0, 0.0)?;
//! let model = LinearSupplyModel::mean_reverting(1.0, |_| 0.3, 0.2);
//! let lattice = build_lattice(&model, 0.3, 8, params.t_horizon)?;
//! let problem = TreeProblem {
//!     cost: lq_cost(&params),
//!     params,
//!     lattice,
//!     x0: vec![0.0; 10],
//! };
//! let solution = solve_lq(&problem)?;
//! assert!(solution.price[0][0].is_finite());
//! # Ok::<(), priceform::Error>(())
//! ```

pub mod calibrate;
pub mod cli;
pub mod continuum;
pub mod error;
pub mod io;
pub mod linalg;
pub mod market;
pub mod supply;
pub mod tree;

pub use error::{Error, Result};
pub use market::MarketParams;
