//! The finite-player production game on the binomial noise lattice.
//!
//! `N` producers choose extraction rates at every node of a non-recombining
//! binomial tree so that the average rate matches the supply value at that
//! node. The market-clearing price is the Lagrange multiplier of the balance
//! constraint; the constraint at node `(j, k)` is weighted by its probability
//! times the step size (`h / 2^k`), so the multiplier itself is the price
//! (no rescaling is needed) and satisfies `price = -(L_v + P^i)` for every
//! agent, where `P^i` is the discrete adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{CostKind, CostModel, MarketParams};
use crate::supply::NoiseLattice;

/// Maximum number of unknowns accepted by [`brute_force_oracle`].
pub const ORACLE_CAPACITY: usize = 200;

/// A finite-player game instance: shared parameters and cost, the supply
/// lattice, and one initial reserves level per agent.
#[derive(Debug, Clone)]
pub struct TreeProblem {
    /// Shared market parameters (horizon, cost weights).
    pub params: MarketParams,
    /// Producer cost structure (canonical LQ or custom convex).
    pub cost: CostModel,
    /// Supply values on the binomial tree.
    pub lattice: NoiseLattice,
    /// Initial reserves, one entry per agent.
    pub x0: Vec<f64>,
}

impl TreeProblem {
    /// Number of agents `N`.
    pub fn n_agents(&self) -> usize {
        self.x0.len()
    }

    /// Number of decision nodes `2^M - 1` (levels `0..M`).
    pub fn node_count(&self) -> usize {
        (1usize << self.lattice.m_steps) - 1
    }

    /// Total unknowns of the constrained program: `N` velocity fields plus
    /// one multiplier per node, `(N + 1) (2^M - 1)`.
    pub fn variable_count(&self) -> usize {
        (self.n_agents() + 1) * self.node_count()
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.x0.is_empty() {
            return Err(Error::InvalidParameter("at least one agent is required".into()));
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("initial reserves must be finite".into()));
        }
        if (self.lattice.t_horizon - self.params.t_horizon).abs()
            > 1e-12 * self.params.t_horizon.max(1.0)
        {
            return Err(Error::ShapeMismatch(
                "lattice horizon differs from the market horizon".into(),
            ));
        }
        Ok(())
    }
}

/// Per-level node fields indexed `[level][node]`.
pub type LevelField = Vec<Vec<f64>>;
/// Per-agent node fields indexed `[agent][level][node]`.
pub type AgentField = Vec<LevelField>;

/// Solution of a finite-player instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSolution {
    /// Extraction rates `v[agent][k][j]` on decision levels `k = 0..M`.
    pub v: AgentField,
    /// Reserves `x[agent][k][j]` on levels `k = 0..=M`.
    pub x: AgentField,
    /// Market-clearing price per decision node.
    pub price: LevelField,
    /// Raw balance-constraint multipliers (equal to the price under the
    /// probability-times-step constraint weighting).
    pub multipliers: LevelField,
    /// Value of the discretized social objective at the solution.
    pub objective: f64,
    /// Largest violation of the first-order conditions, measured with an
    /// independently recomputed adjoint: `max |L_v + P + price|` together
    /// with the balance-constraint violation.
    pub kkt_residual: f64,
}

impl TreeSolution {
    /// Price values along every root-to-leaf path of the decision tree: one
    /// vector of `M` values (levels `0..M`) per leaf of level `M - 1`. Leaf
    /// `j`'s ancestor at level `k` is `j >> (M - 1 - k)`, matching the
    /// increment enumeration of [`NoiseLattice::path_increments`].
    pub fn price_paths(&self) -> Vec<Vec<f64>> {
        let m = self.price.len();
        let leaves = self.price[m - 1].len();
        (0..leaves)
            .map(|leaf| {
                (0..m)
                    .map(|k| self.price[k][leaf >> (m - 1 - k)])
                    .collect()
            })
            .collect()
    }
}

/// Forward pass: reserves on all levels from the initial values and the
/// extraction rates.
fn positions_from(problem: &TreeProblem, v: &AgentField) -> AgentField {
    let m = problem.lattice.m_steps;
    let h = problem.lattice.h;
    problem
        .x0
        .iter()
        .enumerate()
        .map(|(i, &x0)| {
            let mut levels: LevelField = Vec::with_capacity(m + 1);
            levels.push(vec![x0]);
            for k in 0..m {
                let prev = &levels[k];
                let mut next = vec![0.0; prev.len() * 2];
                for (j, &xj) in prev.iter().enumerate() {
                    let stepped = xj + h * v[i][k][j];
                    next[2 * j] = stepped;
                    next[2 * j + 1] = stepped;
                }
                levels.push(next);
            }
            levels
        })
        .collect()
}

/// The discretized social objective
/// `(1/N) sum_i [ sum_k 2^{-k} sum_j h L(x, v) + 2^{-M} sum_j Psi(x_M) ]`.
fn objective_value(problem: &TreeProblem, x: &AgentField, v: &AgentField) -> f64 {
    let m = problem.lattice.m_steps;
    let h = problem.lattice.h;
    let n = problem.n_agents() as f64;
    let mut total = 0.0;
    for i in 0..problem.n_agents() {
        let mut acc = 0.0;
        for k in 0..m {
            let weight = h / (1u64 << k) as f64;
            for j in 0..v[i][k].len() {
                acc += weight * problem.cost.l(x[i][k][j], v[i][k][j]);
            }
        }
        let wt = 1.0 / (1u64 << m) as f64;
        for &xl in &x[i][m] {
            acc += wt * problem.cost.psi(xl);
        }
        total += acc;
    }
    total / n
}

/// Backward adjoint recursion from given reserves and rates:
/// `P_{j,M-1} = mean_children Psi'(x_M)` and, below the last level,
/// `P_{j,k} = mean_children [ h L_x(x_{k+1}, v_{k+1}) + P_{k+1} ]`.
fn adjoint_from(problem: &TreeProblem, x: &AgentField, v: &AgentField) -> AgentField {
    let m = problem.lattice.m_steps;
    let h = problem.lattice.h;
    (0..problem.n_agents())
        .map(|i| {
            let mut p: LevelField = vec![Vec::new(); m];
            p[m - 1] = (0..x[i][m - 1].len())
                .map(|j| {
                    0.5 * (problem.cost.psi_prime(x[i][m][2 * j])
                        + problem.cost.psi_prime(x[i][m][2 * j + 1]))
                })
                .collect();
            for k in (0..m - 1).rev() {
                p[k] = (0..x[i][k].len())
                    .map(|j| {
                        let mut acc = 0.0;
                        for b in 0..2 {
                            let child = 2 * j + b;
                            acc += h * problem.cost.l_x(x[i][k + 1][child], v[i][k + 1][child])
                                + p[k + 1][child];
                        }
                        0.5 * acc
                    })
                    .collect();
            }
            p
        })
        .collect()
}

/// The discrete adjoint of a solution (recomputed from its reserves and
/// rates; one field per agent on decision levels `0..M`).
pub fn discrete_adjoint(problem: &TreeProblem, solution: &TreeSolution) -> AgentField {
    adjoint_from(problem, &solution.x, &solution.v)
}

/// First-order-condition residual: the largest of `|L_v + P + price|` over
/// agents and nodes and `|mean_i v - Q|` over nodes.
fn kkt_residual_of(problem: &TreeProblem, x: &AgentField, v: &AgentField, price: &LevelField) -> f64 {
    let adjoint = adjoint_from(problem, x, v);
    let m = problem.lattice.m_steps;
    let n = problem.n_agents();
    let mut worst = 0.0f64;
    for k in 0..m {
        for j in 0..v[0][k].len() {
            let mut mean_v = 0.0;
            for (i, vi) in v.iter().enumerate() {
                let g = problem.cost.l_v(x[i][k][j], vi[k][j]) + adjoint[i][k][j] + price[k][j];
                worst = worst.max(g.abs());
                mean_v += vi[k][j];
            }
            worst = worst.max((mean_v / n as f64 - problem.lattice.levels[k][j]).abs());
        }
    }
    worst
}

fn build_solution(
    problem: &TreeProblem,
    v: AgentField,
    price: LevelField,
) -> TreeSolution {
    let x = positions_from(problem, &v);
    let objective = objective_value(problem, &x, &v);
    let kkt_residual = kkt_residual_of(problem, &x, &v, &price);
    TreeSolution {
        multipliers: price.clone(),
        price,
        objective,
        kkt_residual,
        v,
        x,
    }
}

/// Exact solver for the linear-quadratic cost.
///
/// The optimality system separates into a mean component living on the tree
/// and per-agent deviations that are deterministic per level:
/// deviations obey a scalar Riccati recursion, while the mean reserves
/// follow the supply (`xbar_{k+1} = xbar_k + h Q_{j,k}`) and the mean
/// adjoint `Pbar` comes from one backward sweep. The price is then
/// `price_{j,k} = -(Pbar_{j,k} + c Q_{j,k})`.
pub fn solve_lq(problem: &TreeProblem) -> Result<TreeSolution> {
    problem.validate()?;
    if problem.cost.kind != CostKind::Lq {
        return Err(Error::InvalidParameter(
            "solve_lq requires the canonical LQ cost; use solve_general instead".into(),
        ));
    }
    let p = &problem.params;
    let (h, m, n) = (problem.lattice.h, problem.lattice.m_steps, problem.n_agents());
    let q = &problem.lattice.levels;

    // Deviation Riccati gains rho_k and the per-level decay of deviations.
    let mut rho = vec![0.0; m];
    rho[m - 1] = p.gamma / (1.0 + p.gamma * h / p.c);
    for k in (0..m - 1).rev() {
        let s = h * p.eta + rho[k + 1];
        rho[k] = s / (1.0 + h / p.c * s);
    }
    let mut decay = vec![1.0; m + 1];
    for k in 0..m {
        decay[k + 1] = decay[k] * (1.0 - h / p.c * rho[k]);
    }

    // Mean reserves on the tree and the mean adjoint.
    let xbar0 = problem.x0.iter().sum::<f64>() / n as f64;
    let mut xbar: LevelField = Vec::with_capacity(m + 1);
    xbar.push(vec![xbar0]);
    for k in 0..m {
        let prev = &xbar[k];
        let mut next = vec![0.0; prev.len() * 2];
        for (j, &xj) in prev.iter().enumerate() {
            let stepped = xj + h * q[k][j];
            next[2 * j] = stepped;
            next[2 * j + 1] = stepped;
        }
        xbar.push(next);
    }
    let mut pbar: LevelField = vec![Vec::new(); m];
    pbar[m - 1] = (0..xbar[m - 1].len())
        .map(|j| p.gamma * (xbar[m][2 * j] - p.zeta))
        .collect();
    for k in (0..m - 1).rev() {
        pbar[k] = (0..xbar[k].len())
            .map(|j| {
                let mut acc = 0.0;
                for b in 0..2 {
                    let child = 2 * j + b;
                    acc += h * p.eta * (xbar[k + 1][child] - p.kappa) + pbar[k + 1][child];
                }
                0.5 * acc
            })
            .collect();
    }

    let price: LevelField = (0..m)
        .map(|k| {
            (0..q[k].len())
                .map(|j| -(pbar[k][j] + p.c * q[k][j]))
                .collect()
        })
        .collect();

    // Per-agent rates: the common supply rate plus a deterministic
    // deviation -rho_k Y_k / c per level.
    let v: AgentField = problem
        .x0
        .iter()
        .map(|&x0| {
            let y0 = x0 - xbar0;
            (0..m)
                .map(|k| {
                    let dev = -rho[k] * y0 * decay[k] / p.c;
                    q[k].iter().map(|&qv| qv + dev).collect()
                })
                .collect()
        })
        .collect();

    Ok(build_solution(problem, v, price))
}

/// Returns the market-clearing price implied by raw balance multipliers.
///
/// Constraints are weighted by probability times step size, so the price
/// equals the multiplier directly; this helper only validates the field
/// shape and copies it.
pub fn price_from_multipliers(problem: &TreeProblem, multipliers: &LevelField) -> Result<LevelField> {
    let m = problem.lattice.m_steps;
    if multipliers.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "expected {m} multiplier levels, got {}",
            multipliers.len()
        )));
    }
    for (k, level) in multipliers.iter().enumerate() {
        if level.len() != (1usize << k) {
            return Err(Error::ShapeMismatch(format!(
                "level {k} has {} entries, expected {}",
                level.len(),
                1usize << k
            )));
        }
    }
    Ok(multipliers.clone())
}

/// Projected-gradient solver for general (convex) costs.
///
/// Iterates a diagonally preconditioned gradient step projected onto the
/// balance constraints, with Armijo backtracking on the social objective.
/// Converges when `max |L_v + P + price|` drops below `tol`.
pub fn solve_general(problem: &TreeProblem, tol: f64, max_iters: usize) -> Result<TreeSolution> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be > 0".into()));
    }
    let (h, m, n) = (problem.lattice.h, problem.lattice.m_steps, problem.n_agents());
    let q = &problem.lattice.levels;

    // Feasible start: every agent extracts exactly the supply rate.
    let mut v: AgentField = (0..n).map(|_| q[..m].to_vec()).collect();
    let mut x = positions_from(problem, &v);
    let mut f_cur = objective_value(problem, &x, &v);
    let mut residual = f64::INFINITY;

    for _ in 0..max_iters {
        let adjoint = adjoint_from(problem, &x, &v);
        // Projected (per-node mean removed) optimality gradients.
        let mut dir: AgentField = vec![vec![Vec::new(); m]; n];
        let mut slope = 0.0; // directional derivative of the objective
        residual = 0.0;
        for k in 0..m {
            let weight = h / ((1u64 << k) as f64 * n as f64);
            let nodes = q[k].len();
            for i in 0..n {
                dir[i][k] = vec![0.0; nodes];
            }
            for j in 0..nodes {
                let gs: Vec<f64> = (0..n)
                    .map(|i| problem.cost.l_v(x[i][k][j], v[i][k][j]) + adjoint[i][k][j])
                    .collect();
                let mean_g = gs.iter().sum::<f64>() / n as f64;
                for i in 0..n {
                    let d = -(gs[i] - mean_g);
                    dir[i][k][j] = d;
                    residual = residual.max(d.abs());
                    slope += weight * gs[i] * d;
                }
            }
        }
        if residual <= tol {
            break;
        }

        let evaluate = |alpha: f64| -> (AgentField, AgentField, f64) {
            let trial: AgentField = (0..n)
                .map(|i| {
                    (0..m)
                        .map(|k| {
                            (0..v[i][k].len())
                                .map(|j| v[i][k][j] + alpha * dir[i][k][j])
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let tx = positions_from(problem, &trial);
            let f_trial = objective_value(problem, &tx, &trial);
            (trial, tx, f_trial)
        };

        // Exact line search: the objective is quadratic along the direction
        // for the LQ cost (and convex for admissible custom costs), so one
        // probe at the Newton-like scale 1/c yields the curvature and the
        // parabola vertex. A probe step that happens to reflect across the
        // vertex (equal objective) would otherwise cycle.
        let probe = 1.0 / problem.params.c;
        let (_, _, f_probe) = evaluate(probe);
        let curvature = 2.0 * (f_probe - f_cur - probe * slope) / (probe * probe);
        let mut chosen = None;
        if curvature > 0.0 && slope < 0.0 {
            let alpha = -slope / curvature;
            let (trial, tx, f_trial) = evaluate(alpha);
            // Near the optimum the decrease underflows in f64; the vertex
            // step still shrinks the residual, so an objective equal up to
            // rounding is accepted (it cannot cycle: the vertex is the 1-D
            // minimizer, so the iterate contraction does not depend on
            // measurable objective decrease).
            if f_trial <= f_cur + f64::EPSILON * f_cur.abs().max(1.0) {
                chosen = Some((trial, tx, f_trial));
            }
        }
        if chosen.is_none() {
            // Armijo backtracking fallback for non-quadratic costs.
            let mut alpha = probe;
            for _ in 0..60 {
                let (trial, tx, f_trial) = evaluate(alpha);
                if f_trial <= f_cur + 1e-4 * alpha * slope {
                    chosen = Some((trial, tx, f_trial));
                    break;
                }
                alpha *= 0.5;
            }
        }
        match chosen {
            Some((trial, tx, f_trial)) => {
                v = trial;
                x = tx;
                f_cur = f_trial;
            }
            // The line search stalled at numerical precision.
            None => break,
        }
    }

    // Final residual and multipliers from a fresh adjoint.
    let adjoint = adjoint_from(problem, &x, &v);
    let mut price: LevelField = Vec::with_capacity(m);
    let mut final_res = 0.0f64;
    for k in 0..m {
        let nodes = q[k].len();
        let mut level = vec![0.0; nodes];
        for (j, entry) in level.iter_mut().enumerate() {
            let gs: Vec<f64> = (0..n)
                .map(|i| problem.cost.l_v(x[i][k][j], v[i][k][j]) + adjoint[i][k][j])
                .collect();
            let mean_g = gs.iter().sum::<f64>() / n as f64;
            *entry = -mean_g;
            for g in &gs {
                final_res = final_res.max((g - mean_g).abs());
            }
        }
        price.push(level);
    }
    if final_res > tol {
        return Err(Error::NoConvergence {
            residual: residual.max(final_res),
            iterations: max_iters,
            tolerance: tol,
        });
    }
    Ok(build_solution(problem, v, price))
}

/// Objective gradient of agent `i`'s rate at node `(j, k)`, computed by
/// direct enumeration of descendant contributions (no adjoint recursion);
/// used by the brute-force oracle so that it stays independent of the fast
/// solvers.
fn direct_gradient(problem: &TreeProblem, x: &AgentField, v: &AgentField) -> AgentField {
    let (h, m, n) = (problem.lattice.h, problem.lattice.m_steps, problem.n_agents());
    let mut grad: AgentField = vec![Vec::new(); n];
    for (i, gi) in grad.iter_mut().enumerate() {
        *gi = (0..m)
            .map(|k| {
                let nodes = 1usize << k;
                (0..nodes)
                    .map(|j| {
                        let mut acc = h / (1u64 << k) as f64
                            * problem.cost.l_v(x[i][k][j], v[i][k][j]);
                        // Running-cost contributions of strict descendants.
                        for level in (k + 1)..m {
                            let shift = level - k;
                            let w = h * h / (1u64 << level) as f64;
                            for l in (j << shift)..((j + 1) << shift) {
                                acc += w * problem.cost.l_x(x[i][level][l], v[i][level][l]);
                            }
                        }
                        // Terminal contributions of descendant leaves.
                        let shift = m - k;
                        let w = h / (1u64 << m) as f64;
                        for l in (j << shift)..((j + 1) << shift) {
                            acc += w * problem.cost.psi_prime(x[i][m][l]);
                        }
                        acc / n as f64
                    })
                    .collect()
            })
            .collect();
    }
    grad
}

fn flatten_index(n_agents: usize, node_of_level: &[usize], i: usize, k: usize, j: usize) -> usize {
    let _ = n_agents;
    i * node_of_level[node_of_level.len() - 1] + node_of_level[k] + j
}

/// Reference solver for small instances (`(N + 1)(2^M - 1) <= 200`).
///
/// For the LQ cost it assembles and solves the dense saddle-point system of
/// the constrained program directly. For custom costs it performs cyclic
/// coordinate minimization over the constraint-reduced variables with three
/// nested grid-refinement rounds (final grid step below `1e-4`).
pub fn brute_force_oracle(problem: &TreeProblem) -> Result<TreeSolution> {
    problem.validate()?;
    if problem.variable_count() > ORACLE_CAPACITY {
        return Err(Error::CapacityExceeded(format!(
            "{} unknowns exceed the oracle capacity of {ORACLE_CAPACITY}",
            problem.variable_count()
        )));
    }
    let (h, m, n) = (problem.lattice.h, problem.lattice.m_steps, problem.n_agents());
    let q = &problem.lattice.levels;
    let k_nodes = problem.node_count();
    // Offsets of each level inside a flattened node vector, plus the total.
    let mut node_of_level = Vec::with_capacity(m + 1);
    let mut acc = 0;
    for k in 0..=m {
        node_of_level.push(acc);
        acc += 1usize << k;
    }
    node_of_level[m] = k_nodes; // total decision nodes

    let unflatten = |v_flat: &[f64]| -> AgentField {
        (0..n)
            .map(|i| {
                (0..m)
                    .map(|k| {
                        (0..(1usize << k))
                            .map(|j| v_flat[i * k_nodes + node_of_level[k] + j])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let grad_flat = |v_flat: &[f64]| -> Vec<f64> {
        let v = unflatten(v_flat);
        let x = positions_from(problem, &v);
        let g = direct_gradient(problem, &x, &v);
        let mut out = vec![0.0; n * k_nodes];
        for i in 0..n {
            for k in 0..m {
                for j in 0..(1usize << k) {
                    out[flatten_index(n, &node_of_level, i, k, j)] = g[i][k][j];
                }
            }
        }
        out
    };

    if problem.cost.kind == CostKind::Lq {
        // Dense saddle-point system: gradient is affine, recover its matrix
        // by probing unit vectors.
        let nv = n * k_nodes;
        let g0 = grad_flat(&vec![0.0; nv]);
        let total = nv + k_nodes;
        let mut kkt = crate::linalg::Matrix::zeros(total, total);
        let mut rhs = vec![0.0; total];
        let mut probe = vec![0.0; nv];
        for col in 0..nv {
            probe[col] = 1.0;
            let g = grad_flat(&probe);
            probe[col] = 0.0;
            for row in 0..nv {
                kkt.set(row, col, g[row] - g0[row]);
            }
        }
        for (row, g) in g0.iter().enumerate() {
            rhs[row] = -g;
        }
        // Stationarity couples each rate to its node's multiplier with the
        // probability-times-step constraint weight.
        for i in 0..n {
            for k in 0..m {
                let w = h / ((1u64 << k) as f64 * n as f64);
                for j in 0..(1usize << k) {
                    let row = i * k_nodes + node_of_level[k] + j;
                    kkt.set(row, nv + node_of_level[k] + j, w);
                }
            }
        }
        // Balance constraints: mean rate equals the supply value.
        for k in 0..m {
            for j in 0..(1usize << k) {
                let row = nv + node_of_level[k] + j;
                for i in 0..n {
                    kkt.set(row, i * k_nodes + node_of_level[k] + j, 1.0 / n as f64);
                }
                rhs[row] = q[k][j];
            }
        }
        let z = crate::linalg::solve_dense(kkt, rhs)?;
        let v = unflatten(&z[..nv]);
        let price: LevelField = (0..m)
            .map(|k| {
                (0..(1usize << k))
                    .map(|j| z[nv + node_of_level[k] + j])
                    .collect()
            })
            .collect();
        return Ok(build_solution(problem, v, price));
    }

    // Custom cost: cyclic coordinate minimization over the reduced
    // variables d^i (agents 0..N-1), with agent N-1 absorbing -sum(d).
    let eval_f = |d: &[Vec<Vec<f64>>]| -> f64 {
        let v: AgentField = (0..n)
            .map(|i| {
                (0..m)
                    .map(|k| {
                        (0..(1usize << k))
                            .map(|j| {
                                let di = if i + 1 < n {
                                    d[i][k][j]
                                } else {
                                    -(0..n - 1).map(|l| d[l][k][j]).sum::<f64>()
                                };
                                q[k][j] + di
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let x = positions_from(problem, &v);
        objective_value(problem, &x, &v)
    };
    let mut d: Vec<Vec<Vec<f64>>> = vec![
        (0..m)
            .map(|k| vec![0.0; 1usize << k])
            .collect::<Vec<Vec<f64>>>();
        n.saturating_sub(1).max(1)
    ];
    if n > 1 {
        let mut f_cur = eval_f(&d);
        for half_width in [1.0, 0.04, 1.6e-3] {
            // Sweeps within one refinement round until no coordinate moves.
            for _ in 0..25 {
                let mut improved = false;
                for i in 0..n - 1 {
                    for k in 0..m {
                        for j in 0..(1usize << k) {
                            let center = d[i][k][j];
                            let mut best = (f_cur, center);
                            for step in 0..=50 {
                                let cand =
                                    center - half_width + 2.0 * half_width * step as f64 / 50.0;
                                d[i][k][j] = cand;
                                let f = eval_f(&d);
                                if f < best.0 {
                                    best = (f, cand);
                                }
                            }
                            d[i][k][j] = best.1;
                            if best.0 < f_cur - 1e-15 {
                                improved = true;
                            }
                            f_cur = best.0;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
        }
    }
    let v: AgentField = (0..n)
        .map(|i| {
            (0..m)
                .map(|k| {
                    (0..(1usize << k))
                        .map(|j| {
                            let di = if n == 1 {
                                0.0
                            } else if i + 1 < n {
                                d[i][k][j]
                            } else {
                                -(0..n - 1).map(|l| d[l][k][j]).sum::<f64>()
                            };
                            q[k][j] + di
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    // Multipliers from the optimality conditions via direct gradients.
    let x = positions_from(problem, &v);
    let g = direct_gradient(problem, &x, &v);
    let price: LevelField = (0..m)
        .map(|k| {
            let w = h / ((1u64 << k) as f64 * n as f64);
            (0..(1usize << k))
                .map(|j| {
                    let mean: f64 = (0..n).map(|i| g[i][k][j]).sum::<f64>() / n as f64;
                    -mean / w
                })
                .collect()
        })
        .collect();
    Ok(build_solution(problem, v, price))
}

/// Ensemble-mean discrete L2 distance between two families of price paths
/// sampled on the same grid with step `h`: the L2 norm in time uses the
/// trapezoid rule, and the result is averaged over paths.
pub fn mean_l2_distance(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "ensembles of {} and {} paths",
            a.len(),
            b.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("step must be > 0".into()));
    }
    let mut total = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        if pa.len() != pb.len() || pa.len() < 2 {
            return Err(Error::ShapeMismatch(
                "paths must share a common length of at least two".into(),
            ));
        }
        let mut acc = 0.0;
        for (idx, (va, vb)) in pa.iter().zip(pb).enumerate() {
            let d = (va - vb) * (va - vb);
            let w = if idx == 0 || idx == pa.len() - 1 { 0.5 } else { 1.0 };
            acc += w * d;
        }
        total += (h * acc).sqrt();
    }
    Ok(total / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{lq_cost, CostModel};
    use crate::supply::{build_lattice, LinearSupplyModel};
    use approx::assert_abs_diff_eq;

    fn sine_lattice(m: usize, t_h: f64, q0: f64, sigma: f64) -> NoiseLattice {
        let model = LinearSupplyModel::mean_reverting(
            1.0,
            |t: f64| (2.0 * std::f64::consts::PI * t).sin(),
            sigma,
        );
        build_lattice(&model, q0, m, t_h).unwrap()
    }

    fn lq_problem(m: usize, x0: Vec<f64>, params: MarketParams) -> TreeProblem {
        TreeProblem {
            cost: lq_cost(&params),
            lattice: sine_lattice(m, params.t_horizon, 0.1, 0.05),
            x0,
            params,
        }
    }

    #[test]
    fn variable_counts_match_known_sizes() {
        let params = MarketParams::new(1.0, 1.0, 1.0, 1.0, 0.25, 0.25).unwrap();
        for (n, expected) in [(10usize, 22517usize), (30, 63457), (50, 104397)] {
            let problem = lq_problem(11, vec![0.0; n], params);
            assert_eq!(problem.variable_count(), expected);
        }
    }

    #[test]
    fn one_step_price_matches_hand_computation() {
        // With a single step, price_0 = gamma (zeta - xbar0) - (c + gamma h) Q_0.
        let params = MarketParams::new(0.5, 0.0, 1.0, 1.0, 0.0, 0.2).unwrap();
        let problem = lq_problem(1, vec![0.4, 0.2], params);
        let q0 = problem.lattice.levels[0][0];
        let h = problem.lattice.h;
        let solution = solve_lq(&problem).unwrap();
        let expected = params.gamma * (params.zeta - 0.3) - (params.c + params.gamma * h) * q0;
        assert_abs_diff_eq!(solution.price[0][0], expected, epsilon = 1e-14);
        assert!(solution.kkt_residual < 1e-12);
    }

    #[test]
    fn lq_solver_agrees_with_dense_saddle_point_oracle() {
        let params = MarketParams::new(1.0, 0.8, 1.2, 2.0, 0.3, -0.1).unwrap();
        let problem = lq_problem(3, vec![1.0, 0.4, -0.2], params);
        assert!(problem.variable_count() <= ORACLE_CAPACITY);
        let fast = solve_lq(&problem).unwrap();
        let oracle = brute_force_oracle(&problem).unwrap();
        for k in 0..3 {
            for j in 0..(1 << k) {
                assert_abs_diff_eq!(fast.price[k][j], oracle.price[k][j], epsilon = 1e-8);
                for i in 0..3 {
                    assert_abs_diff_eq!(fast.v[i][k][j], oracle.v[i][k][j], epsilon = 1e-8);
                }
            }
        }
        assert_abs_diff_eq!(fast.objective, oracle.objective, epsilon = 1e-10);
    }

    #[test]
    fn projected_gradient_agrees_with_lq_solver() {
        let params = MarketParams::new(1.0, 1.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap();
        let problem = lq_problem(4, vec![0.9, 0.5, 0.1, -0.3], params);
        let exact = solve_lq(&problem).unwrap();
        let iterative = solve_general(&problem, 1e-9, 500).unwrap();
        for k in 0..4 {
            for j in 0..(1 << k) {
                assert_abs_diff_eq!(exact.price[k][j], iterative.price[k][j], epsilon = 1e-7);
            }
        }
        assert_abs_diff_eq!(exact.objective, iterative.objective, epsilon = 1e-10);
    }

    #[test]
    fn custom_cost_oracle_agrees_with_projected_gradient() {
        // Quartic extraction cost: still convex, outside the LQ fast path.
        let params = MarketParams::new(1.0, 0.5, 1.0, 1.0, 0.0, 0.1).unwrap();
        let cost = CostModel::custom(
            |x, v| 0.25 * x * x + 0.5 * v * v + 0.05 * v.powi(4),
            |x, _| 0.5 * x,
            |_, v| v + 0.2 * v.powi(3),
            |x| 0.5 * (x - 0.1) * (x - 0.1),
            |x| x - 0.1,
        );
        let problem = TreeProblem {
            cost,
            lattice: sine_lattice(2, 1.0, 0.1, 0.3),
            x0: vec![0.6, -0.2],
            params,
        };
        let iterative = solve_general(&problem, 1e-8, 2000).unwrap();
        let oracle = brute_force_oracle(&problem).unwrap();
        for k in 0..2 {
            for j in 0..(1 << k) {
                assert_abs_diff_eq!(iterative.price[k][j], oracle.price[k][j], epsilon = 1e-3);
                for i in 0..2 {
                    assert_abs_diff_eq!(iterative.v[i][k][j], oracle.v[i][k][j], epsilon = 1e-3);
                }
            }
        }
    }

    #[test]
    fn price_equals_negative_mean_of_rate_gradient_plus_adjoint() {
        let params = MarketParams::new(1.0, 1.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap();
        let problem = lq_problem(5, vec![0.7, 0.35, 0.0, -0.4], params);
        let solution = solve_lq(&problem).unwrap();
        let adjoint = discrete_adjoint(&problem, &solution);
        let n = problem.n_agents() as f64;
        for k in 0..5 {
            for j in 0..(1 << k) {
                let mean: f64 = (0..4)
                    .map(|i| {
                        problem.cost.l_v(solution.x[i][k][j], solution.v[i][k][j])
                            + adjoint[i][k][j]
                    })
                    .sum::<f64>()
                    / n;
                assert_abs_diff_eq!(solution.price[k][j], -mean, epsilon = 1e-10);
                assert_abs_diff_eq!(
                    solution.multipliers[k][j],
                    solution.price[k][j],
                    epsilon = 0.0
                );
            }
        }
    }

    #[test]
    fn symmetric_agents_extract_the_supply_rate() {
        let params = MarketParams::new(1.0, 1.0, 1.0, 2.0, 0.25, 0.25).unwrap();
        let problem = lq_problem(4, vec![0.5; 6], params);
        let solution = solve_lq(&problem).unwrap();
        for i in 0..6 {
            for k in 0..4 {
                for j in 0..(1 << k) {
                    assert_abs_diff_eq!(
                        solution.v[i][k][j],
                        problem.lattice.levels[k][j],
                        epsilon = 1e-13
                    );
                }
            }
        }
    }

    #[test]
    fn balance_constraint_holds_at_every_node() {
        let params = MarketParams::new(1.0, 1.0, 1.0, (2.0f64).exp(), 0.25, 0.25).unwrap();
        let problem = lq_problem(6, vec![0.9, 0.2, -0.5, 1.4, 0.05], params);
        let solution = solve_lq(&problem).unwrap();
        for k in 0..6 {
            for j in 0..(1 << k) {
                let mean: f64 =
                    (0..5).map(|i| solution.v[i][k][j]).sum::<f64>() / 5.0;
                assert_abs_diff_eq!(mean, problem.lattice.levels[k][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn price_paths_enumerate_the_tree_consistently() {
        let params = MarketParams::new(1.0, 1.0, 1.0, 1.0, 0.25, 0.25).unwrap();
        let problem = lq_problem(3, vec![0.25, 0.5], params);
        let solution = solve_lq(&problem).unwrap();
        let paths = solution.price_paths();
        assert_eq!(paths.len(), 4);
        // Leaf 2 = binary 10: down then up; ancestors 0 -> 1 -> 2.
        assert_eq!(paths[2][0], solution.price[0][0]);
        assert_eq!(paths[2][1], solution.price[1][1]);
        assert_eq!(paths[2][2], solution.price[2][2]);
    }

    #[test]
    fn oracle_capacity_and_cost_kind_are_enforced() {
        let params = MarketParams::new(1.0, 1.0, 1.0, 1.0, 0.25, 0.25).unwrap();
        let big = lq_problem(6, vec![0.0; 10], params);
        assert!(matches!(
            brute_force_oracle(&big),
            Err(Error::CapacityExceeded(_))
        ));
        let custom = TreeProblem {
            cost: CostModel::custom(|_, v| v * v, |_, _| 0.0, |_, v| 2.0 * v, |_| 0.0, |_| 0.0),
            ..lq_problem(2, vec![0.0, 1.0], params)
        };
        assert!(solve_lq(&custom).is_err());
    }

    #[test]
    fn constant_offset_has_known_mean_l2_distance() {
        let h = 1.0 / 11.0;
        let m = 11;
        let delta = 0.37;
        let a = vec![vec![1.0; m]; 8];
        let b = vec![vec![1.0 - delta; m]; 8];
        let dist = mean_l2_distance(&a, &b, h).unwrap();
        assert_abs_diff_eq!(dist, delta * (h * (m - 1) as f64).sqrt(), epsilon = 1e-12);
    }
}
