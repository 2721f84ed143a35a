//! Simulation of the impacted dynamics under feedback strategies read off a
//! value surface, and the resulting replication error `V_T − ĝ(X_T)`.
//!
//! Per step, with `γ_i = ∂²_x w(t_i, X_i)`:
//! `ΔX = μ dt + σ(t_i, X_i, γ_i) √dt ξ`, `ΔY = b dt + γ_i ΔX`,
//! `ΔV = F(t_i, X_i, γ_i) dt + Y_i ΔX`, where
//! `b = (∂_t + ½σ(γ)² ∂²_x) ∂_x w` comes from stencils on the stored surface.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facelift::{face_lift, PayoffSpec};
use crate::model::ImpactModel;
use crate::numerics::{first_diff_raw, interp_linear, mean_and_stderr, second_diff_raw, SpaceTimeGrid, Surface};
use crate::pde::{solve_delta_v, solve_hjb, solve_linear_v0, SolverOpts};
use crate::rng::{normal, path_rng};

/// Discretization of the gains integral `∫ Y dX`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeScheme {
    /// `Y_i ΔX`.
    Euler,
    /// Adds the iterated-integral term `½ γ_i (ΔX² − σ_i² dt)`, using
    /// `Y_s ≈ Y_i + γ_i (X_s − X_i)` inside the step.
    Milstein,
}

/// Feedback strategy fields on a grid.
#[derive(Debug, Clone)]
pub struct StrategySpec {
    pub grid: SpaceTimeGrid,
    pub y0: f64,
    /// ∂_x w, used only for tracking diagnostics.
    pub delta: Surface,
    pub gamma: Surface,
    /// ∂³_x w, used by the Milstein scheme.
    pub d3: Surface,
    pub b: Surface,
    pub terminal: Vec<f64>,
}

impl StrategySpec {
    /// Strategy `y = ∂_x w`, `γ = ∂²_x w`, `b = (∂_t + ½σ(γ)²∂²_x)∂_x w` of the
    /// value surface `w`, with the impacted volatility of `model`.
    pub fn from_surface(model: &ImpactModel, grid: &SpaceTimeGrid, w: &Surface, x0: f64) -> Self {
        let dx = grid.dx();
        let dt = grid.dt();
        let rows = grid.n_time + 1;
        // stencil outputs below these floors are cancellation noise
        let scale = w.iter().fold(1.0f64, |m, v| m.max(v.abs())) * 16.0 * f64::EPSILON;
        let snap = |v: f64, floor: f64| if v.abs() < floor { 0.0 } else { v };
        let mut delta = Surface::zeros(grid);
        let mut gamma = Surface::zeros(grid);
        for i in 0..rows {
            delta.row_mut(i).copy_from_slice(&first_diff_raw(w.row(i), dx));
            let g: Vec<f64> = second_diff_raw(w.row(i), dx)
                .into_iter()
                .map(|v| snap(v, scale / (dx * dx)))
                .collect();
            gamma.row_mut(i).copy_from_slice(&g);
        }
        let mut b = Surface::zeros(grid);
        let mut third = Surface::zeros(grid);
        for i in 0..rows {
            // forward time difference; the last row reuses the previous one
            let (lo, hi) = if i + 1 < rows { (i, i + 1) } else { (i - 1, i) };
            let d3: Vec<f64> = second_diff_raw(delta.row(i), dx)
                .into_iter()
                .map(|v| snap(v, scale / (dx * dx * dx)))
                .collect();
            third.row_mut(i).copy_from_slice(&d3);
            let t = grid.t(i);
            let row: Vec<f64> = (0..grid.n_space)
                .map(|j| {
                    let dt_delta = snap((delta.at(hi, j) - delta.at(lo, j)) / dt, scale / (dx * dt));
                    let s = model.sigma_ext(t, grid.x(j), gamma.at(i, j));
                    dt_delta + 0.5 * s * s * d3[j]
                })
                .collect();
            b.row_mut(i).copy_from_slice(&row);
        }
        let y0 = interp_linear(grid, delta.row(0), x0).value;
        StrategySpec {
            grid: *grid,
            y0,
            delta,
            gamma,
            d3: third,
            b,
            terminal: w.row(grid.n_time).to_vec(),
        }
    }

    /// y ≡ 0, γ ≡ 0, b ≡ 0 against a zero terminal.
    pub fn zero(grid: &SpaceTimeGrid) -> Self {
        StrategySpec {
            grid: *grid,
            y0: 0.0,
            delta: Surface::zeros(grid),
            gamma: Surface::zeros(grid),
            d3: Surface::zeros(grid),
            b: Surface::zeros(grid),
            terminal: vec![0.0; grid.n_space],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeOpts {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub scheme: HedgeScheme,
    /// Number of full paths to keep in the report.
    #[serde(default)]
    pub keep_paths: usize,
}

impl HedgeOpts {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        HedgeOpts {
            n_paths,
            n_steps,
            seed,
            scheme: HedgeScheme::Euler,
            keep_paths: 0,
        }
    }

    pub fn with_scheme(mut self, scheme: HedgeScheme) -> Self {
        self.scheme = scheme;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgePath {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub scheme: HedgeScheme,
    pub initial_capital: f64,
    pub y0: f64,
    /// V_T − ĝ(X_T) per path.
    pub terminal_errors: Vec<f64>,
    pub sup_error: f64,
    pub mean_error: f64,
    /// Sample standard deviation of the terminal errors.
    pub std_error: f64,
    /// `std_error / √n_paths`.
    pub stderr: f64,
    /// Paths stopped because f(X)γ reached 1 − δ_cap/2.
    pub domain_escapes: usize,
    /// First (path, step) that escaped the domain.
    pub first_escape: Option<(usize, usize)>,
    /// Paths that left the price grid and were clamped.
    pub grid_escapes: usize,
    /// max over paths and steps of |Y_i − ∂_x w(t_i, X_i)|.
    pub y_tracking_sup: f64,
    pub paths: Vec<HedgePath>,
}

impl HedgeReport {
    pub fn grid_escape_fraction(&self) -> f64 {
        self.grid_escapes as f64 / self.n_paths as f64
    }
}

struct PathResult {
    error: f64,
    escaped: Option<usize>,
    left_grid: bool,
    y_track: f64,
    path: Option<HedgePath>,
}

/// Simulates `(X, Y, V)` from `(x0, strategy.y0, v0_capital)`.
pub fn simulate_impact_dynamics(
    model: &ImpactModel,
    strategy: &StrategySpec,
    x0: f64,
    v0_capital: f64,
    opts: &HedgeOpts,
) -> Result<HedgeReport> {
    if opts.n_paths == 0 || opts.n_steps == 0 {
        return Err(Error::InvalidArgument("n_paths and n_steps must be positive".into()));
    }
    let grid = &strategy.grid;
    let dt = grid.maturity() / opts.n_steps as f64;
    let sq = dt.sqrt();
    let results: Vec<PathResult> = (0..opts.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(opts.seed, p as u64);
            let keep = p < opts.keep_paths;
            let mut path = keep.then(|| HedgePath {
                x: vec![x0],
                y: vec![strategy.y0],
                v: vec![v0_capital],
                gamma: vec![],
            });
            let (mut x, mut y, mut gains) = (x0, strategy.y0, 0.0);
            let mut left_grid = false;
            let mut escaped = None;
            let mut y_track = 0.0f64;
            for i in 0..opts.n_steps {
                let t = grid.t_start + i as f64 * dt;
                let g = strategy.gamma.bilinear(grid, t, x).value;
                let f = model.impact(x);
                if f * g >= 1.0 - 0.5 * model.cap_fraction() {
                    escaped = Some(i);
                    break;
                }
                y_track = y_track.max((y - strategy.delta.bilinear(grid, t, x).value).abs());
                let b = strategy.b.bilinear(grid, t, x).value;
                let s = model.sigma_ext(t, x, g);
                let dx = model.drift(t, x, g, b) * dt + s * sq * normal(&mut rng);
                let mut dv = model.big_f_ext(t, x, g) * dt + y * dx;
                let mut dy = b * dt + g * dx;
                if opts.scheme == HedgeScheme::Milstein {
                    let q = dx * dx - s * s * dt;
                    dv += 0.5 * g * q;
                    dy += 0.5 * strategy.d3.bilinear(grid, t, x).value * q;
                }
                gains += dv;
                y += dy;
                x += dx;
                if x < grid.x_min || x > grid.x_max {
                    left_grid = true;
                    x = x.clamp(grid.x_min, grid.x_max);
                }
                if let Some(p) = path.as_mut() {
                    p.x.push(x);
                    p.y.push(y);
                    p.v.push(v0_capital + gains);
                    p.gamma.push(g);
                }
            }
            let terminal = interp_linear(grid, &strategy.terminal, x).value;
            PathResult {
                error: v0_capital + gains - terminal,
                escaped,
                left_grid,
                y_track,
                path,
            }
        })
        .collect();

    let ok: Vec<f64> = results
        .iter()
        .filter(|r| r.escaped.is_none())
        .map(|r| r.error)
        .collect();
    let (mean_error, stderr) = mean_and_stderr(&ok);
    let first_escape = results.iter().enumerate().find_map(|(p, r)| r.escaped.map(|s| (p, s)));
    Ok(HedgeReport {
        n_paths: opts.n_paths,
        n_steps: opts.n_steps,
        seed: opts.seed,
        scheme: opts.scheme,
        initial_capital: v0_capital,
        y0: strategy.y0,
        sup_error: ok.iter().fold(0.0f64, |m, e| m.max(e.abs())),
        mean_error,
        std_error: stderr * (ok.len() as f64).sqrt(),
        stderr,
        domain_escapes: results.iter().filter(|r| r.escaped.is_some()).count(),
        first_escape,
        grid_escapes: results.iter().filter(|r| r.left_grid).count(),
        y_tracking_sup: results.iter().fold(0.0f64, |m, r| m.max(r.y_track)),
        paths: results.iter().filter_map(|r| r.path.clone()).collect(),
        terminal_errors: results.into_iter().map(|r| r.error).collect(),
    })
}

/// Hedge of ĝ read off the full PDE solution, started from v(0, x0).
pub fn exact_hedge(
    model: &ImpactModel,
    payoff: &PayoffSpec,
    grid: &SpaceTimeGrid,
    x0: f64,
    solver: &SolverOpts,
    opts: &HedgeOpts,
) -> Result<HedgeReport> {
    let terminal = face_lift(payoff, model, grid)?.g_hat_values;
    let sol = solve_hjb(model, &terminal, grid, solver)?;
    let strategy = StrategySpec::from_surface(model, grid, &sol.values, x0);
    simulate_impact_dynamics(model, &strategy, x0, sol.price_at(x0), opts)
}

/// Hedge built from w = v⁰ + εΔv in the model with impact scaled by ε,
/// started from w(0, x0).
pub fn asymptotic_hedge(
    model: &ImpactModel,
    payoff: &PayoffSpec,
    grid: &SpaceTimeGrid,
    eps: f64,
    x0: f64,
    opts: &HedgeOpts,
) -> Result<HedgeReport> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be non-negative, got {eps}")));
    }
    let terminal = face_lift(payoff, model, grid)?.g_hat_values;
    let v0 = solve_linear_v0(model, &terminal, grid)?;
    let dv = solve_delta_v(model, &v0, grid)?;
    let w = v0.values.axpy(eps, &dv.values);
    let scaled = model.clone().with_epsilon(model.epsilon() * eps);
    let strategy = StrategySpec::from_surface(&scaled, grid, &w, x0);
    let capital = interp_linear(grid, w.row(0), x0).value;
    simulate_impact_dynamics(&scaled, &strategy, x0, capital, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Drift;

    fn small_grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new(40.0, 250.0, 401, 0.0, 1.0, 200).unwrap()
    }

    #[test]
    fn zero_strategy_keeps_capital() {
        let grid = small_grid();
        let model = ImpactModel::bolozo_proportional(0.2, 0.1).unwrap();
        let r = simulate_impact_dynamics(
            &model,
            &StrategySpec::zero(&grid),
            100.0,
            3.5,
            &HedgeOpts::new(200, 50, 1),
        )
        .unwrap();
        assert!(r.terminal_errors.iter().all(|e| *e == 3.5));
    }

    #[test]
    fn affine_payoff_is_replicated_statically() {
        let grid = small_grid();
        let model = ImpactModel::bolozo_proportional(0.2, 0.1).unwrap();
        let payoff = PayoffSpec::Table {
            xs: vec![0.0, 300.0],
            ys: vec![-20.0, 280.0],
        };
        let r = exact_hedge(
            &model,
            &payoff,
            &grid,
            100.0,
            &SolverOpts::default(),
            &HedgeOpts::new(500, 100, 2),
        )
        .unwrap();
        assert!(r.sup_error <= 1e-10, "{}", r.sup_error);
    }

    #[test]
    fn cash_shift_moves_errors_by_the_shift() {
        let grid = small_grid();
        let model = ImpactModel::bolozo_proportional(0.2, 0.1).unwrap();
        let terminal = face_lift(&PayoffSpec::Call { strike: 100.0 }, &model, &grid)
            .unwrap()
            .g_hat_values;
        let sol = solve_hjb(&model, &terminal, &grid, &SolverOpts::default()).unwrap();
        let strat = StrategySpec::from_surface(&model, &grid, &sol.values, 100.0);
        let opts = HedgeOpts::new(300, 100, 4);
        let base = simulate_impact_dynamics(&model, &strat, 100.0, 8.0, &opts).unwrap();
        let shifted = simulate_impact_dynamics(&model, &strat, 100.0, 8.25, &opts).unwrap();
        for (a, b) in base.terminal_errors.iter().zip(&shifted.terminal_errors) {
            assert!((b - a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn stored_path_is_self_financing() {
        let grid = small_grid();
        let model = ImpactModel::bolozo_proportional(0.2, 0.1).unwrap();
        let terminal = face_lift(&PayoffSpec::Call { strike: 100.0 }, &model, &grid)
            .unwrap()
            .g_hat_values;
        let sol = solve_hjb(&model, &terminal, &grid, &SolverOpts::default()).unwrap();
        let strat = StrategySpec::from_surface(&model, &grid, &sol.values, 100.0);
        let opts = HedgeOpts {
            keep_paths: 3,
            ..HedgeOpts::new(3, 100, 8)
        };
        let r = simulate_impact_dynamics(&model, &strat, 100.0, sol.price_at(100.0), &opts).unwrap();
        let dt = 1.0 / 100.0;
        for p in &r.paths {
            let mut v = p.v[0];
            for i in 0..p.gamma.len() {
                let dx = p.x[i + 1] - p.x[i];
                v += model.big_f_ext(i as f64 * dt, p.x[i], p.gamma[i]) * dt + p.y[i] * dx;
                assert!((v - p.v[i + 1]).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn impact_free_delta_hedge_of_call_is_tight() {
        let grid = SpaceTimeGrid::new(40.0, 250.0, 801, 0.0, 1.0, 400).unwrap();
        let model = ImpactModel::bolozo_proportional(0.2, 0.0).unwrap();
        let r = exact_hedge(
            &model,
            &PayoffSpec::Call { strike: 100.0 },
            &grid,
            100.0,
            &SolverOpts::default(),
            &HedgeOpts::new(2000, 2000, 6),
        )
        .unwrap();
        assert!(
            r.mean_error.abs() <= 3.0 * r.stderr + 5e-3,
            "{} {}",
            r.mean_error,
            r.stderr
        );
        assert!(r.std_error < 0.3, "{}", r.std_error);
    }

    #[test]
    fn drift_does_not_bias_replication() {
        let grid = SpaceTimeGrid::new(40.0, 250.0, 401, 0.0, 1.0, 200).unwrap();
        let model = ImpactModel::bolozo_proportional(0.2, 0.1)
            .unwrap()
            .with_drift(Drift::Constant(3.0));
        let r = exact_hedge(
            &model,
            &PayoffSpec::Call { strike: 100.0 },
            &grid,
            100.0,
            &SolverOpts::default(),
            &HedgeOpts::new(4000, 400, 12),
        )
        .unwrap();
        assert!(
            r.mean_error.abs() <= 3.0 * r.stderr + 5e-3,
            "{} {}",
            r.mean_error,
            r.stderr
        );
        assert_eq!(r.domain_escapes, 0);
    }
}
