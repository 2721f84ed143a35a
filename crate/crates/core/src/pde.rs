//! Backward solvers for the gamma-constrained pricing equation and for the
//! two linear equations of the small-impact expansion.
//!
//! The nonlinear equation is solved in its control form
//! `inf_s (F̄*(s²) − ∂_t v − ½ s² ∂²_x v) = 0` with a fully implicit step and
//! Howard policy iteration. Boundary nodes are Dirichlet and keep their
//! terminal values, which is exact for payoffs that are affine near the edges.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facelift::{face_lift, PayoffSpec};
use crate::model::{check_assumptions, ImpactModel};
use crate::numerics::{
    first_diff_raw, interp_linear, second_diff_raw, solve_tridiag, SpaceTimeGrid, Surface, TriDiagSystem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Implicit,
    Explicit,
}

/// How the policy-improvement step searches the volatility controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControlSet {
    /// Pointwise argmax in closed form, ŝ = (2 ∂_z F̄(D²v))^{1/2} on the
    /// clipped gamma range.
    Exact,
    /// Geometric lattice of `n` volatilities between the floor and the cap;
    /// ties go to the smallest control.
    Lattice { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOpts {
    /// Policy iteration stops once the sup-norm update is below
    /// `tol_policy * max(1, ‖v^{n+1}‖∞)`.
    pub tol_policy: f64,
    pub max_policy_iter: usize,
    pub scheme: Scheme,
    pub control_set: ControlSet,
}

impl Default for SolverOpts {
    fn default() -> Self {
        SolverOpts {
            tol_policy: 1e-10,
            max_policy_iter: 50,
            scheme: Scheme::Implicit,
            control_set: ControlSet::Exact,
        }
    }
}

/// Value surface with derivative fields and solver metadata.
#[derive(Debug, Clone, Serialize)]
pub struct PdeSolution {
    pub grid: SpaceTimeGrid,
    pub values: Surface,
    pub dx_values: Surface,
    pub dxx_values: Surface,
    /// Volatility control attaining the generator at each node.
    pub control_field: Surface,
    /// Scheme defect per step in price units (see [`PdeSolution::residual_sup`]).
    pub residual_field: Surface,
    /// Policy iterations used at each time step (index = time row).
    pub iterations: Vec<usize>,
    /// Sup-norm scheme defect (price units) after each policy evaluation,
    /// per time step.
    pub policy_residuals: Vec<Vec<f64>>,
    pub scheme: Scheme,
    pub tol_policy: f64,
}

impl PdeSolution {
    /// v(t_0, x) by linear interpolation on the first time row.
    pub fn price_at(&self, x: f64) -> f64 {
        interp_linear(&self.grid, self.values.row(0), x).value
    }

    pub fn residual_sup(&self) -> f64 {
        sup_abs(&self.residual_field)
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations.iter().sum()
    }

    /// max over interior nodes of D²v − γ̄; negative when the constraint holds.
    pub fn gamma_margin(&self, model: &ImpactModel) -> f64 {
        self.gamma_margin_rows(model, 0..self.grid.n_time + 1)
    }

    pub fn gamma_margin_rows(&self, model: &ImpactModel, rows: std::ops::Range<usize>) -> f64 {
        let g = &self.grid;
        let mut worst = f64::NEG_INFINITY;
        for i in rows {
            let t = g.t(i);
            for j in 1..g.n_space - 1 {
                worst = worst.max(self.dxx_values.at(i, j) - model.bar_gamma(t, g.x(j)));
            }
        }
        worst
    }
}

fn sup_abs(s: &Surface) -> f64 {
    s.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Lowest gamma the controls may represent: volatility σ∘/4 for the
/// linear-impact model.
fn gamma_floor(model: &ImpactModel, x: f64) -> f64 {
    if model.is_custom() {
        return f64::NEG_INFINITY;
    }
    let f = model.impact(x);
    if f == 0.0 {
        f64::NEG_INFINITY
    } else {
        -3.0 / f
    }
}

/// Control, penalty and generator value at second derivative `d`.
///
/// The gamma argument is clipped to `[floor, γ̄ − δ_cap]`; outside that range
/// the generator is the tangent line of F̄ at the clip point.
fn exact_policy(model: &ImpactModel, t: f64, x: f64, d: f64) -> (f64, f64, f64) {
    let z = d.max(gamma_floor(model, x)).min(model.gamma_cap(t, x));
    let s = model.optimal_vol_ext(t, x, z);
    let penalty = if model.is_custom() {
        model.dz_bar_f_ext(t, x, z) * z - model.bar_f_ext(t, x, z)
    } else {
        model.fenchel_star(t, x, s)
    };
    (s, penalty, 0.5 * s * s * d - penalty)
}

fn control_bounds(model: &ImpactModel, t: f64, x: f64) -> (f64, f64) {
    let lo = model.optimal_vol_ext(t, x, gamma_floor(model, x).max(-1e12));
    let hi = model.optimal_vol_ext(t, x, model.gamma_cap(t, x).min(1e12));
    (lo, hi)
}

fn lattice_policy(model: &ImpactModel, t: f64, x: f64, d: f64, n: usize) -> (f64, f64, f64) {
    if !model.is_custom() && model.impact(x) == 0.0 {
        let s = model.sigma0(t, x);
        return (s, 0.0, 0.5 * s * s * d);
    }
    let (lo, hi) = control_bounds(model, t, x);
    let ratio = (hi / lo).powf(1.0 / (n.max(2) - 1) as f64);
    let mut best = (lo, 0.0, f64::NEG_INFINITY);
    let mut s = lo;
    for _ in 0..n.max(2) {
        let pen = model.fenchel_star(t, x, s);
        let val = 0.5 * s * s * d - pen;
        if val > best.2 {
            best = (s, pen, val);
        }
        s *= ratio;
    }
    best
}

fn policy(model: &ImpactModel, set: ControlSet, t: f64, x: f64, d: f64) -> (f64, f64, f64) {
    match set {
        ControlSet::Exact => exact_policy(model, t, x, d),
        ControlSet::Lattice { n } => lattice_policy(model, t, x, d, n),
    }
}

fn check_terminal(terminal: &[f64], grid: &SpaceTimeGrid) -> Result<()> {
    grid.validate()?;
    if terminal.len() != grid.n_space {
        return Err(Error::LengthMismatch {
            expected: grid.n_space,
            got: terminal.len(),
        });
    }
    Ok(())
}

/// Discrete equation residual of the iterate `u` against the next level.
fn step_residual(model: &ImpactModel, set: ControlSet, grid: &SpaceTimeGrid, t: f64, u: &[f64], next: &[f64]) -> f64 {
    let d2 = second_diff_raw(u, grid.dx());
    let dt = grid.dt();
    (1..grid.n_space - 1)
        .map(|j| {
            let (_, _, gen) = policy(model, set, t, grid.x(j), d2[j]);
            (u[j] - next[j] - dt * gen).abs()
        })
        .fold(0.0, f64::max)
}

fn implicit_step(
    model: &ImpactModel,
    opts: &SolverOpts,
    grid: &SpaceTimeGrid,
    step: usize,
    next: &[f64],
) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    let n = grid.n_space;
    let t = grid.t(step);
    let dt = grid.dt();
    let inv_dx2 = 1.0 / (grid.dx() * grid.dx());
    let scale = next.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut u = next.to_vec();
    let mut history = Vec::new();
    let mut system = TriDiagSystem {
        lower: vec![0.0; n],
        diag: vec![1.0; n],
        upper: vec![0.0; n],
        rhs: next.to_vec(),
    };
    let mut update = f64::INFINITY;
    for it in 1..=opts.max_policy_iter {
        let d2 = second_diff_raw(&u, grid.dx());
        for j in 1..n - 1 {
            let (s, pen, _) = policy(model, opts.control_set, t, grid.x(j), d2[j]);
            let a = 0.5 * s * s * dt * inv_dx2;
            system.lower[j] = -a;
            system.upper[j] = -a;
            system.diag[j] = 1.0 + 2.0 * a;
            system.rhs[j] = next[j] - dt * pen;
        }
        let fresh = solve_tridiag(&system)?;
        update = fresh.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        u = fresh;
        history.push(step_residual(model, opts.control_set, grid, t, &u, next));
        if update <= opts.tol_policy * scale {
            return Ok((u, it, history));
        }
    }
    Err(Error::PolicyNonConvergence { step, residual: update })
}

fn explicit_step(
    model: &ImpactModel,
    opts: &SolverOpts,
    grid: &SpaceTimeGrid,
    step: usize,
    next: &[f64],
) -> Result<Vec<f64>> {
    let t = grid.t(step + 1);
    let dt = grid.dt();
    let dx2 = grid.dx() * grid.dx();
    let d2 = second_diff_raw(next, grid.dx());
    let mut u = next.to_vec();
    let mut max_diff = 0.0f64;
    for j in 1..grid.n_space - 1 {
        let x = grid.x(j);
        let gen = if model.is_custom() {
            // generator taken directly from F̄, so convexity is not needed
            let cap = model.gamma_cap(t, x);
            let z = d2[j].min(cap);
            let slope = model.dz_bar_f_ext(t, x, z);
            max_diff = max_diff.max(slope);
            model.bar_f_ext(t, x, z) + slope * (d2[j] - z)
        } else {
            let (s, _, gen) = policy(model, opts.control_set, t, x, d2[j]);
            max_diff = max_diff.max(0.5 * s * s);
            gen
        };
        u[j] = next[j] + dt * gen;
    }
    let limit = dx2 / (2.0 * max_diff);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    Ok(u)
}

fn derivative_surfaces(grid: &SpaceTimeGrid, values: &Surface) -> (Surface, Surface) {
    let rows = values.n_rows();
    let mut dx = Surface::zeros(grid);
    let mut dxx = Surface::zeros(grid);
    for i in 0..rows {
        dx.row_mut(i).copy_from_slice(&first_diff_raw(values.row(i), grid.dx()));
        dxx.row_mut(i)
            .copy_from_slice(&second_diff_raw(values.row(i), grid.dx()));
    }
    (dx, dxx)
}

pub(crate) fn is_convex_model(model: &ImpactModel, grid: &SpaceTimeGrid) -> bool {
    if !model.is_custom() {
        return true;
    }
    let coarse = SpaceTimeGrid {
        n_space: grid.n_space.min(41),
        n_time: 1,
        ..*grid
    };
    let gb = model.bar_gamma(grid.t_end, 0.5 * (grid.x_min + grid.x_max));
    let top = if gb.is_finite() { gb } else { 100.0 };
    let zs: Vec<f64> = (0..=200).map(|k| -top + 2.0 * top * k as f64 / 200.0).collect();
    check_assumptions(model, &coarse, &zs).is_convex()
}

/// Backward solve of the gamma-constrained pricing equation from `terminal`.
///
/// Non-convex custom generators are routed to the explicit scheme.
pub fn solve_hjb(
    model: &ImpactModel,
    terminal: &[f64],
    grid: &SpaceTimeGrid,
    opts: &SolverOpts,
) -> Result<PdeSolution> {
    check_terminal(terminal, grid)?;
    let scheme = if opts.scheme == Scheme::Explicit || !is_convex_model(model, grid) {
        Scheme::Explicit
    } else {
        Scheme::Implicit
    };
    let mut values = Surface::zeros(grid);
    values.row_mut(grid.n_time).copy_from_slice(terminal);
    let mut iterations = vec![0; grid.n_time + 1];
    let mut policy_residuals = vec![Vec::new(); grid.n_time + 1];
    for step in (0..grid.n_time).rev() {
        let next = values.row(step + 1).to_vec();
        let row = match scheme {
            Scheme::Implicit => {
                let (u, it, hist) = implicit_step(model, opts, grid, step, &next)?;
                iterations[step] = it;
                policy_residuals[step] = hist;
                u
            }
            Scheme::Explicit => explicit_step(model, opts, grid, step, &next)?,
        };
        values.row_mut(step).copy_from_slice(&row);
    }
    let (dx_values, dxx_values) = derivative_surfaces(grid, &values);
    let mut control_field = Surface::zeros(grid);
    for i in 0..=grid.n_time {
        let t = grid.t(i);
        let d2 = dxx_values.row(i).to_vec();
        for (j, c) in control_field.row_mut(i).iter_mut().enumerate() {
            *c = policy(model, opts.control_set, t, grid.x(j), d2[j]).0;
        }
    }
    let mut solution = PdeSolution {
        grid: *grid,
        values,
        dx_values,
        dxx_values,
        control_field,
        residual_field: Surface::zeros(grid),
        iterations,
        policy_residuals,
        scheme,
        tol_policy: opts.tol_policy,
    };
    solution.residual_field = scheme_residual(&solution, model, opts.control_set);
    Ok(solution)
}

/// Defect of the discrete scheme actually solved, in price units per step:
/// `v^n − v^{n+1} − dt·G(D²v)` with the time level of the scheme and the
/// generator tangent-extended beyond the cap.
fn scheme_residual(solution: &PdeSolution, model: &ImpactModel, set: ControlSet) -> Surface {
    let g = &solution.grid;
    let dt = g.dt();
    let mut out = Surface::zeros(g);
    for i in 0..g.n_time {
        let (level, d2) = match solution.scheme {
            Scheme::Implicit => (i, solution.dxx_values.row(i)),
            Scheme::Explicit => (i + 1, solution.dxx_values.row(i + 1)),
        };
        let t = g.t(level);
        let now = solution.values.row(i);
        let next = solution.values.row(i + 1);
        let d2 = d2.to_vec();
        for j in 1..g.n_space - 1 {
            let x = g.x(j);
            let gen = if model.is_custom() && solution.scheme == Scheme::Explicit {
                let z = d2[j].min(model.gamma_cap(t, x));
                model.bar_f_ext(t, x, z) + model.dz_bar_f_ext(t, x, z) * (d2[j] - z)
            } else {
                policy(model, set, t, x, d2[j]).2
            };
            out.row_mut(i)[j] = now[j] - next[j] - dt * gen;
        }
    }
    out
}

/// Pointwise defect min{−D_t v − F̄(D²v), γ̄ − D²v} of the constrained
/// equation, with the backward time difference and D²v on the earlier level.
/// The terminal row and the boundary columns are zero.
pub fn residual(solution: &PdeSolution, model: &ImpactModel) -> Surface {
    let g = &solution.grid;
    let dt = g.dt();
    let mut out = Surface::zeros(g);
    for i in 0..g.n_time {
        let t = g.t(i);
        let now = solution.values.row(i);
        let next = solution.values.row(i + 1);
        let d2 = second_diff_raw(now, g.dx());
        for j in 1..g.n_space - 1 {
            let x = g.x(j);
            let pde = -(next[j] - now[j]) / dt - model.bar_f_ext(t, x, d2[j]);
            let constraint = model.bar_gamma(t, x) - d2[j];
            out.row_mut(i)[j] = pde.min(constraint);
        }
    }
    out
}

fn solve_linear(
    grid: &SpaceTimeGrid,
    terminal: &[f64],
    diffusion: impl Fn(f64, f64) -> f64,
    source: impl Fn(usize, usize) -> f64,
) -> Result<Surface> {
    let n = grid.n_space;
    let dt = grid.dt();
    let inv_dx2 = 1.0 / (grid.dx() * grid.dx());
    let mut values = Surface::zeros(grid);
    values.row_mut(grid.n_time).copy_from_slice(terminal);
    let mut system = TriDiagSystem {
        lower: vec![0.0; n],
        diag: vec![1.0; n],
        upper: vec![0.0; n],
        rhs: vec![0.0; n],
    };
    for step in (0..grid.n_time).rev() {
        let t = grid.t(step);
        let next = values.row(step + 1).to_vec();
        system.rhs.copy_from_slice(&next);
        for j in 1..n - 1 {
            let a = dt * diffusion(t, grid.x(j)) * inv_dx2;
            system.lower[j] = -a;
            system.upper[j] = -a;
            system.diag[j] = 1.0 + 2.0 * a;
            system.rhs[j] = next[j] + dt * source(step, j);
        }
        let row = solve_tridiag(&system)?;
        values.row_mut(step).copy_from_slice(&row);
    }
    Ok(values)
}

fn linear_solution(grid: &SpaceTimeGrid, values: Surface, control: impl Fn(f64, f64) -> f64) -> PdeSolution {
    let (dx_values, dxx_values) = derivative_surfaces(grid, &values);
    let mut control_field = Surface::zeros(grid);
    for i in 0..=grid.n_time {
        let t = grid.t(i);
        for (j, c) in control_field.row_mut(i).iter_mut().enumerate() {
            *c = control(t, grid.x(j));
        }
    }
    PdeSolution {
        grid: *grid,
        values,
        dx_values,
        dxx_values,
        control_field,
        residual_field: Surface::zeros(grid),
        iterations: vec![1; grid.n_time + 1],
        policy_residuals: vec![Vec::new(); grid.n_time + 1],
        scheme: Scheme::Implicit,
        tol_policy: 0.0,
    }
}

/// Zeroth-order price: ∂_t v⁰ + ∂_zF̄₀ ∂²_x v⁰ = 0 from `terminal`.
pub fn solve_linear_v0(model: &ImpactModel, terminal: &[f64], grid: &SpaceTimeGrid) -> Result<PdeSolution> {
    check_terminal(terminal, grid)?;
    let lambda1 = |t: f64, x: f64| model.dz_bar_f_ext(t, x, 0.0);
    let values = solve_linear(grid, terminal, lambda1, |_, _| 0.0)?;
    let mut sol = linear_solution(grid, values, |t, x| (2.0 * lambda1(t, x)).sqrt());
    let dt = grid.dt();
    for i in 0..grid.n_time {
        let t = grid.t(i);
        for j in 1..grid.n_space - 1 {
            let r =
                sol.values.at(i, j) - sol.values.at(i + 1, j) - dt * lambda1(t, grid.x(j)) * sol.dxx_values.at(i, j);
            sol.residual_field.row_mut(i)[j] = r;
        }
    }
    Ok(sol)
}

/// First-order correction: ∂_t Δv + ∂_zF̄₀ ∂²_x Δv + ½ ∂²_zF̄₀ (∂²_x v⁰)² = 0,
/// Δv(T, ·) = 0. The source uses ∂²_x v⁰ on the same time level as the
/// unknown, which makes Δv the exact ε-derivative of the implicit scheme.
pub fn solve_delta_v(model: &ImpactModel, v0: &PdeSolution, grid: &SpaceTimeGrid) -> Result<PdeSolution> {
    if v0.grid != *grid {
        return Err(Error::InvalidGrid("v0 was solved on a different grid".into()));
    }
    let lambda1 = |t: f64, x: f64| model.dz_bar_f_ext(t, x, 0.0);
    let source = |i: usize, j: usize| {
        let lam2 = model.d2z_bar_f0(grid.t(i), grid.x(j));
        let d2 = v0.dxx_values.at(i, j);
        0.5 * lam2 * d2 * d2
    };
    let values = solve_linear(grid, &vec![0.0; grid.n_space], lambda1, source)?;
    Ok(linear_solution(grid, values, |t, x| (2.0 * lambda1(t, x)).sqrt()))
}

/// One row of [`price_expansion`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionRow {
    pub eps: f64,
    pub full: f64,
    pub v0: f64,
    pub delta_v: f64,
    pub expansion: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionTable {
    pub spot: f64,
    pub rows: Vec<ExpansionRow>,
    /// Least-squares slope of log gap against log ε over rows with gap > 0.
    pub slope: f64,
    /// gap(ε_{k+1}) / gap(ε_k) for consecutive rows.
    pub ratios: Vec<f64>,
}

pub fn fit_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Full scaled solves v^ε against v⁰ + εΔv at `spot`.
///
/// All solves share the terminal ĝ lifted under the unscaled model, whose
/// curvature already satisfies every scaled bound γ̄/ε for ε ≤ 1.
pub fn price_expansion(
    model: &ImpactModel,
    grid: &SpaceTimeGrid,
    payoff: &PayoffSpec,
    eps_list: &[f64],
    spot: f64,
    opts: &SolverOpts,
) -> Result<ExpansionTable> {
    if let Some(i) = eps_list.iter().position(|e| !(*e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("eps_list[{i}] must be non-negative")));
    }
    if let Some(i) = eps_list.windows(2).position(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument(format!(
            "eps_list must be descending (index {})",
            i + 1
        )));
    }
    let terminal = face_lift(payoff, model, grid)?.g_hat_values;
    let v0 = solve_linear_v0(model, &terminal, grid)?;
    let dv = solve_delta_v(model, &v0, grid)?;
    let v0_spot = v0.price_at(spot);
    let dv_spot = dv.price_at(spot);
    let fulls: Vec<Result<f64>> = eps_list
        .par_iter()
        .map(|&eps| {
            if eps == 0.0 {
                return Ok(v0_spot);
            }
            let scaled = model.clone().with_epsilon(model.epsilon() * eps);
            Ok(solve_hjb(&scaled, &terminal, grid, opts)?.price_at(spot))
        })
        .collect();
    let mut rows = Vec::with_capacity(eps_list.len());
    for (&eps, full) in eps_list.iter().zip(fulls) {
        let full = full?;
        let expansion = v0_spot + eps * dv_spot;
        rows.push(ExpansionRow {
            eps,
            full,
            v0: v0_spot,
            delta_v: dv_spot,
            expansion,
            gap: if eps == 0.0 { 0.0 } else { (full - expansion).abs() },
        });
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let ratios = gaps.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(ExpansionTable {
        spot,
        rows,
        slope: fit_log_slope(&eps, &gaps),
        ratios,
    })
}
