//! Monte Carlo evaluation of the dual control problem
//! `sup_s E[ĝ(X_T) − ∫ F̄*(t, X_t, s_t²) dt]`, `dX = s dW`.
//!
//! Every admissible control gives a lower bound on the PDE price; the control
//! read off the PDE solution attains it.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImpactModel, Table2d};
use crate::numerics::{interp_linear, mean_and_stderr, pairwise_sum, SpaceTimeGrid, Surface};
use crate::pde::PdeSolution;
use crate::rng::{normal, path_rng};

/// Volatility control `(t, x) ↦ s ≥ 0`, capped at `s_max`.
#[derive(Debug, Clone)]
pub enum ControlSpec {
    /// Control field of a PDE solution, bilinear in `(t, x)`.
    Markov {
        grid: SpaceTimeGrid,
        field: Arc<Surface>,
        s_max: f64,
    },
    Constant(f64),
    Table {
        table: Table2d,
        s_max: f64,
    },
}

impl ControlSpec {
    pub fn from_solution(solution: &PdeSolution) -> Self {
        let s_max = solution.control_field.iter().fold(0.0f64, |m, v| m.max(*v));
        ControlSpec::Markov {
            grid: solution.grid,
            field: Arc::new(solution.control_field.clone()),
            s_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSpec::Constant(s) if !(*s >= 0.0 && s.is_finite()) => Err(Error::InvalidArgument(format!(
                "control must be non-negative and finite, got {s}"
            ))),
            ControlSpec::Table { table, s_max } => {
                table.validate()?;
                if !(*s_max >= 0.0 && s_max.is_finite()) {
                    return Err(Error::InvalidArgument("control cap must be finite".into()));
                }
                Ok(())
            }
            ControlSpec::Markov { field, s_max, .. } => {
                if field.iter().any(|s| !(*s >= 0.0)) || !s_max.is_finite() {
                    return Err(Error::InvalidArgument(
                        "control field must be non-negative and bounded".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            ControlSpec::Markov { grid, field, s_max } => field.bilinear(grid, t, x).value.clamp(0.0, *s_max),
            ControlSpec::Constant(s) => *s,
            ControlSpec::Table { table, s_max } => table.eval(t, x).clamp(0.0, *s_max),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ControlSpec::Markov { .. } => "markov".to_string(),
            ControlSpec::Constant(s) => format!("const:{s}"),
            ControlSpec::Table { .. } => "table".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McOpts {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PathOutcome {
    x_t: f64,
    penalty: f64,
    mean_s: f64,
    left_grid: bool,
}

/// Euler paths of `dX = s dW` on `[grid.t_start, grid.t_end]` with the control
/// read at the left end of each step.
fn run_paths<P>(control: &ControlSpec, grid: &SpaceTimeGrid, x0: f64, opts: &McOpts, penalty: P) -> Vec<PathOutcome>
where
    P: Fn(f64, f64, f64) -> f64 + Sync,
{
    let dt = grid.maturity() / opts.n_steps as f64;
    let sq = dt.sqrt();
    (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(opts.seed, p);
            let mut x = x0;
            let mut pen = 0.0;
            let mut s_sum = 0.0;
            let mut left_grid = false;
            for i in 0..opts.n_steps {
                let t = grid.t_start + i as f64 * dt;
                let s = control.eval(t, x);
                pen += penalty(t, x, s) * dt;
                s_sum += s;
                x += s * sq * normal(&mut rng);
                left_grid |= x < grid.x_min || x > grid.x_max;
            }
            PathOutcome {
                x_t: x,
                penalty: pen,
                mean_s: s_sum / opts.n_steps.max(1) as f64,
                left_grid,
            }
        })
        .collect()
}

/// Terminal values and path-average controls of a simulated batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathBatch {
    pub terminal: Vec<f64>,
    pub mean_control: Vec<f64>,
    pub grid_exits: usize,
}

pub fn simulate_controlled_paths(
    control: &ControlSpec,
    grid: &SpaceTimeGrid,
    x0: f64,
    opts: &McOpts,
) -> Result<PathBatch> {
    check_opts(opts)?;
    control.validate()?;
    let out = run_paths(control, grid, x0, opts, |_, _, _| 0.0);
    Ok(PathBatch {
        terminal: out.iter().map(|o| o.x_t).collect(),
        mean_control: out.iter().map(|o| o.mean_s).collect(),
        grid_exits: out.iter().filter(|o| o.left_grid).count(),
    })
}

fn check_opts(opts: &McOpts) -> Result<()> {
    if opts.n_paths == 0 || opts.n_steps == 0 {
        return Err(Error::InvalidArgument("n_paths and n_steps must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McResult {
    pub estimate: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub penalty_mean: f64,
    /// Fraction of paths ending where ĝ > g + tol (needs raw payoff values).
    pub contact_fraction: f64,
    /// Mean of ĝ(X_T) − g(X_T) over paths.
    pub lift_gap_mean: f64,
    pub control_mean: f64,
    /// Paths whose penalty hit the `INFINITY` sentinel.
    pub unbounded_paths: usize,
    pub grid_exits: usize,
}

impl McResult {
    pub fn unbounded_penalty(&self) -> bool {
        self.unbounded_paths > 0
    }
}

/// Estimate of `E[payoff(X_T) − Σ F̄*(t_i, X_i, s_i²) dt]`.
///
/// `raw_values` (the un-lifted payoff on the same grid) enables the contact
/// statistics; pass `None` to skip them.
pub fn dual_value(
    control: &ControlSpec,
    payoff_values: &[f64],
    raw_values: Option<&[f64]>,
    model: &ImpactModel,
    grid: &SpaceTimeGrid,
    x0: f64,
    opts: &McOpts,
) -> Result<McResult> {
    check_opts(opts)?;
    control.validate()?;
    for v in std::iter::once(payoff_values).chain(raw_values) {
        if v.len() != grid.n_space {
            return Err(Error::LengthMismatch {
                expected: grid.n_space,
                got: v.len(),
            });
        }
    }
    if model.is_custom() && !crate::pde::is_convex_model(model, grid) {
        return Err(Error::NonConvexModel(
            "dual representation needs a convex generator".into(),
        ));
    }
    let out = run_paths(control, grid, x0, opts, |t, x, s| model.fenchel_star(t, x, s));
    Ok(summarize(&out, payoff_values, raw_values, grid, opts))
}

fn summarize(
    out: &[PathOutcome],
    payoff_values: &[f64],
    raw_values: Option<&[f64]>,
    grid: &SpaceTimeGrid,
    opts: &McOpts,
) -> McResult {
    let unbounded_paths = out.iter().filter(|o| !o.penalty.is_finite()).count();
    let samples: Vec<f64> = out
        .iter()
        .map(|o| interp_linear(grid, payoff_values, o.x_t).value - o.penalty)
        .collect();
    let (estimate, stderr) = if unbounded_paths > 0 {
        (f64::NEG_INFINITY, f64::NAN)
    } else {
        mean_and_stderr(&samples)
    };
    let n = out.len() as f64;
    let penalties: Vec<f64> = out.iter().map(|o| o.penalty).collect();
    let controls: Vec<f64> = out.iter().map(|o| o.mean_s).collect();
    let (contact_fraction, lift_gap_mean) = match raw_values {
        Some(raw) => {
            let gaps: Vec<f64> = out
                .iter()
                .map(|o| interp_linear(grid, payoff_values, o.x_t).value - interp_linear(grid, raw, o.x_t).value)
                .collect();
            let lifted = out
                .iter()
                .zip(&gaps)
                .filter(|(o, gap)| **gap > 1e-9 * (1.0 + interp_linear(grid, raw, o.x_t).value.abs()))
                .count();
            (lifted as f64 / n, pairwise_sum(&gaps) / n)
        }
        None => (0.0, 0.0),
    };
    McResult {
        estimate,
        stderr,
        n_paths: opts.n_paths,
        n_steps: opts.n_steps,
        seed: opts.seed,
        penalty_mean: pairwise_sum(&penalties) / n,
        contact_fraction,
        lift_gap_mean,
        control_mean: pairwise_sum(&controls) / n,
        unbounded_paths,
        grid_exits: out.iter().filter(|o| o.left_grid).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub result: McResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Row with the highest estimate (first one on ties).
    pub best: usize,
    /// PDE price minus the best estimate, when a price is supplied.
    pub gap_to_pde: Option<f64>,
}

/// Evaluates every control on the same random numbers.
#[allow(clippy::too_many_arguments)]
pub fn dual_sweep(
    controls: &[ControlSpec],
    payoff_values: &[f64],
    raw_values: Option<&[f64]>,
    model: &ImpactModel,
    grid: &SpaceTimeGrid,
    x0: f64,
    opts: &McOpts,
    pde_price: Option<f64>,
) -> Result<SweepTable> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("empty control family".into()));
    }
    let mut rows = Vec::with_capacity(controls.len());
    for c in controls {
        let result = dual_value(c, payoff_values, raw_values, model, grid, x0, opts)?;
        rows.push(SweepRow {
            label: c.label(),
            result,
        });
    }
    let mut best = 0;
    for (k, r) in rows.iter().enumerate() {
        if r.result.estimate > rows[best].result.estimate {
            best = k;
        }
    }
    let gap_to_pde = pde_price.map(|p| p - rows[best].result.estimate);
    Ok(SweepTable { rows, best, gap_to_pde })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContactReport {
    pub contact_fraction: f64,
    pub lift_gap_mean: f64,
    /// Set when more than `tolerance` of the paths end inside the lift region.
    pub non_optimal: bool,
    pub tolerance: f64,
}

pub fn contact_diagnostic(result: &McResult, tolerance: f64) -> ContactReport {
    ContactReport {
        contact_fraction: result.contact_fraction,
        lift_gap_mean: result.lift_gap_mean,
        non_optimal: result.contact_fraction > tolerance,
        tolerance,
    }
}
