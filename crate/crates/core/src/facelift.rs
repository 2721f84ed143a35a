//! Terminal face-lift: the smallest function above the payoff whose second
//! derivative respects the terminal gamma bound.
//!
//! Computed as `env(g - Γ̄) + Γ̄` where `Γ̄'' = γ̄` and `env` is the upper
//! concave envelope on the grid nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImpactModel;
use crate::numerics::{upper_hull, SpaceTimeGrid};

/// European payoff, in price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    Call {
        strike: f64,
    },
    Put {
        strike: f64,
    },
    CallSpread {
        lower: f64,
        upper: f64,
    },
    /// Pays 1 strictly above the strike (lower-semicontinuous at the jump).
    Digital {
        strike: f64,
    },
    /// Piecewise-linear through the knots, flat extrapolation.
    Table {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
}

impl PayoffSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PayoffSpec::CallSpread { lower, upper } if !(lower < upper) => Err(Error::InvalidArgument(format!(
                "call spread needs lower < upper, got {lower} and {upper}"
            ))),
            PayoffSpec::Table { xs, ys } => {
                if xs.len() != ys.len() {
                    return Err(Error::LengthMismatch {
                        expected: xs.len(),
                        got: ys.len(),
                    });
                }
                if xs.is_empty() {
                    return Err(Error::InvalidArgument("empty payoff table".into()));
                }
                if let Some(i) = xs.windows(2).position(|w| !(w[1] > w[0])) {
                    return Err(Error::UnsortedInput { index: i + 1 });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            PayoffSpec::Call { strike } => (x - strike).max(0.0),
            PayoffSpec::Put { strike } => (strike - x).max(0.0),
            PayoffSpec::CallSpread { lower, upper } => (x - lower).max(0.0) - (x - upper).max(0.0),
            PayoffSpec::Digital { strike } => {
                if x > *strike {
                    1.0
                } else {
                    0.0
                }
            }
            PayoffSpec::Table { xs, ys } => {
                let n = xs.len();
                if x <= xs[0] {
                    return ys[0];
                }
                if x >= xs[n - 1] {
                    return ys[n - 1];
                }
                let j = xs.partition_point(|&a| a <= x) - 1;
                let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
                ys[j] * (1.0 - w) + ys[j + 1] * w
            }
        }
    }

    pub fn values(&self, grid: &SpaceTimeGrid) -> Vec<f64> {
        grid.xs().into_iter().map(|x| self.eval(x)).collect()
    }
}

/// Raw and lifted payoff on the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceliftResult {
    pub xs: Vec<f64>,
    pub g_values: Vec<f64>,
    pub g_hat_values: Vec<f64>,
    /// Nodes where the lift does not bind: ĝ ≤ g + 1e-9 (1 + |g|).
    pub contact_set: Vec<bool>,
    /// `INFINITY` entries mean no constraint at that node.
    pub gamma_bound_used: Vec<f64>,
}

impl FaceliftResult {
    pub fn max_lift(&self) -> f64 {
        self.g_hat_values
            .iter()
            .zip(&self.g_values)
            .map(|(h, g)| h - g)
            .fold(0.0, f64::max)
    }
}

/// Γ̄ with Γ̄'' = γ̄ by double cumulative trapezoid, Γ̄(x_min) = Γ̄'(x_min) = 0.
pub fn build_gamma_antiderivative(grid: &SpaceTimeGrid, gamma_bound: &[f64]) -> Result<Vec<f64>> {
    if gamma_bound.len() != grid.n_space {
        return Err(Error::LengthMismatch {
            expected: grid.n_space,
            got: gamma_bound.len(),
        });
    }
    if let Some(index) = gamma_bound.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGamma { index });
    }
    Ok(double_trapezoid(gamma_bound, grid.dx()))
}

fn double_trapezoid(gamma: &[f64], dx: f64) -> Vec<f64> {
    let n = gamma.len();
    let mut slope = vec![0.0; n];
    let mut out = vec![0.0; n];
    for j in 1..n {
        slope[j] = slope[j - 1] + 0.5 * dx * (gamma[j - 1] + gamma[j]);
        out[j] = out[j - 1] + 0.5 * dx * (slope[j - 1] + slope[j]);
    }
    out
}

fn contact(g: &[f64], g_hat: &[f64]) -> Vec<bool> {
    g.iter()
        .zip(g_hat)
        .map(|(g, h)| *h <= g + 1e-9 * (1.0 + g.abs()))
        .collect()
}

/// Face-lift of arbitrary node values under a node-wise gamma bound.
///
/// An all-infinite bound returns the values unchanged.
pub fn face_lift_values(grid: &SpaceTimeGrid, g_values: &[f64], gamma_bound: &[f64]) -> Result<FaceliftResult> {
    face_lift_gauged(grid, g_values, gamma_bound, (0.0, 0.0))
}

/// Same as [`face_lift_values`] with Γ̄ shifted by the affine gauge
/// `a + b (x - x_min)`; the result does not depend on the gauge.
pub fn face_lift_gauged(
    grid: &SpaceTimeGrid,
    g_values: &[f64],
    gamma_bound: &[f64],
    gauge: (f64, f64),
) -> Result<FaceliftResult> {
    if g_values.len() != grid.n_space {
        return Err(Error::LengthMismatch {
            expected: grid.n_space,
            got: g_values.len(),
        });
    }
    let xs = grid.xs();
    if gamma_bound.len() == grid.n_space && gamma_bound.iter().all(|g| g.is_infinite() && *g > 0.0) {
        return Ok(FaceliftResult {
            xs,
            g_values: g_values.to_vec(),
            g_hat_values: g_values.to_vec(),
            contact_set: vec![true; grid.n_space],
            gamma_bound_used: gamma_bound.to_vec(),
        });
    }
    let mut big_gamma = build_gamma_antiderivative(grid, gamma_bound)?;
    for (gm, x) in big_gamma.iter_mut().zip(&xs) {
        *gm += gauge.0 + gauge.1 * (x - grid.x_min);
    }
    let shifted: Vec<f64> = g_values.iter().zip(&big_gamma).map(|(g, gm)| g - gm).collect();
    let hull = upper_hull(&xs, &shifted)?;
    // Between contact nodes a < b, ĝ = g(a) + affine + Q_a with Q_a the double
    // integral of γ̄ started at a. Same values as envelope + Γ̄, without the
    // cancellation against the large global Γ̄.
    let dx = grid.dx();
    let mut g_hat = g_values.to_vec();
    let mut q = vec![0.0; grid.n_space];
    for seg in hull.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (mut qs, mut qv) = (0.0, 0.0);
        for j in a + 1..=b {
            let qs_next = qs + 0.5 * dx * (gamma_bound[j - 1] + gamma_bound[j]);
            qv += 0.5 * dx * (qs + qs_next);
            qs = qs_next;
            q[j] = qv;
        }
        let slope = (g_values[b] - g_values[a] - q[b]) / (xs[b] - xs[a]);
        for j in a + 1..b {
            g_hat[j] = (g_values[a] + slope * (xs[j] - xs[a]) + q[j]).max(g_values[j]);
        }
    }
    Ok(FaceliftResult {
        xs,
        contact_set: contact(g_values, &g_hat),
        g_values: g_values.to_vec(),
        g_hat_values: g_hat,
        gamma_bound_used: gamma_bound.to_vec(),
    })
}

/// ĝ under the terminal bound γ̄(T, ·).
pub fn face_lift(payoff: &PayoffSpec, model: &ImpactModel, grid: &SpaceTimeGrid) -> Result<FaceliftResult> {
    payoff.validate()?;
    let t = grid.t_end;
    let bound: Vec<f64> = grid.xs().into_iter().map(|x| model.bar_gamma(t, x)).collect();
    face_lift_values(grid, &payoff.values(grid), &bound)
}

/// ĝ under the capped bound γ̄ − δ_cap, so that the lifted terminal already
/// lies inside the region explored by the solvers.
pub fn face_lift_capped(payoff: &PayoffSpec, model: &ImpactModel, grid: &SpaceTimeGrid) -> Result<FaceliftResult> {
    payoff.validate()?;
    let t = grid.t_end;
    let bound: Vec<f64> = grid.xs().into_iter().map(|x| model.gamma_cap(t, x)).collect();
    face_lift_values(grid, &payoff.values(grid), &bound)
}

/// ĝ^ε under the level-set bound γ̄_ε(x) = sup{z : F(T, x, z) ≤ 1/ε}.
pub fn face_lift_eps(
    payoff: &PayoffSpec,
    model: &ImpactModel,
    grid: &SpaceTimeGrid,
    eps: f64,
) -> Result<FaceliftResult> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("level must be positive, got {eps}")));
    }
    payoff.validate()?;
    let t = grid.t_end;
    let bound: Vec<f64> = grid.xs().into_iter().map(|x| model.gamma_level(t, x, eps)).collect();
    face_lift_values(grid, &payoff.values(grid), &bound)
}
