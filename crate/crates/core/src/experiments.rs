//! Cross-validation studies with machine-readable pass/fail reports.
//!
//! Each study is a pure function of its [`RootConfig`]; the report carries the
//! config hash so that outputs can be matched to their inputs.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{RootConfig, StudyKind};
use crate::dual::{dual_value, ControlSpec};
use crate::error::{Error, Result};
use crate::facelift::{face_lift, PayoffSpec};
use crate::hedge::{asymptotic_hedge, exact_hedge};
use crate::model::{BaseVol, ImpactModel};
use crate::numerics::{first_diff, interp_linear, pairwise_sum, second_diff, SpaceTimeGrid};
use crate::pde::{price_expansion, solve_delta_v, solve_hjb, solve_linear_v0, ExpansionTable};
use crate::rng::{normal, path_rng};

/// One assertion with its signed margin (positive when it holds).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub margin: f64,
    pub passed: bool,
}

impl Cell {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        let margin = bound - value;
        Cell {
            name: name.into(),
            value,
            bound,
            relation: "<=",
            margin,
            passed: margin >= 0.0,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        let margin = value - bound;
        Cell {
            name: name.into(),
            value,
            bound,
            relation: ">=",
            margin,
            passed: margin >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub study: StudyKind,
    pub config_hash: String,
    pub passed: bool,
    pub cells: Vec<Cell>,
    pub data: Value,
    /// CSV mirror of `data`.
    #[serde(skip)]
    pub csv: String,
}

impl StudyReport {
    fn new(study: StudyKind, cfg: &RootConfig, cells: Vec<Cell>, data: Value, csv: String) -> Self {
        let passed = cells.iter().all(|c| c.passed);
        StudyReport {
            study,
            config_hash: cfg.hash(),
            passed,
            cells,
            data,
            csv,
        }
    }

    pub fn failed_cells(&self) -> Vec<&Cell> {
        self.cells.iter().filter(|c| !c.passed).collect()
    }
}

pub fn run_study(cfg: &RootConfig) -> Result<StudyReport> {
    match cfg.study.kind {
        StudyKind::Expansion => run_expansion_study(cfg),
        StudyKind::VarianceIdentity => run_variance_identity(cfg),
        StudyKind::Consistency => run_consistency_matrix(cfg),
        StudyKind::HedgeOrder => run_hedge_order_study(cfg),
    }
}

/// Gaps below this (relative to the price) count as an exact expansion.
const DEGENERATE_GAP: f64 = 1e-10;

fn expansion_cells(table: &ExpansionTable, prefix: &str) -> Vec<Cell> {
    let scale = 1.0 + table.rows.first().map_or(0.0, |r| r.v0.abs());
    let max_gap = table.rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    if max_gap <= DEGENERATE_GAP * scale {
        return vec![Cell::at_most(
            format!("{prefix}max_gap"),
            max_gap,
            DEGENERATE_GAP * scale,
        )];
    }
    let mut cells = vec![Cell::at_least(format!("{prefix}slope"), table.slope, 1.5)];
    for (k, r) in table.ratios.iter().enumerate() {
        cells.push(Cell::at_most(format!("{prefix}ratio_{k}"), *r, 0.6));
    }
    cells
}

pub fn run_expansion_study(cfg: &RootConfig) -> Result<StudyReport> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let table = price_expansion(&model, &grid, &cfg.payoff, &cfg.study.eps_list, cfg.spot, &cfg.solver)?;
    let mut csv = String::from("eps,full,v0,delta_v,expansion,gap\n");
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.eps, r.full, r.v0, r.delta_v, r.expansion, r.gap
        ));
    }
    let cells = expansion_cells(&table, "");
    let data = serde_json::to_value(&table).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(StudyReport::new(StudyKind::Expansion, cfg, cells, data, csv))
}

/// Both sides of the variance identity for constant coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceIdentity {
    pub delta_v: f64,
    /// λ₂ / (4 λ₁).
    pub coefficient: f64,
    pub variance: f64,
    pub variance_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub grid_tolerance: f64,
    pub n_paths: usize,
    pub passed: bool,
}

impl VarianceIdentity {
    pub fn difference(&self) -> f64 {
        (self.delta_v - self.rhs).abs()
    }

    pub fn tolerance(&self) -> f64 {
        3.0 * self.rhs_stderr + self.grid_tolerance
    }
}

/// Sample variance and the delta-method standard error of that estimate.
fn variance_with_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let c2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let c4: Vec<f64> = c2.iter().map(|c| c * c).collect();
    let m2 = pairwise_sum(&c2) / n;
    let m4 = pairwise_sum(&c4) / n;
    let var = m2 * n / (n - 1.0);
    (var, ((m4 - m2 * m2).max(0.0) / n).sqrt())
}

/// Δv(0, spot) against (λ₂/4λ₁)·Var[∂_x ĝ(X⁰_T)], with X⁰ sampled exactly.
pub fn variance_identity(
    model: &ImpactModel,
    grid: &SpaceTimeGrid,
    payoff: &PayoffSpec,
    spot: f64,
    n_paths: usize,
    seed: u64,
) -> Result<VarianceIdentity> {
    if !model.has_constant_coefficients() {
        return Err(Error::HypothesisViolation(
            "variance identity needs constant σ∘ and f".into(),
        ));
    }
    if n_paths < 2 {
        return Err(Error::InvalidArgument("variance needs at least 2 paths".into()));
    }
    let g_hat = face_lift(payoff, model, grid)?.g_hat_values;
    let v0 = solve_linear_v0(model, &g_hat, grid)?;
    let dv = solve_delta_v(model, &v0, grid)?;
    let (t0, sigma0) = (grid.t_start, model.sigma0(grid.t_start, spot));
    let lambda1 = model.dz_bar_f(t0, spot, 0.0)?;
    let coefficient = model.d2z_bar_f0(t0, spot) / (4.0 * lambda1);
    let slope = first_diff(&g_hat, grid)?;
    let sd = sigma0 * grid.maturity().sqrt();
    let samples: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| interp_linear(grid, &slope, spot + sd * normal(&mut path_rng(seed, p))).value)
        .collect();
    let (variance, variance_stderr) = variance_with_stderr(&samples);
    let dx = grid.dx();
    let mut out = VarianceIdentity {
        delta_v: dv.price_at(spot),
        coefficient,
        variance,
        variance_stderr,
        rhs: coefficient * variance,
        rhs_stderr: coefficient * variance_stderr,
        grid_tolerance: 5.0 * dx * dx,
        n_paths,
        passed: false,
    };
    out.passed = out.difference() <= out.tolerance();
    Ok(out)
}

pub fn run_variance_identity(cfg: &RootConfig) -> Result<StudyReport> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let vi = variance_identity(&model, &grid, &cfg.payoff, cfg.spot, cfg.study.variance_paths, cfg.seed)?;
    let csv = format!(
        "delta_v,coefficient,variance,variance_stderr,rhs,rhs_stderr,grid_tolerance\n{},{},{},{},{},{},{}\n",
        vi.delta_v, vi.coefficient, vi.variance, vi.variance_stderr, vi.rhs, vi.rhs_stderr, vi.grid_tolerance
    );
    let cells = vec![Cell::at_most("identity", vi.difference(), vi.tolerance())];
    let data = serde_json::to_value(&vi).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(StudyReport::new(StudyKind::VarianceIdentity, cfg, cells, data, csv))
}

/// Undiscounted Black–Scholes call with lognormal volatility `sigma`.
pub fn black_scholes_call(spot: f64, strike: f64, sigma: f64, maturity: f64) -> f64 {
    let sd = sigma * maturity.sqrt();
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let d1 = ((spot / strike).ln() + 0.5 * sd * sd) / sd;
    spot * n.cdf(d1) - strike * n.cdf(d1 - sd)
}

/// Bachelier call with additive volatility `sigma`.
pub fn bachelier_call(spot: f64, strike: f64, sigma: f64, maturity: f64) -> f64 {
    let sd = sigma * maturity.sqrt();
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let d = (spot - strike) / sd;
    (spot - strike) * n.cdf(d) + sd * (-0.5 * d * d).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Impact-free closed form for calls and puts under constant or proportional σ∘.
pub fn impact_free_reference(model: &ImpactModel, payoff: &PayoffSpec, spot: f64, maturity: f64) -> Option<f64> {
    let call = |k: f64| match model.base_vol_spec() {
        BaseVol::Constant(s) => Some(bachelier_call(spot, k, *s, maturity)),
        BaseVol::Proportional(s) if spot > 0.0 => Some(black_scholes_call(spot, k, *s, maturity)),
        _ => None,
    };
    match payoff {
        PayoffSpec::Call { strike } => call(*strike),
        PayoffSpec::Put { strike } => call(*strike).map(|c| c - spot + strike),
        _ => None,
    }
}

/// Pairwise cross-checks on one configuration.
pub fn run_consistency_matrix(cfg: &RootConfig) -> Result<StudyReport> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let spot = cfg.spot;
    let mut cells = Vec::new();

    let lift = face_lift(&cfg.payoff, &model, &grid)?;
    let majorant = lift
        .g_hat_values
        .iter()
        .zip(&lift.g_values)
        .map(|(h, g)| g - h)
        .fold(f64::NEG_INFINITY, f64::max);
    cells.push(Cell::at_most("facelift_majorant", majorant, 1e-12));
    let d2 = second_diff(&lift.g_hat_values, &grid)?;
    let curvature = (1..grid.n_space - 1)
        .map(|j| d2[j] - model.bar_gamma(grid.t_end, grid.x(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    cells.push(Cell::at_most("facelift_curvature", curvature, 1e-7));

    let sol = solve_hjb(&model, &lift.g_hat_values, &grid, &cfg.solver)?;
    let price = sol.price_at(spot);
    let scale = 1.0_f64.max(sol.values.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    cells.push(Cell::at_most(
        "pde_residual",
        sol.residual_sup(),
        10.0 * cfg.solver.tol_policy * scale,
    ));
    cells.push(Cell::at_most("pde_gamma_margin", sol.gamma_margin(&model), 1e-7));
    if model.impact(spot) == 0.0 {
        if let Some(reference) = impact_free_reference(&model, &cfg.payoff, spot, grid.maturity()) {
            cells.push(Cell::at_most(
                "pde_vs_closed_form",
                ((price - reference) / reference).abs(),
                1e-3,
            ));
        }
    }

    let control = ControlSpec::from_solution(&sol);
    let dual = dual_value(
        &control,
        &lift.g_hat_values,
        Some(&lift.g_values),
        &model,
        &grid,
        spot,
        &cfg.mc_opts(),
    )?;
    cells.push(Cell::at_most(
        "dual_vs_pde",
        (dual.estimate - price).abs(),
        3.0 * dual.stderr,
    ));

    let table = price_expansion(&model, &grid, &cfg.payoff, &cfg.study.eps_list, spot, &cfg.solver)?;
    cells.extend(expansion_cells(&table, "expansion_"));

    let hedge = exact_hedge(&model, &cfg.payoff, &grid, spot, &cfg.solver, &cfg.hedge_opts())?;
    cells.push(Cell::at_most(
        "hedge_capital",
        (hedge.initial_capital - price).abs(),
        1e-12 * scale,
    ));
    cells.push(Cell::at_most(
        "hedge_mean_error",
        hedge.mean_error.abs(),
        3.0 * hedge.stderr,
    ));
    cells.push(Cell::at_most("hedge_domain_escapes", hedge.domain_escapes as f64, 0.0));

    let mut csv = String::from("name,value,relation,bound,margin,passed\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.name, c.value, c.relation, c.bound, c.margin, c.passed
        ));
    }
    let data = json!({
        "price": price,
        "dual": dual,
        "expansion": table,
        "hedge": {
            "sup_error": hedge.sup_error,
            "mean_error": hedge.mean_error,
            "stderr": hedge.stderr,
            "domain_escapes": hedge.domain_escapes,
            "grid_escapes": hedge.grid_escapes,
        },
    });
    Ok(StudyReport::new(StudyKind::Consistency, cfg, cells, data, csv))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeOrderRow {
    pub eps: f64,
    pub sup_error: f64,
    /// `sup_error − floor`, the part attributable to the expansion.
    pub adjusted: f64,
    pub domain_escapes: usize,
    pub grid_escapes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeOrderTable {
    /// Sup error of the impact-free hedge (ε = 0), i.e. the time-discretization floor.
    pub floor: f64,
    pub rows: Vec<HedgeOrderRow>,
    pub ratios: Vec<f64>,
}

/// Sup hedging error of the asymptotic strategy over a descending ε list.
pub fn hedge_order(
    model: &ImpactModel,
    payoff: &PayoffSpec,
    grid: &SpaceTimeGrid,
    eps_list: &[f64],
    spot: f64,
    opts: &crate::hedge::HedgeOpts,
) -> Result<HedgeOrderTable> {
    let floor = asymptotic_hedge(model, payoff, grid, 0.0, spot, opts)?.sup_error;
    let mut rows = Vec::new();
    for &eps in eps_list.iter().filter(|e| **e > 0.0) {
        let r = asymptotic_hedge(model, payoff, grid, eps, spot, opts)?;
        rows.push(HedgeOrderRow {
            eps,
            sup_error: r.sup_error,
            adjusted: r.sup_error - floor,
            domain_escapes: r.domain_escapes,
            grid_escapes: r.grid_escapes,
        });
    }
    let ratios = rows.windows(2).map(|w| w[1].adjusted / w[0].adjusted).collect();
    Ok(HedgeOrderTable { floor, rows, ratios })
}

pub fn run_hedge_order_study(cfg: &RootConfig) -> Result<StudyReport> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let table = hedge_order(
        &model,
        &cfg.payoff,
        &grid,
        &cfg.study.eps_list,
        cfg.spot,
        &cfg.hedge_opts(),
    )?;
    let mut cells = Vec::new();
    for (k, r) in table.ratios.iter().enumerate() {
        // A ratio is only meaningful while the signal sits above the floor.
        let r = if table.rows[k].adjusted > 0.0 { *r } else { f64::NAN };
        cells.push(Cell::at_most(format!("ratio_{k}"), r, 0.35));
    }
    for r in &table.rows {
        cells.push(Cell::at_most(
            format!("domain_escapes_{}", r.eps),
            r.domain_escapes as f64,
            0.0,
        ));
    }
    let mut csv = format!(
        "eps,sup_error,adjusted,domain_escapes,grid_escapes\n0,{},0,0,0\n",
        table.floor
    );
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.eps, r.sup_error, r.adjusted, r.domain_escapes, r.grid_escapes
        ));
    }
    let data = serde_json::to_value(&table).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(StudyReport::new(StudyKind::HedgeOrder, cfg, cells, data, csv))
}
