//! Impact model coefficients and convex-duality machinery.
//!
//! The canonical instance is the linear-impact model in which a gamma `z`
//! inflates the base volatility to `sigma0 / (1 - f z)`. Its pricing generator
//! `F̄(z) = sigma0^2 z / (2 (1 - f z))` is convex on `z < 1/f`, with Fenchel
//! transform `F̄*(s^2) = (s - sigma0)^2 / (2 f)`. Every other module reads the
//! model only through [`ImpactModel`].
//!
//! Values outside the domain `z < γ̄` are reported as `f64::INFINITY` by the
//! `*_ext` accessors; the checked accessors return [`Error::DomainViolation`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SpaceTimeGrid;

/// Impact levels below this are treated as exactly zero.
pub const ZERO_IMPACT: f64 = 1e-12;

/// Tabulated `(t, x)` surface with bilinear interpolation, clamped at the edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table2d {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    /// `values[i][j]` at `(t[i], x[j])`.
    pub values: Vec<Vec<f64>>,
}

impl Table2d {
    pub fn validate(&self) -> Result<()> {
        if self.t.is_empty() || self.x.is_empty() {
            return Err(Error::InvalidArgument("empty table axis".into()));
        }
        for axis in [&self.t, &self.x] {
            if let Some(index) = axis.windows(2).position(|w| !(w[1] > w[0])) {
                return Err(Error::UnsortedInput { index: index + 1 });
            }
        }
        if self.values.len() != self.t.len() {
            return Err(Error::LengthMismatch {
                expected: self.t.len(),
                got: self.values.len(),
            });
        }
        for row in &self.values {
            if row.len() != self.x.len() {
                return Err(Error::LengthMismatch {
                    expected: self.x.len(),
                    got: row.len(),
                });
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let (i, wt) = bracket(&self.t, t);
        let (j, wx) = bracket(&self.x, x);
        let row = |r: usize| {
            let v = &self.values[r];
            if wx == 0.0 {
                v[j]
            } else {
                v[j] * (1.0 - wx) + v[j + 1] * wx
            }
        };
        if wt == 0.0 {
            row(i)
        } else {
            row(i) * (1.0 - wt) + row(i + 1) * wt
        }
    }
}

/// Tabulated function of price, linear between knots and flat outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1d {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
}

impl Table1d {
    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::InvalidArgument("empty table axis".into()));
        }
        if let Some(index) = self.x.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::UnsortedInput { index: index + 1 });
        }
        if self.values.len() != self.x.len() {
            return Err(Error::LengthMismatch {
                expected: self.x.len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (j, w) = bracket(&self.x, x);
        if w == 0.0 {
            self.values[j]
        } else {
            self.values[j] * (1.0 - w) + self.values[j + 1] * w
        }
    }

    fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

fn bracket(axis: &[f64], q: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || !(q > axis[0]) {
        return (0, 0.0);
    }
    if q >= axis[n - 1] {
        return (n - 1, 0.0);
    }
    let j = axis.partition_point(|&a| a <= q) - 1;
    (j, (q - axis[j]) / (axis[j + 1] - axis[j]))
}

/// Base (impact-free) volatility surface σ∘(t, x), as a diffusion coefficient
/// of the price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseVol {
    /// σ∘ ≡ sigma0 (additive dynamics).
    Constant(f64),
    /// σ∘(x) = sigma0 |x| (local volatility of a lognormal price).
    Proportional(f64),
    Table(Table2d),
}

impl BaseVol {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            BaseVol::Constant(s) => *s,
            BaseVol::Proportional(s) => s * x.abs(),
            BaseVol::Table(table) => table.eval(t, x),
        }
    }
}

/// Impact function f(x) ≥ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactFn {
    Constant(f64),
    Table(Table1d),
}

impl ImpactFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ImpactFn::Constant(f) => *f,
            ImpactFn::Table(table) => table.eval(x),
        }
    }
}

/// Drift of the price under trading; it does not enter the pricing equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    Zero,
    Constant(f64),
}

type Coef3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
type Coef2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// User-supplied generator with no closed-form transform.
///
/// `bar_f` and `sigma` must return `f64::INFINITY` outside `z < bar_gamma`.
#[derive(Clone)]
pub struct CustomGenerator {
    pub bar_f: Coef3,
    pub sigma: Coef3,
    pub bar_gamma: Coef2,
}

impl fmt::Debug for CustomGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomGenerator { .. }")
    }
}

/// The coefficient bundle consumed by every solver.
#[derive(Debug, Clone)]
pub struct ImpactModel {
    base_vol: BaseVol,
    impact: ImpactFn,
    drift: Drift,
    epsilon: f64,
    custom: Option<CustomGenerator>,
    /// Domain cap as a fraction of γ̄: evaluations stay below `(1 - cap) γ̄`.
    cap_fraction: f64,
    fenchel_grid: usize,
    z_span: f64,
}

impl ImpactModel {
    /// Linear-impact model with constant base volatility and impact.
    pub fn bolozo(sigma0: f64, f: f64) -> Result<Self> {
        ImpactModel::new(BaseVol::Constant(sigma0), ImpactFn::Constant(f))
    }

    /// Linear-impact model on a lognormal base: σ∘(x) = sigma0 |x|.
    pub fn bolozo_proportional(sigma0: f64, f: f64) -> Result<Self> {
        ImpactModel::new(BaseVol::Proportional(sigma0), ImpactFn::Constant(f))
    }

    pub fn new(base_vol: BaseVol, impact: ImpactFn) -> Result<Self> {
        match &base_vol {
            BaseVol::Constant(s) | BaseVol::Proportional(s) if !(*s > 0.0 && s.is_finite()) => {
                return Err(Error::InvalidArgument(format!(
                    "base volatility must be positive, got {s}"
                )))
            }
            BaseVol::Table(table) => {
                table.validate()?;
                if table.values.iter().flatten().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidArgument("base volatility table must be positive".into()));
                }
            }
            _ => {}
        }
        match &impact {
            ImpactFn::Constant(f) if !(*f >= 0.0 && f.is_finite()) => {
                return Err(Error::InvalidArgument(format!("impact must be non-negative, got {f}")))
            }
            ImpactFn::Table(table) => {
                table.validate()?;
                if table.values.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidArgument("impact table must be non-negative".into()));
                }
            }
            _ => {}
        }
        Ok(ImpactModel {
            base_vol,
            impact,
            drift: Drift::Zero,
            epsilon: 1.0,
            custom: None,
            cap_fraction: 1e-3,
            fenchel_grid: 4096,
            z_span: 1e3,
        })
    }

    /// Model driven by an arbitrary generator; the base volatility is used as
    /// the z = 0 volatility for control ranges and diagnostics.
    pub fn custom(generator: CustomGenerator, base_vol: BaseVol) -> Result<Self> {
        let mut model = ImpactModel::new(base_vol, ImpactFn::Constant(0.0))?;
        model.custom = Some(generator);
        Ok(model)
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = drift;
        self
    }

    /// Scaled family: impact f ↦ εf (equivalently F̄ ↦ ε⁻¹F̄(·, ε·)).
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_cap_fraction(mut self, cap: f64) -> Self {
        self.cap_fraction = cap;
        self
    }

    pub fn with_fenchel_grid(mut self, n: usize, z_span: f64) -> Self {
        self.fenchel_grid = n.max(16);
        self.z_span = z_span;
        self
    }

    pub fn base_vol_spec(&self) -> &BaseVol {
        &self.base_vol
    }

    pub fn impact_spec(&self) -> &ImpactFn {
        &self.impact
    }

    pub fn drift_spec(&self) -> Drift {
        self.drift
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn cap_fraction(&self) -> f64 {
        self.cap_fraction
    }

    pub fn is_custom(&self) -> bool {
        self.custom.is_some()
    }

    /// True when σ∘ and f do not depend on (t, x).
    pub fn has_constant_coefficients(&self) -> bool {
        let vol = match &self.base_vol {
            BaseVol::Constant(_) => true,
            BaseVol::Proportional(_) => false,
            BaseVol::Table(t) => t.values.iter().flatten().all(|v| *v == t.values[0][0]),
        };
        let imp = match &self.impact {
            ImpactFn::Constant(_) => true,
            ImpactFn::Table(t) => t.is_constant(),
        };
        vol && imp && self.custom.is_none()
    }

    pub fn sigma0(&self, t: f64, x: f64) -> f64 {
        self.base_vol.eval(t, x)
    }

    /// Effective impact ε f(x).
    pub fn impact(&self, x: f64) -> f64 {
        let f = self.epsilon * self.impact.eval(x);
        if f < ZERO_IMPACT {
            0.0
        } else {
            f
        }
    }

    pub fn drift(&self, _t: f64, _x: f64, _z: f64, _b: f64) -> f64 {
        match self.drift {
            Drift::Zero => 0.0,
            Drift::Constant(mu) => mu,
        }
    }

    /// Gamma bound γ̄(t, x); `INFINITY` when there is no impact.
    pub fn bar_gamma(&self, t: f64, x: f64) -> f64 {
        if let Some(g) = &self.custom {
            return (g.bar_gamma)(t, x) / self.epsilon;
        }
        let f = self.impact(x);
        if f == 0.0 {
            f64::INFINITY
        } else {
            1.0 / f
        }
    }

    /// Largest gamma used by the solvers: γ̄ − δ_cap with δ_cap = cap · γ̄.
    pub fn gamma_cap(&self, t: f64, x: f64) -> f64 {
        self.bar_gamma(t, x) * (1.0 - self.cap_fraction)
    }

    fn in_domain(&self, t: f64, x: f64, z: f64) -> bool {
        z < self.bar_gamma(t, x)
    }

    fn domain_error(t: f64, x: f64, z: f64) -> Error {
        Error::DomainViolation { t, x, z }
    }

    /// Impacted volatility; `INFINITY` outside the domain.
    pub fn sigma_ext(&self, t: f64, x: f64, z: f64) -> f64 {
        if let Some(g) = &self.custom {
            return (g.sigma)(t, x, self.epsilon * z);
        }
        let fz = self.impact(x) * z;
        if fz >= 1.0 {
            f64::INFINITY
        } else {
            self.sigma0(t, x) / (1.0 - fz)
        }
    }

    pub fn sigma(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        if !self.in_domain(t, x, z) {
            return Err(Self::domain_error(t, x, z));
        }
        Ok(self.sigma_ext(t, x, z))
    }

    /// Pricing generator F̄(t, x, z) = ½σ²z − F; `INFINITY` outside the domain.
    pub fn bar_f_ext(&self, t: f64, x: f64, z: f64) -> f64 {
        if let Some(g) = &self.custom {
            return (g.bar_f)(t, x, self.epsilon * z) / self.epsilon;
        }
        let f = self.impact(x);
        let fz = f * z;
        if fz >= 1.0 {
            return f64::INFINITY;
        }
        let s0 = self.sigma0(t, x);
        0.5 * s0 * s0 * z / (1.0 - fz)
    }

    pub fn bar_f(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        if !self.in_domain(t, x, z) {
            return Err(Self::domain_error(t, x, z));
        }
        Ok(self.bar_f_ext(t, x, z))
    }

    /// Impact cost rate F(t, x, z); `INFINITY` outside the domain.
    pub fn big_f_ext(&self, t: f64, x: f64, z: f64) -> f64 {
        if self.custom.is_some() {
            let s = self.sigma_ext(t, x, z);
            let b = self.bar_f_ext(t, x, z);
            if !s.is_finite() || !b.is_finite() {
                return f64::INFINITY;
            }
            return 0.5 * s * s * z - b;
        }
        let f = self.impact(x);
        let fz = f * z;
        if fz >= 1.0 {
            return f64::INFINITY;
        }
        let q = self.sigma0(t, x) * z / (1.0 - fz);
        0.5 * q * q * f
    }

    pub fn big_f(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        if !self.in_domain(t, x, z) {
            return Err(Self::domain_error(t, x, z));
        }
        Ok(self.big_f_ext(t, x, z))
    }

    /// ∂_z F̄; central differences for custom generators.
    pub fn dz_bar_f(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        if !self.in_domain(t, x, z) {
            return Err(Self::domain_error(t, x, z));
        }
        Ok(self.dz_bar_f_ext(t, x, z))
    }

    pub(crate) fn dz_bar_f_ext(&self, t: f64, x: f64, z: f64) -> f64 {
        if self.custom.is_some() {
            let gb = self.bar_gamma(t, x);
            let mut h = 1e-5 * z.abs().max(1.0);
            if gb.is_finite() {
                h = h.min(0.25 * (gb - z));
            }
            let up = self.bar_f_ext(t, x, z + h);
            let dn = self.bar_f_ext(t, x, z - h);
            return (up - dn) / (2.0 * h);
        }
        let fz = self.impact(x) * z;
        if fz >= 1.0 {
            return f64::INFINITY;
        }
        let s0 = self.sigma0(t, x);
        0.5 * s0 * s0 / ((1.0 - fz) * (1.0 - fz))
    }

    /// ∂²_z F̄ at z = 0 (the second-order expansion coefficient).
    pub fn d2z_bar_f0(&self, t: f64, x: f64) -> f64 {
        if self.custom.is_some() {
            let h = 1e-4;
            let up = self.bar_f_ext(t, x, h);
            let mid = self.bar_f_ext(t, x, 0.0);
            let dn = self.bar_f_ext(t, x, -h);
            return (up - 2.0 * mid + dn) / (h * h);
        }
        let s0 = self.sigma0(t, x);
        s0 * s0 * self.impact(x)
    }

    /// Optimal control ŝ = (2 ∂_z F̄)^{1/2}; equals the impacted volatility.
    pub fn optimal_vol(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        Ok((2.0 * self.dz_bar_f(t, x, z)?).sqrt())
    }

    pub(crate) fn optimal_vol_ext(&self, t: f64, x: f64, z: f64) -> f64 {
        if self.custom.is_none() {
            return self.sigma_ext(t, x, z);
        }
        (2.0 * self.dz_bar_f_ext(t, x, z)).max(0.0).sqrt()
    }

    /// Fenchel transform F̄*(t, x, s²) = sup_z (½ s² z − F̄(t, x, z)).
    ///
    /// Closed form for the linear-impact model; for zero impact the transform
    /// is the indicator of s = σ∘ (zero there, `INFINITY` elsewhere).
    pub fn fenchel_star(&self, t: f64, x: f64, s: f64) -> f64 {
        if self.custom.is_some() {
            return self.fenchel_star_numeric(t, x, s);
        }
        let s0 = self.sigma0(t, x);
        let f = self.impact(x);
        if f == 0.0 {
            return if (s - s0).abs() <= 1e-12 * s0.abs().max(1e-300) {
                0.0
            } else {
                f64::INFINITY
            };
        }
        let d = s - s0;
        0.5 * d * d / f
    }

    /// Grid search over `(-z_span, γ̄ - δ_cap)` followed by golden-section
    /// refinement of the best bracket.
    pub fn fenchel_star_numeric(&self, t: f64, x: f64, s: f64) -> f64 {
        let v = s * s;
        let hi = {
            let c = self.gamma_cap(t, x);
            if c.is_finite() {
                c
            } else {
                self.z_span
            }
        };
        let lo = -self.z_span;
        let objective = |z: f64| 0.5 * v * z - self.bar_f_ext(t, x, z);
        let n = self.fenchel_grid;
        let step = (hi - lo) / (n - 1) as f64;
        let mut best_k = 0;
        let mut best = f64::NEG_INFINITY;
        for k in 0..n {
            let val = objective(lo + k as f64 * step);
            if val > best {
                best = val;
                best_k = k;
            }
        }
        let mut a = lo + best_k.saturating_sub(1) as f64 * step;
        let mut b = (lo + (best_k + 1) as f64 * step).min(hi);
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let (mut fc, mut fd) = (objective(c), objective(d));
        for _ in 0..200 {
            if (b - a).abs() <= 1e-14 * (1.0 + a.abs()) {
                break;
            }
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = objective(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = objective(d);
            }
        }
        best.max(fc).max(fd)
    }

    /// max over `s_grid` of ½ s² z − F̄*(s²): a lower approximation of F̄(z).
    pub fn fenchel_reconstruct(&self, t: f64, x: f64, z: f64, s_grid: &[f64]) -> f64 {
        s_grid
            .iter()
            .map(|&s| 0.5 * s * s * z - self.fenchel_star(t, x, s))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// γ̄_ε(x) = sup{z : F(t, x, z) ≤ 1/level}; closed form for the
    /// linear-impact model, bisection otherwise.
    pub fn gamma_level(&self, t: f64, x: f64, level: f64) -> f64 {
        if self.custom.is_none() {
            let f = self.impact(x);
            if f == 0.0 {
                return f64::INFINITY;
            }
            let q = (2.0 / (level * f)).sqrt();
            return q / (self.sigma0(t, x) + q * f);
        }
        self.gamma_level_bisect(t, x, level)
    }

    /// Bisection for the F-level set boundary on `[0, γ̄)`.
    pub fn gamma_level_bisect(&self, t: f64, x: f64, level: f64) -> f64 {
        let target = 1.0 / level;
        let gb = self.bar_gamma(t, x);
        let (mut lo, mut hi) = if gb.is_finite() {
            (0.0, gb)
        } else {
            let mut hi = 1.0;
            while self.big_f_ext(t, x, hi) <= target {
                hi *= 2.0;
                if hi > 1e12 {
                    return f64::INFINITY;
                }
            }
            (0.0, hi)
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.big_f_ext(t, x, mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// One failed assumption at a lattice point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub t: f64,
    pub x: f64,
    pub z: f64,
    pub value: f64,
}

/// Outcome of [`check_assumptions`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct DiagnosticReport {
    pub nodes_checked: usize,
    pub convexity_failures: usize,
    pub ellipticity_failures: usize,
    pub volatility_failures: usize,
    pub zero_level_failures: usize,
    pub impact_failures: usize,
    /// True when γ̄ = +∞ at every node (gamma-constraint checks skipped).
    pub gamma_bound_infinite: bool,
    /// First violations, in lattice order.
    pub violations: Vec<Violation>,
}

impl DiagnosticReport {
    pub fn passed(&self) -> bool {
        self.convexity_failures == 0
            && self.ellipticity_failures == 0
            && self.volatility_failures == 0
            && self.zero_level_failures == 0
            && self.impact_failures == 0
    }

    pub fn is_convex(&self) -> bool {
        self.convexity_failures == 0
    }
}

const MAX_REPORTED: usize = 32;

/// Checks, on every grid node and the supplied gamma samples: convexity of
/// z ↦ F̄ (second differences), ∂_z F̄ > 0, σ > 0, F̄(·, 0) = 0 and f ≥ 0.
/// Samples at or above the domain cap are skipped.
pub fn check_assumptions(model: &ImpactModel, grid: &SpaceTimeGrid, z_samples: &[f64]) -> DiagnosticReport {
    let mut zs: Vec<f64> = z_samples.iter().copied().filter(|z| z.is_finite()).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    let tol = 1e-9;
    let mut report = DiagnosticReport {
        gamma_bound_infinite: true,
        ..Default::default()
    };
    let push = |report: &mut DiagnosticReport, v: Violation| {
        if report.violations.len() < MAX_REPORTED {
            report.violations.push(v);
        }
    };

    for i in 0..=grid.n_time {
        let t = grid.t(i);
        for j in 0..grid.n_space {
            let x = grid.x(j);
            report.nodes_checked += 1;
            let cap = model.gamma_cap(t, x);
            if model.bar_gamma(t, x).is_finite() {
                report.gamma_bound_infinite = false;
            }
            if model.custom.is_none() && model.impact(x) < 0.0 {
                report.impact_failures += 1;
                push(
                    &mut report,
                    Violation {
                        check: "impact",
                        t,
                        x,
                        z: 0.0,
                        value: model.impact(x),
                    },
                );
            }
            let s0 = model.sigma_ext(t, x, 0.0);
            if !(s0 > 0.0) {
                report.volatility_failures += 1;
                push(
                    &mut report,
                    Violation {
                        check: "volatility",
                        t,
                        x,
                        z: 0.0,
                        value: s0,
                    },
                );
            }
            let f0 = model.bar_f_ext(t, x, 0.0);
            if f0.abs() > 1e-14 {
                report.zero_level_failures += 1;
                push(
                    &mut report,
                    Violation {
                        check: "zero_level",
                        t,
                        x,
                        z: 0.0,
                        value: f0,
                    },
                );
            }
            let inside: Vec<f64> = zs.iter().copied().filter(|z| *z < cap).collect();
            for &z in &inside {
                let d = model.dz_bar_f_ext(t, x, z);
                if !(d > 0.0) {
                    report.ellipticity_failures += 1;
                    push(
                        &mut report,
                        Violation {
                            check: "ellipticity",
                            t,
                            x,
                            z,
                            value: d,
                        },
                    );
                }
            }
            for w in inside.windows(3) {
                let (za, zb, zc) = (w[0], w[1], w[2]);
                let (fa, fb, fc) = (
                    model.bar_f_ext(t, x, za),
                    model.bar_f_ext(t, x, zb),
                    model.bar_f_ext(t, x, zc),
                );
                // divided second difference, valid on uneven samples
                let dd = 2.0 * ((fc - fb) / (zc - zb) - (fb - fa) / (zb - za)) / (zc - za);
                let scale = 1.0 + fa.abs().max(fb.abs()).max(fc.abs());
                if dd < -tol * scale {
                    report.convexity_failures += 1;
                    push(
                        &mut report,
                        Violation {
                            check: "convexity",
                            t,
                            x,
                            z: zb,
                            value: dd,
                        },
                    );
                }
            }
        }
    }
    report
}
