//! Grid bookkeeping, finite-difference stencils, tridiagonal solves,
//! interpolation and the upper concave envelope.
//!
//! All grids are uniform. Arrays are plain `Vec<f64>` indexed by space node;
//! time-space surfaces are stored row-major with one row per time level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform rectangular discretization of `[t_start, t_end] x [x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    /// Number of space nodes (at least 3).
    pub n_space: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Number of time steps (at least 1); there are `n_time + 1` time levels.
    pub n_time: usize,
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, n_space: usize, t_start: f64, t_end: f64, n_time: usize) -> Result<Self> {
        let grid = SpaceTimeGrid {
            x_min,
            x_max,
            n_space,
            t_start,
            t_end,
            n_time,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            return Err(Error::InvalidGrid(format!(
                "need x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_start < self.t_end) {
            return Err(Error::InvalidGrid(format!(
                "need t_start < t_end, got [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        if self.n_space < 3 {
            return Err(Error::InvalidGrid(format!(
                "n_space must be at least 3, got {}",
                self.n_space
            )));
        }
        if self.n_time < 1 {
            return Err(Error::InvalidGrid("n_time must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_space - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_time as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.n_space {
            self.x_max
        } else {
            self.x_min + j as f64 * self.dx()
        }
    }

    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_time {
            self.t_end
        } else {
            self.t_start + i as f64 * self.dt()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_space).map(|j| self.x(j)).collect()
    }

    pub fn maturity(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Same box, different resolution.
    pub fn with_resolution(&self, n_space: usize, n_time: usize) -> Result<Self> {
        SpaceTimeGrid::new(self.x_min, self.x_max, n_space, self.t_start, self.t_end, n_time)
    }

    /// Index of the node nearest to `x` (clamped to the grid).
    pub fn nearest_node(&self, x: f64) -> usize {
        let pos = ((x - self.x_min) / self.dx()).round();
        pos.clamp(0.0, (self.n_space - 1) as f64) as usize
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n_space {
            return Err(Error::LengthMismatch {
                expected: self.n_space,
                got: len,
            });
        }
        Ok(())
    }
}

/// Tridiagonal system `lower[i] u[i-1] + diag[i] u[i] + upper[i] u[i+1] = rhs[i]`.
///
/// All four arrays have the full system length; `lower[0]` and `upper[n-1]`
/// are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TriDiagSystem {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TriDiagSystem {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Row-wise (weak) diagonal dominance.
    pub fn is_diagonally_dominant(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            let lo = if i > 0 { self.lower[i].abs() } else { 0.0 };
            let up = if i + 1 < n { self.upper[i].abs() } else { 0.0 };
            self.diag[i].abs() >= lo + up
        })
    }

    /// Matrix-vector product with the system matrix.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut acc = self.diag[i] * u[i];
                if i > 0 {
                    acc += self.lower[i] * u[i - 1];
                }
                if i + 1 < n {
                    acc += self.upper[i] * u[i + 1];
                }
                acc
            })
            .collect()
    }
}

const PIVOT_FLOOR: f64 = 1e-14;

/// Thomas elimination.
pub fn solve_tridiag(system: &TriDiagSystem) -> Result<Vec<f64>> {
    let n = system.len();
    for len in [system.lower.len(), system.upper.len(), system.rhs.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, got: len });
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if !system.is_diagonally_dominant() {
        return Err(Error::InvalidArgument(
            "tridiagonal system is not diagonally dominant".into(),
        ));
    }

    let mut c_star = vec![0.0; n];
    let mut d_star = vec![0.0; n];
    let mut pivot = system.diag[0];
    if pivot.abs() < PIVOT_FLOOR {
        return Err(Error::SingularSystem { row: 0, pivot });
    }
    c_star[0] = system.upper[0] / pivot;
    d_star[0] = system.rhs[0] / pivot;
    for i in 1..n {
        pivot = system.diag[i] - system.lower[i] * c_star[i - 1];
        if pivot.abs() < PIVOT_FLOOR {
            return Err(Error::SingularSystem { row: i, pivot });
        }
        c_star[i] = if i + 1 < n { system.upper[i] / pivot } else { 0.0 };
        d_star[i] = (system.rhs[i] - system.lower[i] * d_star[i - 1]) / pivot;
    }

    let mut u = d_star;
    for i in (0..n - 1).rev() {
        u[i] -= c_star[i] * u[i + 1];
    }
    Ok(u)
}

/// Central second difference in the interior; each endpoint copies its
/// nearest interior value.
pub fn second_diff(values: &[f64], grid: &SpaceTimeGrid) -> Result<Vec<f64>> {
    grid.check_len(values.len())?;
    Ok(second_diff_raw(values, grid.dx()))
}

pub(crate) fn second_diff_raw(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    let inv = 1.0 / (dx * dx);
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = (values[j + 1] - 2.0 * values[j] + values[j - 1]) * inv;
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    out
}

/// Central first difference in the interior, one-sided at the endpoints.
pub fn first_diff(values: &[f64], grid: &SpaceTimeGrid) -> Result<Vec<f64>> {
    grid.check_len(values.len())?;
    Ok(first_diff_raw(values, grid.dx()))
}

pub(crate) fn first_diff_raw(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = (values[j + 1] - values[j - 1]) / (2.0 * dx);
    }
    out[0] = (values[1] - values[0]) / dx;
    out[n - 1] = (values[n - 1] - values[n - 2]) / dx;
    out
}

/// Indices of the upper convex hull of `(xs, ys)`, first and last included.
///
/// Andrew's monotone chain; linear in the number of points.
pub fn upper_hull(xs: &[f64], ys: &[f64]) -> Result<Vec<usize>> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("envelope needs at least two points".into()));
    }
    if let Some(index) = xs.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::UnsortedInput { index: index + 1 });
    }

    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b unless it lies strictly above the chord a-k
            let cross = (xs[b] - xs[a]) * (ys[k] - ys[a]) - (ys[b] - ys[a]) * (xs[k] - xs[a]);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    Ok(hull)
}

/// Values on `xs` of the least concave majorant of the piecewise-linear
/// interpolant of `(xs, ys)`.
pub fn upper_concave_envelope(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let hull = upper_hull(xs, ys)?;
    let mut out = vec![0.0; xs.len()];
    for seg in hull.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        out[a] = ys[a];
        let slope = (ys[b] - ys[a]) / (xs[b] - xs[a]);
        for j in a + 1..b {
            // keep the majorant property under rounding
            out[j] = (ys[a] + slope * (xs[j] - xs[a])).max(ys[j]);
        }
    }
    let last = xs.len() - 1;
    out[last] = ys[last];
    Ok(out)
}

/// Result of a grid lookup; `clamped` flags a query outside the grid box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub value: f64,
    pub clamped: bool,
}

/// Piecewise-linear interpolation of nodal values; queries outside the box are
/// clamped to the boundary value and flagged.
pub fn interp_linear(grid: &SpaceTimeGrid, values: &[f64], x: f64) -> Lookup {
    debug_assert_eq!(values.len(), grid.n_space);
    let (j, w, clamped) = locate(grid.x_min, grid.dx(), grid.n_space, x);
    let value = if w == 0.0 {
        values[j]
    } else {
        values[j] * (1.0 - w) + values[j + 1] * w
    };
    Lookup { value, clamped }
}

/// Cell index and weight for a uniform axis; the weight is zero at nodes.
#[inline]
fn locate(origin: f64, step: f64, n: usize, x: f64) -> (usize, f64, bool) {
    let pos = (x - origin) / step;
    if !(pos > 0.0) {
        return (0, 0.0, pos < 0.0 || pos.is_nan());
    }
    let last = (n - 1) as f64;
    if pos >= last {
        return (n - 1, 0.0, pos > last);
    }
    let j = pos.floor() as usize;
    (j, pos - j as f64, false)
}

/// Time-by-space surface on a [`SpaceTimeGrid`], one row per time level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Surface {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Surface {
            n_rows: grid.n_time + 1,
            n_cols: grid.n_space,
            data: vec![0.0; (grid.n_time + 1) * grid.n_space],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::LengthMismatch {
                    expected: n_cols,
                    got: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Surface { n_rows, n_cols, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&self, scale: f64, other: &Surface) -> Surface {
        debug_assert_eq!(self.data.len(), other.data.len());
        Surface {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect(),
        }
    }

    /// Bilinear interpolation in `(t, x)`; space queries outside the box are
    /// clamped and flagged, time is clamped silently.
    pub fn bilinear(&self, grid: &SpaceTimeGrid, t: f64, x: f64) -> Lookup {
        let (i, wt, _) = locate(grid.t_start, grid.dt(), self.n_rows, t);
        let (j, wx, clamped) = locate(grid.x_min, grid.dx(), self.n_cols, x);
        let row_value = |r: usize| {
            let base = r * self.n_cols + j;
            if wx == 0.0 {
                self.data[base]
            } else {
                self.data[base] * (1.0 - wx) + self.data[base + 1] * wx
            }
        };
        let value = if wt == 0.0 {
            row_value(i)
        } else {
            row_value(i) * (1.0 - wt) + row_value(i + 1) * wt
        };
        Lookup { value, clamped }
    }
}

/// Pairwise (cascade) summation; the reduction order depends only on the
/// slice length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Sample mean and standard error of the mean, with deterministic summation.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
