//! JSON configuration shared by the command line and the studies.
//!
//! Every section has explicit defaults (see `impact-hedge config print-defaults`);
//! unknown keys are rejected and semantic checks report a JSON pointer such as
//! `/model/f`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dual::McOpts;
use crate::error::{Error, Result};
use crate::facelift::PayoffSpec;
use crate::hedge::{HedgeOpts, HedgeScheme};
use crate::model::{BaseVol, Drift, ImpactFn, ImpactModel, Table1d, Table2d};
use crate::numerics::SpaceTimeGrid;
use crate::pde::{ControlSet, SolverOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bolozo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolKind {
    /// σ∘(x) = sigma0·|x|.
    Proportional,
    /// σ∘ ≡ sigma0.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model: ModelKind,
    pub vol_kind: VolKind,
    pub sigma0: f64,
    pub f: f64,
    pub epsilon: f64,
    pub drift: f64,
    /// δ_cap as a fraction of γ̄.
    pub cap_fraction: f64,
    /// Overrides `sigma0`/`vol_kind` when present.
    pub sigma0_table: Option<Table2d>,
    /// Overrides `f` when present.
    pub f_table: Option<Table1d>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model: ModelKind::Bolozo,
            vol_kind: VolKind::Proportional,
            sigma0: 0.2,
            f: 0.1,
            epsilon: 1.0,
            drift: 0.0,
            cap_fraction: 1e-3,
            sigma0_table: None,
            f_table: None,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<ImpactModel> {
        let base = match (&self.sigma0_table, self.vol_kind) {
            (Some(t), _) => BaseVol::Table(t.clone()),
            (None, VolKind::Proportional) => BaseVol::Proportional(self.sigma0),
            (None, VolKind::Constant) => BaseVol::Constant(self.sigma0),
        };
        let impact = match &self.f_table {
            Some(t) => ImpactFn::Table(t.clone()),
            None => ImpactFn::Constant(self.f),
        };
        let drift = if self.drift == 0.0 {
            Drift::Zero
        } else {
            Drift::Constant(self.drift)
        };
        Ok(ImpactModel::new(base, impact)?
            .with_epsilon(self.epsilon)
            .with_cap_fraction(self.cap_fraction)
            .with_drift(drift))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_space: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub n_time: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x_min: 40.0,
            x_max: 250.0,
            n_space: 801,
            t_start: 0.0,
            t_end: 1.0,
            n_time: 400,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(
            self.x_min,
            self.x_max,
            self.n_space,
            self.t_start,
            self.t_end,
            self.n_time,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: 100_000,
            n_steps: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HedgeConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub scheme: HedgeScheme,
}

impl Default for HedgeConfig {
    fn default() -> Self {
        HedgeConfig {
            n_paths: 10_000,
            n_steps: 200,
            scheme: HedgeScheme::Euler,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Expansion,
    VarianceIdentity,
    Consistency,
    HedgeOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub kind: StudyKind,
    /// Descending scaling factors for the expansion and hedge-order studies.
    pub eps_list: Vec<f64>,
    /// Paths for the one-step Gaussian sample of the variance identity.
    pub variance_paths: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            kind: StudyKind::Consistency,
            eps_list: vec![0.4, 0.2, 0.1, 0.05],
            variance_paths: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub payoff: PayoffSpec,
    pub spot: f64,
    pub solver: SolverOpts,
    pub mc: McConfig,
    pub hedge: HedgeConfig,
    pub study: StudyConfig,
    pub seed: u64,
    /// Directory for study reports and CSV mirrors; nothing is written when absent.
    pub output_dir: Option<String>,
}

impl Default for RootConfig {
    fn default() -> Self {
        RootConfig {
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            payoff: PayoffSpec::Call { strike: 100.0 },
            spot: 100.0,
            solver: SolverOpts::default(),
            mc: McConfig::default(),
            hedge: HedgeConfig::default(),
            study: StudyConfig::default(),
            seed: 42,
            output_dir: None,
        }
    }
}

/// One semantic check that failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaIssue {
    pub path: String,
    pub message: String,
}

struct Checker(Vec<SchemaIssue>);

impl Checker {
    fn require(&mut self, ok: bool, path: &str, message: impl Into<String>) {
        if !ok {
            self.0.push(SchemaIssue {
                path: path.to_string(),
                message: message.into(),
            });
        }
    }

    fn check(&mut self, r: Result<()>, path: &str) {
        if let Err(e) = r {
            self.0.push(SchemaIssue {
                path: path.to_string(),
                message: e.to_string(),
            });
        }
    }
}

impl RootConfig {
    pub fn model(&self) -> Result<ImpactModel> {
        self.model.build()
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid> {
        self.grid.build()
    }

    pub fn mc_opts(&self) -> McOpts {
        McOpts {
            n_paths: self.mc.n_paths,
            n_steps: self.mc.n_steps,
            seed: self.seed,
        }
    }

    pub fn hedge_opts(&self) -> HedgeOpts {
        HedgeOpts::new(self.hedge.n_paths, self.hedge.n_steps, self.seed).with_scheme(self.hedge.scheme)
    }

    /// All semantic violations, in document order.
    pub fn issues(&self) -> Vec<SchemaIssue> {
        let mut c = Checker(Vec::new());
        let m = &self.model;
        c.require(
            m.sigma0.is_finite() && m.sigma0 > 0.0,
            "/model/sigma0",
            "must be a positive number",
        );
        c.require(
            m.f.is_finite() && m.f >= 0.0,
            "/model/f",
            "must be a non-negative number",
        );
        c.require(
            m.epsilon.is_finite() && m.epsilon >= 0.0,
            "/model/epsilon",
            "must be a non-negative number",
        );
        c.require(m.drift.is_finite(), "/model/drift", "must be finite");
        c.require(
            m.cap_fraction > 0.0 && m.cap_fraction < 1.0,
            "/model/cap_fraction",
            "must lie in (0, 1)",
        );
        if let Some(t) = &m.sigma0_table {
            c.check(t.validate(), "/model/sigma0_table");
            c.require(
                t.values.iter().flatten().all(|v| *v > 0.0),
                "/model/sigma0_table/values",
                "volatilities must be positive",
            );
        }
        if let Some(t) = &m.f_table {
            c.check(t.validate(), "/model/f_table");
            c.require(
                t.values.iter().all(|v| *v >= 0.0),
                "/model/f_table/values",
                "impact must be non-negative",
            );
        }
        let g = &self.grid;
        c.require(g.n_space >= 3, "/grid/n_space", format!("minimum 3, got {}", g.n_space));
        c.require(g.n_time >= 1, "/grid/n_time", format!("minimum 1, got {}", g.n_time));
        c.require(
            g.x_min.is_finite() && g.x_max.is_finite() && g.x_max > g.x_min,
            "/grid/x_max",
            "must exceed x_min",
        );
        c.require(
            g.t_start.is_finite() && g.t_end.is_finite() && g.t_end > g.t_start,
            "/grid/t_end",
            "must exceed t_start",
        );
        c.check(self.payoff.validate(), "/payoff");
        c.require(
            self.spot > g.x_min && self.spot < g.x_max,
            "/spot",
            "must lie strictly inside the grid",
        );
        let s = &self.solver;
        c.require(s.tol_policy > 0.0, "/solver/tol_policy", "must be positive");
        c.require(s.max_policy_iter >= 1, "/solver/max_policy_iter", "minimum 1");
        if let ControlSet::Lattice { n } = s.control_set {
            c.require(n >= 2, "/solver/control_set/n", "minimum 2");
        }
        c.require(self.mc.n_paths >= 1, "/mc/n_paths", "minimum 1");
        c.require(self.mc.n_steps >= 1, "/mc/n_steps", "minimum 1");
        c.require(self.hedge.n_paths >= 1, "/hedge/n_paths", "minimum 1");
        c.require(self.hedge.n_steps >= 1, "/hedge/n_steps", "minimum 1");
        let eps = &self.study.eps_list;
        c.require(!eps.is_empty(), "/study/eps_list", "must not be empty");
        c.require(
            eps.iter().all(|e| e.is_finite() && *e >= 0.0),
            "/study/eps_list",
            "entries must be non-negative",
        );
        c.require(
            eps.windows(2).all(|w| w[1] < w[0]),
            "/study/eps_list",
            "must be strictly descending",
        );
        c.require(self.study.variance_paths >= 2, "/study/variance_paths", "minimum 2");
        c.0
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().as_slice() {
            [] => Ok(()),
            [first, rest @ ..] => {
                let mut message = first.message.clone();
                for r in rest {
                    message.push_str(&format!("; {}: {}", r.path, r.message));
                }
                Err(Error::Schema {
                    path: first.path.clone(),
                    message,
                })
            }
        }
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Parses and validates a config document.
pub fn parse_config_str(text: &str) -> Result<RootConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RootConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: pointer(&e.path().to_string()),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RootConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// `model.f_table.x[2]` → `/model/f_table/x/2`.
fn pointer(dotted: &str) -> String {
    if dotted == "." || dotted.is_empty() {
        return "/".into();
    }
    let mut out = String::new();
    for part in dotted.split('.') {
        let mut rest = part;
        if let Some(i) = rest.find('[') {
            if i > 0 {
                out.push('/');
                out.push_str(&rest[..i]);
            }
            rest = &rest[i..];
            for idx in rest.split('[').filter(|s| !s.is_empty()) {
                out.push('/');
                out.push_str(idx.trim_end_matches(']'));
            }
        } else {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Significant digits kept when printing results.
pub const OUTPUT_DIGITS: usize = 12;

/// Rounds every float to [`OUTPUT_DIGITS`] significant digits so that output
/// does not expose the last bits of platform arithmetic.
pub fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            let r: f64 = format!("{:.*e}", OUTPUT_DIGITS - 1, x).parse().unwrap_or(x);
            if let Some(num) = serde_json::Number::from_f64(if r == 0.0 { 0.0 } else { r }) {
                *n = num;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with rounded floats and a trailing newline. Non-finite values
/// print as `null`.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    round_floats(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema_path(text: &str) -> String {
        match parse_config_str(text) {
            Err(Error::Schema { path, .. }) => path,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_yields_defaults() {
        assert_eq!(parse_config_str("{}").unwrap(), RootConfig::default());
        let partial = parse_config_str(r#"{"model": {"f": 0.05}, "grid": {"n_time": 100}}"#).unwrap();
        assert_eq!(partial.model.f, 0.05);
        assert_eq!(partial.model.sigma0, 0.2);
        assert_eq!(partial.grid.n_time, 100);
        assert_eq!(partial.grid.n_space, 801);
    }

    #[test]
    fn negative_impact_points_at_model_f() {
        assert_eq!(schema_path(r#"{"model": {"f": -0.1}}"#), "/model/f");
    }

    #[test]
    fn tiny_grid_is_rejected() {
        match parse_config_str(r#"{"grid": {"n_space": 2}}"#) {
            Err(Error::Schema { path, message }) => {
                assert_eq!(path, "/grid/n_space");
                assert!(message.contains("minimum 3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_mistyped_keys_are_located() {
        assert!(schema_path(r#"{"model": {"sigma": 0.2}}"#).starts_with("/model"));
        assert_eq!(schema_path(r#"{"grid": {"n_space": "many"}}"#), "/grid/n_space");
        assert!(schema_path(r#"{"payoff": {"kind": "call", "strike": "x"}}"#).starts_with("/payoff"));
        assert!(schema_path(r#"{"colour": 1}"#).starts_with('/'));
        assert!(matches!(parse_config_str("{"), Err(Error::Schema { .. })));
    }

    #[test]
    fn all_issues_are_reported() {
        let mut cfg = RootConfig::default();
        cfg.model.f = -1.0;
        cfg.grid.n_space = 1;
        cfg.spot = 1e6;
        let paths: Vec<String> = cfg.issues().into_iter().map(|i| i.path).collect();
        assert_eq!(paths, ["/model/f", "/grid/n_space", "/spot"]);
    }

    #[test]
    fn tabulated_model_parses() {
        let cfg = parse_config_str(
            r#"{"model": {"sigma0_table": {"t": [0, 1], "x": [50, 150], "values": [[0.2, 0.3], [0.2, 0.3]]},
                          "f_table": {"x": [50, 150], "values": [0.1, 0.2]}}}"#,
        )
        .unwrap();
        let m = cfg.model().unwrap();
        assert!((m.sigma0(0.5, 100.0) - 0.25).abs() < 1e-12);
        assert!((m.impact(100.0) - 0.15).abs() < 1e-12);
        assert!(!m.has_constant_coefficients());
    }

    #[test]
    fn pointer_conversion() {
        assert_eq!(pointer("model.f"), "/model/f");
        assert_eq!(pointer("model.f_table.x[2]"), "/model/f_table/x/2");
        assert_eq!(pointer("study.eps_list[0]"), "/study/eps_list/0");
        assert_eq!(pointer("."), "/");
    }

    #[test]
    fn rounding_keeps_twelve_digits() {
        let s = to_canonical_json(&vec![1.0 / 3.0, 0.1 + 0.2, f64::NAN, 1e-300, -0.0]).unwrap();
        let v: Vec<Option<f64>> = serde_json::from_str(&s).unwrap();
        assert_eq!(v[0], Some(0.333333333333));
        assert_eq!(v[1], Some(0.3));
        assert_eq!(v[2], None);
        assert_eq!(v[3], Some(1e-300));
        assert_eq!(v[4], Some(0.0));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RootConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    proptest! {
        #[test]
        fn round_trip(
            sigma0 in 0.01f64..1.0,
            f in 0.0f64..1.0,
            n_space in 3usize..2000,
            n_time in 1usize..1000,
            strike in 60.0f64..200.0,
            seed in any::<u64>(),
            constant in any::<bool>(),
        ) {
            let mut cfg = RootConfig::default();
            cfg.model.sigma0 = sigma0;
            cfg.model.f = f;
            cfg.model.vol_kind = if constant { VolKind::Constant } else { VolKind::Proportional };
            cfg.grid.n_space = n_space;
            cfg.grid.n_time = n_time;
            cfg.payoff = PayoffSpec::Put { strike };
            cfg.seed = seed;
            let text = serde_json::to_string(&cfg).unwrap();
            prop_assert_eq!(parse_config_str(&text).unwrap(), cfg);
        }
    }
}
