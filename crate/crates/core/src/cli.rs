//! Command-line front end.
//!
//! Results go to standard output as JSON (CSV for `facelift`); diagnostics go
//! to standard error. Exit codes: 0 success, 1 domain error or failed study
//! cell, 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_config, to_canonical_json, RootConfig};
use crate::dual::{dual_sweep, dual_value, ControlSpec};
use crate::error::{Error, Result};
use crate::experiments::run_study;
use crate::facelift::face_lift;
use crate::hedge::{asymptotic_hedge, exact_hedge, HedgeReport, HedgeScheme};
use crate::pde::solve_hjb;

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "IMPACT_HEDGE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "impact-hedge",
    version,
    about = "Pricing and hedging of European options under market impact"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON config; defaults apply to every omitted key.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the pricing equation and print price diagnostics.
    Price {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Write the surface as CSV (t, x, v, dxx, s_hat).
        #[arg(long)]
        surface_csv: Option<PathBuf>,
    },
    /// Print the face-lifted payoff as CSV (x, g, g_hat, gamma_bound, contact).
    Facelift {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Write to a file instead of standard output.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Monte Carlo value of the dual control problem.
    Dual {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// optimal | const:<s> | sweep
        #[arg(long, default_value = "optimal")]
        control: String,
    },
    /// Simulate a hedging strategy under impact dynamics.
    Hedge {
        #[command(flatten)]
        cfg: ConfigArg,
        /// exact | asymptotic:<eps>
        #[arg(long, default_value = "exact")]
        strategy: String,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// euler | milstein
        #[arg(long)]
        scheme: Option<String>,
        /// Write per-path terminal errors as CSV.
        #[arg(long)]
        paths_csv: Option<PathBuf>,
    },
    /// Cross-validation studies.
    Study {
        #[command(subcommand)]
        action: StudyAction,
    },
    /// Config utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum StudyAction {
    /// Run the study named in the config and print its report.
    Run { config: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Print the full default config.
    PrintDefaults,
    /// Validate a config and print it with defaults filled in.
    Check { config: PathBuf },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Schema { .. } | Error::Io(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load(arg: &ConfigArg) -> Result<RootConfig> {
    match &arg.config {
        Some(p) => parse_config(p),
        None => Ok(RootConfig::default()),
    }
}

fn usage(message: String) -> Error {
    Error::Schema {
        path: "argv".into(),
        message,
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    out.write_all(to_canonical_json(value)?.as_bytes())?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn run(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Price { cfg, surface_csv } => {
            let cfg = load(&cfg)?;
            let (model, grid) = (cfg.model()?, cfg.grid()?);
            let lift = face_lift(&cfg.payoff, &model, &grid)?;
            let sol = solve_hjb(&model, &lift.g_hat_values, &grid, &cfg.solver)?;
            if let Some(path) = surface_csv {
                let mut csv = String::from("t,x,v,dxx,s_hat\n");
                for i in 0..=grid.n_time {
                    for j in 0..grid.n_space {
                        csv.push_str(&format!(
                            "{},{},{},{},{}\n",
                            grid.t(i),
                            grid.x(j),
                            sol.values.at(i, j),
                            sol.dxx_values.at(i, j),
                            sol.control_field.at(i, j)
                        ));
                    }
                }
                write_file(&path, &csv)?;
            }
            emit(
                out,
                &json!({
                    "price": sol.price_at(cfg.spot),
                    "iterations": sol.total_iterations(),
                    "residual_sup": sol.residual_sup(),
                    "gamma_margin": sol.gamma_margin(&model),
                    "spot": cfg.spot,
                    "config_hash": cfg.hash(),
                }),
            )?;
            Ok(0)
        }
        Command::Facelift { cfg, output } => {
            let cfg = load(&cfg)?;
            let (model, grid) = (cfg.model()?, cfg.grid()?);
            let lift = face_lift(&cfg.payoff, &model, &grid)?;
            let mut csv = String::from("x,g,g_hat,gamma_bound,contact\n");
            for j in 0..grid.n_space {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    lift.xs[j],
                    lift.g_values[j],
                    lift.g_hat_values[j],
                    lift.gamma_bound_used[j],
                    u8::from(lift.contact_set[j])
                ));
            }
            match output {
                Some(p) => write_file(&p, &csv)?,
                None => out.write_all(csv.as_bytes())?,
            }
            Ok(0)
        }
        Command::Dual {
            cfg,
            paths,
            steps,
            seed,
            control,
        } => {
            let mut cfg = load(&cfg)?;
            cfg.mc.n_paths = paths.unwrap_or(cfg.mc.n_paths);
            cfg.mc.n_steps = steps.unwrap_or(cfg.mc.n_steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let (model, grid) = (cfg.model()?, cfg.grid()?);
            let lift = face_lift(&cfg.payoff, &model, &grid)?;
            let (g_hat, g) = (&lift.g_hat_values, Some(lift.g_values.as_slice()));
            let sol = || solve_hjb(&model, g_hat, &grid, &cfg.solver);
            let opts = cfg.mc_opts();
            match control.as_str() {
                "optimal" => {
                    let c = ControlSpec::from_solution(&sol()?);
                    emit(out, &dual_value(&c, g_hat, g, &model, &grid, cfg.spot, &opts)?)?;
                }
                "sweep" => {
                    let sol = sol()?;
                    let base = model.sigma0(grid.t_start, cfg.spot);
                    let mut family = vec![ControlSpec::from_solution(&sol)];
                    family.extend([0.8, 0.9, 1.0, 1.1, 1.25, 1.5].map(|m| ControlSpec::Constant(m * base)));
                    let price = Some(sol.price_at(cfg.spot));
                    emit(
                        out,
                        &dual_sweep(&family, g_hat, g, &model, &grid, cfg.spot, &opts, price)?,
                    )?;
                }
                other => {
                    let s = other
                        .strip_prefix("const:")
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| usage(format!("--control must be optimal, sweep or const:<s>, got {other}")))?;
                    let c = ControlSpec::Constant(s);
                    emit(out, &dual_value(&c, g_hat, g, &model, &grid, cfg.spot, &opts)?)?;
                }
            }
            Ok(0)
        }
        Command::Hedge {
            cfg,
            strategy,
            paths,
            steps,
            seed,
            scheme,
            paths_csv,
        } => {
            let mut cfg = load(&cfg)?;
            cfg.hedge.n_paths = paths.unwrap_or(cfg.hedge.n_paths);
            cfg.hedge.n_steps = steps.unwrap_or(cfg.hedge.n_steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            if let Some(s) = scheme {
                cfg.hedge.scheme = match s.as_str() {
                    "euler" => HedgeScheme::Euler,
                    "milstein" => HedgeScheme::Milstein,
                    other => return Err(usage(format!("--scheme must be euler or milstein, got {other}"))),
                };
            }
            cfg.validate()?;
            let (model, grid) = (cfg.model()?, cfg.grid()?);
            let report = match strategy.as_str() {
                "exact" => exact_hedge(&model, &cfg.payoff, &grid, cfg.spot, &cfg.solver, &cfg.hedge_opts())?,
                other => {
                    let eps = other
                        .strip_prefix("asymptotic:")
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| usage(format!("--strategy must be exact or asymptotic:<eps>, got {other}")))?;
                    asymptotic_hedge(&model, &cfg.payoff, &grid, eps, cfg.spot, &cfg.hedge_opts())?
                }
            };
            if let Some(path) = paths_csv {
                let mut csv = String::from("path,terminal_error\n");
                for (k, e) in report.terminal_errors.iter().enumerate() {
                    csv.push_str(&format!("{k},{e}\n"));
                }
                write_file(&path, &csv)?;
            }
            emit(out, &HedgeSummary::from(&report))?;
            Ok(0)
        }
        Command::Study {
            action: StudyAction::Run { config },
        } => {
            let cfg = parse_config(&config)?;
            let report = run_study(&cfg)?;
            let text = to_canonical_json(&report)?;
            if let Some(dir) = &cfg.output_dir {
                let dir = Path::new(dir);
                std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
                let stem = serde_json::to_value(report.study)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_else(|| "study".into());
                write_file(&dir.join(format!("{stem}.json")), &text)?;
                write_file(&dir.join(format!("{stem}.csv")), &report.csv)?;
            }
            out.write_all(text.as_bytes())?;
            for c in report.failed_cells() {
                let _ = writeln!(
                    err,
                    "failed: {} = {} (bound {} {})",
                    c.name, c.value, c.relation, c.bound
                );
            }
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Config {
            action: ConfigAction::PrintDefaults,
        } => {
            emit(out, &RootConfig::default())?;
            Ok(0)
        }
        Command::Config {
            action: ConfigAction::Check { config },
        } => {
            emit(out, &parse_config(&config)?)?;
            Ok(0)
        }
    }
}

/// [`HedgeReport`] without the per-path arrays.
#[derive(Debug, Serialize)]
struct HedgeSummary {
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    scheme: HedgeScheme,
    initial_capital: f64,
    y0: f64,
    sup_error: f64,
    mean_error: f64,
    std_error: f64,
    stderr: f64,
    domain_escapes: usize,
    first_escape: Option<(usize, usize)>,
    grid_escapes: usize,
    y_tracking_sup: f64,
}

impl From<&HedgeReport> for HedgeSummary {
    fn from(r: &HedgeReport) -> Self {
        HedgeSummary {
            n_paths: r.n_paths,
            n_steps: r.n_steps,
            seed: r.seed,
            scheme: r.scheme,
            initial_capital: r.initial_capital,
            y0: r.y0,
            sup_error: r.sup_error,
            mean_error: r.mean_error,
            std_error: r.std_error,
            stderr: r.stderr,
            domain_escapes: r.domain_escapes,
            first_escape: r.first_escape,
            grid_escapes: r.grid_escapes,
            y_tracking_sup: r.y_tracking_sup,
        }
    }
}

/// Builds the global worker pool from [`THREADS_ENV`] when it is set.
pub fn init_thread_pool() -> std::result::Result<(), String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
            if n == 0 {
                return Err(format!("{THREADS_ENV} must be positive"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| e.to_string())
        }
        Err(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let mut argv = vec!["impact-hedge"];
        argv.extend_from_slice(args);
        let code = dispatch(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn small_config(dir: &Path, extra: &str) -> PathBuf {
        let path = dir.join("c.json");
        let text = format!(
            r#"{{"grid": {{"n_space": 101, "n_time": 40}}, "mc": {{"n_paths": 500, "n_steps": 20}},
                "hedge": {{"n_paths": 200, "n_steps": 20}} {extra}}}"#
        );
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn print_defaults_round_trips() {
        let (code, out, _) = call(&["config", "print-defaults"]);
        assert_eq!(code, 0);
        let parsed = crate::config::parse_config_str(&out).unwrap();
        assert_eq!(parsed, RootConfig::default());
    }

    #[test]
    fn price_prints_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), "");
        let surface = dir.path().join("s.csv");
        let (code, out, _) = call(&[
            "price",
            "--config",
            cfg.to_str().unwrap(),
            "--surface-csv",
            surface.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["price"].as_f64().unwrap() > 7.9);
        for key in ["iterations", "residual_sup", "gamma_margin"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let csv = std::fs::read_to_string(surface).unwrap();
        assert!(csv.starts_with("t,x,v,dxx,s_hat\n"));
        assert_eq!(csv.lines().count(), 1 + 41 * 101);
    }

    #[test]
    fn usage_errors_exit_two() {
        let (code, _, err) = call(&["price", "--bogus"]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"));
        assert_eq!(call(&["dual", "--control", "best"]).0, 2);
        assert_eq!(call(&["hedge", "--strategy", "asymptotic:x"]).0, 2);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn bad_config_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"model": {"f": -1}}"#).unwrap();
        let (code, _, err) = call(&["price", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(err.contains("/model/f"));
    }

    #[test]
    fn domain_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"solver": {"scheme": "explicit"}, "grid": {"n_time": 2}}"#).unwrap();
        let (code, _, err) = call(&["price", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 1, "{err}");
    }

    #[test]
    fn facelift_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), "");
        let (code, out, _) = call(&["facelift", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(out.starts_with("x,g,g_hat,gamma_bound,contact\n"));
        assert_eq!(out.lines().count(), 102);
    }

    #[test]
    fn dual_and_hedge_variants_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), "");
        let c = cfg.to_str().unwrap();
        for control in ["optimal", "const:20", "sweep"] {
            let (code, out, err) = call(&["dual", "--config", c, "--control", control, "--paths", "300"]);
            assert_eq!(code, 0, "{err}");
            assert!(serde_json::from_str::<serde_json::Value>(&out).is_ok());
        }
        let csv = dir.path().join("p.csv");
        for strategy in ["exact", "asymptotic:0.5"] {
            let (code, out, err) = call(&[
                "hedge",
                "--config",
                c,
                "--strategy",
                strategy,
                "--paths-csv",
                csv.to_str().unwrap(),
            ]);
            assert_eq!(code, 0, "{err}");
            let v: serde_json::Value = serde_json::from_str(&out).unwrap();
            assert_eq!(v["n_paths"], 200);
        }
        assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 201);
    }

    #[test]
    fn failing_study_still_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("out");
        // Adjacent scales cannot shrink the gap by the required factor.
        let extra = format!(
            r#", "study": {{"kind": "expansion", "eps_list": [0.4, 0.39]}}, "output_dir": {:?}"#,
            out_dir.to_str().unwrap()
        );
        let cfg = small_config(dir.path(), &extra);
        let (code, out, err) = call(&["study", "run", cfg.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.contains("failed: ratio_0"));
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["passed"], false);
        assert!(out_dir.join("expansion.json").exists());
        assert!(out_dir.join("expansion.csv").exists());
    }
}
