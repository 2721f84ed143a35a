//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass substrings as arguments to select
//! criteria by name.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use impact_hedge::dual::{dual_sweep, dual_value, ControlSpec, McOpts};
use impact_hedge::experiments::{hedge_order, variance_identity};
use impact_hedge::facelift::{face_lift, face_lift_values, PayoffSpec};
use impact_hedge::hedge::{exact_hedge, HedgeOpts, HedgeScheme};
use impact_hedge::model::{ImpactModel, Table2d};
use impact_hedge::numerics::{second_diff, SpaceTimeGrid};
use impact_hedge::pde::{price_expansion, solve_delta_v, solve_hjb, solve_linear_v0, PdeSolution, SolverOpts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(checks: &[(&str, bool)], detail: String) -> Outcome {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if failed.is_empty() {
        detail
    } else {
        format!("{detail} [failed: {}]", failed.join(", "))
    };
    Outcome {
        passed: failed.is_empty(),
        detail,
    }
}

const K: f64 = 100.0;
const SPOT: f64 = 100.0;

fn call() -> PayoffSpec {
    PayoffSpec::Call { strike: K }
}

fn desk_grid(n: usize, nt: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::new(40.0, 250.0, n, 0.0, 1.0, nt).unwrap()
}

fn desk_model(f: f64) -> ImpactModel {
    ImpactModel::bolozo_proportional(0.2, f).unwrap()
}

fn solve(model: &ImpactModel, payoff: &PayoffSpec, grid: &SpaceTimeGrid) -> PdeSolution {
    let lift = face_lift(payoff, model, grid).unwrap();
    solve_hjb(model, &lift.g_hat_values, grid, &SolverOpts::default()).unwrap()
}

fn bs_call(s: f64, k: f64, vol: f64, t: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = vol * t.sqrt();
    let d1 = ((s / k).ln() + 0.5 * sd * sd) / sd;
    s * n.cdf(d1) - k * n.cdf(d1 - sd)
}

fn impact_free_reduction() -> Outcome {
    let model = desk_model(0.0);
    let closed = bs_call(SPOT, K, 0.2, 1.0);
    let coarse = solve(&model, &call(), &desk_grid(801, 400)).price_at(SPOT);
    let fine = solve(&model, &call(), &desk_grid(1601, 800)).price_at(SPOT);
    let rel = ((coarse - 7.9656) / 7.9656).abs();
    let (e_coarse, e_fine) = ((coarse - closed).abs(), (fine - closed).abs());
    outcome(
        &[("rel <= 1e-3", rel <= 1e-3), ("refinement", e_fine < e_coarse)],
        format!("price {coarse:.6} rel {rel:.2e}; |err| {e_coarse:.2e} -> {e_fine:.2e} under refinement"),
    )
}

fn face_lift_exactness() -> Outcome {
    let f = 0.1;
    let model = desk_model(f);
    let grid = SpaceTimeGrid::new(90.0, 110.0, 10_001, 0.0, 1.0, 1).unwrap();
    let gamma = 1.0 / f;
    let lift = face_lift(&call(), &model, &grid).unwrap();
    // quadratic smoothing of the kink over [K - 1/(2γ̄), K + 1/(2γ̄)]
    let a = K - 0.5 / gamma;
    let exact = |x: f64| {
        if x <= a {
            0.0
        } else if x <= K + 0.5 / gamma {
            0.5 * gamma * (x - a) * (x - a)
        } else {
            x - K
        }
    };
    let dx = grid.dx();
    let tol = 2.0 * dx * dx * gamma;
    let jk = grid.nearest_node(K);
    let at_k = lift.g_hat_values[jk];
    let sup_exact = (0..grid.n_space)
        .map(|j| (lift.g_hat_values[j] - exact(grid.x(j))).abs())
        .fold(0.0, f64::max);
    let majorant = lift.g_hat_values.iter().zip(&lift.g_values).all(|(h, g)| h >= g);
    let d2 = second_diff(&lift.g_hat_values, &grid).unwrap();
    let max_d2 = d2[1..grid.n_space - 1]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let again = face_lift_values(&grid, &lift.g_hat_values, &lift.gamma_bound_used).unwrap();
    let idem = again
        .g_hat_values
        .iter()
        .zip(&lift.g_hat_values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        &[
            ("g_hat(K)", (at_k - f / 8.0).abs() <= tol),
            ("closed form", sup_exact <= tol),
            ("majorant", majorant),
            ("curvature", max_d2 <= gamma + 1e-7),
            ("idempotent", idem <= 1e-12),
        ],
        format!(
            "g_hat(K) {at_k:.7} vs {:.7} (tol {tol:.1e}); sup err {sup_exact:.1e}; max D2 - bound {:.2e}; relift {idem:.1e}",
            f / 8.0,
            max_d2 - gamma
        ),
    )
}

fn primal_dual_agreement() -> Outcome {
    let model = desk_model(0.1);
    let grid = desk_grid(801, 400);
    let lift = face_lift(&call(), &model, &grid).unwrap();
    let sol = solve_hjb(&model, &lift.g_hat_values, &grid, &SolverOpts::default()).unwrap();
    let price = sol.price_at(SPOT);
    let markov = ControlSpec::from_solution(&sol);
    let opts = McOpts {
        n_paths: 1_000_000,
        n_steps: 400,
        seed: 20240601,
    };
    let r = dual_value(
        &markov,
        &lift.g_hat_values,
        Some(&lift.g_values),
        &model,
        &grid,
        SPOT,
        &opts,
    )
    .unwrap();
    let agree = (r.estimate - price).abs() <= 3.0 * r.stderr;

    // Random bounded controls: σ∘-proportional tables with multipliers in [0.6, 1.8].
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ts: Vec<f64> = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let xs: Vec<f64> = (0..8).map(|k| 40.0 + 30.0 * k as f64).collect();
    let controls: Vec<ControlSpec> = (0..50)
        .map(|_| {
            let values = ts
                .iter()
                .map(|_| xs.iter().map(|x| rng.random_range(0.6..1.8) * 0.2 * x).collect())
                .collect();
            ControlSpec::Table {
                table: Table2d {
                    t: ts.clone(),
                    x: xs.clone(),
                    values,
                },
                s_max: 0.2 * 250.0 * 1.8,
            }
        })
        .collect();
    let small = McOpts {
        n_paths: 20_000,
        n_steps: 400,
        seed: 99,
    };
    let sweep = dual_sweep(
        &controls,
        &lift.g_hat_values,
        None,
        &model,
        &grid,
        SPOT,
        &small,
        Some(price),
    )
    .unwrap();
    let worst = sweep
        .rows
        .iter()
        .map(|row| (row.result.estimate - price) / row.result.stderr)
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        &[("markov within 3 se", agree), ("random controls below", worst <= 3.0)],
        format!(
            "pde {price:.5} dual {:.5} ± {:.5} ({:.2} se); 50 random controls: max (est - pde)/se = {worst:.2}",
            r.estimate,
            r.stderr,
            (r.estimate - price) / r.stderr
        ),
    )
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn fenchel_identities() -> Outcome {
    let f = 0.1;
    let model = desk_model(f);
    let lin = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / 49.0;
    let z_hi = (1.0 - 1e-3) / f;
    let (mut rec_worst, mut env_worst, mut ulp_worst) = (0.0f64, 0.0f64, 0u64);
    for i in 0..50 {
        let t = lin(0.0, 1.0, i);
        for j in 0..50 {
            let x = lin(40.0, 250.0, j);
            let s0 = 0.2 * x;
            for k in 0..50 {
                let z = lin(-3.0 / f, z_hi, k);
                let sigma = s0 / (1.0 - f * z);
                let bf_oracle = 0.5 * s0 * s0 * z / (1.0 - f * z);
                let bf = model.bar_f(t, x, z).unwrap();
                let s_grid: Vec<f64> = (-50..=50).map(|m| sigma * (1.0 + 1e-6 * m as f64)).collect();
                let rec = model.fenchel_reconstruct(t, x, z, &s_grid);
                rec_worst = rec_worst
                    .max((rec - bf).abs() / bf.abs())
                    .max((bf - bf_oracle).abs() / bf_oracle.abs());
                let s_hat = model.optimal_vol(t, x, z).unwrap();
                let lhs = model.fenchel_star(t, x, s_hat);
                let rhs = model.dz_bar_f(t, x, z).unwrap() * z - bf;
                env_worst = env_worst.max((lhs - rhs).abs() / lhs.abs());
                ulp_worst = ulp_worst.max(ulps(s_hat, model.sigma(t, x, z).unwrap()));
            }
        }
    }
    outcome(
        &[
            ("reconstruct", rec_worst <= 1e-8),
            ("envelope", env_worst <= 1e-10),
            ("s_hat = sigma", ulp_worst <= 4),
        ],
        format!("reconstruct rel {rec_worst:.1e}; envelope rel {env_worst:.1e}; s_hat vs sigma {ulp_worst} ulp"),
    )
}

fn expansion_order() -> Outcome {
    let table = price_expansion(
        &desk_model(0.1),
        &desk_grid(801, 400),
        &call(),
        &[0.4, 0.2, 0.1, 0.05],
        SPOT,
        &SolverOpts::default(),
    )
    .unwrap();
    let gaps: Vec<String> = table.rows.iter().map(|r| format!("{:.2e}", r.gap)).collect();
    outcome(
        &[
            ("slope", table.slope >= 1.5),
            ("ratios", table.ratios.iter().all(|r| *r <= 0.6)),
        ],
        format!(
            "gaps [{}]; slope {:.3}; ratios {:.3?}",
            gaps.join(", "),
            table.slope,
            table.ratios
        ),
    )
}

fn variance_identity_check() -> Outcome {
    let (s0, f) = (0.2, 0.1);
    let model = ImpactModel::bolozo(s0, f).unwrap();
    let grid = SpaceTimeGrid::new(97.0, 103.0, 801, 0.0, 1.0, 800).unwrap();
    let lift = face_lift(&call(), &model, &grid).unwrap();
    let v0 = solve_linear_v0(&model, &lift.g_hat_values, &grid).unwrap();
    let dv = solve_delta_v(&model, &v0, &grid).unwrap().price_at(SPOT);

    // X⁰_T ~ N(spot, σ∘² T); ∂ₓĝ of the smoothed call in closed form.
    let gamma = 1.0 / f;
    let a = K - 0.5 / gamma;
    let slope = |x: f64| (gamma * (x - a)).clamp(0.0, 1.0);
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let d: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            slope(SPOT + s0 * z)
        })
        .collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let m2 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m4 = d.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    let var = m2 * nf / (nf - 1.0);
    let se = ((m4 - m2 * m2) / nf).sqrt();
    let coef = f / 2.0;
    let rhs = coef * var;
    let dx = grid.dx();
    let tol = 3.0 * coef * se + 5.0 * dx * dx;
    let lib = variance_identity(&model, &grid, &call(), SPOT, n, 5).unwrap();
    outcome(
        &[("identity", (dv - rhs).abs() <= tol), ("library study", lib.passed)],
        format!(
            "dv {dv:.7} vs (f/2) Var {rhs:.7} ± {:.1e}; |diff| {:.1e} <= {tol:.1e}",
            coef * se,
            (dv - rhs).abs()
        ),
    )
}

fn exact_replication() -> Outcome {
    let model = desk_model(0.1);
    let grid = desk_grid(801, 400);
    let run = |steps| {
        exact_hedge(
            &model,
            &call(),
            &grid,
            SPOT,
            &SolverOpts::default(),
            &HedgeOpts::new(10_000, steps, 11),
        )
        .unwrap()
    };
    let (r200, r800) = (run(200), run(800));
    let ratio = r800.sup_error / r200.sup_error;
    let mean_ok = |r: &impact_hedge::hedge::HedgeReport| r.mean_error.abs() <= 3.0 * r.stderr;
    outcome(
        &[
            ("mean 200", mean_ok(&r200)),
            ("mean 800", mean_ok(&r800)),
            ("sup ratio", (0.2..=0.8).contains(&ratio)),
            ("domain escapes", r200.domain_escapes + r800.domain_escapes == 0),
            (
                "grid clamps < 0.1%",
                r200.grid_escape_fraction() < 1e-3 && r800.grid_escape_fraction() < 1e-3,
            ),
        ],
        format!(
            "mean {:.4} ± {:.4} (200), {:.4} ± {:.4} (800); sup {:.3} -> {:.3} ratio {ratio:.3}; escapes {}",
            r200.mean_error,
            r200.stderr,
            r800.mean_error,
            r800.stderr,
            r200.sup_error,
            r800.sup_error,
            r200.domain_escapes + r800.domain_escapes
        ),
    )
}

fn asymptotic_hedge_order() -> Outcome {
    let model = ImpactModel::bolozo(0.2, 0.4).unwrap();
    let grid = SpaceTimeGrid::new(97.0, 103.0, 801, 0.0, 1.0, 800).unwrap();
    let opts = HedgeOpts::new(10_000, 3200, 3).with_scheme(HedgeScheme::Milstein);
    let t = hedge_order(&model, &call(), &grid, &[0.4, 0.2, 0.1], SPOT, &opts).unwrap();
    let adjusted: Vec<f64> = t.rows.iter().map(|r| r.adjusted).collect();
    outcome(
        &[
            ("signal above floor", adjusted.iter().all(|a| *a > 0.0)),
            ("ratios", t.ratios.iter().all(|r| *r <= 0.35)),
            ("domain escapes", t.rows.iter().all(|r| r.domain_escapes == 0)),
        ],
        format!(
            "floor {:.3e}; adjusted sup [{}]; ratios {:.3?}",
            t.floor,
            adjusted
                .iter()
                .map(|a| format!("{a:.3e}"))
                .collect::<Vec<_>>()
                .join(", "),
            t.ratios
        ),
    )
}

fn comparison_suite() -> Outcome {
    let grid = desk_grid(801, 400);
    let model = desk_model(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let xs: Vec<f64> = (0..12).map(|k| 40.0 + 210.0 * k as f64 / 11.0).collect();
        let lower: Vec<f64> = xs.iter().map(|_| rng.random_range(0.0..60.0)).collect();
        let upper: Vec<f64> = lower.iter().map(|v| v + rng.random_range(0.0..5.0)).collect();
        let a = solve(
            &model,
            &PayoffSpec::Table {
                xs: xs.clone(),
                ys: lower,
            },
            &grid,
        );
        let b = solve(&model, &PayoffSpec::Table { xs, ys: upper }, &grid);
        for (va, vb) in a.values.iter().zip(b.values.iter()) {
            worst = worst.max(va - vb);
        }
    }
    let fs = [0.0, 0.05, 0.1, 0.2];
    let prices: Vec<f64> = fs
        .iter()
        .map(|f| solve(&desk_model(*f), &call(), &grid).price_at(SPOT))
        .collect();
    let monotone = prices.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        &[("ordered solutions", worst <= 1e-9), ("monotone in f", monotone)],
        format!("max (v_low - v_high) {worst:.1e}; prices over f {fs:?}: {prices:.5?}"),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"grid": {"n_space": 201, "n_time": 100}, "mc": {"n_paths": 4000, "n_steps": 50},
            "hedge": {"n_paths": 2000, "n_steps": 50},
            "study": {"kind": "consistency", "eps_list": [0.4, 0.2, 0.1], "variance_paths": 1000}}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["config", "print-defaults"],
        vec!["config", "check", c],
        vec!["price", "--config", c],
        vec!["facelift", "--config", c],
        vec!["dual", "--config", c, "--control", "optimal", "--seed", "5"],
        vec!["dual", "--config", c, "--control", "const:20", "--seed", "5"],
        vec!["dual", "--config", c, "--control", "sweep", "--seed", "5"],
        vec!["hedge", "--config", c, "--strategy", "exact", "--seed", "5"],
        vec![
            "hedge",
            "--config",
            c,
            "--strategy",
            "asymptotic:0.5",
            "--seed",
            "5",
            "--scheme",
            "milstein",
        ],
        vec!["study", "run", c],
    ];
    let run = |args: &[&str], threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_impact-hedge"))
            .args(args)
            .env("IMPACT_HEDGE_THREADS", threads)
            .output()
            .unwrap();
        (out.status.code(), out.stdout)
    };
    let mut mismatches = Vec::new();
    let mut failures = Vec::new();
    for args in &commands {
        let (c1, o1) = run(args, "1");
        let (c8, o8) = run(args, "8");
        if c1 != Some(0) || c8 != Some(0) {
            failures.push(args.join(" "));
        }
        if o1 != o8 || o1.is_empty() {
            mismatches.push(args.join(" "));
        }
    }
    outcome(
        &[
            ("exit codes", failures.is_empty()),
            ("identical output", mismatches.is_empty()),
        ],
        format!(
            "{} commands; non-zero exits {failures:?}; differing outputs {mismatches:?}",
            commands.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "impact-free reduction", impact_free_reduction),
        (2, "face-lift exactness", face_lift_exactness),
        (3, "primal-dual agreement", primal_dual_agreement),
        (4, "fenchel identities", fenchel_identities),
        (5, "expansion order", expansion_order),
        (6, "variance identity", variance_identity_check),
        (7, "exact replication", exact_replication),
        (8, "asymptotic hedge order", asymptotic_hedge_order),
        (9, "monotonicity and comparison", comparison_suite),
        (10, "cli determinism", cli_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str()) || f == &n.to_string()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        let status = if result.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {name}: {status} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            result.detail
        );
        if !result.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
