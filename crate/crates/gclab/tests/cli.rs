//! Command-level coverage: exit-code taxonomy, artifact shapes, and seeded
//! determinism, driven through the library entry point the binary wraps.

use std::path::PathBuf;

use gclab::cli::{
    run, run_with_config, EigenCheckSection, EstimateSection, ProblemSection, RunConfig,
    SolverSection, SweepSection, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, EXIT_RANGE,
};

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gclab-clitest-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn base_config(command: &str) -> RunConfig {
    RunConfig {
        command: command.into(),
        seed: 0,
        problem: ProblemSection { manufactured: "cosh".into(), radius: 1.0, n_cells: 32 },
        solver: SolverSection::default(),
        estimate: EstimateSection::default(),
        levels: vec![],
        sweep: SweepSection::default(),
        eigen_check: EigenCheckSection::default(),
    }
}

#[test]
fn eigen_check_defaults_pass_and_are_seed_deterministic() {
    let dir = temp_dir("eigen");
    let mut cfg = base_config("eigen-check");
    cfg.eigen_check = EigenCheckSection {
        dims: vec![2, 3],
        matrices_per_dim: 10,
        ..Default::default()
    };
    cfg.seed = 42;
    assert_eq!(run_with_config(&cfg, &dir), EXIT_OK);
    let first = std::fs::read(dir.join("eigen_check_report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(report["max_first"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["passed"], serde_json::Value::Bool(true));

    assert_eq!(run_with_config(&cfg, &dir), EXIT_OK);
    let second = std::fs::read(dir.join("eigen_check_report.json")).unwrap();
    assert_eq!(first, second, "identical seed must give identical bytes");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eigen_check_with_disabled_gap_guard_fails() {
    let dir = temp_dir("eigen-gap0");
    let mut cfg = base_config("eigen-check");
    cfg.eigen_check = EigenCheckSection {
        dims: vec![2, 3],
        matrices_per_dim: 2,
        gap_min: 0.0,
        ..Default::default()
    };
    assert_eq!(run_with_config(&cfg, &dir), EXIT_CHECK_FAILED);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("eigen_check_report.json")).unwrap())
            .unwrap();
    assert!(report["degenerate_errors"].as_u64().unwrap() >= 1);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn solve_cosh_64_succeeds() {
    let dir = temp_dir("solve64");
    let mut cfg = base_config("solve");
    cfg.problem.n_cells = 64;
    assert_eq!(run_with_config(&cfg, &dir), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("solve_report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], serde_json::Value::Bool(true));
    assert!(report["residual_norm"].as_f64().unwrap() < 1e-10);
    // Log is one JSON object per accepted iteration.
    let log = std::fs::read_to_string(dir.join("solve_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["residual_norm"].is_number());
        assert!(rec["convexity_margin"].is_number());
        assert!(rec["halvings"].is_number());
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn estimate_aniso_with_measured_bounds_exits_zero() {
    let dir = temp_dir("estimate");
    let mut cfg = base_config("estimate");
    cfg.problem.manufactured = "aniso-quadratic".into();
    assert_eq!(run_with_config(&cfg, &dir), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("estimate_report.json")).unwrap()).unwrap();
    assert_eq!(report["m_source"], "measured-sigma");
    let bound = report["report"]["bound_at_origin"].as_f64().unwrap();
    let u_tt = report["report"]["u_tau_tau_origin"].as_f64().unwrap();
    assert!(bound >= u_tt, "bound {bound} below u_tautau {u_tt}");
    assert!(dir.join("phi.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn estimate_explicit_tiny_m_is_a_range_error() {
    let dir = temp_dir("estimate-range");
    let mut cfg = base_config("estimate");
    cfg.problem.manufactured = "aniso-quadratic".into();
    cfg.estimate.m = Some(1e-3);
    cfg.estimate.big_m = Some(2.0);
    assert_eq!(run_with_config(&cfg, &dir), EXIT_RANGE);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn convergence_table_has_second_order_rows() {
    let dir = temp_dir("convergence");
    let mut cfg = base_config("convergence");
    cfg.levels = vec![32, 64, 128];
    assert_eq!(run_with_config(&cfg, &dir), EXIT_OK);
    let csv = std::fs::read_to_string(dir.join("convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n_cells,h,sup_error,order,iterations,residual,failure"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let order: f64 = row[3].parse().unwrap();
        assert!((1.7..=2.3).contains(&order), "order {order}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_rows_keep_r_squared_relation() {
    let dir = temp_dir("sweep");
    let mut cfg = base_config("sweep");
    cfg.sweep = SweepSection {
        manufactured: vec!["cosh".into()],
        radii: vec![0.5, 1.0, 2.0],
        n_cells: vec![32],
        f_scales: vec![1.0],
    };
    cfg.sweep.n_cells = vec![16, 32];
    // R = 2 overflows the exponential weight over Sigma (exponent ~9.6e2),
    // so those rows are failure-marked and the command reports partial
    // failure.
    let code = run_with_config(&cfg, &dir);
    assert!(code == EXIT_OK || code == EXIT_CHECK_FAILED);
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    let mut successes = 0;
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let radius: f64 = cols[1].parse().unwrap();
        let r_squared: f64 = cols[7].parse().unwrap();
        assert_eq!(r_squared, radius * radius / 2.0);
        if cols[13].is_empty() {
            successes += 1;
        } else {
            assert!(cols[13].contains("overflow"), "unexpected failure: {row}");
        }
    }
    assert!(successes >= 2, "expected R = 0.5 and R = 1 rows to succeed");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn estimate_refinement_pair_is_stable() {
    // Same explicit bounds across the n = 64 / n = 128 pair: phi_max moves
    // by less than 5%.
    let spec = gclab::solver::ProblemSpec::from_manufactured(
        gclab::fieldcalc::Manufactured::Cosh,
        1.0,
        128,
    )
    .unwrap();
    let state = gclab::solver::newton_solve(&spec, &gclab::solver::SolverConfig::default()).unwrap();
    let (m, big_m) = gclab::estimator::measure_f_bounds_on_sigma(
        &state.u,
        gclab::fieldcalc::Manufactured::Cosh,
        1.0,
        1e-9,
    )
    .unwrap();

    let dir = temp_dir("pair");
    let mut phi_values = Vec::new();
    for n_cells in [64usize, 128] {
        let mut cfg = base_config("estimate");
        cfg.problem.n_cells = n_cells;
        cfg.estimate.m = Some(m);
        cfg.estimate.big_m = Some(big_m);
        let out = dir.join(format!("n{n_cells}"));
        assert_eq!(run(&cfg.command.clone(), &write_cfg(&dir, n_cells, &cfg), &out, None), EXIT_OK);
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("estimate_report.json")).unwrap())
                .unwrap();
        phi_values.push(report["report"]["phi_max"].as_f64().unwrap());
    }
    let variation = (phi_values[0] - phi_values[1]).abs() / phi_values[1];
    assert!(variation < 0.05, "phi_max varies by {:.2}%", 100.0 * variation);
    std::fs::remove_dir_all(&dir).ok();
}

fn write_cfg(dir: &PathBuf, tag: usize, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(format!("config-{tag}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn sweep_partial_failure_marks_rows_and_exits_one() {
    let dir = temp_dir("sweep-fail");
    let mut cfg = base_config("sweep");
    cfg.sweep = SweepSection {
        manufactured: vec!["cosh".into()],
        radii: vec![1.0],
        n_cells: vec![32],
        f_scales: vec![1.0],
    };
    cfg.solver.max_iterations = 1;
    assert_eq!(run_with_config(&cfg, &dir), EXIT_CHECK_FAILED);
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.contains("no convergence"), "row not marked: {row}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn binary_reports_usage_errors_with_config_exit() {
    // Through the real binary: missing config file is a configuration error.
    let exe = env!("CARGO_BIN_EXE_gclab");
    let status = std::process::Command::new(exe)
        .args(["solve", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
    assert!(!status.stderr.is_empty());
}

#[test]
fn binary_runs_eigen_check_end_to_end() {
    let exe = env!("CARGO_BIN_EXE_gclab");
    let dir = temp_dir("binary-eigen");
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        r#"{
  "command": "eigen-check",
  "seed": 5,
  "eigen_check": {
    "dims": [2, 3],
    "matrices_per_dim": 5,
    "gap_min": 0.5,
    "entry_range": 2.0,
    "step": 1e-5,
    "tol_first": 1e-6,
    "tol_second": 1e-4
  }
}
"#,
    )
    .unwrap();
    let status = std::process::Command::new(exe)
        .args([
            "eigen-check",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
    assert!(dir.join("eigen_check_report.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn seed_flag_overrides_config_seed() {
    let exe = env!("CARGO_BIN_EXE_gclab");
    let dir = temp_dir("seed-override");
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        r#"{ "command": "eigen-check", "seed": 1,
  "eigen_check": { "dims": [2], "matrices_per_dim": 3, "gap_min": 0.5,
    "entry_range": 2.0, "step": 1e-5, "tol_first": 1e-6, "tol_second": 1e-4 } }
"#,
    )
    .unwrap();
    for (run_dir, seed) in [("a", "7"), ("b", "7")] {
        let out = dir.join(run_dir);
        let status = std::process::Command::new(exe)
            .args([
                "eigen-check",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                seed,
            ])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(EXIT_OK));
    }
    let a = std::fs::read(dir.join("a/eigen_check_report.json")).unwrap();
    let b = std::fs::read(dir.join("b/eigen_check_report.json")).unwrap();
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["seed"], 7);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn quadratic_fit_guess_through_cli() {
    let dir = temp_dir("qfit");
    let mut cfg = base_config("solve");
    cfg.solver.initial_guess = gclab::cli::GuessKind::QuadraticFit;
    assert_eq!(run_with_config(&cfg, &dir), EXIT_OK);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_rejects_command_name_mismatch() {
    let dir = temp_dir("mismatch2");
    let config = dir.join("config.json");
    std::fs::write(&config, r#"{ "command": "sweep" }"#).unwrap();
    assert_eq!(run("solve", &config, &dir, None), EXIT_CONFIG);
    std::fs::remove_dir_all(&dir).ok();
}
