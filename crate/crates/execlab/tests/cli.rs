//! End-to-end tests of the command-line front end: exit codes, artifact
//! reproducibility, the degenerate-factor fast path, and worked cost values.

use std::path::Path;
use std::process::Command;

use execlab::coeffs::{chi_grid_for, solve_prelimit_pde};
use execlab::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_execlab"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const DET_CONFIG: &str = r#"
[model]
gamma = 3.0
T = 1.0
x0 = 1.0
penalty = "inf"

[factor]
family = "constant"
rho = 1.0
lambda = 1.0

[numerics]
time_steps = 512
refine_levels = 8

[run]
etas = [1e-1, 1e-2]
seeds = [1, 2]
"#;

/// Read a CSV written by the binary: returns (meta lines, header, columns).
fn read_csv(path: &Path) -> (Vec<String>, Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut meta = Vec::new();
    let mut header = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if let Some(stripped) = line.strip_prefix("# ") {
            meta.push(stripped.to_string());
        } else if header.is_empty() {
            header = line.split(',').map(|s| s.to_string()).collect();
            cols = vec![Vec::new(); header.len()];
        } else {
            for (k, field) in line.split(',').enumerate() {
                cols[k].push(field.parse().unwrap());
            }
        }
    }
    (meta, header, cols)
}

#[test]
fn missing_config_is_a_config_fault() {
    let out = bin().arg("solve-coefficients").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn penalty_below_the_floor_exits_3_naming_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DET_CONFIG.replace("penalty = \"inf\"", "penalty = 2.0"));
    let out = bin().arg("solve-coefficients").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("N_min"), "message must name the floor: {err}");
}

#[test]
fn malformed_seed_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DET_CONFIG);
    let out = bin()
        .args(["simulate", "--seeds", "9..3", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DET_CONFIG);
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    for out_dir in [&a, &b] {
        let out = bin()
            .arg("simulate")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n.starts_with("state_eta")));
    assert!(names.contains(&"invariants.json".to_string()));
    for name in &names {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "artifact {name} differs between reruns");
    }
}

#[test]
fn every_artifact_embeds_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), DET_CONFIG);
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let expected = format!("config_hash={}", cfg.config_hash());
    for entry in std::fs::read_dir(&out_dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            text.contains(&expected) || text.contains(&cfg.config_hash()),
            "{} lacks the config hash",
            path.display()
        );
    }
}

#[test]
fn degenerate_factor_fast_path_matches_the_spatial_solver() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), DET_CONFIG);
    let out_dir = dir.path().join("out");
    let out = bin()
        .arg("solve-coefficients")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let grid = cfg.grid();
    let factor = cfg.factor();
    let params = cfg.params_for(1e-2, execlab::model::Penalty::Strict);
    let chi = chi_grid_for(&factor, 1.0, 9, 6.0);
    let fields =
        solve_prelimit_pde(&factor, &params, &chi, &grid, &cfg.solver_options()).unwrap();

    let (_, header, cols) = read_csv(&out_dir.join("fields_eta0.01_Ninf.csv"));
    assert_eq!(header, vec!["t", "chi", "b", "d", "e"]);
    let chi0 = factor.chi0;
    let mut worst = 0.0f64;
    for (i, &t) in cols[0].iter().enumerate() {
        worst = worst.max((cols[2][i] - fields.b.eval(t, chi0)).abs());
        worst = worst.max((cols[4][i] - fields.e.eval(t, chi0)).abs());
    }
    assert!(worst <= 1e-5, "fast path vs spatial solver differ by {worst:.2e}");
}

#[test]
fn finite_penalty_sweep_leaves_less_terminal_inventory_as_n_grows() {
    let dir = tempfile::tempdir().unwrap();
    let body = DET_CONFIG
        .replace("etas = [1e-1, 1e-2]", "etas = [1e-2]")
        .replace("seeds = [1, 2]", "seeds = [1]\nn_values = [6.0, 20.0, \"inf\"]");
    let cfg = write_config(dir.path(), &body);
    let out_dir = dir.path().join("out");
    let out = bin()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("invariants.json")).unwrap())
            .unwrap();
    let gaps: Vec<f64> = doc["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["terminal_inventory"].as_f64().unwrap())
        .collect();
    assert_eq!(gaps.len(), 3);
    assert!(
        gaps[0] > gaps[1] && gaps[1] > gaps[2],
        "terminal inventory not decreasing in the penalty: {gaps:?}"
    );
}

#[test]
fn study_on_a_deterministic_config_reports_decreasing_distances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DET_CONFIG.replace("seeds = [1, 2]", "seeds = [1]"));
    let out_dir = dir.path().join("out");
    let out = bin()
        .arg("study")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let (_, header, cols) = read_csv(&out_dir.join("study.csv"));
    let h = header.iter().position(|c| c == "hausdorff").unwrap();
    assert!(cols[h][1] < cols[h][0], "hausdorff column not decreasing: {:?}", cols[h]);
}

#[test]
fn immediate_block_cost_matches_the_worked_value() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[model]
gamma = 1.0
T = 1.0
x0 = 1.0
penalty = "inf"

[factor]
family = "constant"
rho = 1.0
lambda = 0.0

[numerics]
time_steps = 4096
refine_levels = 8

[run]
etas = [1e-2]
seeds = [1]
"#;
    let cfg = write_config(dir.path(), body);
    let strategy = dir.path().join("block.json");
    std::fs::write(
        &strategy,
        r#"{"j_plus":[],"j_minus":[[0.0,1.0]],"t":[0.0,0.5,1.0],"v":[0.0,0.0,0.0],"liquidating":true}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .arg("cost")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .arg(&strategy)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("cost.json")).unwrap()).unwrap();
    let total = doc["base"]["total"].as_f64().unwrap();
    assert!(
        (total - 0.5).abs() <= 1e-6,
        "immediate block cost {total} differs from the worked value 0.5"
    );
}
