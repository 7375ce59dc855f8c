use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lawfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lawfit"))
        .args(args)
        .env("LAWFIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lawfit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn metric(table: &str, key: &str) -> f64 {
    table
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("{key} missing from {table}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_fit_eval_pipeline() {
    let dir = TempDir::new().unwrap();
    let (grid, law) = (path(&dir, "grid.csv"), path(&dir, "law.toml"));
    ok(&["synth", "--out", &grid]);
    let fit = ok(&[
        "fit",
        "--family",
        "farseer",
        "--method",
        "piecewise",
        "--grid",
        &grid,
        "--out",
        &law,
    ]);
    assert!(fit.starts_with("parameter,value\n"));
    let report = path(&dir, "eval.json");
    let eval = ok(&["eval", "--law", &law, "--grid", &grid, "--report", &report]);
    assert!(metric(&eval, "mean_rel_err") <= 1e-3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["held_out"].as_array().unwrap().len(), 198);
}

#[test]
fn predict_matches_in_memory_evaluation() {
    let dir = TempDir::new().unwrap();
    let law = path(&dir, "law.toml");
    let file = lawfit_core::io::LawFile::new(lawfit_core::Law::Farseer(lawfit_core::FarseerParams::reference()));
    lawfit_core::io::save_law(&file, &law).unwrap();
    let out = ok(&["predict", "--law", &law, "--n", "6.37e9", "--d", "9.05e10"]);
    let row = out.lines().nth(1).unwrap();
    let loss: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    let expected = lawfit_core::eval_farseer(&lawfit_core::FarseerParams::reference(), 6.37e9, 9.05e10).unwrap();
    assert_eq!(loss.to_bits(), expected.to_bits());
}

#[test]
fn optimal_symmetric_law_has_unit_ratio() {
    let dir = TempDir::new().unwrap();
    let law = path(&dir, "law.toml");
    std::fs::write(
        &law,
        "version = 1\nfamily = \"chinchilla\"\n[params]\nA = 400.0\nalpha = 0.3\nB = 400.0\nbeta = 0.3\nE = 1.7\n",
    )
    .unwrap();
    let out = ok(&["optimal", "--law", &law, "--c-min", "1e20", "--c-max", "1e24"]);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "c,n_star,d_star,ratio,loss,at_boundary");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let ratio: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!((ratio - 1.0).abs() < 1e-5, "{row}");
    }
}

#[test]
fn optimal_compares_annotations() {
    let dir = TempDir::new().unwrap();
    let law = path(&dir, "law.toml");
    let file = lawfit_core::io::LawFile::new(lawfit_core::Law::Farseer(lawfit_core::FarseerParams::reference()));
    lawfit_core::io::save_law(&file, &law).unwrap();
    let notes = path(&dir, "configs.csv");
    std::fs::write(&notes, "label,n,d\nsmall,1e9,2e10\n").unwrap();
    let out = ok(&[
        "optimal",
        "--law",
        &law,
        "--c-min",
        "1e20",
        "--c-max",
        "1e21",
        "--annotations",
        &notes,
    ]);
    let (_, annotated) = out.split_once("\n\n").expect("second table");
    let mut lines = annotated.lines();
    assert_eq!(lines.next().unwrap(), "label,n,d,c,loss,n_star,d_star,loss_at_opt");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "small");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.2e20);
    assert!(row[7].parse::<f64>().unwrap() <= row[4].parse::<f64>().unwrap());
}

#[test]
fn nonlinear_fit_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let grid = path(&dir, "grid.csv");
    ok(&[
        "synth", "--out", &grid, "--sigma", "1e-3", "--seed", "4", "--n-max", "1.6e9", "--d-max", "3.2e10",
    ]);
    let (a, b) = (path(&dir, "a.toml"), path(&dir, "b.toml"));
    let args = |out: &str| {
        vec![
            "fit".to_string(),
            "--family".into(),
            "chinchilla".into(),
            "--method".into(),
            "nonlinear".into(),
            "--grid".into(),
            grid.clone(),
            "--out".into(),
            out.to_string(),
            "--starts".into(),
            "8".into(),
            "--seed".into(),
            "3".into(),
        ]
    };
    let run = |out: &str| {
        let args = args(out);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(run(&a), run(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.contains("method = \"nonlinear\""));
    assert!(text.contains("grid_digest = \"sha256:"));
}

#[test]
fn robustness_and_diagnose_emit_tables() {
    let dir = TempDir::new().unwrap();
    let grid = path(&dir, "grid.csv");
    ok(&["synth", "--out", &grid]);
    let out = ok(&[
        "robustness",
        "--grid",
        &grid,
        "--held-out-n",
        "6432000000",
        "--caps",
        "8.04e8,1.608e9,3.216e9",
    ]);
    assert!(out.starts_with("cap,mean_rel_err,max_rel_err,held_out_points\n"));
    assert_eq!(out.lines().count(), 4, "{out}");

    let series = dir.path().join("series");
    let out = ok(&["diagnose", "--grid", &grid, "--out-dir", series.to_str().unwrap()]);
    assert!(out.contains("data_diff_vs_d,"));
    for f in [
        "data_diff_vs_d_differences.csv",
        "model_diff_vs_n_fits.csv",
        "residual_o.csv",
        "residual_g.csv",
    ] {
        assert!(Path::new(&series.join(f)).exists(), "{f}");
    }
}

#[test]
fn compare_reports_constant_delta_for_scaled_law() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.toml"), path(&dir, "b.toml"));
    let law = |e: f64| {
        format!("version = 1\nfamily = \"chinchilla\"\n[params]\nA = 0.0\nalpha = 0.3\nB = 0.0\nbeta = 0.3\nE = {e}\n")
    };
    std::fs::write(&a, law(1.0)).unwrap();
    std::fs::write(&b, law(1.02)).unwrap();
    let out = ok(&["compare", "--law-a", &a, "--law-b", &b, "--resolution", "4"]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 16);
    for r in rows {
        let v: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!((v + 0.0196078431372549).abs() < 1e-12);
    }
}

#[test]
fn exit_codes() {
    assert_eq!(lawfit(&[]).status.code(), Some(1));
    assert_eq!(lawfit(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(lawfit(&["--help"]).status.code(), Some(0));

    let dir = TempDir::new().unwrap();
    let grid = path(&dir, "grid.csv");
    std::fs::write(&grid, "n,d,loss\n1e8,1e9,3.2\n1e8,1e9,3.1\n").unwrap();
    let out = lawfit(&["fit", "--grid", &grid, "--out", &path(&dir, "law.toml")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = lawfit(&[
        "fit",
        "--grid",
        &grid,
        "--family",
        "chinchilla",
        "--out",
        &path(&dir, "law.toml"),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let missing = lawfit(&["eval", "--law", &path(&dir, "none.toml"), "--grid", &grid]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_lawfit"))
        .args(["synth"])
        .env("LAWFIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let a = ok(&["synth", "--sigma", "1e-3", "--seed", "9"]);
    let b = ok(&["synth", "--sigma", "1e-3", "--seed", "9"]);
    assert_eq!(a, b);
    let grid = lawfit_core::io::parse_grid(&a, std::f64::consts::SQRT_2).unwrap();
    assert_eq!(lawfit_core::io::format_grid(&grid), a);
    assert_eq!(grid.len(), 198);
}
