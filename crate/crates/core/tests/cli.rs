use std::fs;
use std::path::Path;
use std::process::Command;

use ntk_limits::cli::*;
use ntk_limits::dcnn::Parametrization;
use ntk_limits::nonlin::{NonlinearitySpec, Normalization, Shape};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ntk-limits"))
}

fn relu(normalization: Normalization) -> NonlinearitySpec {
    NonlinearitySpec {
        shape: Shape::Relu,
        normalization,
        quadrature: Default::default(),
    }
}

fn num(c: &Cell) -> f64 {
    match c {
        Cell::Num(x) => *x,
        other => panic!("not a number: {other:?}"),
    }
}

fn text(c: &Cell) -> &str {
    match c {
        Cell::Text(s) => s,
        other => panic!("not text: {other:?}"),
    }
}

fn regime(sigma: NonlinearitySpec, beta: f64) -> (String, f64) {
    let cfg = ExperimentConfig::new(Experiment::Regime(RegimeParams {
        sigma,
        beta,
        beta_grid: vec![0.0, 0.5, 1.0],
    }));
    let out = run(&cfg).unwrap();
    let row = &out.table("regime").unwrap().rows[0];
    (text(&row[2]).to_string(), num(&row[1]))
}

#[test]
fn regime_examples() {
    let (reg, r) = regime(relu(Normalization::Standardized), 0.1);
    assert_eq!(reg, "order");
    assert!((r - 0.99).abs() < 1e-12);
    let (reg, _) = regime(relu(Normalization::Normalized), 0.1);
    assert_eq!(reg, "chaos");
    let (reg, r) = regime(relu(Normalization::Standardized), 1.0);
    assert_eq!(reg, "order");
    assert_eq!(r, 0.0);
}

#[test]
fn fc_profile_curves() {
    let cfg = ExperimentConfig::new(Experiment::FcProfile(FcProfileParams {
        batch_norm: Some(BnCurveParams {
            width: 64,
            batch: 16,
            ..Default::default()
        }),
        ..Default::default()
    }));
    let out = run(&cfg).unwrap();
    let col = |name: &str| -> Vec<f64> {
        let t = out.table(name).unwrap();
        let k = t.columns.iter().position(|c| c == "ntk_normalized").unwrap();
        t.rows.iter().map(|r| num(&r[k])).collect()
    };
    let at_zero = |v: &[f64]| v[v.len() / 2];
    let b05 = col("fc_profile_relu-b0.5");
    let b01 = col("fc_profile_relu-b0.1");
    let norm = col("fc_profile_normalized-relu");
    assert!(b05.iter().all(|x| *x >= 0.2));
    assert!(at_zero(&norm) < at_zero(&b01));
    for curve in [&b05, &b01, &norm, &col("fc_profile_batch-norm")] {
        assert!((curve.last().unwrap() - 1.0).abs() < 1e-12);
    }
    let t = out.table("fc_profile_relu-b0.5").unwrap();
    assert_eq!(t.columns.len(), 1 + 6 + 2);
    assert_eq!(t.columns[1], "sigma_1");
    assert_eq!(t.rows.len(), 201);
    assert_eq!(out.table("fc_profile_curves").unwrap().rows.len(), 3 * 201 + 16);
}

#[test]
fn bn_check_reports_each_identity() {
    let cfg = ExperimentConfig::new(Experiment::BnCheck(BnCheckParams {
        seeds: 3,
        ..Default::default()
    }));
    let out = run(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert!(out.summary[0].contains("as literally stated: FAIL"));
    assert!(out.summary[1].contains("N·β²: pass"));
    assert!(out.summary[2].contains("= β²: pass"));
    let t = out.table("bn_check").unwrap();
    assert_eq!(t.rows.len(), 6);
    for row in t.rows.iter().filter(|r| r[1] == Cell::Bool(true)) {
        assert!((num(&row[4]) - 0.01).abs() < 1e-8);
        assert!((num(&row[2]) - 0.08).abs() < 1e-8);
    }
}

#[test]
fn graph_based_border_is_flat() {
    let cfg = ExperimentConfig::new(Experiment::Border(BorderParams {
        parametrization: Parametrization::GraphBased,
        ..Default::default()
    }));
    let out = run(&cfg).unwrap();
    let t = out.table("border").unwrap();
    let first = num(&t.rows[0][2]);
    assert!(t.rows.iter().all(|r| (num(&r[2]) - first).abs() < 1e-12));
    assert!(t.rows.iter().all(|r| text(&r[3]) == "graph-based"));

    let standard = run(&ExperimentConfig::new(Experiment::Border(Default::default()))).unwrap();
    assert!(standard.failures.is_empty());
    assert!(standard.table("border_closed_form").is_some());
}

#[test]
fn spectrum_preset_emits_both_spectra() {
    let cfg = ExperimentConfig::new(Experiment::Spectrum(SpectrumParams {
        seeds: 2,
        ..Default::default()
    }));
    let out = run(&cfg).unwrap();
    assert!(out.failures.is_empty());
    let eig = out.table("spectrum_eigenvalues").unwrap();
    assert_eq!(eig.rows.len(), 2 * 2 * 64);
    let buckets = out.table("spectrum_buckets").unwrap();
    assert_eq!(buckets.columns.len(), 3 + 4);
    assert_eq!(buckets.rows.len(), 2 * 2 * 4);
    let (_, doc) = &out.documents[0];
    assert_eq!(doc.as_array().unwrap().len(), 4);
    assert_eq!(doc[0]["index"].as_array().unwrap().len(), 64);
}

#[test]
fn csv_cells_keep_seventeen_digits() {
    let mut t = Table::new("t", ["a", "b", "c"]);
    let x = 0.1 + 0.2;
    t.push(vec![Cell::Num(x), Cell::Text("x, \"y\"".into()), Cell::Empty]);
    let csv = t.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("a,b,c"));
    let row = lines.next().unwrap();
    assert_eq!(row, "3.0000000000000004e-1,\"x, \"\"y\"\"\",");
    let back: f64 = row.split(',').next().unwrap().parse().unwrap();
    assert_eq!(back.to_bits(), x.to_bits());
}

#[test]
fn config_parsing() {
    let cfg = ExperimentConfig::from_json(r#"{"experiment": {"command": "dcnn", "beta": 0.8}}"#).unwrap();
    match &cfg.experiment {
        Experiment::Dcnn(p) => {
            assert_eq!(p.beta, 0.8);
            assert_eq!(p.spec.depth, 3);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(cfg.format, Format::Csv);
    let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(again, cfg);
    assert!(ExperimentConfig::from_json(r#"{"experiment": {"command": "dcnn", "beat": 0.8}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"experiment": {"command": "nope"}}"#).is_err());
    let bad = ExperimentConfig::from_json(r#"{"experiment": {"command": "regime", "beta": 1.5}}"#).unwrap();
    assert!(run(&bad).is_err());
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn emitted_configs_rerun_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("fw.json");
    fs::write(
        &cfg,
        r#"{"seed": 7, "experiment": {"command": "finwidth", "widths": [16, 32], "seeds": 3, "rhos": [0.0, 0.5]}}"#,
    )
    .unwrap();
    let first = tmp.path().join("a");
    let st = bin()
        .args(["finwidth", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&first)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let second = tmp.path().join("b");
    let st = bin()
        .args(["finwidth", "--quiet", "--jobs", "1", "--config"])
        .arg(first.join("config.json"))
        .arg("--out")
        .arg(&second)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let files = csv_files(&first);
    assert_eq!(files.len(), 3);
    assert_eq!(files, csv_files(&second));
    for f in &files {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("finwidth_mc.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 7);
    assert_eq!(meta["tool"], "ntk-limits");
    assert!(meta["prng"].as_str().unwrap().contains("chacha8"));
    assert!(meta["kink_convention"].is_string());
}

#[test]
fn flags_override_config_and_json_format() {
    let tmp = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["dcnn", "-q", "--format", "json", "--out"])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("checkerboard.json")).unwrap()).unwrap();
    assert_eq!(doc["columns"][0], "v");
    assert_eq!(doc["rows"].as_array().unwrap().len(), 4);
    assert_eq!(doc["meta"]["config"]["format"], "json");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = tmp.path().join(name);
        fs::write(&p, body).unwrap();
        p
    };
    let code = |args: &[&str], cfg: Option<&Path>| {
        let mut c = bin();
        c.args(args).arg("-q").arg("--out").arg(tmp.path().join("o"));
        if let Some(p) = cfg {
            c.arg("--config").arg(p);
        }
        c.output().unwrap().status.code()
    };
    assert_eq!(code(&["regime"], None), Some(0));
    let garbled = write("g.json", "{ not json");
    assert_eq!(code(&["regime"], Some(&garbled)), Some(2));
    let range = write("r.json", r#"{"experiment": {"command": "regime", "beta": -0.1}}"#);
    assert_eq!(code(&["regime"], Some(&range)), Some(2));
    assert_eq!(code(&["dual"], Some(&range)), Some(2));
    // ReLU dead channels leave a batch-norm group without spread.
    let dead = write(
        "d.json",
        r#"{"experiment": {"command": "bn-check", "sigma": {"kind": "relu", "normalization": "standardized"}, "seeds": 3}}"#,
    );
    assert_eq!(code(&["bn-check"], Some(&dead)), Some(3));
    // The (v+1)r^v lower rate does not hold for ReLU at β = 0.8 beyond shallow depths.
    let bound = write(
        "b.json",
        r#"{"experiment": {"command": "dcnn", "beta": 0.8, "bounds": "order"}}"#,
    );
    assert_eq!(code(&["dcnn"], Some(&bound)), Some(4));
    let ok = write(
        "o.json",
        r#"{"experiment": {"command": "dcnn", "beta": 0.1, "bounds": "order"}}"#,
    );
    assert_eq!(code(&["dcnn"], Some(&ok)), Some(0));
}
