use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_popinterp");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn popinterp(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = popinterp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file below `dir`.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn fit_toy(out: &Path, seed: &str) {
    ok(&[
        "fit-tract",
        "--estimates",
        s(&fixture("toy.csv")),
        "--prior-centers",
        s(&fixture("toy_prior.csv")),
        "--out",
        s(out),
        "--seed",
        seed,
        "--chains",
        "2",
        "--warmup",
        "200",
        "--draws",
        "200",
    ]);
}

#[test]
fn toy_fit_writes_draws_diagnostics_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    fit_toy(&out, "11");
    for geo in ["t1", "t2"] {
        let g = out.join(geo);
        let draws = std::fs::read_to_string(g.join("draws.csv")).unwrap();
        let mut lines = draws.lines();
        assert_eq!(lines.next().unwrap(), "chain,draw,theta_0,theta_1,theta_2");
        assert_eq!(lines.count(), 400);
        let diag = json(&g.join("diagnostics.json"));
        assert!(diag["max_rhat"].as_f64().unwrap() < 1.1);
        let features = std::fs::read_to_string(g.join("features.csv")).unwrap();
        assert!(features.starts_with("feature,mean,median,lower,upper,n_excluded\n"));
        for label in ["p5", "p50", "p95", "mean", "gini"] {
            let row = features.lines().find(|l| l.starts_with(&format!("{label},"))).unwrap();
            let v: Vec<f64> = row.split(',').skip(1).take(4).map(|x| x.parse().unwrap()).collect();
            assert!(v[2] <= v[1] && v[1] <= v[3], "{label}: {row}");
        }
    }
}

#[test]
fn same_seed_is_bitwise_identical_and_rerun_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c, d) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
        dir.path().join("d"),
    );
    fit_toy(&a, "5");
    fit_toy(&b, "5");
    fit_toy(&d, "6");
    assert_eq!(tree(&a), tree(&b));
    ok(&["rerun", "--manifest", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert_eq!(tree(&a), tree(&c));
    assert_ne!(
        std::fs::read(a.join("t1/draws.csv")).unwrap(),
        std::fs::read(d.join("t1/draws.csv")).unwrap()
    );
}

#[test]
fn rerun_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    std::fs::copy(fixture("toy.csv"), &input).unwrap();
    let out = dir.path().join("prln");
    ok(&["prln", "--estimates", s(&input), "--out", s(&out)]);
    let mut text = std::fs::read_to_string(&input).unwrap();
    text.push_str("t3,bin,0,,,1,,0.1,\n");
    std::fs::write(&input, text).unwrap();
    let again = popinterp(&["rerun", "--manifest", s(&out), "--out", s(&dir.path().join("x"))]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("changed"));
}

#[test]
fn published_percent_bins_normalize_to_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prln");
    ok(&["prln", "--estimates", s(&fixture("table_a1.csv")), "--out", s(&out)]);
    let fits = json(&out.join("fits.json"));
    let probs: Vec<f64> = fits[0]["fit"]["probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let pct = [9.8, 9.3, 25.8, 13.7, 20.4, 14.3, 4.0, 2.8, 0.0, 0.0];
    let total: f64 = pct.iter().sum();
    assert_eq!(probs.len(), 10);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (p, v) in probs.iter().zip(pct) {
        assert!((p - v / total).abs() < 1e-12, "{p} vs {}", v / total);
    }

    let ingested = dir.path().join("ingest");
    ok(&["ingest", "--estimates", s(&fixture("table_a1.csv")), "--out", s(&ingested)]);
    let canon = std::fs::read_to_string(ingested.join("estimates.csv")).unwrap();
    assert!(canon.contains(",0.098,"), "{canon}");
}

#[test]
fn prln_recovers_exact_pareto_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prln");
    ok(&["prln", "--estimates", s(&fixture("pareto.csv")), "--out", s(&out)]);
    let fits = json(&out.join("fits.json"));
    let alphas = fits[0]["fit"]["alphas"].as_array().unwrap();
    assert!(alphas[0].is_null());
    for a in &alphas[1..] {
        assert!((a.as_f64().unwrap() - 2.5).abs() < 1e-8, "{a}");
    }
    assert!(fits[0]["fit"]["fallbacks"].as_array().unwrap().is_empty());
}

#[test]
fn held_out_rows_stay_out_of_the_likelihood() {
    let dir = tempfile::tempdir().unwrap();
    let fit = dir.path().join("fit");
    fit_toy(&fit, "2");
    let m = json(&fit.join("manifest.json"));
    for g in m["summary"]["geos"].as_array().unwrap() {
        assert_eq!(g["n_likelihood_terms"], 5);
        assert_eq!(g["n_held_out"], 2);
    }
    let ev = dir.path().join("ev");
    ok(&[
        "evaluate",
        "--fit",
        s(&fit),
        "--estimates",
        s(&fixture("toy.csv")),
        "--out",
        s(&ev),
        "--set",
        "features=[\"p20\", \"p80\"]",
    ]);
    let insample = std::fs::read_to_string(ev.join("waic_insample.csv")).unwrap();
    assert!(!insample.contains("p20") && !insample.contains("p80"));
    assert!(insample.lines().any(|l| l.starts_with("median,")));
    let heldout = std::fs::read_to_string(ev.join("waic_heldout.csv")).unwrap();
    let types: Vec<&str> = heldout.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(types, ["p20", "p80"]);
}

#[test]
fn evaluate_refuses_a_feature_nobody_has() {
    let dir = tempfile::tempdir().unwrap();
    let fit = dir.path().join("fit");
    fit_toy(&fit, "3");
    let out = popinterp(&[
        "evaluate",
        "--fit",
        s(&fit),
        "--estimates",
        s(&fixture("toy.csv")),
        "--out",
        s(&dir.path().join("ev")),
        "--set",
        "features=[\"p99\"]",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'p99'"));
}

#[test]
fn non_contiguous_bins_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = popinterp(&[
        "prln",
        "--estimates",
        s(&fixture("gap.csv")),
        "--geo-id",
        "bad",
        "--out",
        s(&dir.path().join("a")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bad"));
    ok(&[
        "prln",
        "--estimates",
        s(&fixture("gap.csv")),
        "--geo-id",
        "ok",
        "--out",
        s(&dir.path().join("b")),
    ]);
    let ingest = popinterp(&["ingest", "--estimates", s(&fixture("gap.csv")), "--out", s(&dir.path().join("c"))]);
    assert_eq!(ingest.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = popinterp(&[
        "prln",
        "--estimates",
        s(&fixture("toy.csv")),
        "--out",
        s(&dir.path().join("a")),
        "--set",
        "use_medain=false",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("use_medain"));
}

#[test]
fn default_configs_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["default-config", "prln"]);
    let path = dir.path().join("prln.toml");
    let text = String::from_utf8(out.stdout)
        .unwrap()
        .replace("estimates = \"\"", &format!("estimates = {:?}", s(&fixture("toy.csv"))));
    std::fs::write(&path, text).unwrap();
    ok(&["prln", "--config", s(&path), "--out", s(&dir.path().join("a"))]);
    assert_eq!(popinterp(&["default-config", "nope"]).status.code(), Some(2));
}

#[test]
fn nested_fit_writes_joint_draws_and_per_tract_features() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nest");
    ok(&[
        "fit-nested",
        "--estimates",
        s(&fixture("toy.csv")),
        "--pums",
        s(&fixture("toy_pums.csv")),
        "--prior-centers",
        s(&fixture("toy_prior.csv")),
        "--out",
        s(&out),
        "--seed",
        "4",
        "--chains",
        "2",
        "--warmup",
        "200",
        "--draws",
        "200",
    ]);
    assert!(out.join("draws.csv").is_file());
    assert!(out.join("diagnostics.json").is_file());
    for geo in ["t1", "t2"] {
        assert!(out.join(geo).join("features.csv").is_file());
    }
    let pred = dir.path().join("pred");
    ok(&["predict", "--fit", s(&out), "--out", s(&pred), "--seed", "1", "--population", "300"]);
    assert!(pred.join("t2/features.csv").is_file());
}

#[test]
fn simulate_emits_metric_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&[
        "simulate",
        "--out",
        s(&out),
        "--reps",
        "2",
        "--tracts",
        "2",
        "--chains",
        "2",
        "--warmup",
        "150",
        "--draws",
        "150",
        "--set",
        "reference_households=2000",
        "--set",
        "n_replicates=8",
        "--set",
        "draws_used=100",
    ]);
    let table = std::fs::read_to_string(out.join("metrics_pct_diff.csv")).unwrap();
    let mut lines = table.lines();
    let header = lines.next().unwrap();
    let percentiles: Vec<String> = (1..=19).map(|k| format!("p{}", 5 * k)).collect();
    assert_eq!(header, format!("metric,estimator,{},gini", percentiles.join(",")));
    let keys: Vec<(String, String)> = lines
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().into(), f.next().unwrap().into())
        })
        .collect();
    let mut expected = Vec::new();
    for m in ["MAD", "MAPE", "RMSE", "RMSPE"] {
        for e in ["P. Mean", "P. Median", "PRLN"] {
            expected.push((m.to_string(), e.to_string()));
        }
    }
    assert_eq!(keys, expected);
    let coverage = std::fs::read_to_string(out.join("coverage.csv")).unwrap();
    assert_eq!(coverage.lines().next().unwrap(), "feature,population,prln,n");
}
