//! End-to-end tests of the command-line surface. JSON outputs are compared
//! against files in `tests/golden`; set `BLOCKVAR_BLESS=1` to rewrite them.

use std::path::{Path, PathBuf};

use blockvar::cli::run;
use blockvar::estimators::EstimatorId;
use blockvar::oracle::{bias_finite, ignore_blocking_bias_finite, true_var_finite, Design, Mechanism};
use blockvar::simulate::{generate_dgp, SimConfig};
use serde_json::Value;

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn fixture(name: &str) -> String {
    manifest("tests/fixtures").join(name).to_string_lossy().into_owned()
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn blockvar(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("blockvar").chain(args.iter().copied()), &mut out, &mut err);
    Run { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn golden(name: &str, actual: &str) {
    let path = manifest("tests/golden").join(name);
    if std::env::var_os("BLOCKVAR_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "output differs from {name}");
}

fn json(r: &Run) -> Value {
    serde_json::from_str(&r.stdout).unwrap_or_else(|e| panic!("not JSON ({e}): {}", r.stdout))
}

#[test]
fn analyze_two_pairs_hand_arithmetic() {
    let r = blockvar(&["analyze", "--input", &fixture("two_pairs.csv"), "--estimator", "sb-equal"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json(&r);
    assert_eq!(v["estimate"], 2.0);
    assert_eq!(v["per_estimator"]["sb-equal"]["variance"], 1.0);
    assert_eq!(v["per_estimator"]["sb-equal"]["se"], 1.0);
    golden("analyze_two_pairs.json", &r.stdout);
}

#[test]
fn analyze_reports_inapplicable_estimators_per_entry() {
    let r = blockvar(&["analyze", "--input", &fixture("all_big.csv"), "--estimator", "sb-m,hybrid-p", "--ci", "0.95"]);
    assert_eq!(r.code, 0);
    let v = json(&r);
    let err = v["per_estimator"]["sb-m"]["error"].as_str().unwrap();
    assert!(err.contains("size group too small"), "{err}");
    let hp = &v["per_estimator"]["hybrid-p"];
    let (est, se) = (hp["estimate"].as_f64().unwrap(), hp["se"].as_f64().unwrap());
    let ci = hp["ci"].as_array().unwrap();
    let half = 1.959963984540054 * se;
    assert!((ci[0].as_f64().unwrap() - (est - half)).abs() < 1e-9);
    assert!((ci[1].as_f64().unwrap() - (est + half)).abs() < 1e-9);
    golden("analyze_all_big.json", &r.stdout);
}

#[test]
fn analyze_keeps_requested_order_and_block_table() {
    let r = blockvar(&["analyze", "--input", &fixture("hybrid.csv"), "--estimator", "hybrid-p,big,plugin,cr"]);
    assert_eq!(r.code, 0);
    let keys: Vec<&str> = r
        .stdout
        .lines()
        .filter(|l| l.starts_with("    \"") && l.ends_with('{'))
        .map(|l| l.trim().split('"').nth(1).unwrap())
        .collect();
    assert_eq!(keys, ["hybrid-p", "big", "plugin", "cr"]);
    assert_eq!(json(&r)["block_table"].as_array().unwrap().len(), 6);
    golden("analyze_hybrid.json", &r.stdout);
}

#[test]
fn analyze_text_format() {
    let r = blockvar(&["analyze", "--input", &fixture("hybrid.csv"), "--estimator", "hybrid-m,hybrid-p", "--format", "text"]);
    assert_eq!(r.code, 0);
    assert!(r.stdout.starts_with("blocked estimate: 2.88888888889\n"), "{}", r.stdout);
    assert!(r.stdout.contains("hybrid-m   error: size group too small: 3"));
}

#[test]
fn analyze_exit_codes() {
    let malformed = blockvar(&["analyze", "--input", &fixture("malformed.csv"), "--estimator", "big"]);
    assert_eq!(malformed.code, 2);
    assert!(malformed.stderr.contains("line 3"), "{}", malformed.stderr);

    let all_failed = blockvar(&["analyze", "--input", &fixture("two_pairs.csv"), "--estimator", "big,srs"]);
    assert_eq!(all_failed.code, 3);
    assert!(json(&all_failed)["per_estimator"]["big"]["error"].is_string());

    let missing = blockvar(&["analyze", "--input", "/nonexistent/x.csv", "--estimator", "big"]);
    assert_eq!(missing.code, 1);

    let unknown = blockvar(&["analyze", "--input", &fixture("two_pairs.csv"), "--estimator", "bigg"]);
    assert_eq!(unknown.code, 2);
    assert!(unknown.stderr.contains("unknown estimator"));

    let bad_ci = blockvar(&["analyze", "--input", &fixture("two_pairs.csv"), "--estimator", "big", "--ci", "1.5"]);
    assert_eq!(bad_ci.code, 2);
}

#[test]
fn compare_finite_goldens() {
    let r = blockvar(&["compare", "--framework", "finite", "--science", &fixture("science.csv"), "--p", "0.5"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json(&r);
    let d = v["difference"].as_f64().unwrap();
    assert!((d - (v["var_cr"].as_f64().unwrap() - v["var_blk"].as_f64().unwrap())).abs() < 1e-10);
    golden("compare_finite.json", &r.stdout);

    let via_design = blockvar(&[
        "compare", "--framework", "finite", "--science", &fixture("science.csv"), "--design", &fixture("design.csv"),
    ]);
    assert_eq!(via_design.stdout, r.stdout);

    let single = blockvar(&["compare", "--framework", "finite", "--science", &fixture("science_k1.csv"), "--p", "0.5"]);
    assert_eq!(json(&single)["difference"], 0.0);
    golden("compare_finite_k1.json", &single.stdout);
}

#[test]
fn compare_m1_goldens() {
    let r = blockvar(&["compare", "--framework", "m1", "--strata", &fixture("strata.json")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json(&r);
    assert_eq!(v["difference_nonnegative"], true);
    assert_eq!(v["decomposition"]["proportion_penalty"], 0.0);
    golden("compare_m1.json", &r.stdout);

    let unequal = blockvar(&["compare", "--framework", "m1", "--strata", &fixture("strata.json"), "--p-cr", "0.4"]);
    let u = json(&unequal);
    assert!(u["decomposition"]["proportion_penalty"].as_f64().unwrap() > 0.0);
    golden("compare_m1_pcr.json", &unequal.stdout);
}

#[test]
fn compare_m1_equal_means_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.json");
    std::fs::write(
        &path,
        r#"[{"label":"a","weight":0.5,"mu_t":2,"mu_c":1,"var_t":1,"var_c":2,"var_tc":1,"n_k":6,"n_tk":3},
            {"label":"b","weight":0.5,"mu_t":2,"mu_c":1,"var_t":3,"var_c":1,"var_tc":2,"n_k":6,"n_tk":3}]"#,
    )
    .unwrap();
    let v = json(&blockvar(&["compare", "--framework", "m1", "--strata", path.to_str().unwrap()]));
    assert_eq!(v["difference"], 0.0);
    assert_eq!(v["difference_nonnegative"], true);
}

#[test]
fn compare_rejects_mismatched_inputs() {
    let science = fixture("science.csv");
    let strata = fixture("strata.json");
    for args in [
        vec!["compare", "--framework", "m1", "--science", science.as_str()],
        vec!["compare", "--framework", "finite", "--strata", strata.as_str()],
        vec!["compare", "--framework", "finite", "--science", science.as_str()],
        vec!["compare", "--framework", "finite", "--science", science.as_str(), "--p", "0.3"],
    ] {
        assert_eq!(blockvar(&args).code, 2, "{args:?}");
    }
}

#[test]
fn simulate_exhaustive_matches_oracle_bias() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny.csv");
    let cfg_path = fixture("tiny_exhaustive.json");
    let r = blockvar(&["simulate", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.contains("big skipped"));

    let cfg = SimConfig::from_json(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let science = generate_dgp(&cfg.dgp()).unwrap();
    let design = Design::from_counts(&science, &cfg.n_t).unwrap();
    let truth = true_var_finite(&science, &design, Mechanism::Blocked).unwrap();
    let mut reader = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["estimator", "mean_tau", "var_tau", "mean_vhat", "rel_bias", "var_vhat", "mc_se"]
    );
    let mut seen = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let id: EstimatorId = rec[0].parse().unwrap();
        let bias = if id == EstimatorId::Cr {
            ignore_blocking_bias_finite(&science, &design).unwrap()
        } else {
            bias_finite(&science, &design, id).unwrap()
        };
        let rel: f64 = rec[4].parse().unwrap();
        assert!((rel - bias / truth).abs() < 1e-9 * (1.0 + rel.abs()), "{id}: {rel} vs {}", bias / truth);
        assert_eq!(&rec[6], "0");
        seen += 1;
    }
    assert_eq!(seen, 6);
}

#[test]
fn simulate_is_deterministic_and_validates_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"sizes": [2, 2, 3, 5], "n_t": [1, 1, 1, 2], "rho": 0.3, "b": 2, "reps": 300, "seed": 1,
            "estimators": ["hybrid-p", "plugin"]}"#,
    )
    .unwrap();
    let go = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(blockvar(&args).code, 0);
        std::fs::read(out).unwrap()
    };
    let a = go("a.csv", &["--threads", "1"]);
    assert_eq!(a, go("b.csv", &["--threads", "3"]));
    assert_ne!(a, go("c.csv", &["--seed", "2"]));

    std::fs::write(&cfg, r#"{"sizes": [2, 2], "n_t": [1, 1], "rho": 4, "estimators": ["sb-p"]}"#).unwrap();
    let bad = blockvar(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(bad.code, 2);
    assert!(bad.stderr.contains("rho"), "{}", bad.stderr);

    std::fs::write(&cfg, r#"{"sizes": [2, 2], "n_t": [1, 1], "estimators": ["sb-p"], "repz": 3}"#).unwrap();
    let typo = blockvar(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(typo.code, 2);
    assert!(typo.stderr.contains("repz"));
}

#[test]
fn simulate_defaults_to_5000_sampled_reps() {
    let cfg = SimConfig::from_json(r#"{"sizes": [2, 2], "n_t": [1, 1], "estimators": ["sb-p"]}"#).unwrap();
    assert_eq!(cfg.reps, 5000);
    assert_eq!(cfg.mode, blockvar::simulate::ConfigMode::Sampled);
}
