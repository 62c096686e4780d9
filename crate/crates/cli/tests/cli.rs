use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn subsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subsel")).args(args).env_remove("SUBSEL_WORKERS").output().unwrap()
}

fn ok(args: &[&str]) {
    let o = subsel(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, config: &str, seed: &str) -> std::path::PathBuf {
    let cfg = dir.join("cfg.txt");
    fs::write(&cfg, config).unwrap();
    let out = dir.join(format!("sim_{seed}"));
    ok(&["simulate", "--config", p(&cfg), "--out", p(&out), "--seed", seed]);
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "sets = 60\nn = 3\n", "7");
    let b_dir = dir.path().join("again");
    fs::create_dir(&b_dir).unwrap();
    let b = simulate(&b_dir, "sets = 60\nn = 3\n", "7");
    for f in ["data.csv", "truth.csv", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = simulate(dir.path(), "sets = 60\nn = 3\n", "8");
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
    let data = csv_rows(&a.join("data.csv"));
    assert_eq!(data[0][..4], ["set_id", "unit_id", "role", "y_1"]);
    assert_eq!(data.len(), 1 + 60 * 3);
}

#[test]
fn json_config_matches_key_value_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "sets = 30\nn = 2\ngamma = 2\n", "1");
    let j = dir.path().join("j");
    fs::create_dir(&j).unwrap();
    let b = simulate(&j, r#"{"sets": 30, "n": 2, "gamma": 2.0}"#, "1");
    assert_eq!(fs::read(a.join("data.csv")).unwrap(), fs::read(b.join("data.csv")).unwrap());
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = subsel(&["simulate", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = subsel(&["simulate", "--config", p(&dir.path().join("missing.txt")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "sets = 10\nwidth = 3\ncolour = red\n").unwrap();
    let o = subsel(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("width") && err.contains("colour"), "{err}");

    let o = subsel(&["select", "--data", "x", "--partition", "y", "--method", "lasso", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn select_rejects_inconsistent_partition() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sets = 40\nn = 2\n", "3");
    let part = dir.path().join("part.csv");
    fs::write(&part, "set_id,group_id\n1,0\n2,1\n9999,1\n").unwrap();
    let o = subsel(&[
        "select", "--data", p(&sim.join("data.csv")), "--partition", p(&part), "--out", p(&dir.path().join("s")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn partition_and_select_flow() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sets = 400\nn = 2\ngamma = 1\ntau_star = 4\n", "11");
    let data = sim.join("data.csv");
    let part = dir.path().join("part");
    ok(&[
        "partition", "--data", p(&data), "--mode", "random", "--group-size", "10",
        "--truth", p(&sim.join("truth.csv")), "--seed", "2", "--out", p(&part),
    ]);
    let groups = csv_rows(&part.join("partition.csv"));
    assert_eq!(groups[0], ["set_id", "group_id"]);
    assert_eq!(groups.len(), 401);
    assert!(!part.join("tree.txt").exists());

    let tree = dir.path().join("tree");
    ok(&["partition", "--data", p(&data), "--mode", "tree", "--minsplit", "4", "--minbucket", "4", "--out", p(&tree)]);
    assert!(fs::read_to_string(tree.join("tree.txt")).unwrap().contains("leaf group="));

    let run = |method: &str, cc: &str, out: &str| {
        let out = dir.path().join(out);
        ok(&[
            "select", "--data", p(&data), "--partition", p(&part.join("partition.csv")), "--method", method,
            "--gamma", "1", "--cc", cc, "--seed", "4", "--out", p(&out),
        ]);
        out
    };
    let base = run("np", "off", "np");
    let cc = run("np", "light", "np_cc");
    let report = csv_rows(&base.join("report.csv"));
    assert_eq!(report[0], ["group_id", "selected", "via_cc", "L_g", "W_g", "kappa", "eta", "size", "pvalue"]);
    assert_eq!(report.len(), 41);
    assert!(report[1..].iter().any(|r| r[1] == "1"), "strong signal should select something");
    assert_eq!(csv_rows(&base.join("trace.csv"))[0], ["step", "screened_group", "P", "N", "fdp_hat"]);

    // Calibration never removes a base selection.
    let cc_report = csv_rows(&cc.join("report.csv"));
    for (b, c) in report[1..].iter().zip(&cc_report[1..]) {
        assert_eq!(b[0], c[0]);
        if b[1] == "1" {
            assert_eq!(c[1], "1");
        }
        if c[2] == "1" {
            assert_eq!((b[1].as_str(), c[1].as_str()), ("0", "1"));
        }
    }

    let bh = run("bh", "off", "bh");
    assert!(!bh.join("trace.csv").exists());
    let bh_rows = csv_rows(&bh.join("report.csv"));
    assert!(bh_rows[1..].iter().all(|r| r[8].parse::<f64>().is_ok_and(|v| (0.0..=1.0).contains(&v))));

    // Same seed and inputs give identical output.
    let again = run("np", "light", "np_cc_again");
    assert_eq!(fs::read(cc.join("report.csv")).unwrap(), fs::read(again.join("report.csv")).unwrap());
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(cc.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["cc"], "Light");
    assert_eq!(echo["seed"], 4);
}

#[test]
fn gamma_sweep_produces_one_report_per_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sets = 200\nn = 2\ngamma = 1\n", "5");
    let part = dir.path().join("part");
    ok(&["partition", "--data", p(&sim.join("data.csv")), "--mode", "random", "--groups", "20", "--out", p(&part)]);
    let mut counts = vec![];
    for g in ["1", "1.5", "2", "2.5", "3"] {
        let out = dir.path().join(format!("g{g}"));
        ok(&[
            "select", "--data", p(&sim.join("data.csv")), "--partition", p(&part.join("partition.csv")),
            "--gamma", g, "--out", p(&out),
        ]);
        let rows = csv_rows(&out.join("report.csv"));
        counts.push(rows[1..].iter().filter(|r| r[1] == "1").count());
    }
    assert_eq!(counts.len(), 5);
}

#[test]
fn match_writes_sets_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let units = dir.path().join("units.csv");
    let mut s = String::from("unit_id,treatment,y_1,age,score\n");
    for i in 0..120 {
        let age = (i % 17) as f64;
        let score = ((i * 7) % 11) as f64 / 3.0;
        let t = u8::from(i % 4 == 0);
        s.push_str(&format!("u{i},{t},{},{age},{score}\n", age * 0.1 + f64::from(t)));
    }
    fs::write(&units, s).unwrap();
    let out = dir.path().join("m");
    ok(&["match", "--units", p(&units), "--k", "2", "--caliper", "0.4", "--seed", "1", "--out", p(&out)]);
    let sets = csv_rows(&out.join("matched.csv"));
    assert_eq!(sets[0], ["set_id", "unit_id", "role", "y_1", "age", "score"]);
    let treated = sets[1..].iter().filter(|r| r[2] == "treated").count();
    assert!(treated > 0);
    assert_eq!(sets.len() - 1, 3 * treated);
    let mut ids: Vec<&str> = sets[1..].iter().map(|r| r[1].as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), sets.len() - 1, "units reused");
    let bal = csv_rows(&out.join("balance.csv"));
    assert_eq!(bal[0], ["covariate", "smd_before", "smd_after"]);
    assert_eq!(bal.len(), 3);

    // The matched file feeds straight into partition.
    ok(&["partition", "--data", p(&out.join("matched.csv")), "--mode", "random", "--groups", "3", "--out", p(&dir.path().join("pp"))]);
}

#[test]
fn evaluate_writes_results_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ev");
    let o = Command::new(env!("CARGO_BIN_EXE_subsel"))
        .args(["evaluate", "--figure", "2a", "--cells", "2a/size=20", "--reps", "2", "--seed", "3", "--out", p(&out)])
        .env("SUBSEL_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("results.csv"));
    assert!(rows[0].contains(&"mean_fdp".to_string()));
    assert_eq!(rows.len(), 1 + 7);
    assert!(out.join("timing.csv").exists());
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["workers"], 2);

    let o = subsel(&["evaluate", "--figure", "9z", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_subsel"))
        .args(["evaluate", "--figure", "2a", "--reps", "1", "--out", p(&out)])
        .env("SUBSEL_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
