use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn abacus(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_abacus"));
    cmd.args(args).env_remove("ABACUS_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    abacus(args).output().expect("binary runs")
}

fn records(out: &Output) -> Vec<Value> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("each line is a JSON object"))
        .collect()
}

fn iters(rs: &[Value]) -> Vec<u64> {
    rs.iter().map(|r| r["iter"].as_u64().unwrap()).collect()
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["vae", "--method", "hmc"][..],
        &["blr", "--method", "iwae", "--particles", "1"],
        &["blr", "--bogus"],
        &["mnist"],
        &["blr", "--report-every", "0"],
    ] {
        assert_eq!(run(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn divergent_training_exits_3() {
    let out = run(&["blr", "--lr", "1e300", "--iters", "20"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn io_failures_exit_4() {
    assert_eq!(run(&["blr", "--data", "/definitely/not/here.csv"]).status.code(), Some(4));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing").join("m.jsonl");
    assert_eq!(run(&["blr", "--iters", "2", "--out", out.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn seed_comes_from_env_unless_given() {
    let base = ["blr", "--iters", "30", "--report-every", "10"];
    let by_flag = run(&[&base[..], &["--seed", "5"]].concat());
    let by_env = abacus(&base).env("ABACUS_SEED", "5").output().unwrap();
    let overridden = abacus(&[&base[..], &["--seed", "6"]].concat()).env("ABACUS_SEED", "5").output().unwrap();
    let flag6 = run(&[&base[..], &["--seed", "6"]].concat());
    assert_eq!(by_flag.stdout, by_env.stdout);
    assert_eq!(overridden.stdout, flag6.stdout);
    assert_ne!(by_flag.stdout, flag6.stdout);
}

#[test]
fn records_land_on_interval_multiples() {
    let rs = records(&run(&["blr", "--iters", "120", "--report-every", "25"]));
    assert_eq!(iters(&rs), vec![0, 25, 50, 75, 100, 120]);
    assert!(rs.last().unwrap().get("log_likelihood_estimate").is_some());

    let rs = records(&run(&["blr", "--method", "hmc", "--iters", "60", "--warmup", "40", "--report-every", "20"]));
    assert_eq!(iters(&rs), vec![0, 20, 40, 60]);
    let last = rs.last().unwrap();
    assert!(last.get("posterior_mean_w0").is_some() && last.get("posterior_mean_w1").is_some());
    let rate = last["acceptance_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn blr_training_raises_the_elbo() {
    let rs = records(&run(&["blr", "--iters", "500", "--lr", "0.05", "--particles", "8", "--report-every", "100"]));
    let first = rs[0]["elbo"].as_f64().unwrap();
    let last = rs[rs.len() - 2]["elbo"].as_f64().unwrap();
    assert!(last > first + 50.0, "{first} -> {last}");
    assert!(rs.last().unwrap()["accuracy"].as_f64().unwrap() > 0.8);
}

#[test]
fn dsbn_importance_estimate_matches_enumeration() {
    let rs = records(&run(&["dsbn", "--method", "is-eval", "--n-data", "5", "--particles", "20000", "--nz", "3"]));
    let r = &rs[0];
    let (est, exact) = (r["log_likelihood_estimate"].as_f64().unwrap(), r["exact_log_likelihood"].as_f64().unwrap());
    assert!((est - exact).abs() < 0.05, "{est} vs {exact}");
}

#[test]
fn every_method_runs_on_every_latent_model() {
    for example in ["vae", "dsbn"] {
        for method in ["sgvb", "reinforce", "iwae", "vimco", "rws"] {
            let rs = records(&run(&[
                example, "--method", method, "--iters", "6", "--report-every", "3", "--n-data", "20", "--nh", "8",
            ]));
            assert_eq!(iters(&rs), vec![0, 3, 6], "{example} {method}");
            let key = if matches!(method, "iwae" | "vimco" | "rws") { "iw_bound" } else { "elbo" };
            assert!(rs[0][key].as_f64().unwrap().is_finite(), "{example} {method}");
        }
    }
}

#[test]
fn timing_adds_wall_clock() {
    let plain = records(&run(&["blr", "--iters", "2"]));
    assert!(plain.iter().all(|r| r.get("wall_ms").is_none()));
    let timed = records(&run(&["blr", "--iters", "2", "--timing"]));
    assert!(timed.iter().all(|r| r["wall_ms"].is_u64()));
}

fn write_csv(path: &Path, rows: &[&str]) {
    std::fs::write(path, rows.join("\n") + "\n").unwrap();
}

#[test]
fn csv_data_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let blr = dir.path().join("blr.csv");
    write_csv(&blr, &["0.5,1.0,1", "-1.0,0.2,0", "2.0,-0.3,1", "-0.4,-1.5,0"]);
    let out = dir.path().join("m.jsonl");
    let status = abacus(&["blr", "--data", blr.to_str().unwrap(), "--iters", "5", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(std::fs::read_to_string(&out).unwrap().lines().count() >= 2);

    let bad = dir.path().join("bad.csv");
    write_csv(&bad, &["0.5,1.0,1", "-1.0,0"]);
    assert_eq!(run(&["blr", "--data", bad.to_str().unwrap(), "--iters", "2"]).status.code(), Some(2));

    let images = dir.path().join("img.csv");
    write_csv(&images, &["0,1,1,0", "1,1,0,0", "0,0,1,1"]);
    let rs = records(&run(&["dsbn", "--data", images.to_str().unwrap(), "--iters", "4", "--nz", "2"]));
    assert_eq!(iters(&rs), vec![0, 4]);
}
