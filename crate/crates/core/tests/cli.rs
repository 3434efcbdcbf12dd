//! End-to-end runs of the `epsim` binary.

use std::path::Path;
use std::process::{Command, Output};

fn epsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epsim"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EPSIM_CALIBRATION")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = "\
skew = hot_set:16:0.4
drift = 0.3
tokens_per_device = 512
iterations = 6
method = before_lb|feplb
";

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), SMALL).unwrap();
    ok(&epsim(
        &["run", "exp.conf", "--out", "a", "--seed", "5"],
        dir.path(),
    ));
    ok(&epsim(
        &[
            "run", "exp.conf", "--out", "b", "--seed", "5", "--jobs", "1",
        ],
        dir.path(),
    ));
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    for f in ["series.csv", "manifest.txt", "plans/c001.txt"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn full_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let conf = "\
iterations = 2
tokens_per_device = 256
[ep2]
ep = 2
pp = 4
method = before_lb|feplb|fastermoe
dyn = 2|4|8
[ep4]
ep = 4
pp = 4
method = before_lb|feplb|fastermoe
dyn = 2|4|8
[ep8]
ep = 8
pp = 2
method = before_lb|feplb|fastermoe
dyn = 2|4|8
";
    std::fs::write(dir.path().join("grid.conf"), conf).unwrap();
    ok(&epsim(&["run", "grid.conf", "--out", "r"], dir.path()));
    let metrics = std::fs::read_to_string(dir.path().join("r/metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 27);
    let mut ids: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    ids.dedup();
    assert_eq!(ids.len(), 27);
}

#[test]
fn refuses_existing_results_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), SMALL).unwrap();
    std::fs::create_dir(dir.path().join("taken")).unwrap();
    let out = epsim(&["run", "exp.conf", "--out", "taken"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--overwrite"));
    ok(&epsim(
        &["run", "exp.conf", "--out", "taken", "--overwrite"],
        dir.path(),
    ));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.conf"),
        "ep = 3\npp = 8\ngpus_per_node = 8\n",
    )
    .unwrap();
    let out = epsim(&["run", "bad.conf", "--out", "r"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("num_experts") && err.contains("ep"), "{err}");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn compare_identical_runs_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), SMALL).unwrap();
    ok(&epsim(&["run", "exp.conf", "--out", "a"], dir.path()));
    ok(&epsim(&["run", "exp.conf", "--out", "b"], dir.path()));
    ok(&epsim(
        &["compare", "a", "b", "--csv", "cmp.csv"],
        dir.path(),
    ));
    let csv = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let pct = header.iter().position(|&h| h == "reduction_pct").unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(
            line.split(',').nth(pct).unwrap().parse::<f64>().unwrap(),
            0.0,
            "{line}"
        );
    }

    let metrics = std::fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap();
    let stripped: String = metrics
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    std::fs::write(dir.path().join("b/metrics.csv"), stripped).unwrap();
    let out = epsim(&["compare", "a", "b", "--csv", "cmp2.csv"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wasted_ratio"));
}

#[test]
fn exported_trace_replays_to_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let base = "skew = zipf:1.2\niterations = 4\ntokens_per_device = 256\nmethod = feplb\n";
    std::fs::write(dir.path().join("gen.conf"), base).unwrap();
    ok(&epsim(
        &["trace-export", "gen.conf", "--out", "trace.csv"],
        dir.path(),
    ));
    std::fs::write(
        dir.path().join("replay.conf"),
        format!("{base}trace = trace.csv\n"),
    )
    .unwrap();
    ok(&epsim(&["run", "gen.conf", "--out", "g"], dir.path()));
    ok(&epsim(&["run", "replay.conf", "--out", "r"], dir.path()));
    let cols = |p: &str| {
        let text = std::fs::read_to_string(dir.path().join(p)).unwrap();
        text.lines()
            .nth(1)
            .unwrap()
            .split(',')
            .skip(7)
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    assert_eq!(cols("g/metrics.csv"), cols("r/metrics.csv"));
}

#[test]
fn compare_on_the_acceptance_workload() {
    let dir = tempfile::tempdir().unwrap();
    let workload =
        "skew = hot_set:10:0.5\ndrift = 0.7\ntokens_per_device = 448\niterations = 150\n\
                    ep = 8\npp = 2\ndyn = 4\ntau = 64\nseed = 1|2|3|4\n";
    std::fs::write(
        dir.path().join("base.conf"),
        format!("{workload}method = before_lb\n"),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("fe.conf"),
        format!("{workload}method = feplb\n"),
    )
    .unwrap();
    ok(&epsim(&["run", "base.conf", "--out", "base"], dir.path()));
    ok(&epsim(&["run", "fe.conf", "--out", "fe"], dir.path()));
    let out = epsim(&["compare", "base", "fe", "--csv", "cmp.csv"], dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("token_straggler"));
    let csv = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    let (mut base, mut fe) = (0.0, 0.0);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1] != "token_straggler" {
            continue;
        }
        let v: f64 = f[4].parse().unwrap();
        match f[3] {
            "before_lb" => base += v,
            "feplb" => fe += v,
            other => panic!("unexpected method {other}"),
        }
    }
    let reduction = 100.0 * (base - fe) / base;
    assert!(
        (51.0..=70.0).contains(&reduction),
        "reduction {reduction:.1}%"
    );
}
