use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn erank(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_erank"));
    cmd.args(args).env_remove("ERANK_OUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(out: &Path) -> Output {
    erank(
        &["run", "--preset", "ex2.1b", "--seed", "3", "--seed", "4", "--steps", "120", "--out", out.to_str().unwrap()],
        &[],
    )
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["resolved.toml", "summary.json", "trajectory.svg", "seed_3.csv", "seed_4.jsonl", "seed_4.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(dir.path().join("seed_3.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,loss,eps_rank");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("100,"));
    let jsonl = fs::read_to_string(dir.path().join("seed_3.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(summary["seeds"][0]["steps_completed"], 120);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(small_run(a.path()).status.success());
    assert!(small_run(b.path()).status.success());
    for f in ["seed_3.csv", "seed_4.csv", "seed_3.jsonl", "seed_4.ckpt", "summary.json", "trajectory.svg"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resolved_config_reproduces_run() {
    let a = tempfile::tempdir().unwrap();
    assert!(small_run(a.path()).status.success());
    let resolved = a.path().join("resolved.toml");
    let b = tempfile::tempdir().unwrap();
    let o = erank(
        &["run", "--config", resolved.to_str().unwrap(), "--out", b.path().to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.path().join("seed_4.csv")).unwrap(), fs::read(b.path().join("seed_4.csv")).unwrap());
    let text_a = fs::read_to_string(&resolved).unwrap();
    let text_b = fs::read_to_string(b.path().join("resolved.toml")).unwrap();
    let strip = |t: &str| t.lines().filter(|l| !l.starts_with("out =")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&text_a), strip(&text_b));
}

#[test]
fn output_root_from_environment() {
    let root = tempfile::tempdir().unwrap();
    let o = erank(&["run", "--preset", "ex2.1b", "--seed", "0", "--steps", "1"], &[("ERANK_OUT", root.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(root.path().join("ex2.1b").join("seed_0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn unknown_preset_exits_2_with_listing() {
    let o = erank(&["run", "--preset", "ex7.7"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("ex2.1a") && e.contains("ex3.1-failed"), "{e}");
}

#[test]
fn bad_field_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "preset = \"ex2.1a\"\n\n[train]\nstepz = 10\n").unwrap();
    let o = erank(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:4: stepz"), "{}", stderr(&o));

    fs::write(&cfg, "preset = \"ex4.3\"\n[network]\nactivation = \"relu\"\n").unwrap();
    let o = erank(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("relu"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("boom.toml");
    fs::write(
        &cfg,
        "preset = \"ex2.1b\"\nseeds = [0]\n[optimizer]\nkind = \"sgd\"\nlr = 1e6\n[train]\nsteps = 50\nrank_every = 1\nepsilon = 1e-6\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = erank(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("seed_0.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"abort\": {"));
}

const TRAJ_A: &str = "iteration,loss,eps_rank\n0,2.5e0,3\n100,9.0e-1,5\n200,1.0e-2,12\n300,4.0e-4,20\n";
const TRAJ_B: &str = "iteration,loss,eps_rank\n0,2.0e0,18\n100,3.0e-2,22\n200,2.0e-4,25\n300,1.0e-5,27\n";

#[test]
fn plot_rejects_header_only_and_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "iteration,loss,eps_rank\n").unwrap();
    let out = dir.path().join("p.svg");
    let o = erank(&["plot", empty.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "iteration,loss,eps_rank\n0,1,2\n1,2\n").unwrap();
    let o = erank(&["plot", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn plot_single_record() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("one.csv");
    fs::write(&f, "iteration,loss,eps_rank\n0,1e-1,4\n").unwrap();
    let out = dir.path().join("one.svg");
    let o = erank(&["plot", f.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<circle").count(), 1);
}

#[test]
fn plot_two_runs_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("xavier.csv");
    let b = dir.path().join("udi.csv");
    fs::write(&a, TRAJ_A).unwrap();
    fs::write(&b, TRAJ_B).unwrap();
    let out = dir.path().join("two.svg");
    let o = erank(
        &["plot", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap(), "--title", "xavier vs udi"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/two_runs.svg");
    assert_eq!(svg, fs::read_to_string(golden).unwrap());
    assert!(svg.contains(">xavier<") && svg.contains(">udi<"));
}

#[test]
fn theory_reports_are_json() {
    let o = erank(&["theory", "probe", "--n", "4", "--p", "2", "--trials", "200"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["violations"], 0);
    assert!((v["paper_bound"].as_f64().unwrap() - 1.0 / 6f64.sqrt()).abs() < 1e-12);

    let o = erank(&["theory", "compress", "--n", "6", "--p", "3"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["p"], 3);
    assert!(v["measured_error"].as_f64().unwrap() <= v["certified_bound"].as_f64().unwrap());

    let o = erank(&["theory", "probe", "--n", "12", "--p", "2"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rfm_compare_rejects_unknown_preset() {
    let o = erank(&["rfm-compare", "--preset", "ex2.1a"], &[]);
    assert_eq!(o.status.code(), Some(2));
}
