mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_run_config;

fn moecl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moecl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, small_run_config().to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_2() {
    let o = moecl(&["train", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
    assert_eq!(moecl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(moecl(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let o = moecl(&["report", "/nonexistent/run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("r");
    let o = moecl(&["train", "--config", &cfg, "--method", "nope", "--out", out.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn synth_output_is_seed_determined() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (p, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = moecl(&["synth", "--seed", seed, "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{o:?}");
    }
    let da = dir_contents(&a);
    assert!(da.iter().any(|(n, _)| n == "tasks.json"));
    assert_eq!(da.len(), 1 + 3 * 3);
    assert_eq!(da, dir_contents(&b));
    assert_ne!(da, dir_contents(&c));
}

#[test]
fn train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut runs = Vec::new();
    for order in ["0,1,2", "1,2,0", "2,0,1"] {
        let out = dir.path().join(format!("run_{}", order.replace(',', "")));
        let o = moecl(&["--sequential", "train", "--config", &cfg, "--method", "moe-cl", "--order", order, "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out.to_string_lossy().into_owned());
    }

    let ckpt = Path::new(&runs[0]).join("checkpoints/phase_2.ckpt");
    let o = moecl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--task", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: f64 = stdout(&o).split_whitespace().last().unwrap().parse().unwrap();
    let summary = moecl::rundir::read_run(Path::new(&runs[0])).unwrap();
    assert_eq!(printed, summary.matrix.rows[2][1]);
    let o = moecl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--task", "9"]);
    assert_eq!(o.status.code(), Some(1));

    let json = dir.path().join("report.json");
    let mut args = vec!["report"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--json", json.to_str().unwrap()]);
    let o = moecl(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains("Avg") && l.contains('±')).count(), 1);
    assert_eq!(text.lines().filter(|l| l.starts_with("moe-cl")).count(), 4);
    let report: moecl::report::Report = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report.methods[0].orders.len(), 3);
}

#[test]
fn gradcheck_passes() {
    let o = moecl(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
