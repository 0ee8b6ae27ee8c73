use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
threads = 1

[dataset]
n_identities = 3
train_samples = 2
heldout_samples = 1

[arch]
hidden = 32

[teacher]
epochs = 1

[adapter]
epochs = 1

[couplings]
n_pairs = 8
steps = 4

[reflow]
epochs = 1

[distill]
epochs = 1

[replacement]
diagnostic_identities = 2
distill_check_seeds = 2

[sweep]
identities = 2
steps_list = [1, 2, 3, 4, 6]

[ablations]
alphas = [0.25, 1.0]
"#;

fn flowprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowprobe"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWPROBE_THREADS")
        .output()
        .unwrap()
}

fn tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(flowprobe(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(flowprobe(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let out = flowprobe(dir.path(), &["build", "--id-scale", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = flowprobe(dir.path(), &["build", "--steps", "4,2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps_list"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "master_sed = 3\n").unwrap();
    let out = flowprobe(dir.path(), &["build", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("master_sed"));
    let out = flowprobe(dir.path(), &["build", "--config", "does-not-exist.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluation_before_build_fails_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for cmd in ["replacement", "mech-sweep", "ablations", "report"] {
        let out = flowprobe(dir.path(), &[cmd, "--config", &cfg, "--out-dir", "empty"]);
        assert_eq!(out.status.code(), Some(1), "{cmd}");
    }
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = |cmd: &str| flowprobe(dir.path(), &[cmd, "--config", &cfg, "--out-dir", "out", "-q"]);

    let build = run("build");
    assert_eq!(build.status.code(), Some(0), "{}", String::from_utf8_lossy(&build.stderr));
    assert!(build.stderr.is_empty(), "quiet build still logged");
    assert!(String::from_utf8_lossy(&run("build").stdout).contains("skipped"));

    let rep = run("replacement");
    assert_eq!(rep.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("speedup"));

    // The tiny backbone is barely trained, so the pattern may be absent;
    // either way the command must not report an artifact bug.
    let sweep = run("mech-sweep");
    let code = sweep.status.code();
    assert!(code == Some(0) || code == Some(4), "{code:?}");
    assert_eq!(String::from_utf8_lossy(&sweep.stdout).matches("PASS").count()
        + String::from_utf8_lossy(&sweep.stdout).matches("FAIL").count(), 4);

    assert_eq!(run("ablations").status.code(), Some(0));
    let report = run("report");
    assert_eq!(report.status.code(), Some(0));
    assert!(dir.path().join("out/report.md").exists());
    assert!(dir.path().join("out/mech_sweep/sweep.csv").exists());
}

#[test]
fn steps_flag_overrides_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let args = ["--config", &cfg, "--out-dir", "out", "-q", "--steps", "1,2,3,5,7"];
    assert_eq!(flowprobe(dir.path(), &[&["build"], &args[..]].concat()).status.code(), Some(0));
    let out = flowprobe(dir.path(), &[&["mech-sweep"], &args[..]].concat());
    assert!(matches!(out.status.code(), Some(0 | 4)));
    let csv = std::fs::read_to_string(dir.path().join("out/mech_sweep/sweep.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "5", "7"]);
}
