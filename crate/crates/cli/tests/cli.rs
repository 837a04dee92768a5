use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
hidden_dim = 6
trunk_layers = 2
text_vocab = 12
code_vocab = 12
adapter_rank = 2
gen_tokens = 16

[data]
eval_pairs = 8

[data.understanding]
pair_count = 24
context_length = 4
response_len_min = 6
response_len_max = 10

[data.generation]
pair_count = 12
context_length = 4

[train]
steps = 60

[sweep]
seeds = [0]
betas = [0.1]
soup_lambdas = [0.5]
"#;

fn bdlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdlab"))
        .args(args)
        .env_remove("BDLAB_OUT")
        .arg("--out")
        .arg(out)
        .output()
        .expect("run bdlab")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_data_defaults_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&bdlab(&["gen-data", "--seed", "4"], &a));
    ok(&bdlab(&["gen-data", "--seed", "4"], &b));
    let bytes = fs::read(a.join("data/train.jsonl")).unwrap();
    assert_eq!(bytes, fs::read(b.join("data/train.jsonl")).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 1300 + 288);
    let count = |task: &str| {
        lines[1..]
            .iter()
            .filter(|l| l.contains(&format!("\"task\":\"{task}\"")))
            .count()
    };
    assert_eq!((count("understanding"), count("generation")), (1300, 288));
}

#[test]
fn invalid_informativeness_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data.understanding]\ninformativeness = 2.0\n").unwrap();
    let o = bdlab(&["gen-data", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("informativeness"));
}

#[test]
fn report_and_plot_need_runs() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["report", "plot"] {
        let o = bdlab(&[cmd], &dir.path().join("empty"));
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains("no runs found"), "{cmd}");
        fs::create_dir_all(dir.path().join("empty")).unwrap();
    }
}

#[test]
fn train_report_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    ok(&bdlab(
        &["train", "--config", &cfg, "--strategy", "grad_weighted", "--seed", "2"],
        &out,
    ));
    let run = out.join("runs/grad_weighted-b0.1-s2");
    for f in [
        "manifest.json",
        "summary.json",
        "checkpoint.json",
        "trajectory.csv",
        "plots/weights.svg",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let traj = fs::read_to_string(run.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 61);
    ok(&bdlab(&["report"], &out));
    let report = fs::read_to_string(out.join("report/report.txt")).unwrap();
    assert!(report.contains("grad_weighted"));
    let svg = fs::read(run.join("plots/weights.svg")).unwrap();
    fs::remove_dir_all(run.join("plots")).unwrap();
    ok(&bdlab(&["plot"], &out));
    assert_eq!(fs::read(run.join("plots/weights.svg")).unwrap(), svg);
}

#[test]
fn sweep_tags_the_composite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    ok(&bdlab(&["sweep", "--config", &cfg, "--jobs", "2"], &out));
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 7);
    let report = fs::read_to_string(out.join("report/report.txt")).unwrap();
    let line = report
        .lines()
        .find(|l| l.contains("separate_adapter_composite"))
        .unwrap();
    assert!(line.contains("non-deployable"), "{line}");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_bdlab"))
        .args(["gen-data", "--config", &cfg])
        .env("BDLAB_OUT", dir.path().join("env-out"))
        .output()
        .unwrap();
    ok(&o);
    assert!(dir.path().join("env-out/data/train.jsonl").is_file());
}

#[test]
fn diagnose_and_calibrate_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = bdlab(&["diagnose", "--config", &cfg, "--n-batches", "200"], &out);
    ok(&o);
    let csv = fs::read_to_string(out.join("diagnostics/diagnostics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert!(out.join("diagnostics/diagnostics_summary.json").is_file());

    ok(&bdlab(&["calibrate", "--config", &cfg, "--n-batches", "200"], &out));
    let cal: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("calibration/calibration.json")).unwrap()).unwrap();
    assert!(cal["inter_vs_zero"]["p"].is_number());

    ok(&bdlab(
        &["diagnose", "--synthetic-vectors", "--n-batches", "10"],
        &dir.path().join("syn"),
    ));
    let syn = fs::read_to_string(dir.path().join("syn/diagnostics/diagnostics.csv")).unwrap();
    assert_eq!(syn.lines().count(), 11);
}
