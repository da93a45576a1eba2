//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuronflow"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const CONFIG: &str = r#"
seed = 7

[model]
n_layers = 2
d_model = 64
d_ffn = 128
dtype = "int4-group"

[trace]
n_tokens = 12
batch_schedule = [1, 1, 1, 1, 2, 2, 2, 2, 4, 4, 4, 4]

[plan]
batch_sizes = [1, 2, 4]
cache_total_bytes = 131072

[run]
batch_schedule = [1, 1, 2, 2]
offload_fraction = 0.5
prompt_len = 32
"#;

fn write_config(dir: &Path) {
    std::fs::write(dir.join("exp.toml"), CONFIG).unwrap();
}

#[test]
fn missing_config_exits_one_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--config", "missing.toml", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!tmp.path().join("run").exists(), "failed run must not leave artifacts");
}

#[test]
fn bad_scenario_name_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["scenario", "nope", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trace_plan_simulate_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run(&["gen-trace", "--config", "exp.toml", "--out", "run"], tmp.path()));
    assert_ok(&run(&["plan", "--config", "exp.toml", "--out", "run"], tmp.path()));
    assert_ok(&run(&["simulate", "--config", "exp.toml", "--out", "run"], tmp.path()));

    let run_dir = tmp.path().join("run");
    for name in ["trace.jsonl", "plan.json", "profile.toml", "metrics.json", "events.csv", "prefill.json"] {
        assert!(run_dir.join(name).exists(), "missing artifact {name}");
    }
    // The plan parses and covers the requested batch sizes.
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("plan.json")).unwrap())
            .unwrap();
    for b in ["1", "2", "4"] {
        assert!(plan["entries"][b].is_object(), "plan misses batch {b}");
    }
    // The manifest records the seed and the config hash.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7);
    let sha = manifest["config_sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
    // Same hash scheme as `sha256sum exp.toml`.
    use sha2::Digest;
    let want = sha2::Sha256::digest(std::fs::read(tmp.path().join("exp.toml")).unwrap());
    let want: String = want.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(sha, want);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run(
        &["gen-trace", "--config", "exp.toml", "--out", "run", "--seed", "99"],
        tmp.path(),
    ));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("run/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 99);
}

#[test]
fn ablation_is_idempotent_and_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run(&["ablation", "--config", "exp.toml", "--out", "a", "--quiet"], tmp.path()));
    // Second run, single-threaded: byte-identical output.
    let out = bin()
        .args(["ablation", "--config", "exp.toml", "--out", "b", "--quiet"])
        .env("NEURONFLOW_THREADS", "1")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_ok(&out);
    let a = std::fs::read(tmp.path().join("a/ablation.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("b/ablation.csv")).unwrap();
    assert_eq!(a, b, "ablation output must not depend on thread fan-out");

    let csv = String::from_utf8(a).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6, "header + 5 steps");
    let tps: Vec<f64> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for w in tps.windows(2) {
        assert!(w[1] > w[0], "throughput column must increase: {tps:?}");
    }
}

#[test]
fn scenario_fig6_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    assert_ok(&run(&["scenario", "fig6", "--out", "run", "--quiet"], tmp.path()));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("run/scenario.json")).unwrap(),
    )
    .unwrap();
    let cluster = summary["cluster_level_makespan"].as_u64().unwrap();
    let matrix = summary["matrix_level_makespan"].as_u64().unwrap();
    assert!(cluster < matrix);
    for name in ["pipeline_cluster.csv", "pipeline_matrix.csv"] {
        let csv = std::fs::read_to_string(tmp.path().join("run").join(name)).unwrap();
        assert!(csv.starts_with("time,resource,task,matrix,cluster,stage,kind\n"));
    }

    // The report renders whatever CSVs the run directory holds.
    assert_ok(&run(&["ablation", "--config", "exp.toml", "--out", "run", "--quiet"], tmp.path()));
    assert_ok(&run(&["report", "--out", "run"], tmp.path()));
    let md = std::fs::read_to_string(tmp.path().join("run/report.md")).unwrap();
    assert!(md.contains("| baseline |"));
    assert!(md.contains("| +xpu |"));
}

#[test]
fn gen_model_writes_container() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("small.toml"),
        "seed = 3\n[model]\nn_layers = 1\nd_model = 8\nd_ffn = 16\ndtype = \"fp32\"\n",
    )
    .unwrap();
    assert_ok(&run(&["gen-model", "--config", "small.toml", "--out", "run"], tmp.path()));
    let bin_path = tmp.path().join("run/model.bin");
    assert!(bin_path.exists());
    // 3 matrices x 16 x 8 f32 elements plus a small header.
    assert!(std::fs::metadata(&bin_path).unwrap().len() > (3 * 16 * 8 * 4) as u64);
}
