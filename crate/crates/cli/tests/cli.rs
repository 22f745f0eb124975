use std::path::Path;
use std::process::Command;

fn ebt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ebt"))
}

fn write_config(dir: &Path, extra_train: &str) -> std::path::PathBuf {
    let text = format!(
        r#"seed = 3
precision = 64
out_dir = "{}"

[task]
task = "corpus"
vocab_size = 8
seq_len = 8
train_size = 64
val_size = 16
corpus = {{ kind = "copy" }}

[model]
kind = "ebt"
preset = "s1"
layers = 1
embed_dim = 16
heads = 2

[train]
lr = 1e-3
warmup_steps = 2
total_steps = 4
batch_size = 4
{extra_train}

[eval]
rows = 8
batch_size = 8
"#,
        dir.join("run").display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_then_eval_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = ebt().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,loss,lr,grad_norm,e_init_mean,e_final_mean,n_real,nfe_cum,flops_cum"));

    let out = ebt().args(["eval", "--config"]).arg(&cfg).args(["--steps", "3", "--candidates", "2"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["thinking"]["nfe"], 6);

    let out = ebt().args(["trace-export", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/trace.json")).unwrap()).unwrap();
    let first = &trace[0];
    assert!(first["context_id"].is_u64());
    assert!(first["nfe"].is_u64());
    assert!(first["positions"][0]["energies"].is_array());
    assert!(first["positions"][0]["chosen"].is_u64());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bogus_key = 1");
    let out = ebt().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = ebt().args(["train", "--config", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn instability_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("heads = 2", "heads = 2\nalpha = 1e300\nalpha_learnable = false");
    std::fs::write(&cfg, text).unwrap();
    let out = ebt().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flops_reports_exact_ratio() {
    let out = ebt().args(["flops", "--params", "1000000", "--steps", "2"]).output().unwrap();
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["ff_per_token"], 6_000_000u64);
    assert_eq!(r["per_token_flops"], 40_000_000u64);
    assert_eq!(r["ratio_vs_ff"], serde_json::json!([20, 3]));
}
