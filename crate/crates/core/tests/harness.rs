use std::path::Path;

use ebt_core::baseline::{BaselineConfig, BaselineModel};
use ebt_core::checkpoint;
use ebt_core::flops::{ebt_ratio, flop_report};
use ebt_core::harness::{load_checkpoint, run_eval, run_sweep, run_train, ModelSpec, RunConfig, SweepAxis};
use ebt_core::{DataMode, EbtConfig, EbtError, EbtModel, Variant};
use num_rational::Ratio;

fn tiny_config(out: &Path, extra_model: &str) -> String {
    format!(
        r#"
seed = 4
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
{extra_model}
[train]
warmup_steps = 2
total_steps = 4
batch_size = 4
[eval]
rows = 8
batch_size = 8
"#,
        out.display()
    )
}

#[test]
fn presets_fill_unset_fields_and_user_keys_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(&tiny_config(dir.path(), "num_steps = 3")).unwrap();
    let ModelSpec::Ebt(m) = &cfg.model else { panic!("expected an ebt model") };
    assert_eq!(m.variant, Variant::S1);
    assert_eq!(m.num_steps, 3);
    assert_eq!(m.alpha, 500.0);
    assert_eq!(m.mode, DataMode::Discrete { vocab_size: 8 });
    assert_eq!(m.embed_dim, 16);
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(&tiny_config(dir.path(), "")).unwrap();
    let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn config_errors_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["bogus_key = 1", "preset = \"s3\"", "embed_dim = 15"] {
        let text = tiny_config(dir.path(), bad);
        // A repeated key is a parse error too, which is fine here.
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, EbtError::Config(_)), "{bad}: {err}");
    }
    let text = tiny_config(dir.path(), "").replace("precision = 64", "precision = 16");
    assert!(matches!(RunConfig::from_toml(&text), Err(EbtError::Config(_))));
}

#[test]
fn checkpoints_round_trip() {
    let cfg = EbtConfig::s2(DataMode::Discrete { vocab_size: 8 }).with_dims(1, 16, 2);
    let model = EbtModel::new(cfg.clone(), 9).unwrap();
    let bytes = checkpoint::encode(&model.params, &cfg, 7, 64).unwrap();
    let decoded = checkpoint::decode::<EbtConfig>(&bytes).unwrap();
    assert_eq!(decoded.config, cfg);
    assert_eq!(decoded.step, 7);
    let mut fresh = EbtModel::new(cfg.clone(), 10).unwrap();
    checkpoint::restore(&mut fresh.params, &decoded.tensors).unwrap();
    for (a, b) in model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }

    let narrow = checkpoint::decode::<EbtConfig>(&checkpoint::encode(&model.params, &cfg, 7, 32).unwrap()).unwrap();
    for ((_, _, vals), p) in narrow.tensors.iter().zip(model.params.iter()) {
        for (a, b) in vals.iter().zip(p.value.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 3);
    assert!(checkpoint::decode::<EbtConfig>(&truncated).is_err());
    assert!(checkpoint::decode::<EbtConfig>(b"nope\n").is_err());
    assert!(checkpoint::encode(&model.params, &cfg, 0, 16).is_err());
}

#[test]
fn baseline_parameter_count_matches_formula() {
    for (v, l, d, h) in [(16, 2, 64, 2), (8, 1, 16, 4), (32, 3, 32, 2)] {
        let cfg = BaselineConfig::new(v, l, d, h);
        let model = BaselineModel::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.params.count(), v * d + l * (4 * d * d + 3 * d * d + 2 * d) + d);
        assert_eq!(model.params.count(), cfg.param_count());
        assert_eq!(model.non_embedding_params(), l * (7 * d * d + 2 * d) + d);
    }
}

#[test]
fn flop_ratios_are_exact() {
    assert_eq!(ebt_ratio(1).unwrap(), Ratio::new(10, 3));
    assert_eq!(ebt_ratio(2).unwrap(), Ratio::new(20, 3));
    let r = flop_report(1000, 2, 10).unwrap();
    assert_eq!(r.ff_per_token, 6000);
    assert_eq!(r.per_token_flops, 40_000);
    assert_eq!(r.total, 400_000);
    assert!(ebt_ratio(0).is_err());
}

#[test]
fn training_writes_reproducible_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_train(&RunConfig::from_toml(&tiny_config(a.path(), "")).unwrap()).unwrap();
    let rb = run_train(&RunConfig::from_toml(&tiny_config(b.path(), "")).unwrap()).unwrap();
    let csv_a = std::fs::read_to_string(&ra.metrics_csv).unwrap();
    let csv_b = std::fs::read_to_string(&rb.metrics_csv).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(csv_a.lines().count(), 5);
    assert!(a.path().join("config.toml").exists());

    let (cfg, _, step) = load_checkpoint(&ra.checkpoint).unwrap();
    assert_eq!(step, 4);
    assert_eq!(cfg.seed, 4);

    // Thinking with the training step count and one candidate reproduces
    // the baseline exactly.
    let report = run_eval(&ra.checkpoint, None, Some(1), None, None).unwrap();
    assert_eq!(report.stt.stt, 0.0);
    assert_eq!(report.baseline.loss, report.thinking.loss);
    assert!((report.baseline.loss - ra.final_val_loss).abs() < 1e-12);
}

#[test]
fn width_sweep_reports_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig::from_toml(&tiny_config(dir.path(), "")).unwrap();
    let report = run_sweep(&base, SweepAxis::Width, &[8, 12, 16]).unwrap();
    assert_eq!(report.points.len(), 3);
    assert!(!report.partial);
    assert!(report.slope.is_some());
    let params: Vec<usize> = report.points.iter().map(|p| p.nonembed_params).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]));
    assert!(dir.path().join("sweep.json").exists());
    assert!(run_sweep(&base, SweepAxis::Width, &[8, 16]).is_err());
}
