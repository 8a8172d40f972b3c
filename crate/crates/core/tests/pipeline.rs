use std::path::Path;

use melcompress::compress::Technique;
use melcompress::encoder::load_checkpoint;
use melcompress::pipeline::{self, read_metrics, strip_timing, RunConfig, Session};

fn tiny(out: &Path) -> RunConfig {
    let sets = [
        format!("out_dir={}", out.display()),
        "seed=11".into(),
        "corpus.n_utts=30".into(),
        "corpus.generator.min_len=12".into(),
        "corpus.generator.max_len=20".into(),
        "corpus.generator.dim=8".into(),
        "kmeans.clusters=4".into(),
        "kmeans.iters=5".into(),
        "encoder.layers=2".into(),
        "encoder.d_model=8".into(),
        "encoder.heads=2".into(),
        "encoder.ffn_dim=48".into(),
        "pretrain.epochs=2".into(),
        "pretrain.checkpoint_every=1".into(),
        "pretrain.hyper.batch_size=8".into(),
        "compress.weights.stop_density=70".into(),
        "compress.weights.max_retrain_steps=3".into(),
        "compress.heads.retrain_steps=2".into(),
        "compress.ffn.retrain_steps=2".into(),
        "compress.ffn.stages=2".into(),
        "distill.steps=4".into(),
        "distill.log_every=2".into(),
        "probe.epochs=1".into(),
        "profile.repeats=3".into(),
        "profile.rtf_utts=2".into(),
    ];
    RunConfig::load(None, &sets).unwrap()
}

fn full_run(out: &Path) -> String {
    let cfg = tiny(out);
    let step = |name: &str| Session::open(cfg.clone(), name).unwrap();
    pipeline::gen_corpus(&mut step("gen-corpus")).unwrap();
    pipeline::kmeans(&mut step("kmeans")).unwrap();
    pipeline::pretrain(&mut step("pretrain")).unwrap();
    pipeline::prune(&mut step("prune-weights"), Technique::Weights, None).unwrap();
    pipeline::prune(&mut step("prune-heads"), Technique::Heads, None).unwrap();
    pipeline::prune(&mut step("prune-ffn"), Technique::Ffn, None).unwrap();
    pipeline::distill(&mut step("distill"), None).unwrap();
    pipeline::probe(&mut step("probe"), None, Some(1), "prefix-1").unwrap();
    pipeline::profile(&mut step("profile"), None, Some(1), "prefix-1").unwrap();
    pipeline::export_plots(&mut step("export-plots")).unwrap();
    std::fs::read_to_string(out.join("metrics.jsonl")).unwrap()
}

#[test]
fn end_to_end_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = full_run(&dir.path().join("a"));
    let b = full_run(&dir.path().join("b"));
    assert_eq!(strip_timing(&a).unwrap(), strip_timing(&b).unwrap());

    let root = dir.path().join("a");
    let records = read_metrics(&root.join("metrics.jsonl")).unwrap();
    let trace: Vec<f64> = records
        .iter()
        .filter(|r| r.series == "weights" && r.kind == "stage")
        .map(|r| r.metrics["target_density"])
        .collect();
    assert_eq!(trace, vec![1.0, 0.8, 0.7]);
    assert!(records.windows(2).all(|w| w[1].seq == w[0].seq + 1));

    for name in ["weights.csv", "heads-weight.csv", "ffn.csv", "distill.csv", "prefix-1.csv", "probes.csv"] {
        assert!(root.join("exports").join(name).exists(), "{name}");
    }
    let weights_csv = std::fs::read_to_string(root.join("exports/weights.csv")).unwrap();
    assert!(weights_csv.starts_with("stage,density,params_nonzero,macs_per_sec"));
    assert_eq!(weights_csv.lines().count(), 4);

    let student = load_checkpoint(&root.join("checkpoints/distill/student.mhck")).unwrap();
    assert_eq!(student.weights.depth(), 2);
    assert!(student.metadata.contains_key("student_of"));
    let echoed: RunConfig = serde_json::from_str(&std::fs::read_to_string(root.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, tiny(&root));
}

#[test]
fn pretrained_model_profiles_at_full_density() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_corpus(&mut Session::open(cfg.clone(), "gen-corpus").unwrap()).unwrap();
    pipeline::kmeans(&mut Session::open(cfg.clone(), "kmeans").unwrap()).unwrap();
    pipeline::pretrain(&mut Session::open(cfg.clone(), "pretrain").unwrap()).unwrap();
    let report = pipeline::profile(&mut Session::open(cfg, "profile").unwrap(), None, None, "dense").unwrap();
    assert!(report.densities.values().all(|&d| d == 1.0));
    assert_eq!(report.params_total, report.params_nonzero);
}

#[test]
fn commands_out_of_order_are_contract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = pipeline::kmeans(&mut Session::open(cfg.clone(), "kmeans").unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    pipeline::gen_corpus(&mut Session::open(cfg.clone(), "gen-corpus").unwrap()).unwrap();
    let err = pipeline::pretrain(&mut Session::open(cfg, "pretrain").unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
