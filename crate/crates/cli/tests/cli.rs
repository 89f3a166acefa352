use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use embedforge::eval::AblationConfig;
use embedforge::model::{save_checkpoint, EmbeddingModel, ModelConfig};
use embedforge::training::LossConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embedforge")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn table1(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/table1/{name}.json"))
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        max_seq_len: 64,
        ..ModelConfig::toy(16, 32, 2, 2, 1, 8)
    }
}

/// Synthetic data plus a stage-1 plan that builds a fresh toy model.
fn setup(dir: &Path) -> PathBuf {
    ok(&["synth", "--samples", "48", "--queries", "12", "--docs", "30", "--pairs", "20", "--out", p(dir)]);
    let plan = serde_json::json!({
        "stage": 1,
        "learning_rate": 3e-3,
        "epochs": 2,
        "batch_size": 8,
        "loss": LossConfig::for_hidden(16),
        "seed": 3,
        "data": ["train.jsonl"],
        "model": toy_config(),
    });
    let path = dir.join("plan.json");
    fs::write(&path, serde_json::to_vec_pretty(&plan).unwrap()).unwrap();
    path
}

#[test]
fn param_count_of_base_config() {
    let stdout = ok(&["param-count", "--config", p(&table1("0.6B"))]);
    let v: serde_json::Value = serde_json::from_str(stdout.split("\ntotal").next().unwrap()).unwrap();
    let total = v["total"].as_f64().unwrap();
    assert!((total / 596e6 - 1.0).abs() < 0.02, "{total}");
}

#[test]
fn train_prune_eval_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = setup(d);
    ok(&["train", "--config", p(&plan), "--out", p(&d.join("run"))]);
    let ckpt = d.join("run/checkpoint");
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,total_loss,contrastive_loss,distill_loss"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 6);
    assert!(embedforge::model::load_checkpoint(&ckpt).is_ok());

    ok(&[
        "prune", "--checkpoint", p(&ckpt), "--hidden", "8", "--mlp", "16", "--layers", "1",
        "--calibration", p(&d.join("train.jsonl")), "--calibration-size", "8", "--out", p(&d.join("small")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("small/prune_report.json")).unwrap()).unwrap();
    assert_eq!(report["target_config"]["hidden_size"], 8);

    let tasks = d.join("tasks.json");
    let stdout = ok(&["eval", "--checkpoint", p(&d.join("small/checkpoint")), "--tasks", p(&tasks), "--out", p(&d.join("eval.csv"))]);
    assert!(stdout.contains("mean"));
    let csv = fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("task,kind,score\nretrieval,Retrieval,"));

    ok(&["sweep-mrl", "--checkpoint", p(&ckpt), "--tasks", p(&tasks), "--dims", "8,16", "--out", p(&d.join("sweep.csv"))]);
    let sweep = fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.lines().nth(2).unwrap().starts_with("16,"));
}

#[test]
fn sweep_on_untrained_model_emits_one_row_per_dim() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let model = EmbeddingModel::init(toy_config(), 1).unwrap();
    save_checkpoint(&model, &d.join("m")).unwrap();
    ok(&["sweep-mrl", "--checkpoint", p(&d.join("m")), "--tasks", p(&d.join("tasks.json")), "--dims", "8,16", "--out", p(&d.join("s.csv"))]);
    assert_eq!(fs::read_to_string(d.join("s.csv")).unwrap().lines().count(), 3);
}

#[test]
fn resume_continues_step_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = setup(d);
    ok(&["train", "--config", p(&plan), "--out", p(&d.join("a"))]);
    ok(&["train", "--config", p(&plan), "--resume", p(&d.join("a/checkpoint")), "--out", p(&d.join("b"))]);
    let steps: Vec<u64> = fs::read_to_string(d.join("b/metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (13..=24).collect::<Vec<_>>());
}

#[test]
fn training_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = setup(d);
    ok(&["train", "--config", p(&plan), "--out", p(&d.join("x"))]);
    ok(&["train", "--config", p(&plan), "--threads", "3", "--out", p(&d.join("y"))]);
    for f in ["metrics.csv", "checkpoint/weights.bin", "checkpoint/optimizer.bin", "checkpoint/manifest.json"] {
        assert_eq!(fs::read(d.join("x").join(f)).unwrap(), fs::read(d.join("y").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_teacher_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = setup(d);
    let out = run(&["train", "--config", p(&plan), "--teacher", p(&d.join("nope")), "--out", p(&d.join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn non_finite_loss_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = setup(d);
    let mut model = EmbeddingModel::init(toy_config(), 1).unwrap();
    model.tensors_mut()[0].data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    save_checkpoint(&model, &d.join("nan")).unwrap();
    let out = run(&["train", "--config", p(&plan), "--init", p(&d.join("nan")), "--out", p(&d.join("t"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn consolidate_counts_malformed_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("in");
    fs::create_dir_all(&input).unwrap();
    let lines = [
        r#"{"query":"q1","pos":"p1","negs":["n1"],"source":"r","task_type":"retrieval"}"#,
        r#"{"query":"q2","pos":"p2","source":"r","task_type":"retrieval"}"#,
        r#"{"text":"a","class":"x","source":"c","task_type":"clustering"}"#,
        r#"{"text":"b","class":"x","source":"c","task_type":"clustering"}"#,
        r#"{"text":"c","class":"y","source":"c","task_type":"clustering"}"#,
        r#"{"text":"t","label":"yes","labels":["yes","no"],"source":"b","task_type":"nli"}"#,
    ];
    fs::write(input.join("a.jsonl"), lines.join("\n")).unwrap();
    ok(&["consolidate", "--input", p(&input), "--out", p(&d.join("out"))]);
    let n = fs::read_to_string(d.join("out/canonical.jsonl")).unwrap().lines().count();
    // two retrieval, one binary, and the two class-x anchors (class y has no positive)
    assert_eq!(n, 5);
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(d.join("out/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total"], 5);

    fs::write(input.join("b.jsonl"), "{\"query\":\"q\",\"pos\":\"p\",\"source\":\"r\",\"task_type\":\"retrieval\"}\n{\"text\":\"oops\"}\n").unwrap();
    let bad = run(&["consolidate", "--input", p(&input), "--out", p(&d.join("bad"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let empty = d.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    ok(&["consolidate", "--input", p(&empty), "--out", p(&d.join("e"))]);
    assert_eq!(fs::read_to_string(d.join("e/canonical.jsonl")).unwrap(), "");
}

#[test]
fn mine_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let model = EmbeddingModel::init(toy_config(), 2).unwrap();
    save_checkpoint(&model, &d.join("m")).unwrap();
    ok(&["mine", "--data", p(&d.join("train.jsonl")), "--checkpoint", p(&d.join("m")), "--k", "2", "--out", p(&d.join("mined"))]);
    let mined = embedforge::data::read_samples(&d.join("mined/mined.jsonl")).unwrap();
    assert_eq!(mined.len(), 48);
    assert!(mined.iter().all(|s| (2..=3).contains(&s.negatives.len())));
    let stdout = ok(&["stats", "--data", p(&d.join("mined/mined.jsonl"))]);
    let stats: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(stats["by_format"]["Retrieval"], 48);
}

fn tiny_ablation() -> AblationConfig {
    let mut cfg = AblationConfig::desk();
    cfg.corpus_size = 64;
    cfg.eval_queries = 10;
    cfg.eval_corpus = 30;
    cfg.teacher = toy_config();
    cfg.teacher_plan.loss = LossConfig::for_hidden(16);
    cfg.teacher_plan.epochs = 1;
    cfg.teacher_plan.batch_size = 16;
    cfg.student_hidden = 8;
    cfg.student_mlp = 16;
    cfg.student_layers = 1;
    cfg.calibration_size = 8;
    cfg.student_samples = 16;
    cfg.student_plan.loss = LossConfig::for_hidden(8);
    cfg.student_plan.epochs = 2;
    cfg.student_plan.batch_size = 8;
    cfg.replicate_seeds = vec![1, 2];
    cfg.sweep_dims = vec![8, 16];
    cfg
}

#[test]
fn ablate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("ablation.json");
    fs::write(&cfg, serde_json::to_vec_pretty(&tiny_ablation()).unwrap()).unwrap();
    let first = ok(&["ablate", "--config", p(&cfg), "--out", p(&d.join("a"))]);
    ok(&["ablate", "--config", p(&cfg), "--out", p(&d.join("b"))]);
    assert!(first.contains("distillation wins"));
    for f in ["ablation.csv", "teacher_sweep.csv", "teacher_metrics.csv", "prune_report.json", "teacher/weights.bin"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("a/ablation.csv")).unwrap().lines().count(), 3);

    let printed = ok(&["ablate", "--print-config"]);
    let parsed: AblationConfig = serde_json::from_str(&printed).unwrap();
    assert_eq!(parsed, AblationConfig::desk());
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&["param-count"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--checkpoint", "/nonexistent", "--tasks", "/nonexistent", "--out", "/tmp/x.csv"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}
