use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use embedforge::data::{
    assign_instructions, attach_mined_negatives, cap_per_source, consolidate_all, make_batches, read_records,
    read_samples, read_templates, stats_report, write_samples, CanonicalSample,
};
use embedforge::eval::{
    ablation_pipeline, evaluate, mrl_sweep, read_tasks, write_eval_csv, write_sweep_csv, write_tasks, AblationConfig,
};
use embedforge::model::{self, load_checkpoint, save_checkpoint, EmbeddingModel, ModelConfig};
use embedforge::pruning::{calibration_from_texts, prune_model, LayerStrategy, PruneSpec};
use embedforge::synth::{pair_task, retrieval_samples, retrieval_task, sts_task, symmetric_samples, World, WorldConfig};
use embedforge::training::{load_optimizer, save_optimizer, train_stage, write_metrics_csv, StagePlan};

use crate::error::{AtPath, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Globals {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.unwrap_or(0))
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out.as_deref().ok_or_else(|| CliError::usage("--out <dir> is required"))?;
        fs::create_dir_all(dir).at(dir)?;
        Ok(dir)
    }

    fn out_file(&self) -> Result<&Path> {
        let path = self.out.as_deref().ok_or_else(|| CliError::usage("--out <csv> is required"))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).at(parent)?;
        }
        Ok(path)
    }

    fn config_path(&self) -> Result<&Path> {
        self.config.as_deref().ok_or_else(|| CliError::usage("--config <json> is required"))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).at(path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).at(path)?;
    fs::write(path, bytes).at(path)
}

fn load_model(path: &Path) -> Result<EmbeddingModel<f32>> {
    load_checkpoint(path).at(path)
}

fn sample_texts(samples: &[CanonicalSample]) -> Vec<String> {
    samples
        .iter()
        .flat_map(|s| std::iter::once(&s.query).chain(std::iter::once(&s.positive)).chain(&s.negatives))
        .cloned()
        .collect()
}

pub fn synth(g: &Globals, samples: usize, symmetric: usize, queries: usize, docs: usize, pairs: usize) -> Result<()> {
    let out = g.out_dir()?;
    let world_cfg: WorldConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if world_cfg.doc_words > world_cfg.words_per_topic || world_cfg.query_words > world_cfg.doc_words || world_cfg.topics < 2 {
        return Err(CliError::usage(
            "world needs at least 2 topics and query_words ≤ doc_words ≤ words_per_topic",
        ));
    }
    let mut rng = g.rng();
    let world = World::new(world_cfg, &mut rng);
    let mut train = retrieval_samples(&world, samples, "synthetic", &mut rng);
    train.extend(symmetric_samples(&world, symmetric, "synthetic-symmetric", &mut rng));
    let tasks = vec![
        retrieval_task(&world, "retrieval", queries, docs, &mut rng),
        sts_task(&world, "sts", pairs, &mut rng),
        pair_task(&world, "pairs", pairs, &mut rng),
    ];
    let train_path = out.join("train.jsonl");
    write_samples(&train_path, &train).at(&train_path)?;
    let tasks_path = out.join("tasks.json");
    write_tasks(&tasks_path, &tasks).at(&tasks_path)?;
    eprintln!("wrote {} samples and {} tasks to {}", train.len(), tasks.len(), out.display());
    Ok(())
}

fn jsonl_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .at(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()
                .at(p)?;
            found.retain(|f| f.extension().is_some_and(|e| e == "jsonl"));
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub fn consolidate(g: &Globals, inputs: &[PathBuf], cap: Option<usize>, templates: Option<&Path>) -> Result<()> {
    let out = g.out_dir()?;
    let mut records = Vec::new();
    for f in jsonl_inputs(inputs)? {
        records.extend(read_records(&f).at(&f)?);
    }
    let mut rng = g.rng();
    let consolidated = consolidate_all(&records, &mut rng)?;
    let mut samples = consolidated.samples;
    if let Some(cap) = cap {
        samples = cap_per_source(samples, cap, &mut rng);
    }
    if let Some(t) = templates {
        assign_instructions(&mut samples, &read_templates(t).at(t)?);
    }
    let path = out.join("canonical.jsonl");
    write_samples(&path, &samples).at(&path)?;
    write_json(&out.join("stats.json"), &stats_report(&samples))?;
    eprintln!(
        "{} records → {} samples ({} classed records without a pair)",
        records.len(),
        samples.len(),
        consolidated.skipped
    );
    Ok(())
}

pub fn mine(g: &Globals, data: &Path, checkpoint: &Path, k: usize, skip_top: usize) -> Result<()> {
    let out = g.out_dir()?;
    let mut samples = read_samples(data).at(data)?;
    let model = load_model(checkpoint)?;
    attach_mined_negatives(&mut samples, &model, k, skip_top)?;
    let path = out.join("mined.jsonl");
    write_samples(&path, &samples).at(&path)?;
    Ok(())
}

/// Training plan file: a stage plan plus where its inputs live. Relative
/// paths are resolved against the plan file's directory.
#[derive(Deserialize)]
struct TrainPlanFile {
    #[serde(flatten)]
    plan: StagePlan,
    data: Vec<PathBuf>,
    #[serde(default)]
    init: Option<PathBuf>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    templates: Option<PathBuf>,
}

pub fn train(g: &Globals, resume: Option<&Path>, init: Option<&Path>, teacher: Option<&Path>) -> Result<()> {
    let plan_path = g.config_path()?;
    let file: TrainPlanFile = read_json(plan_path)?;
    let base = plan_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let out = g.out_dir()?;

    let mut plan = file.plan;
    if let Some(seed) = g.seed {
        plan.seed = seed;
    }
    plan.teacher = teacher.map(Path::to_path_buf).or_else(|| plan.teacher.as_deref().map(resolve));

    let (model, optimizer) = if let Some(dir) = resume {
        let model = load_model(dir)?;
        let opt = load_optimizer(dir, model.tensors()).at(dir)?;
        (model, Some(opt))
    } else if let Some(p) = init.map(Path::to_path_buf).or_else(|| file.init.as_deref().map(resolve)) {
        (load_model(&p)?, None)
    } else if let Some(cfg) = file.model {
        (EmbeddingModel::init(cfg, plan.seed)?, None)
    } else {
        return Err(CliError::usage("plan needs `init`, `model`, or --init/--resume"));
    };
    let teacher_model = plan.teacher.as_deref().map(load_model).transpose()?;

    let mut samples = Vec::new();
    for p in &file.data {
        let p = resolve(p);
        samples.extend(read_samples(&p).at(&p)?);
    }
    if let Some(t) = &file.templates {
        let t = resolve(t);
        assign_instructions(&mut samples, &read_templates(&t).at(&t)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let batches = make_batches(&samples, plan.batch_size, plan.stage, &mut rng)?;
    eprintln!("training on {} samples in {} batches", samples.len(), batches.len());

    let outcome = train_stage(model, &batches, &plan, teacher_model.as_ref(), optimizer)?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&outcome.model, &ckpt).at(&ckpt)?;
    save_optimizer(&outcome.optimizer, &ckpt).at(&ckpt)?;
    let metrics = out.join("metrics.csv");
    write_metrics_csv(&metrics, &outcome.metrics).at(&metrics)?;
    if let Some(last) = outcome.metrics.last() {
        eprintln!("step {} loss {:.6}", last.step, last.total_loss);
    }
    Ok(())
}

pub fn prune(
    g: &Globals,
    checkpoint: &Path,
    (hidden, mlp, layers): (usize, usize, usize),
    calibration: &Path,
    calibration_size: usize,
    strategy: LayerStrategy,
) -> Result<()> {
    let out = g.out_dir()?;
    let model = load_model(checkpoint)?;
    let samples = read_samples(calibration).at(calibration)?;
    let mut rng = g.rng();
    let cal = calibration_from_texts(&sample_texts(&samples), calibration_size, &model.tokenizer(), &mut rng);
    let mut spec = PruneSpec::new(hidden, mlp, layers, cal);
    spec.layer_strategy = strategy;
    let (pruned, report) = prune_model(&model, &spec)?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&pruned, &ckpt).at(&ckpt)?;
    let report_path = out.join("prune_report.json");
    report.write(&report_path).at(&report_path)?;
    Ok(())
}

pub fn eval(g: &Globals, checkpoint: &Path, tasks: &Path, dim: Option<usize>) -> Result<()> {
    let out = g.out_file()?;
    let model = load_model(checkpoint)?;
    let tasks = read_tasks(tasks).at(tasks)?;
    let report = evaluate(&model, &tasks, dim)?;
    write_eval_csv(out, &report).at(out)?;
    for s in &report.scores {
        println!("{}\t{:?}\t{:.6}", s.task, s.kind, s.score);
    }
    if let Some(m) = report.mean {
        println!("mean\t\t{m:.6}");
    }
    eprintln!("{} unique texts, {} cache hits", report.unique_texts, report.cache_hits);
    Ok(())
}

pub fn sweep(g: &Globals, checkpoint: &Path, tasks: &Path, dims: &[usize]) -> Result<()> {
    let out = g.out_file()?;
    let model = load_model(checkpoint)?;
    let tasks = read_tasks(tasks).at(tasks)?;
    let rows = mrl_sweep(&model, &tasks, dims)?;
    write_sweep_csv(out, &rows).at(out)?;
    for (d, s) in rows {
        println!("{d}\t{s:.6}");
    }
    Ok(())
}

pub fn param_count(g: &Globals) -> Result<()> {
    let path = g.config_path()?;
    let cfg: ModelConfig = read_json(path)?;
    cfg.validate().at(path)?;
    let count = model::param_count(&cfg);
    println!("{}", serde_json::to_string_pretty(&count).expect("plain struct"));
    println!("total {:.1}M", count.total as f64 / 1e6);
    if g.out.is_some() {
        write_json(&g.out_dir()?.join("param_count.json"), &count)?;
    }
    Ok(())
}

pub fn ablate(g: &Globals, print_config: bool) -> Result<()> {
    let mut cfg = match &g.config {
        Some(p) => read_json(p)?,
        None => AblationConfig::desk(),
    };
    if print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("plain struct"));
        return Ok(());
    }
    if let Some(seed) = g.seed {
        cfg.data_seed = seed;
    }
    let out = g.out_dir()?;
    write_json(&out.join("ablation_config.json"), &cfg)?;
    let run = ablation_pipeline(&cfg)?;

    save_checkpoint(&run.teacher, &out.join("teacher")).at(out)?;
    save_checkpoint(&run.student_init, &out.join("student_init")).at(out)?;
    let path = out.join("teacher_metrics.csv");
    write_metrics_csv(&path, &run.teacher_metrics).at(&path)?;
    let path = out.join("teacher_sweep.csv");
    write_sweep_csv(&path, &run.teacher_sweep).at(&path)?;
    let path = out.join("prune_report.json");
    run.prune_report.write(&path).at(&path)?;

    let path = out.join("ablation.csv");
    let mut csv = String::from("seed,with_distillation,without_distillation,delta\n");
    for r in &run.replicates {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.seed, r.report.with_distillation, r.report.without_distillation, r.report.delta
        ));
    }
    fs::write(&path, csv).at(&path)?;

    let mut stdout = std::io::stdout().lock();
    for r in &run.replicates {
        writeln!(
            stdout,
            "seed {}: with {:.4} without {:.4} delta {:+.4}",
            r.seed, r.report.with_distillation, r.report.without_distillation, r.report.delta
        )
        .ok();
    }
    writeln!(stdout, "distillation wins {}/{}", run.wins(), run.replicates.len()).ok();
    Ok(())
}

pub fn stats(g: &Globals, data: &Path) -> Result<()> {
    let samples = read_samples(data).at(data)?;
    let report = stats_report(&samples);
    println!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
    if g.out.is_some() {
        write_json(&g.out_dir()?.join("stats.json"), &report)?;
    }
    Ok(())
}
