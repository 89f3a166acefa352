//! Retrieval, STS and pair-classification metrics, task evaluation, the
//! truncation sweep and the distillation ablation.

mod metrics;
mod pipeline;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Embedder};
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::numerics::kernels;
use crate::training::{train_stage, truncate_and_renorm, StagePlan, MIN_MRL_DIM};

pub use metrics::{best_threshold_accuracy, ndcg_at_k, pair_accuracy, spearman, ThresholdAccuracy};
pub use pipeline::{ablation_data, ablation_pipeline, AblationConfig, AblationData, AblationRun, Replicate};

/// Rank cutoff for retrieval scores.
pub const RETRIEVAL_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Retrieval,
    Sts,
    PairClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TaskData {
    /// `relevant[i]` lists the corpus indices relevant to query `i` (gain 1).
    Retrieval {
        queries: Vec<String>,
        corpus: Vec<String>,
        relevant: Vec<Vec<usize>>,
    },
    Sts {
        pairs: Vec<(String, String)>,
        scores: Vec<f64>,
    },
    PairClassification {
        pairs: Vec<(String, String)>,
        labels: Vec<u8>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    #[serde(flatten)]
    pub data: TaskData,
}

impl EvalTask {
    pub fn kind(&self) -> TaskKind {
        match self.data {
            TaskData::Retrieval { .. } => TaskKind::Retrieval,
            TaskData::Sts { .. } => TaskKind::Sts,
            TaskData::PairClassification { .. } => TaskKind::PairClassification,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("task {}: {msg}", self.name)));
        match &self.data {
            TaskData::Retrieval {
                queries,
                corpus,
                relevant,
            } => {
                if queries.len() != relevant.len() {
                    return bad("one relevance set per query".into());
                }
                if let Some(i) = relevant.iter().position(|r| r.is_empty() || r.iter().any(|&d| d >= corpus.len())) {
                    return bad(format!("relevance set of query {i} is empty or out of range"));
                }
            }
            TaskData::Sts { pairs, scores } => {
                if pairs.len() != scores.len() || scores.iter().any(|s| !s.is_finite()) {
                    return bad("one finite gold score per pair".into());
                }
            }
            TaskData::PairClassification { pairs, labels } => {
                if pairs.len() != labels.len() || labels.iter().any(|&l| l > 1) {
                    return bad("one 0/1 label per pair".into());
                }
            }
        }
        Ok(())
    }

    fn texts(&self) -> Vec<&str> {
        match &self.data {
            TaskData::Retrieval { queries, corpus, .. } => queries.iter().chain(corpus).map(String::as_str).collect(),
            TaskData::Sts { pairs, .. } | TaskData::PairClassification { pairs, .. } => {
                pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect()
            }
        }
    }
}

pub fn read_tasks(path: &Path) -> Result<Vec<EvalTask>> {
    let tasks: Vec<EvalTask> = serde_json::from_slice(&std::fs::read(path)?)?;
    tasks.iter().try_for_each(EvalTask::validate)?;
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[EvalTask]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(tasks)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub kind: TaskKind,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub scores: Vec<TaskScore>,
    pub mean: Option<f64>,
    pub unique_texts: usize,
    pub cache_hits: usize,
}

/// Embeddings of every distinct text across `tasks`, each computed once.
pub struct EmbeddingCache {
    vectors: HashMap<String, Vec<f32>>,
    pub unique_texts: usize,
    pub cache_hits: usize,
}

impl EmbeddingCache {
    pub fn build(embedder: &dyn Embedder, tasks: &[EvalTask]) -> Result<Self> {
        let mut order: Vec<&str> = Vec::new();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        let mut refs = 0;
        for t in tasks {
            for text in t.texts() {
                refs += 1;
                if seen.insert(text, ()).is_none() {
                    order.push(text);
                }
            }
        }
        let embedded: Vec<Vec<f32>> = order.par_iter().map(|t| embedder.embed(t)).collect::<Result<_>>()?;
        Ok(EmbeddingCache {
            unique_texts: order.len(),
            cache_hits: refs - order.len(),
            vectors: order.into_iter().map(String::from).zip(embedded).collect(),
        })
    }

    /// Unit embedding truncated to `dim` (full length when `None`).
    fn get(&self, text: &str, dim: Option<usize>) -> Result<Vec<f32>> {
        let v = &self.vectors[text];
        truncate_and_renorm(v, dim.unwrap_or(v.len()))
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    kernels::dot(a, b) as f64
}

fn score_task(task: &EvalTask, cache: &EmbeddingCache, dim: Option<usize>) -> Result<f64> {
    let emb = |t: &str| cache.get(t, dim);
    match &task.data {
        TaskData::Retrieval {
            queries,
            corpus,
            relevant,
        } => {
            let docs: Vec<Vec<f32>> = corpus.iter().map(|d| emb(d)).collect::<Result<_>>()?;
            let mut total = 0.0;
            for (q, rel) in queries.iter().zip(relevant) {
                let qe = emb(q)?;
                let mut ranked: Vec<(f64, usize)> = docs.iter().enumerate().map(|(i, d)| (cosine(&qe, d), i)).collect();
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let ranking: Vec<usize> = ranked.into_iter().map(|(_, i)| i).collect();
                let gains: BTreeMap<usize, f64> = rel.iter().map(|&d| (d, 1.0)).collect();
                total += ndcg_at_k(&ranking, &gains, RETRIEVAL_K)?;
            }
            Ok(total / queries.len().max(1) as f64)
        }
        TaskData::Sts { pairs, scores } => {
            let sims: Vec<f64> = pairs
                .iter()
                .map(|(a, b)| Ok(cosine(&emb(a)?, &emb(b)?)))
                .collect::<Result<_>>()?;
            spearman(&sims, scores)
        }
        TaskData::PairClassification { pairs, labels } => {
            let sims: Vec<f64> = pairs
                .iter()
                .map(|(a, b)| Ok(cosine(&emb(a)?, &emb(b)?)))
                .collect::<Result<_>>()?;
            Ok(best_threshold_accuracy(&sims, labels)?.accuracy)
        }
    }
}

fn report_from_cache(tasks: &[EvalTask], cache: &EmbeddingCache, dim: Option<usize>) -> Result<EvalReport> {
    let scores: Vec<TaskScore> = tasks
        .iter()
        .map(|t| {
            Ok(TaskScore {
                task: t.name.clone(),
                kind: t.kind(),
                score: score_task(t, cache, dim)?,
            })
        })
        .collect::<Result<_>>()?;
    let mean = (!scores.is_empty()).then(|| scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64);
    Ok(EvalReport {
        scores,
        mean,
        unique_texts: cache.unique_texts,
        cache_hits: cache.cache_hits,
    })
}

/// Scores every task, optionally on embeddings truncated to `dim`.
pub fn evaluate(embedder: &dyn Embedder, tasks: &[EvalTask], dim: Option<usize>) -> Result<EvalReport> {
    tasks.iter().try_for_each(EvalTask::validate)?;
    let cache = EmbeddingCache::build(embedder, tasks)?;
    report_from_cache(tasks, &cache, dim)
}

/// Mean task score at each truncation dimension.
pub fn mrl_sweep(embedder: &dyn Embedder, tasks: &[EvalTask], dims: &[usize]) -> Result<Vec<(usize, f64)>> {
    if dims.is_empty() || dims.windows(2).any(|w| w[0] >= w[1]) || dims[0] < MIN_MRL_DIM {
        return Err(Error::invalid(format!(
            "sweep dims must be ascending and at least {MIN_MRL_DIM}: {dims:?}"
        )));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("sweep needs at least one task"));
    }
    tasks.iter().try_for_each(EvalTask::validate)?;
    let cache = EmbeddingCache::build(embedder, tasks)?;
    dims.iter()
        .map(|&d| Ok((d, report_from_cache(tasks, &cache, Some(d))?.mean.expect("tasks nonempty"))))
        .collect()
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "task,kind,score")?;
    for s in &report.scores {
        writeln!(w, "{},{:?},{}", s.task, s.kind, s.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "dim,mean_score")?;
    for (d, s) in rows {
        writeln!(w, "{d},{s}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub with_distillation: f64,
    pub without_distillation: f64,
    pub delta: f64,
}

/// Trains two copies of `student_init` on the same batches and seed, one
/// distilled from `teacher` with `plan.loss.distill_weight`, one without a
/// teacher, and compares their mean scores on `tasks`.
pub fn ablation_distill(
    student_init: &EmbeddingModel<f32>,
    teacher: &EmbeddingModel<f32>,
    batches: &[Batch],
    plan: &StagePlan,
    tasks: &[EvalTask],
) -> Result<AblationReport> {
    if plan.loss.distill_weight <= 0.0 {
        return Err(Error::invalid("the distilled arm needs a positive distill_weight"));
    }
    let mut with = plan.clone();
    if with.teacher.is_none() {
        with.teacher = Some("teacher".into());
    }
    let mut without = plan.clone();
    without.teacher = None;
    without.loss.distill_weight = 0.0;
    let a = train_stage(student_init.clone(), batches, &with, Some(teacher), None)?;
    let b = train_stage(student_init.clone(), batches, &without, None, None)?;
    let mean = |m: &EmbeddingModel<f32>| -> Result<f64> {
        evaluate(m, tasks, None)?
            .mean
            .ok_or_else(|| Error::invalid("ablation needs at least one task"))
    };
    let (sa, sb) = (mean(&a.model)?, mean(&b.model)?);
    Ok(AblationReport {
        with_distillation: sa,
        without_distillation: sb,
        delta: sa - sb,
    })
}
