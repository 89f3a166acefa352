//! Matryoshka InfoNCE, embedding distillation, AdamW and the stage trainer.

mod optimizer;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::normalize;
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

pub use optimizer::{adamw_step, load_optimizer, save_optimizer, AdamWConfig, OptimizerState};
pub use trainer::{
    batch_loss_and_grads, batch_loss_graph, batch_texts, train_stage, write_metrics_csv, BatchLayout, LossNodes, LossParts,
    StagePlan, StepMetrics, TrainOutcome,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_DISTILL_WEIGHT: f64 = 1.0;
pub const MIN_MRL_DIM: usize = 8;
/// Allowed deviation from unit norm for embeddings entering the loss.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub mrl_dims: Vec<usize>,
    pub mrl_weights: Vec<f64>,
    pub distill_weight: f64,
}

/// Powers of two from 8 below `hidden`, then `hidden` itself.
pub fn default_mrl_dims(hidden: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = std::iter::successors(Some(MIN_MRL_DIM), |d| Some(d * 2))
        .take_while(|&d| d < hidden)
        .collect();
    dims.push(hidden);
    dims
}

impl LossConfig {
    pub fn for_hidden(hidden: usize) -> Self {
        let mrl_dims = default_mrl_dims(hidden);
        LossConfig {
            temperature: DEFAULT_TEMPERATURE,
            mrl_weights: vec![1.0; mrl_dims.len()],
            mrl_dims,
            distill_weight: DEFAULT_DISTILL_WEIGHT,
        }
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(Error::invalid(format!("distill_weight must be >= 0, got {}", self.distill_weight)));
        }
        if self.mrl_dims.is_empty() || self.mrl_dims.len() != self.mrl_weights.len() {
            return Err(Error::invalid("mrl_dims and mrl_weights must be nonempty and of equal length"));
        }
        if self.mrl_dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("mrl_dims must be strictly ascending: {:?}", self.mrl_dims)));
        }
        if self.mrl_dims[0] < MIN_MRL_DIM.min(hidden) {
            return Err(Error::invalid(format!("smallest mrl dim must be at least {MIN_MRL_DIM}")));
        }
        if *self.mrl_dims.last().expect("nonempty") != hidden {
            return Err(Error::invalid(format!(
                "last mrl dim {} must equal hidden size {hidden}",
                self.mrl_dims.last().expect("nonempty")
            )));
        }
        if self.mrl_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("mrl weights must be positive"));
        }
        Ok(())
    }
}

/// Leading `d` coordinates of `embedding`, rescaled to unit length.
pub fn truncate_and_renorm<F: Scalar>(embedding: &[F], d: usize) -> Result<Vec<F>> {
    if d == 0 || d > embedding.len() {
        return Err(Error::invalid(format!(
            "truncation dim {d} outside 1..={}",
            embedding.len()
        )));
    }
    let mut out = embedding[..d].to_vec();
    normalize(&mut out);
    Ok(out)
}

fn check_unit_rows<F: Scalar>(t: &Tensor<F>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = crate::numerics::kernels::l2_norm(t.row(r)).as_f64();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("{what} row {r} has norm {n}, expected unit length")));
        }
    }
    Ok(())
}

/// InfoNCE over unit-norm rows already in the graph.
///
/// `neg_owner[j]` is the query that explicit negative row `j` of `negs`
/// belongs to. Query `i` scores its positive, its own negatives and, with
/// `use_in_batch`, every other positive.
pub fn info_nce_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    queries: NodeId,
    positives: NodeId,
    negs: Option<NodeId>,
    neg_owner: &[usize],
    temperature: f64,
    use_in_batch: bool,
) -> Result<NodeId> {
    let b = g.value(queries).rows();
    if g.value(positives).rows() != b {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: g.value(queries).shape().to_vec(),
            right: g.value(positives).shape().to_vec(),
        });
    }
    check_unit_rows(g.value(queries), "query")?;
    check_unit_rows(g.value(positives), "positive")?;
    let m = match negs {
        Some(n) => {
            check_unit_rows(g.value(n), "negative")?;
            g.value(n).rows()
        }
        None => 0,
    };
    if neg_owner.len() != m || neg_owner.iter().any(|&o| o >= b) {
        return Err(Error::invalid("negative owners must index queries, one per negative row"));
    }
    let mut mask = vec![false; b * (b + m)];
    for i in 0..b {
        for j in 0..b {
            mask[i * (b + m) + j] = i == j || use_in_batch;
        }
        let candidates = mask[i * (b + m)..i * (b + m) + b].iter().filter(|&&x| x).count()
            + neg_owner.iter().filter(|&&o| o == i).count();
        if candidates < 2 {
            return Err(Error::invalid(format!("query {i} has no negative candidate")));
        }
    }
    for (j, &o) in neg_owner.iter().enumerate() {
        mask[o * (b + m) + b + j] = true;
    }
    let docs = match negs {
        Some(n) => g.concat_rows(&[positives, n])?,
        None => positives,
    };
    let docs_t = g.transpose(docs)?;
    let sims = g.matmul(queries, docs_t)?;
    let logits = g.scale(sims, F::of(1.0 / temperature))?;
    let targets: Vec<usize> = (0..b).collect();
    g.cross_entropy(logits, &targets, Some(&mask))
}

fn rows_tensor<F: Scalar>(rows: &[Vec<F>]) -> Result<Tensor<F>> {
    Tensor::from_rows(rows)
}

/// Value-only InfoNCE over unit vectors; `negs[i]` are query `i`'s explicit
/// negatives.
pub fn info_nce<F: Scalar>(
    queries: &[Vec<F>],
    positives: &[Vec<F>],
    negs: &[Vec<Vec<F>>],
    temperature: f64,
    use_in_batch: bool,
) -> Result<F> {
    if negs.len() != queries.len() {
        return Err(Error::invalid("one negative list per query"));
    }
    let mut g = Graph::new();
    let q = g.constant(rows_tensor(queries)?);
    let p = g.constant(rows_tensor(positives)?);
    let flat: Vec<Vec<F>> = negs.iter().flatten().cloned().collect();
    let owner: Vec<usize> = negs.iter().enumerate().flat_map(|(i, l)| std::iter::repeat_n(i, l.len())).collect();
    let n = if flat.is_empty() { None } else { Some(g.constant(rows_tensor(&flat)?)) };
    let loss = info_nce_graph(&mut g, q, p, n, &owner, temperature, use_in_batch)?;
    Ok(g.value(loss).item())
}

/// Weighted mean over `cfg.mrl_dims` of InfoNCE on truncated and
/// re-normalized raw embeddings.
pub fn matryoshka_info_nce_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    raw_queries: NodeId,
    raw_positives: NodeId,
    raw_negs: Option<NodeId>,
    neg_owner: &[usize],
    cfg: &LossConfig,
    use_in_batch: bool,
) -> Result<NodeId> {
    let total_weight: f64 = cfg.mrl_weights.iter().sum();
    let mut acc: Option<NodeId> = None;
    for (&d, &w) in cfg.mrl_dims.iter().zip(&cfg.mrl_weights) {
        let unit = |x: NodeId, g: &mut Graph<'_, F>| -> Result<NodeId> {
            let t = g.slice_cols(x, 0, d)?;
            g.l2_normalize_rows(t)
        };
        let q = unit(raw_queries, g)?;
        let p = unit(raw_positives, g)?;
        let n = raw_negs.map(|n| unit(n, g)).transpose()?;
        let l = info_nce_graph(g, q, p, n, neg_owner, cfg.temperature, use_in_batch)?;
        let l = g.scale(l, F::of(w / total_weight))?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("mrl_dims is empty"))
}

/// Value-only matryoshka InfoNCE over raw (un-normalized) embeddings.
pub fn matryoshka_info_nce<F: Scalar>(
    raw_queries: &[Vec<F>],
    raw_positives: &[Vec<F>],
    raw_negs: &[Vec<Vec<F>>],
    cfg: &LossConfig,
    use_in_batch: bool,
) -> Result<F> {
    let mut g = Graph::new();
    let q = g.constant(rows_tensor(raw_queries)?);
    let p = g.constant(rows_tensor(raw_positives)?);
    let flat: Vec<Vec<F>> = raw_negs.iter().flatten().cloned().collect();
    let owner: Vec<usize> = raw_negs.iter().enumerate().flat_map(|(i, l)| std::iter::repeat_n(i, l.len())).collect();
    let n = if flat.is_empty() { None } else { Some(g.constant(rows_tensor(&flat)?)) };
    let loss = matryoshka_info_nce_graph(&mut g, q, p, n, &owner, cfg, use_in_batch)?;
    Ok(g.value(loss).item())
}

/// Teacher rows truncated to `student_dim` and re-normalized.
pub fn project_teacher<F: Scalar>(teacher: &[Vec<F>], student_dim: usize) -> Result<Vec<Vec<F>>> {
    teacher
        .iter()
        .map(|t| {
            if t.len() < student_dim {
                return Err(Error::invalid(format!(
                    "teacher dim {} is smaller than student dim {student_dim}",
                    t.len()
                )));
            }
            truncate_and_renorm(t, student_dim)
        })
        .collect()
}

/// Mean squared difference between unit student rows and the teacher rows
/// projected to the student dimension.
pub fn distill_loss<F: Scalar>(student: &[Vec<F>], teacher: &[Vec<F>]) -> Result<F> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::invalid("distillation needs one teacher row per student row"));
    }
    let d = student[0].len();
    let projected = project_teacher(teacher, d)?;
    let mut g = Graph::new();
    let s = g.constant(rows_tensor(student)?);
    check_unit_rows(g.value(s), "student")?;
    let t = g.constant(rows_tensor(&projected)?);
    let loss = g.mse(s, t)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests;
