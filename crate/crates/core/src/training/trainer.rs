use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{matryoshka_info_nce_graph, project_teacher, AdamWConfig, LossConfig, OptimizerState};
use crate::data::{apply_instructions, Batch, Format, Stage, DEFAULT_DOC_INSTRUCTION_PROB};
use crate::error::{Error, Result};
use crate::model::{EmbeddingModel, TokenId};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

/// Sequences whose gradients are computed together before being summed
/// into the running total. Fixed so the summation order never depends on
/// the worker count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    pub loss: LossConfig,
    pub seed: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_doc_prob")]
    pub doc_instruction_prob: f64,
}

fn default_doc_prob() -> f64 {
    DEFAULT_DOC_INSTRUCTION_PROB
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total_loss: f64,
    pub contrastive_loss: f64,
    pub distill_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub contrastive: f64,
    pub distill: f64,
}

pub struct TrainOutcome {
    pub model: EmbeddingModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Row layout of a batch's texts: queries, then positives, then every
/// explicit negative tagged with its query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub queries: usize,
    pub neg_owner: Vec<usize>,
}

impl BatchLayout {
    pub fn texts(&self) -> usize {
        2 * self.queries + self.neg_owner.len()
    }
}

pub fn batch_texts(batch: &Batch) -> (Vec<String>, BatchLayout) {
    let mut texts: Vec<String> = batch.samples.iter().map(|s| s.query.clone()).collect();
    texts.extend(batch.samples.iter().map(|s| s.positive.clone()));
    let mut neg_owner = Vec::new();
    for (i, s) in batch.samples.iter().enumerate() {
        for n in &s.negatives {
            texts.push(n.clone());
            neg_owner.push(i);
        }
    }
    let layout = BatchLayout {
        queries: batch.samples.len(),
        neg_owner,
    };
    (texts, layout)
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub contrastive: NodeId,
    pub distill: Option<NodeId>,
}

/// Builds the batch objective on `raw`, the stacked un-normalized EOS states
/// laid out per `layout`. `teacher` holds unit teacher rows already reduced
/// to the student dimension.
pub fn batch_loss_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    raw: NodeId,
    layout: &BatchLayout,
    cfg: &LossConfig,
    use_in_batch: bool,
    teacher: Option<&Tensor<F>>,
) -> Result<LossNodes> {
    let b = layout.queries;
    let n_texts = layout.texts();
    if g.value(raw).rows() != n_texts {
        return Err(Error::invalid(format!(
            "batch layout expects {n_texts} rows, got {}",
            g.value(raw).rows()
        )));
    }
    let q = g.select_rows(raw, &(0..b).collect::<Vec<_>>())?;
    let p = g.select_rows(raw, &(b..2 * b).collect::<Vec<_>>())?;
    let n = if n_texts > 2 * b {
        Some(g.select_rows(raw, &(2 * b..n_texts).collect::<Vec<_>>())?)
    } else {
        None
    };
    let contrastive = matryoshka_info_nce_graph(g, q, p, n, &layout.neg_owner, cfg, use_in_batch)?;
    let Some(t) = teacher else {
        return Ok(LossNodes {
            total: contrastive,
            contrastive,
            distill: None,
        });
    };
    let student = g.l2_normalize_rows(raw)?;
    let target = g.constant(t.clone());
    let distill = g.mse(student, target)?;
    let total = if cfg.distill_weight > 0.0 {
        let weighted = g.scale(distill, F::of(cfg.distill_weight))?;
        g.add(contrastive, weighted)?
    } else {
        contrastive
    };
    Ok(LossNodes {
        total,
        contrastive,
        distill: Some(distill),
    })
}

fn add_into<F: Scalar>(acc: &mut [Tensor<F>], grads: Vec<Tensor<F>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
}

/// Loss and parameter gradients for one batch.
///
/// Each sequence runs in its own graph up to its EOS state; the objective
/// is built on those states as leaves, and its row gradients are then
/// pushed back through every sequence graph. Per-sequence gradients are
/// summed in sequence order.
pub fn batch_loss_and_grads<F: Scalar>(
    model: &EmbeddingModel<F>,
    tokens: &[Vec<TokenId>],
    layout: &BatchLayout,
    cfg: &LossConfig,
    use_in_batch: bool,
    teacher: Option<&Tensor<F>>,
) -> Result<(LossParts, Vec<Tensor<F>>)> {
    if tokens.len() != layout.texts() {
        return Err(Error::invalid("token sequences do not match the batch layout"));
    }
    let seqs: Vec<(Graph<'_, F>, Vec<NodeId>, NodeId)> = tokens
        .par_iter()
        .map(|t| {
            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let eos = model.eos_state_graph(&mut g, &params, t)?;
            Ok((g, params.ids().to_vec(), eos))
        })
        .collect::<Result<_>>()?;
    let states: Vec<Tensor<F>> = seqs.iter().map(|(g, _, eos)| g.value(*eos).clone()).collect();

    let mut lg = Graph::new();
    let leaves: Vec<NodeId> = states.into_iter().map(|s| lg.leaf(s, true)).collect();
    let raw = lg.concat_rows(&leaves)?;
    let nodes = batch_loss_graph(&mut lg, raw, layout, cfg, use_in_batch, teacher)?;
    let parts = LossParts {
        total: lg.value(nodes.total).item().as_f64(),
        contrastive: lg.value(nodes.contrastive).item().as_f64(),
        distill: nodes.distill.map_or(0.0, |d| lg.value(d).item().as_f64()),
    };
    let mut row_grads = lg.backward(nodes.total)?;
    let seeds: Vec<Tensor<F>> = leaves
        .iter()
        .map(|&l| row_grads.take(l).expect("leaf is trainable"))
        .collect();

    let mut acc: Vec<Tensor<F>> = model.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let work: Vec<(&(Graph<'_, F>, Vec<NodeId>, NodeId), Tensor<F>)> = seqs.iter().zip(seeds).collect();
    for chunk in work.chunks(GRAD_CHUNK) {
        let grads: Vec<Vec<Tensor<F>>> = chunk
            .par_iter()
            .map(|((g, ids, eos), seed)| {
                let mut gr = g.backward_with_seed(*eos, seed.clone())?;
                Ok(ids.iter().map(|&id| gr.take(id).expect("parameter is trainable")).collect())
            })
            .collect::<Result<_>>()?;
        for g in grads {
            add_into(&mut acc, g);
        }
    }
    Ok((parts, acc))
}

/// Unit teacher embeddings per text, memoized across steps.
struct TeacherCache<'t> {
    model: &'t EmbeddingModel<f32>,
    cache: HashMap<String, Vec<f32>>,
}

impl<'t> TeacherCache<'t> {
    fn rows(&mut self, texts: &[String], student_dim: usize) -> Result<Tensor<f32>> {
        let missing: Vec<&String> = {
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !self.cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        let model = self.model;
        let fresh: Vec<Vec<f32>> = missing.par_iter().map(|t| model.embed_text(t)).collect::<Result<_>>()?;
        for (t, e) in missing.into_iter().zip(fresh) {
            self.cache.insert(t.clone(), e);
        }
        let full: Vec<Vec<f32>> = texts.iter().map(|t| self.cache[t].clone()).collect();
        Tensor::from_rows(&project_teacher(&full, student_dim)?)
    }
}

fn numeric_failure(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Runs one training stage. Batch order is reshuffled every epoch from
/// `plan.seed`; stage-2 batches get instruction formatting drawn from the
/// same stream. Passing `resume` continues its step counter and moments.
pub fn train_stage(
    mut model: EmbeddingModel<f32>,
    batches: &[Batch],
    plan: &StagePlan,
    teacher: Option<&EmbeddingModel<f32>>,
    resume: Option<OptimizerState<f32>>,
) -> Result<TrainOutcome> {
    let hidden = model.config.hidden_size;
    plan.loss.validate(hidden)?;
    if plan.teacher.is_some() != teacher.is_some() {
        return Err(Error::invalid(
            "a teacher model must be supplied exactly when the plan names one",
        ));
    }
    if let Some(t) = teacher {
        if t.config.hidden_size < hidden {
            return Err(Error::invalid(format!(
                "teacher hidden size {} is smaller than student hidden size {hidden}",
                t.config.hidden_size
            )));
        }
    }
    for b in batches {
        if b.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if b.samples.iter().any(|s| s.format != b.format()) {
            return Err(Error::invalid("batch mixes sample formats"));
        }
        if plan.stage == Stage::One && b.format() != Format::Retrieval {
            return Err(Error::invalid(format!(
                "stage-1 data must be retrieval format, found {:?}",
                b.format()
            )));
        }
    }
    let mut opt = match resume {
        Some(s) => s,
        None => OptimizerState::new(plan.adamw, model.tensors()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut teacher_cache = teacher.map(|m| TeacherCache {
        model: m,
        cache: HashMap::new(),
    });
    let tokenizer = model.tokenizer();
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    for _ in 0..plan.epochs {
        order.shuffle(&mut rng);
        for &bi in &order {
            let step = opt.step + 1;
            let batch = &batches[bi];
            let formatted = Batch {
                samples: batch
                    .samples
                    .iter()
                    .map(|s| apply_instructions(s, plan.stage, plan.doc_instruction_prob, &mut rng))
                    .collect::<Result<_>>()?,
                stage: plan.stage,
            };
            let (texts, layout) = batch_texts(&formatted);
            let tokens: Vec<Vec<TokenId>> = texts.iter().map(|t| tokenizer.tokenize(t)).collect();
            let target = match teacher_cache.as_mut() {
                Some(tc) => Some(tc.rows(&texts, hidden)?),
                None => None,
            };
            let (parts, grads) = batch_loss_and_grads(
                &model,
                &tokens,
                &layout,
                &plan.loss,
                formatted.uses_in_batch_negatives(),
                target.as_ref(),
            )
            .map_err(numeric_failure(step))?;
            if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut params = model.tensors_mut();
            super::adamw_step(&mut params, &grads, &mut opt, plan.learning_rate)?;
            metrics.push(StepMetrics {
                step: opt.step,
                total_loss: parts.total,
                contrastive_loss: parts.contrastive,
                distill_loss: parts.distill,
            });
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,total_loss,contrastive_loss,distill_loss")?;
    for m in metrics {
        writeln!(w, "{},{},{},{}", m.step, m.total_loss, m.contrastive_loss, m.distill_loss)?;
    }
    w.flush()?;
    Ok(())
}
