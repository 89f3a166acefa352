use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ablation_distill, mrl_sweep, AblationReport, EvalTask};
use crate::data::{make_batches, CanonicalSample, Stage};
use crate::error::{Error, Result};
use crate::model::{EmbeddingModel, ModelConfig};
use crate::pruning::{calibration_from_texts, prune_model, PruneReport, PruneSpec};
use crate::synth::{retrieval_samples, retrieval_task, World, WorldConfig};
use crate::training::{train_stage, AdamWConfig, LossConfig, StagePlan, StepMetrics};

/// Every knob of the synthetic teacher → prune → two-arm student run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub world: WorldConfig,
    pub data_seed: u64,
    pub corpus_size: usize,
    pub eval_queries: usize,
    pub eval_corpus: usize,
    pub teacher: ModelConfig,
    pub teacher_plan: StagePlan,
    pub student_hidden: usize,
    pub student_mlp: usize,
    pub student_layers: usize,
    pub calibration_size: usize,
    /// Students see only the first this-many corpus samples.
    pub student_samples: usize,
    pub student_plan: StagePlan,
    pub replicate_seeds: Vec<u64>,
    pub sweep_dims: Vec<usize>,
}

fn plan(hidden: usize, learning_rate: f64, epochs: usize, seed: u64) -> StagePlan {
    StagePlan {
        stage: Stage::One,
        learning_rate,
        epochs,
        batch_size: 32,
        teacher: None,
        loss: LossConfig::for_hidden(hidden),
        seed,
        adamw: AdamWConfig::default(),
        doc_instruction_prob: crate::data::DEFAULT_DOC_INSTRUCTION_PROB,
    }
}

impl AblationConfig {
    /// Hidden-64 four-layer teacher on 2,000 samples, pruned to a hidden-32
    /// two-layer student that fine-tunes on a 128-sample budget.
    pub fn desk() -> Self {
        let teacher = ModelConfig {
            max_seq_len: 64,
            ..ModelConfig::toy(64, 128, 4, 4, 2, 16)
        };
        let mut student_plan = plan(32, 3e-3, 100, 100);
        student_plan.teacher = Some("teacher".into());
        AblationConfig {
            world: WorldConfig::default(),
            data_seed: 0,
            corpus_size: 2000,
            eval_queries: 300,
            eval_corpus: 600,
            teacher,
            teacher_plan: plan(64, 3e-3, 6, 1),
            student_hidden: 32,
            student_mlp: 64,
            student_layers: 2,
            calibration_size: 64,
            student_samples: 128,
            student_plan,
            replicate_seeds: (100..105).collect(),
            sweep_dims: vec![8, 16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.student_samples < 2 || self.student_samples > self.corpus_size {
            return Err(Error::invalid(format!(
                "student_samples must lie in [2, corpus_size = {}]",
                self.corpus_size
            )));
        }
        if self.replicate_seeds.is_empty() {
            return Err(Error::invalid("at least one replicate seed is needed"));
        }
        if self.student_plan.loss.distill_weight <= 0.0 {
            return Err(Error::invalid("student_plan.loss.distill_weight must be positive"));
        }
        self.teacher.validate()
    }
}

/// Synthetic corpus and held-out retrieval task, both fixed by `data_seed`.
pub struct AblationData {
    pub world: World,
    pub corpus: Vec<CanonicalSample>,
    pub tasks: Vec<EvalTask>,
}

pub fn ablation_data(cfg: &AblationConfig) -> AblationData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let world = World::new(cfg.world.clone(), &mut rng);
    let corpus = retrieval_samples(&world, cfg.corpus_size, "synthetic", &mut rng);
    let tasks = vec![retrieval_task(&world, "heldout", cfg.eval_queries, cfg.eval_corpus, &mut rng)];
    AblationData { world, corpus, tasks }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Replicate {
    pub seed: u64,
    #[serde(flatten)]
    pub report: AblationReport,
}

pub struct AblationRun {
    pub teacher: EmbeddingModel<f32>,
    pub teacher_metrics: Vec<StepMetrics>,
    pub teacher_sweep: Vec<(usize, f64)>,
    pub student_init: EmbeddingModel<f32>,
    pub prune_report: PruneReport,
    pub replicates: Vec<Replicate>,
}

impl AblationRun {
    pub fn wins(&self) -> usize {
        self.replicates.iter().filter(|r| r.report.delta > 0.0).count()
    }
}

/// Trains the teacher on the whole corpus, sweeps its truncation dims,
/// prunes it, then runs [`ablation_distill`] once per replicate seed.
pub fn ablation_pipeline(cfg: &AblationConfig) -> Result<AblationRun> {
    cfg.validate()?;
    let data = ablation_data(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed.wrapping_add(1));
    let teacher_batches = make_batches(&data.corpus, cfg.teacher_plan.batch_size, Stage::One, &mut rng)?;
    let init = EmbeddingModel::init(cfg.teacher.clone(), cfg.teacher_plan.seed)?;
    let trained = train_stage(init, &teacher_batches, &cfg.teacher_plan, None, None)?;
    let teacher = trained.model;
    let teacher_sweep = mrl_sweep(&teacher, &data.tasks, &cfg.sweep_dims)?;

    let texts: Vec<String> = data.corpus.iter().flat_map(|s| [s.query.clone(), s.positive.clone()]).collect();
    let calibration = calibration_from_texts(&texts, cfg.calibration_size, &teacher.tokenizer(), &mut rng);
    let spec = PruneSpec::new(cfg.student_hidden, cfg.student_mlp, cfg.student_layers, calibration);
    let (student_init, prune_report) = prune_model(&teacher, &spec)?;

    let student_batches = make_batches(
        &data.corpus[..cfg.student_samples],
        cfg.student_plan.batch_size,
        Stage::One,
        &mut rng,
    )?;
    let replicates = cfg
        .replicate_seeds
        .iter()
        .map(|&seed| {
            let mut p = cfg.student_plan.clone();
            p.seed = seed;
            let report = ablation_distill(&student_init, &teacher, &student_batches, &p, &data.tasks)?;
            Ok(Replicate { seed, report })
        })
        .collect::<Result<_>>()?;
    Ok(AblationRun {
        teacher,
        teacher_metrics: trained.metrics,
        teacher_sweep,
        student_init,
        prune_report,
        replicates,
    })
}
