use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CanonicalSample, Format};
use crate::error::{Error, Result};

/// Fraction of symmetric-task documents that also get the instruction.
pub const DEFAULT_DOC_INSTRUCTION_PROB: f64 = 0.30;
pub const INSTRUCTION_SEPARATOR: &str = "\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Keeps a uniform random subset of `cap` samples for every source above
/// the cap. Survivors keep their input order.
pub fn cap_per_source<R: Rng>(samples: Vec<CanonicalSample>, cap: usize, rng: &mut R) -> Vec<CanonicalSample> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_source.entry(s.source.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; samples.len()];
    for members in by_source.values() {
        if members.len() <= cap {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(rng, members.len(), cap) {
                keep[members[j]] = true;
            }
        }
    }
    samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Sets each sample's instruction template from its task type, where known.
pub fn assign_instructions(samples: &mut [CanonicalSample], templates: &BTreeMap<String, String>) {
    for s in samples {
        if let Some(t) = templates.get(&s.task_type) {
            s.instruction = Some(t.clone());
        }
    }
}

fn prefixed(template: &str, text: &str) -> String {
    format!("{template}{INSTRUCTION_SEPARATOR}{text}")
}

/// Stage 1 returns the sample unchanged. Stage 2 prefixes the query with the
/// instruction and, for symmetric tasks, flips one `p_doc` coin per document
/// (positive, then each negative in order) to prefix it as well.
pub fn apply_instructions<R: Rng>(sample: &CanonicalSample, stage: Stage, p_doc: f64, rng: &mut R) -> Result<CanonicalSample> {
    if stage == Stage::One {
        return Ok(sample.clone());
    }
    let template = sample.instruction.as_deref().ok_or_else(|| {
        Error::invalid(format!(
            "stage-2 sample from {} (task {}) has no instruction template",
            sample.source, sample.task_type
        ))
    })?;
    let mut out = sample.clone();
    out.query = prefixed(template, &sample.query);
    if sample.symmetric {
        if rng.gen_bool(p_doc) {
            out.positive = prefixed(template, &sample.positive);
        }
        for neg in &mut out.negatives {
            if rng.gen_bool(p_doc) {
                *neg = prefixed(template, neg);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub samples: Vec<CanonicalSample>,
    pub stage: Stage,
}

impl Batch {
    pub fn format(&self) -> Format {
        self.samples[0].format
    }

    pub fn uses_in_batch_negatives(&self) -> bool {
        self.format() == Format::Retrieval
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Groups samples by `(format, source)`, shuffles each group, cuts it into
/// `batch_size` chunks (a trailing chunk needs at least 2 samples), then
/// shuffles the batch order.
pub fn make_batches<R: Rng>(samples: &[CanonicalSample], batch_size: usize, stage: Stage, rng: &mut R) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    let mut groups: BTreeMap<(Format, &str), Vec<&CanonicalSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.format, s.source.as_str())).or_default().push(s);
    }
    let mut batches = Vec::new();
    for mut group in groups.into_values() {
        group.shuffle(rng);
        for chunk in group.chunks(batch_size) {
            if chunk.len() >= 2 {
                batches.push(Batch {
                    samples: chunk.iter().map(|s| (*s).clone()).collect(),
                    stage,
                });
            }
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total: usize,
    pub by_source: BTreeMap<String, usize>,
    pub by_format: BTreeMap<String, usize>,
    pub by_task_type: BTreeMap<String, usize>,
}

pub fn stats_report(samples: &[CanonicalSample]) -> StatsReport {
    let mut r = StatsReport::default();
    for s in samples {
        r.total += 1;
        *r.by_source.entry(s.source.clone()).or_default() += 1;
        *r.by_format.entry(format!("{:?}", s.format)).or_default() += 1;
        *r.by_task_type.entry(s.task_type.clone()).or_default() += 1;
    }
    r
}
