//! Canonical contrastive samples: ingestion, consolidation, mining,
//! instructions, per-source capping and batching.

mod batching;
mod mining;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use batching::{
    apply_instructions, assign_instructions, cap_per_source, make_batches, stats_report, Batch, Stage, StatsReport,
    DEFAULT_DOC_INSTRUCTION_PROB, INSTRUCTION_SEPARATOR,
};
pub use mining::{attach_mined_negatives, mine_hard_negatives, Embedder, DEFAULT_SKIP_TOP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Format {
    Retrieval,
    Clustering,
    PairClassification,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalSample {
    pub format: Format,
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub source: String,
    pub task_type: String,
    pub symmetric: bool,
    #[serde(default)]
    pub instruction: Option<String>,
}

impl CanonicalSample {
    /// Only retrieval samples borrow other samples' positives as negatives.
    pub fn uses_in_batch_negatives(&self) -> bool {
        self.format == Format::Retrieval
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != Format::Retrieval && self.negatives.is_empty() {
            return Err(Error::invalid(format!(
                "{:?} sample from {} has no explicit negative",
                self.format, self.source
            )));
        }
        Ok(())
    }
}

/// Task kinds whose queries and documents are interchangeable.
pub fn is_symmetric_task(task_type: &str) -> bool {
    let t = task_type.to_ascii_lowercase();
    ["clustering", "sts", "bitext", "paraphrase"].iter().any(|k| t.contains(k))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: String,
    pub pos: String,
    #[serde(default)]
    pub negs: Vec<String>,
    pub source: String,
    pub task_type: String,
    #[serde(default)]
    pub symmetric: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassedRecord {
    pub text: String,
    pub class: String,
    pub source: String,
    pub task_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryRecord {
    pub text: String,
    pub label: String,
    pub labels: [String; 2],
    pub source: String,
    pub task_type: String,
}

/// One ingested JSON-lines record in any of the three accepted schemas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawRecord {
    Retrieval(RetrievalRecord),
    Classed(ClassedRecord),
    Binary(BinaryRecord),
}

fn missing_fields(obj: &serde_json::Map<String, Value>, fields: &[&str]) -> Vec<String> {
    fields.iter().filter(|f| !obj.contains_key(**f)).map(|f| f.to_string()).collect()
}

impl RawRecord {
    pub fn from_json(value: Value) -> Result<Self> {
        let Value::Object(mut obj) = value else {
            return Err(Error::Schema {
                missing: "record is not a JSON object".into(),
            });
        };
        // class ids may arrive as numbers
        if let Some(c) = obj.get_mut("class") {
            if !c.is_string() {
                *c = Value::String(c.to_string());
            }
        }
        let schema: &[&str] = if obj.contains_key("query") || obj.contains_key("pos") {
            &["query", "pos", "source", "task_type"]
        } else if obj.contains_key("labels") || obj.contains_key("label") {
            &["text", "label", "labels", "source", "task_type"]
        } else if obj.contains_key("class") {
            &["text", "class", "source", "task_type"]
        } else {
            return Err(Error::Schema {
                missing: "query+pos (retrieval) | text+class (classed) | text+label+labels (binary)".into(),
            });
        };
        let missing = missing_fields(&obj, schema);
        if !missing.is_empty() {
            return Err(Error::Schema {
                missing: missing.join(", "),
            });
        }
        let value = Value::Object(obj);
        let bad = |e: serde_json::Error| Error::Schema {
            missing: format!("malformed field ({e})"),
        };
        Ok(match schema[1] {
            "pos" => RawRecord::Retrieval(serde_json::from_value(value).map_err(bad)?),
            "label" => RawRecord::Binary(serde_json::from_value(value).map_err(bad)?),
            _ => RawRecord::Classed(serde_json::from_value(value).map_err(bad)?),
        })
    }

    pub fn source(&self) -> &str {
        match self {
            RawRecord::Retrieval(r) => &r.source,
            RawRecord::Classed(r) => &r.source,
            RawRecord::Binary(r) => &r.source,
        }
    }
}

/// Maps a retrieval or binary record to its canonical sample. Classed
/// records need their class pool; see [`consolidate_classed`].
pub fn consolidate(record: &RawRecord) -> Result<CanonicalSample> {
    match record {
        RawRecord::Retrieval(r) => Ok(CanonicalSample {
            format: Format::Retrieval,
            query: r.query.clone(),
            positive: r.pos.clone(),
            negatives: r.negs.clone(),
            source: r.source.clone(),
            task_type: r.task_type.clone(),
            symmetric: r.symmetric.unwrap_or_else(|| is_symmetric_task(&r.task_type)),
            instruction: None,
        }),
        RawRecord::Binary(r) => {
            let opposite = if r.label == r.labels[0] {
                &r.labels[1]
            } else if r.label == r.labels[1] {
                &r.labels[0]
            } else {
                return Err(Error::invalid(format!(
                    "label {:?} is not one of {:?}",
                    r.label, r.labels
                )));
            };
            Ok(CanonicalSample {
                format: Format::PairClassification,
                query: r.text.clone(),
                positive: r.label.clone(),
                negatives: vec![opposite.clone()],
                source: r.source.clone(),
                task_type: r.task_type.clone(),
                symmetric: is_symmetric_task(&r.task_type),
                instruction: None,
            })
        }
        RawRecord::Classed(_) => Err(Error::invalid(
            "classed records are consolidated against their class pool",
        )),
    }
}

/// Texts of one source grouped by class label (ordered for determinism).
#[derive(Clone, Debug, Default)]
pub struct ClassPool {
    pub source: String,
    pub task_type: String,
    pub classes: BTreeMap<String, Vec<String>>,
}

impl ClassPool {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ClassedRecord>) -> BTreeMap<String, ClassPool> {
        let mut pools: BTreeMap<String, ClassPool> = BTreeMap::new();
        for r in records {
            let pool = pools.entry(r.source.clone()).or_insert_with(|| ClassPool {
                source: r.source.clone(),
                task_type: r.task_type.clone(),
                classes: BTreeMap::new(),
            });
            pool.classes.entry(r.class.clone()).or_default().push(r.text.clone());
        }
        pools
    }
}

/// Anchor `class[anchor]`, a different member of the same class as the
/// positive, and one member of another class as the hard negative. `None`
/// when the class is a singleton or no other class exists.
pub fn consolidate_classed<R: Rng>(pool: &ClassPool, class: &str, anchor: usize, rng: &mut R) -> Option<CanonicalSample> {
    let members = pool.classes.get(class)?;
    if members.len() < 2 || anchor >= members.len() {
        return None;
    }
    let others: Vec<&String> = pool
        .classes
        .iter()
        .filter(|(c, _)| c.as_str() != class)
        .flat_map(|(_, texts)| texts)
        .collect();
    if others.is_empty() {
        return None;
    }
    let pos_choices: Vec<usize> = (0..members.len()).filter(|&i| i != anchor).collect();
    let positive = &members[*pos_choices.choose(rng).expect("at least one other member")];
    let negative = *others.choose(rng).expect("nonempty");
    Some(CanonicalSample {
        format: Format::Clustering,
        query: members[anchor].clone(),
        positive: positive.clone(),
        negatives: vec![negative.clone()],
        source: pool.source.clone(),
        task_type: pool.task_type.clone(),
        symmetric: is_symmetric_task(&pool.task_type),
        instruction: None,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Consolidated {
    pub samples: Vec<CanonicalSample>,
    /// Classed records that could not form a (positive, negative) pair.
    pub skipped: usize,
}

/// Consolidates a whole record set: retrieval and binary records in input
/// order, then every classed record as an anchor, grouped by source.
pub fn consolidate_all<R: Rng>(records: &[RawRecord], rng: &mut R) -> Result<Consolidated> {
    let mut out = Consolidated::default();
    let mut classed = Vec::new();
    for r in records {
        match r {
            RawRecord::Classed(c) => classed.push(c),
            other => out.samples.push(consolidate(other)?),
        }
    }
    for pool in ClassPool::from_records(classed).values() {
        for (class, members) in &pool.classes {
            for anchor in 0..members.len() {
                match consolidate_classed(pool, class, anchor, rng) {
                    Some(s) => out.samples.push(s),
                    None => out.skipped += 1,
                }
            }
        }
    }
    Ok(out)
}

fn read_lines<T>(path: &Path, mut parse: impl FnMut(Value) -> Result<T>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |source: Error| Error::AtLine {
            line: i + 1,
            source: Box::new(source),
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| at(e.into()))?;
        out.push(parse(value).map_err(at)?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    read_lines(path, RawRecord::from_json)
}

pub fn read_samples(path: &Path) -> Result<Vec<CanonicalSample>> {
    read_lines(path, |v| {
        let s: CanonicalSample = serde_json::from_value(v)?;
        s.validate()?;
        Ok(s)
    })
}

pub fn write_samples(path: &Path, samples: &[CanonicalSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Instruction templates keyed by task type.
pub fn read_templates(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
