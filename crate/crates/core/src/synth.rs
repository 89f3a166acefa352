//! Seeded toy worlds with known structure: topics of made-up words, documents
//! drawn from one topic, and queries that quote part of a document.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CanonicalSample, Format};
use crate::eval::{EvalTask, TaskData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub doc_words: usize,
    pub query_words: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            topics: 8,
            words_per_topic: 24,
            doc_words: 6,
            query_words: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub topics: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub topic: usize,
    pub words: Vec<usize>,
    pub text: String,
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

impl World {
    /// Draws `topics × words_per_topic` distinct lowercase words of 3–5 letters.
    pub fn new<R: Rng>(config: WorldConfig, rng: &mut R) -> Self {
        assert!(config.doc_words <= config.words_per_topic && config.query_words <= config.doc_words);
        let mut seen = BTreeSet::new();
        let mut topics = Vec::with_capacity(config.topics);
        for _ in 0..config.topics {
            let mut words = Vec::with_capacity(config.words_per_topic);
            while words.len() < config.words_per_topic {
                let len = rng.gen_range(3..=5);
                let w: String = (0..len).map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char).collect();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            topics.push(words);
        }
        World { config, topics }
    }

    fn render(&self, topic: usize, words: &[usize]) -> String {
        words.iter().map(|&w| self.topics[topic][w].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn document<R: Rng>(&self, topic: usize, rng: &mut R) -> Document {
        let words = index::sample(rng, self.config.words_per_topic, self.config.doc_words).into_vec();
        Document {
            topic,
            text: self.render(topic, &words),
            words,
        }
    }

    pub fn random_document<R: Rng>(&self, rng: &mut R) -> Document {
        let topic = rng.gen_range(0..self.topics.len());
        self.document(topic, rng)
    }

    /// A few of the document's words in a fresh order.
    pub fn query_for<R: Rng>(&self, doc: &Document, rng: &mut R) -> String {
        let mut picked: Vec<usize> = doc.words.choose_multiple(rng, self.config.query_words).copied().collect();
        picked.shuffle(rng);
        self.render(doc.topic, &picked)
    }
}

fn jaccard(a: &Document, b: &Document) -> f64 {
    if a.topic != b.topic {
        return 0.0;
    }
    let sa: BTreeSet<_> = a.words.iter().collect();
    let sb: BTreeSet<_> = b.words.iter().collect();
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

/// Retrieval samples with one same-topic hard negative each.
pub fn retrieval_samples<R: Rng>(world: &World, n: usize, source: &str, rng: &mut R) -> Vec<CanonicalSample> {
    (0..n)
        .map(|_| {
            let doc = world.random_document(rng);
            let query = world.query_for(&doc, rng);
            let negative = loop {
                let other = world.document(doc.topic, rng);
                if other.words != doc.words {
                    break other;
                }
            };
            CanonicalSample {
                format: Format::Retrieval,
                query,
                positive: doc.text,
                negatives: vec![negative.text],
                source: source.to_string(),
                task_type: "retrieval".into(),
                symmetric: false,
                instruction: None,
            }
        })
        .collect()
}

/// `n_docs` documents; the first `n_queries` each get one quoting query.
pub fn retrieval_task<R: Rng>(world: &World, name: &str, n_queries: usize, n_docs: usize, rng: &mut R) -> EvalTask {
    let docs: Vec<Document> = (0..n_docs).map(|_| world.random_document(rng)).collect();
    let queries = docs.iter().take(n_queries).map(|d| world.query_for(d, rng)).collect();
    EvalTask {
        name: name.to_string(),
        data: TaskData::Retrieval {
            queries,
            relevant: (0..n_queries.min(n_docs)).map(|i| vec![i]).collect(),
            corpus: docs.into_iter().map(|d| d.text).collect(),
        },
    }
}

/// Same-topic document pairs scored by word-set overlap.
pub fn sts_task<R: Rng>(world: &World, name: &str, n_pairs: usize, rng: &mut R) -> EvalTask {
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut scores = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = world.random_document(rng);
        let b = world.document(a.topic, rng);
        scores.push(jaccard(&a, &b));
        pairs.push((a.text, b.text));
    }
    EvalTask {
        name: name.to_string(),
        data: TaskData::Sts { pairs, scores },
    }
}

/// Balanced same-topic (label 1) and cross-topic (label 0) document pairs.
pub fn pair_task<R: Rng>(world: &World, name: &str, n_pairs: usize, rng: &mut R) -> EvalTask {
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut labels = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let a = world.random_document(rng);
        let same = i % 2 == 0 || world.topics.len() < 2;
        let topic = if same {
            a.topic
        } else {
            (a.topic + rng.gen_range(1..world.topics.len())) % world.topics.len()
        };
        let b = world.document(topic, rng);
        pairs.push((a.text, b.text));
        labels.push(u8::from(same));
    }
    EvalTask {
        name: name.to_string(),
        data: TaskData::PairClassification { pairs, labels },
    }
}

/// Symmetric stage-2 style samples (paraphrase-like): two documents sharing
/// a topic, with a cross-topic negative.
pub fn symmetric_samples<R: Rng>(world: &World, n: usize, source: &str, rng: &mut R) -> Vec<CanonicalSample> {
    (0..n)
        .map(|_| {
            let a = world.random_document(rng);
            let b = world.document(a.topic, rng);
            let other = (a.topic + 1) % world.topics.len();
            let neg = world.document(other, rng);
            CanonicalSample {
                format: Format::Clustering,
                query: a.text,
                positive: b.text,
                negatives: vec![neg.text],
                source: source.to_string(),
                task_type: "clustering".into(),
                symmetric: true,
                instruction: None,
            }
        })
        .collect()
}
