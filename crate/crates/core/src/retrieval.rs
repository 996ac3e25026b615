//! Keyword retriever for the retrieval-augmented baseline.
//!
//! Documents and queries are bags of lowercase alphanumeric tokens, scored
//! by cosine similarity of raw term-frequency vectors (no IDF weighting).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SourceDocument;
use crate::scalar::RealScalar;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate doc_id '{0}'")]
    DuplicateDocId(String),
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

/// Immutable term-frequency index over a small corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex<S> {
    docs: BTreeMap<String, String>,
    term_freqs: BTreeMap<String, BTreeMap<String, u32>>,
    /// Only documents with at least one token have a norm.
    doc_norms: BTreeMap<String, S>,
    vocabulary: BTreeSet<String>,
}

impl<S: RealScalar> CorpusIndex<S> {
    pub fn build<I>(docs: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut index = CorpusIndex {
            docs: BTreeMap::new(),
            term_freqs: BTreeMap::new(),
            doc_norms: BTreeMap::new(),
            vocabulary: BTreeSet::new(),
        };
        for (id, text) in docs {
            if index.docs.contains_key(&id) {
                return Err(RetrievalError::DuplicateDocId(id));
            }
            let counts = term_counts(&text);
            if !counts.is_empty() {
                let sq: u64 = counts.values().map(|&c| u64::from(c) * u64::from(c)).sum();
                index
                    .doc_norms
                    .insert(id.clone(), S::from_count(sq as usize).sqrt());
            }
            index.vocabulary.extend(counts.keys().cloned());
            index.term_freqs.insert(id.clone(), counts);
            index.docs.insert(id, text);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, doc_id: &str) -> Option<&str> {
        self.docs.get(doc_id).map(String::as_str)
    }

    pub fn term_freqs(&self, doc_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.term_freqs.get(doc_id)
    }

    pub fn norm(&self, doc_id: &str) -> Option<S> {
        self.doc_norms.get(doc_id).copied()
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    /// Top `k` documents by cosine similarity to `query`, descending, ties
    /// broken by ascending doc id. Zero-score documents are never returned.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(String, S)> {
        if k == 0 {
            return Vec::new();
        }
        let q = term_counts(query);
        let q_sq: u64 = q.values().map(|&c| u64::from(c) * u64::from(c)).sum();
        if q_sq == 0 {
            return Vec::new();
        }
        let q_norm = S::from_count(q_sq as usize).sqrt();
        let mut scored: Vec<(String, S)> = self
            .doc_norms
            .iter()
            .filter_map(|(id, &norm)| {
                let tf = &self.term_freqs[id];
                let dot: u64 = q
                    .iter()
                    .filter_map(|(t, &qc)| tf.get(t).map(|&dc| u64::from(qc) * u64::from(dc)))
                    .sum();
                if dot == 0 {
                    return None;
                }
                let score = S::from_count(dot as usize) / (q_norm * norm);
                Some((id.clone(), score.min(S::one())))
            })
            .collect();
        // doc_norms iterates in ascending id order and the sort is stable.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        scored.truncate(k);
        scored
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub text: String,
}

impl From<SourceDocument> for CorpusRecord {
    fn from(d: SourceDocument) -> Self {
        CorpusRecord {
            doc_id: d.doc_id,
            text: d.text,
        }
    }
}

/// Reads a line-delimited `{doc_id, text}` corpus.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, RetrievalError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn index_corpus<S: RealScalar>(
    docs: impl IntoIterator<Item = CorpusRecord>,
) -> Result<CorpusIndex<S>, RetrievalError> {
    CorpusIndex::build(docs.into_iter().map(|d| (d.doc_id, d.text)))
}
