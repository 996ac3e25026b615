//! Deterministic scripted provider for offline runs and tests.
//!
//! A script is a line-delimited JSON file, one entry per line:
//!
//! ```text
//! {"stage": "initial_cot", "occurrence": 1, "response": "BEGIN_REASONING ..."}
//! {"stage": "verify_simulate", "contains": ["When did"], "response": "..."}
//! ```
//!
//! `stage`, `occurrence` (1-based, counted per stage tag) and `contains`
//! (one substring or a list, all of which must appear in the request) are
//! all optional, but an entry needs a stage or a substring. Every set field
//! must match. A request matching no entry, or more than one, is an error.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    check_conversation, ChatMessage, ChatProvider, Completion, CompletionParams, ProviderError,
    ProviderFailure,
};
use crate::model::{StageTag, TokenUsage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occurrence: Option<u32>,
    #[serde(
        default,
        deserialize_with = "one_or_many",
        skip_serializing_if = "Vec::is_empty"
    )]
    pub contains: Vec<String>,
}

impl MatchKey {
    pub fn stage(stage: StageTag, occurrence: u32) -> Self {
        MatchKey {
            stage: Some(stage),
            occurrence: Some(occurrence),
            contains: Vec::new(),
        }
    }

    pub fn contains(needle: impl Into<String>) -> Self {
        MatchKey {
            contains: vec![needle.into()],
            ..Default::default()
        }
    }

    fn matches(&self, stage: StageTag, occurrence: u32, haystack: &str) -> bool {
        self.stage.is_none_or(|s| s == stage)
            && self.occurrence.is_none_or(|o| o == occurrence)
            && self.contains.iter().all(|c| haystack.contains(c.as_str()))
    }
}

fn one_or_many<'de, D>(d: D) -> Result<Vec<String>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub key: MatchKey,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("script entries {first} and {second} have the same match key")]
    DuplicateKey { first: usize, second: usize },
    #[error("script entry {entry}: {message}")]
    InvalidKey { entry: usize, message: String },
}

/// Provider that answers from a fixed script.
#[derive(Debug)]
pub struct ScriptedProvider {
    entries: Vec<ScriptEntry>,
    occurrences: Mutex<HashMap<StageTag, u32>>,
}

impl ScriptedProvider {
    /// Builds a provider, rejecting duplicate or unusable keys.
    /// Entries are numbered from 1 in error messages.
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ScriptError> {
        let mut seen: HashMap<&MatchKey, usize> = HashMap::new();
        for (i, entry) in entries.iter().enumerate() {
            let n = i + 1;
            let key = &entry.key;
            if key.stage.is_none() && key.contains.is_empty() {
                return Err(ScriptError::InvalidKey {
                    entry: n,
                    message: "needs a stage or a substring to match".into(),
                });
            }
            if key.occurrence.is_some() && key.stage.is_none() {
                return Err(ScriptError::InvalidKey {
                    entry: n,
                    message: "occurrence requires a stage".into(),
                });
            }
            if key.occurrence == Some(0) {
                return Err(ScriptError::InvalidKey {
                    entry: n,
                    message: "occurrences are counted from 1".into(),
                });
            }
            if let Some(first) = seen.insert(key, n) {
                return Err(ScriptError::DuplicateKey { first, second: n });
            }
        }
        // A stage-only wildcard would shadow every occurrence-specific entry
        // for that stage with no further discriminator.
        let wildcards: HashSet<StageTag> = entries
            .iter()
            .filter(|e| e.key.occurrence.is_none() && e.key.contains.is_empty())
            .filter_map(|e| e.key.stage)
            .collect();
        for (i, entry) in entries.iter().enumerate() {
            if let (Some(stage), Some(_)) = (entry.key.stage, entry.key.occurrence) {
                if entry.key.contains.is_empty() && wildcards.contains(&stage) {
                    return Err(ScriptError::InvalidKey {
                        entry: i + 1,
                        message: format!("overlaps the catch-all entry for stage '{stage}'"),
                    });
                }
            }
        }
        Ok(ScriptedProvider {
            entries,
            occurrences: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ScriptError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|e| ScriptError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    /// Forgets how many requests each stage has seen.
    pub fn reset(&self) {
        self.occurrences.lock().expect("occurrence lock").clear();
    }
}

/// Loads a script file into a [`ScriptedProvider`].
pub fn load_script(path: impl AsRef<Path>) -> Result<ScriptedProvider, ScriptError> {
    let text = std::fs::read_to_string(path)?;
    ScriptedProvider::from_jsonl(&text)
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl ChatProvider for ScriptedProvider {
    fn complete(
        &self,
        stage: StageTag,
        messages: &[ChatMessage],
        _params: &CompletionParams,
    ) -> Result<Completion, ProviderFailure> {
        check_conversation(messages)?;
        let occurrence = {
            let mut counts = self.occurrences.lock().expect("occurrence lock");
            let n = counts.entry(stage).or_insert(0);
            *n += 1;
            *n
        };
        let haystack: String = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let hits: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.key.matches(stage, occurrence, &haystack))
            .map(|(i, _)| i + 1)
            .collect();
        let entry = match hits.as_slice() {
            [] => return Err(ProviderError::Unscripted { stage }.into()),
            [one] => &self.entries[*one - 1],
            _ => {
                return Err(ProviderError::AmbiguousScript {
                    stage,
                    entries: hits,
                }
                .into())
            }
        };
        Ok(Completion {
            text: entry.response.clone(),
            usage: TokenUsage {
                prompt_tokens: word_count(&haystack),
                completion_tokens: word_count(&entry.response),
            },
            retry_count: 0,
        })
    }
}

/// Wraps a provider and counts calls per stage.
#[derive(Debug)]
pub struct CallCounter<P> {
    inner: P,
    counts: Mutex<HashMap<StageTag, usize>>,
}

impl<P: ChatProvider> CallCounter<P> {
    pub fn new(inner: P) -> Self {
        CallCounter {
            inner,
            counts: Mutex::new(HashMap::new()),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.lock().expect("count lock").values().sum()
    }

    pub fn count(&self, stage: StageTag) -> usize {
        self.counts
            .lock()
            .expect("count lock")
            .get(&stage)
            .copied()
            .unwrap_or(0)
    }

    pub fn reset(&self) {
        self.counts.lock().expect("count lock").clear();
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: ChatProvider> ChatProvider for CallCounter<P> {
    fn complete(
        &self,
        stage: StageTag,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, ProviderFailure> {
        *self
            .counts
            .lock()
            .expect("count lock")
            .entry(stage)
            .or_insert(0) += 1;
        self.inner.complete(stage, messages, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msgs(text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user(text)]
    }

    fn entry(key: MatchKey, response: &str) -> ScriptEntry {
        ScriptEntry {
            key,
            response: response.into(),
        }
    }

    #[test]
    fn stage_and_occurrence_keys() {
        let p = ScriptedProvider::new(vec![
            entry(MatchKey::stage(StageTag::InitialCot, 1), "first"),
            entry(MatchKey::stage(StageTag::InitialCot, 2), "second"),
        ])
        .unwrap();
        let params = CompletionParams::default();
        let c = p
            .complete(StageTag::InitialCot, &msgs("q"), &params)
            .unwrap();
        assert_eq!(c.text, "first");
        assert_eq!(c.retry_count, 0);
        let c = p
            .complete(StageTag::InitialCot, &msgs("q"), &params)
            .unwrap();
        assert_eq!(c.text, "second");
        let err = p
            .complete(StageTag::InitialCot, &msgs("q"), &params)
            .unwrap_err();
        assert_eq!(
            err.error,
            ProviderError::Unscripted {
                stage: StageTag::InitialCot
            }
        );
        assert!(err.to_string().contains("initial_cot"));
    }

    #[test]
    fn substring_keys_and_ambiguity() {
        let p = ScriptedProvider::new(vec![
            entry(MatchKey::contains("alpha"), "A"),
            entry(MatchKey::contains("beta"), "B"),
        ])
        .unwrap();
        let params = CompletionParams::default();
        assert_eq!(
            p.complete(StageTag::ClaimExtract, &msgs("x alpha"), &params)
                .unwrap()
                .text,
            "A"
        );
        let err = p
            .complete(StageTag::ClaimExtract, &msgs("alpha beta"), &params)
            .unwrap_err();
        assert!(
            matches!(err.error, ProviderError::AmbiguousScript { ref entries, .. } if entries == &[1, 2])
        );
    }

    #[test]
    fn jsonl_loading() {
        let text = r#"{"stage":"initial_cot","occurrence":1,"response":"r1"}

{"stage":"verify_simulate","contains":["a","b"],"response":"r2"}
"#;
        let p = ScriptedProvider::from_jsonl(text).unwrap();
        assert_eq!(p.entries().len(), 2);
        assert_eq!(p.entries()[1].key.contains, vec!["a", "b"]);

        let err = ScriptedProvider::from_jsonl(
            "{\"stage\":\"initial_cot\",\"response\":\"x\"}\nnot json",
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::Parse { line: 2, .. }));

        let dup = r#"{"stage":"initial_cot","occurrence":1,"response":"a"}
{"stage":"initial_cot","occurrence":1,"response":"b"}"#;
        assert!(matches!(
            ScriptedProvider::from_jsonl(dup).unwrap_err(),
            ScriptError::DuplicateKey {
                first: 1,
                second: 2
            }
        ));
    }

    #[test]
    fn empty_script_errors_on_first_call() {
        let p = ScriptedProvider::from_jsonl("").unwrap();
        assert!(p
            .complete(
                StageTag::StandardCot,
                &msgs("q"),
                &CompletionParams::default()
            )
            .is_err());
    }

    #[test]
    fn rejects_unusable_keys() {
        assert!(ScriptedProvider::from_jsonl(r#"{"response":"x"}"#).is_err());
        assert!(
            ScriptedProvider::from_jsonl(r#"{"occurrence":1,"contains":"a","response":"x"}"#)
                .is_err()
        );
        let overlap = r#"{"stage":"initial_cot","response":"a"}
{"stage":"initial_cot","occurrence":2,"response":"b"}"#;
        assert!(ScriptedProvider::from_jsonl(overlap).is_err());
    }

    #[test]
    fn counter_counts_per_stage() {
        let p = CallCounter::new(
            ScriptedProvider::new(vec![entry(
                MatchKey {
                    stage: Some(StageTag::InitialCot),
                    ..Default::default()
                },
                "r",
            )])
            .unwrap(),
        );
        let params = CompletionParams::default();
        p.complete(StageTag::InitialCot, &msgs("q"), &params)
            .unwrap();
        p.complete(StageTag::InitialCot, &msgs("q"), &params)
            .unwrap();
        let _ = p.complete(StageTag::RagCot, &msgs("q"), &params);
        assert_eq!(p.count(StageTag::InitialCot), 2);
        assert_eq!(p.total(), 3);
    }
}
