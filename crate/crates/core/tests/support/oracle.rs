//! Random scoring instances and a brute-force scorer that shares no code
//! with the library's evaluation module.
//!
//! Instances are built from a tiny lowercase vocabulary so normalization is
//! just lowercasing and splitting on spaces, and the generator keeps the
//! sentence structure of every answer, so the oracle never has to segment
//! text itself.

use std::collections::BTreeSet;

use num_rational::Ratio;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use verifact_core::model::{
    AblationConfig, CitationMarker, CitedAnswer, ClaimOrigin, FactualClaim, GoldFact, GoldLabel,
    Method, OutputStage, ReasoningTrace, RunOutput, RunRecord, SourceRef, TaskInstance, TaskType,
    Verdict, VerificationRecord,
};

const WORDS: [&str; 6] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
const ALLOWED: [&str; 3] = ["Source A", "Source B", "Source C"];
const CITED: [&str; 5] = [
    "Source A",
    "source b, p. 4",
    "Source AB",
    "Other C",
    "Source C",
];
pub const THRESHOLDS: [(i64, i64); 6] = [(1, 4), (1, 3), (1, 2), (3, 5), (2, 3), (1, 1)];

#[derive(Debug, Clone)]
pub struct Sentence {
    pub words: Vec<&'static str>,
    pub marker: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub task: TaskInstance,
    pub run: RunRecord,
    pub threshold: Ratio<i64>,
    /// Claim word lists as the oracle sees them (empty when the run carries
    /// no extracted claims and sentences are scored instead).
    pub claims: Vec<Vec<&'static str>>,
    pub sentences: Vec<Sentence>,
}

fn words(rng: &mut StdRng) -> Vec<&'static str> {
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect()
}

fn capitalized(words: &[&str]) -> String {
    let text = words.join(" ");
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => text,
    }
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = StdRng::seed_from_u64(seed);
    let labels = [GoldLabel::Supported, GoldLabel::Refuted, GoldLabel::Neutral];

    let fact_count = rng.random_range(0..=6);
    let gold_facts: Vec<GoldFact> = (0..fact_count)
        .map(|i| GoldFact {
            fact_id: format!("g{i}"),
            statement: capitalized(&words(&mut rng)),
            label: labels[rng.random_range(0..3)],
            allowed_sources: if rng.random_bool(0.8) {
                vec![ALLOWED[rng.random_range(0..ALLOWED.len())].to_owned()]
            } else {
                vec![]
            },
            requires_citation: rng.random_bool(0.5),
        })
        .collect();

    let claims: Vec<Vec<&'static str>> = if rng.random_bool(0.5) {
        (0..rng.random_range(0..=6))
            .map(|_| words(&mut rng))
            .collect()
    } else {
        vec![]
    };

    // the answer reuses fact statements often enough to produce matches
    let mut sentences = Vec::new();
    let mut next_marker = 1;
    for _ in 0..rng.random_range(0..=5) {
        let w = if !gold_facts.is_empty() && rng.random_bool(0.6) {
            let f = &gold_facts[rng.random_range(0..gold_facts.len())];
            f.statement
                .split(' ')
                .map(|s| *WORDS.iter().find(|w| w.eq_ignore_ascii_case(s)).unwrap())
                .collect()
        } else {
            words(&mut rng)
        };
        let marker = rng.random_bool(0.6).then(|| {
            next_marker += 1;
            next_marker - 1
        });
        sentences.push(Sentence { words: w, marker });
    }

    let verifications: Vec<VerificationRecord> = (0..rng.random_range(1..=3))
        .map(|i| VerificationRecord {
            claim_id: i + 1,
            verdict: Verdict::Confirmed,
            evidence: "evidence".into(),
            source: CITED[rng.random_range(0..CITED.len())].to_owned(),
        })
        .collect();
    let markers: Vec<CitationMarker> = sentences
        .iter()
        .filter_map(|s| s.marker)
        .map(|index| CitationMarker {
            index,
            source_ref: if rng.random_bool(0.7) {
                SourceRef::Record(rng.random_range(0..verifications.len()))
            } else {
                SourceRef::Unattributed(CITED[rng.random_range(0..CITED.len())].to_owned())
            },
        })
        .collect();
    let text = sentences
        .iter()
        .map(|s| match s.marker {
            Some(m) => format!("{} [{m}].", capitalized(&s.words)),
            None => format!("{}.", capitalized(&s.words)),
        })
        .collect::<Vec<_>>()
        .join(" ");

    let (n, d) = THRESHOLDS[rng.random_range(0..THRESHOLDS.len())];
    let task = TaskInstance {
        id: format!("rand-{seed}"),
        task_type: TaskType::ALL[rng.random_range(0..4)],
        query: "query".into(),
        source_documents: vec![],
        gold_facts,
    };
    let mut run = RunRecord::new(task.id.clone(), Method::Verifact, AblationConfig::FULL);
    run.claims = claims
        .iter()
        .enumerate()
        .map(|(i, w)| FactualClaim {
            claim_id: i as u32 + 1,
            text: capitalized(w),
            origin: ClaimOrigin::Chain,
        })
        .collect();
    run.verifications = verifications;
    run.final_output = Some(RunOutput {
        trace: ReasoningTrace {
            steps: vec![],
            raw: String::new(),
            stage: OutputStage::Final,
        },
        answer: CitedAnswer {
            text,
            markers,
            stage: OutputStage::Final,
        },
    });
    Instance {
        task,
        run,
        threshold: Ratio::new(n, d),
        claims,
        sentences,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleBucket {
    Correct,
    Hallucinated,
    Neutral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScore {
    pub buckets: Vec<OracleBucket>,
    pub matched: Vec<Option<usize>>,
    pub accuracy: Ratio<i64>,
    pub hallucination: Ratio<i64>,
    pub neutral: Ratio<i64>,
    pub precision: Ratio<i64>,
    pub recall: Ratio<i64>,
    pub f1: Ratio<i64>,
}

fn set_of<'a>(words: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    words.into_iter().map(|w| w.to_lowercase()).collect()
}

/// Every (claim, fact) pair is scored; among facts at or above the threshold
/// the highest overlap wins, earliest fact first on ties.
fn best_fact(claim: &[&str], facts: &[GoldFact], threshold: Ratio<i64>) -> Option<usize> {
    let c = set_of(claim.iter().copied());
    let mut candidates: Vec<(usize, Ratio<i64>)> = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        let g = set_of(f.statement.split(' '));
        let inter = c.intersection(&g).count() as i64;
        let union = c.union(&g).count() as i64;
        let j = Ratio::new(inter, union);
        if j >= threshold {
            candidates.push((i, j));
        }
    }
    let top = candidates.iter().map(|&(_, j)| j).max()?;
    candidates.iter().find(|&&(_, j)| j == top).map(|&(i, _)| i)
}

fn bucket(matched: Option<usize>, facts: &[GoldFact]) -> OracleBucket {
    match matched.map(|i| facts[i].label) {
        Some(GoldLabel::Supported) => OracleBucket::Correct,
        Some(GoldLabel::Neutral) => OracleBucket::Neutral,
        _ => OracleBucket::Hallucinated,
    }
}

pub fn oracle(inst: &Instance) -> OracleScore {
    let facts = &inst.task.gold_facts;
    let claim_words: Vec<Vec<&str>> = if inst.claims.is_empty() {
        inst.sentences.iter().map(|s| s.words.clone()).collect()
    } else {
        inst.claims.clone()
    };
    let matched: Vec<Option<usize>> = claim_words
        .iter()
        .map(|c| best_fact(c, facts, inst.threshold))
        .collect();
    let buckets: Vec<OracleBucket> = matched.iter().map(|&m| bucket(m, facts)).collect();
    let total = buckets.len() as i64;
    let share =
        |b: OracleBucket| Ratio::new(buckets.iter().filter(|&&x| x == b).count() as i64, total);
    let (accuracy, hallucination, neutral) = if total == 0 {
        (Ratio::from(0), Ratio::from(0), Ratio::from(1))
    } else {
        (
            share(OracleBucket::Correct),
            share(OracleBucket::Hallucinated),
            share(OracleBucket::Neutral),
        )
    };

    let answer = &inst.run.final_output.as_ref().unwrap().answer;
    let mut good = 0i64;
    let mut covered = BTreeSet::new();
    for marker in &answer.markers {
        let sentence = inst
            .sentences
            .iter()
            .find(|s| s.marker == Some(marker.index))
            .unwrap();
        let m = best_fact(&sentence.words, facts, inst.threshold);
        let Some(fact) = m.filter(|_| bucket(m, facts) == OracleBucket::Correct) else {
            continue;
        };
        let source = match &marker.source_ref {
            SourceRef::Record(i) => inst.run.verifications[*i].source.clone(),
            SourceRef::Unattributed(s) => s.clone(),
        };
        let source = source.to_lowercase().replace([',', '.'], " ");
        let source = source.split_whitespace().collect::<Vec<_>>().join(" ");
        if facts[fact]
            .allowed_sources
            .iter()
            .any(|a| source.contains(&a.to_lowercase()))
        {
            good += 1;
            covered.insert(fact);
        }
    }
    let marker_total = answer.markers.len() as i64;
    let required: Vec<usize> = (0..facts.len())
        .filter(|&i| facts[i].requires_citation)
        .collect();
    let (precision, recall) = match (marker_total, required.len()) {
        (0, 0) => (Ratio::from(1), Ratio::from(1)),
        (0, _) => (Ratio::from(0), Ratio::new(0, 1)),
        (m, 0) => (Ratio::new(good, m), Ratio::from(1)),
        (m, r) => (
            Ratio::new(good, m),
            Ratio::new(
                required.iter().filter(|i| covered.contains(i)).count() as i64,
                r as i64,
            ),
        ),
    };
    let f1 = if marker_total == 0 && required.is_empty() {
        Ratio::from(1)
    } else if precision + recall == Ratio::from(0) {
        Ratio::from(0)
    } else {
        Ratio::from(2) * precision * recall / (precision + recall)
    };
    OracleScore {
        buckets,
        matched,
        accuracy,
        hallucination,
        neutral,
        precision,
        recall,
        f1,
    }
}
