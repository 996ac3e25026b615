//! proptest strategies for grammar blocks whose payloads deliberately
//! contain fence keywords, escaped keywords and label look-alikes.

use proptest::prelude::*;
use proptest::sample::select;

use verifact_core::grammar::{
    parse_claims, parse_cot, parse_evidence, parse_refined, render_claims_block, render_cot,
    render_evidence_block, render_refined,
};
use verifact_core::model::{
    CitationMarker, CitedAnswer, ClaimOrigin, FactualClaim, OutputStage, SourceRef, Verdict,
    VerificationQuery, VerificationRecord,
};

const TOKENS: &[&str] = &[
    "alpha",
    "Beta",
    "1700",
    "END_ANSWER",
    "BEGIN_REASONING",
    "\\END_CLAIMS",
    "\\\\BEGIN_EVIDENCE",
    "END_SOURCES",
    "BEGIN_ANSWERx",
    "x:y",
    "CLAIM:",
    "QUERY:",
    "VERDICT:",
    "a.b",
    "(c)",
    "don't",
    "é",
    "—",
    "2)",
    "BEGIN_SOURCES.",
    "\\",
    "END_REASONING",
];

/// One line of content: single-spaced, trimmed, never empty.
pub fn payload() -> impl Strategy<Value = String> {
    prop::collection::vec(select(TOKENS), 1..6).prop_map(|t| t.join(" "))
}

#[derive(Debug, Clone)]
pub enum Block {
    Cot {
        steps: Vec<String>,
        answer: String,
    },
    Claims {
        claims: Vec<FactualClaim>,
        queries: Vec<VerificationQuery>,
    },
    Evidence {
        records: Vec<VerificationRecord>,
    },
    Refined {
        steps: Vec<String>,
        answer: CitedAnswer,
        records: Vec<VerificationRecord>,
    },
}

fn claims_block() -> impl Strategy<Value = Block> {
    prop::collection::vec((payload(), payload(), any::<bool>()), 1..6).prop_map(|items| {
        let mut claims = Vec::new();
        let mut queries = Vec::new();
        for (i, (claim, query, from_answer)) in items.into_iter().enumerate() {
            let id = i as u32 + 1;
            let origin = if from_answer {
                ClaimOrigin::Answer
            } else {
                ClaimOrigin::Chain
            };
            claims.push(FactualClaim {
                claim_id: id,
                text: claim,
                origin,
            });
            queries.push(VerificationQuery {
                claim_id: id,
                text: query,
            });
        }
        Block::Claims { claims, queries }
    })
}

fn records(max: usize) -> impl Strategy<Value = Vec<VerificationRecord>> {
    prop::collection::vec((select(&Verdict::ALL[..]), payload(), payload()), 1..max).prop_map(
        |items| {
            items
                .into_iter()
                .enumerate()
                .map(|(i, (verdict, evidence, source))| VerificationRecord {
                    claim_id: i as u32 + 1,
                    verdict,
                    evidence,
                    source,
                })
                .collect()
        },
    )
}

fn refined_block() -> impl Strategy<Value = Block> {
    (
        prop::collection::vec(payload(), 1..4),
        prop::collection::vec(
            (payload(), any::<prop::sample::Index>(), any::<bool>()),
            0..4,
        ),
        payload(),
        records(4),
    )
        .prop_map(|(steps, cited, tail, mut records)| {
            // sources must be distinct for a marker to resolve to one record
            let mut seen = std::collections::BTreeSet::new();
            records.retain(|r| seen.insert(r.source.clone()));
            let mut text = Vec::new();
            let mut markers = Vec::new();
            for (i, (segment, pick, attributed)) in cited.into_iter().enumerate() {
                let index = i as u32 + 1;
                text.push(format!("{segment} [{index}]"));
                let source_ref = if attributed {
                    SourceRef::Record(pick.index(records.len()))
                } else {
                    SourceRef::Unattributed(format!("unlisted source {index}"))
                };
                markers.push(CitationMarker { index, source_ref });
            }
            text.push(tail);
            Block::Refined {
                steps,
                answer: CitedAnswer {
                    text: text.join(" "),
                    markers,
                    stage: OutputStage::Final,
                },
                records,
            }
        })
}

pub fn block() -> impl Strategy<Value = Block> {
    prop_oneof![
        (prop::collection::vec(payload(), 1..5), payload())
            .prop_map(|(steps, answer)| Block::Cot { steps, answer }),
        claims_block(),
        records(6).prop_map(|records| Block::Evidence { records }),
        refined_block(),
    ]
}

/// Renders the block, parses it back and reports the first difference.
pub fn round_trip(block: &Block) -> Result<(), String> {
    match block {
        Block::Cot { steps, answer } => {
            let raw = render_cot(steps, answer);
            let (trace, parsed) = parse_cot(&raw).map_err(|e| format!("{e}\n{raw}"))?;
            check(&trace.steps, steps, &raw)?;
            check(&parsed.text, answer, &raw)
        }
        Block::Claims { claims, queries } => {
            let raw = render_claims_block(claims, queries);
            let (c, q) = parse_claims(&raw).map_err(|e| format!("{e}\n{raw}"))?;
            check(&c, claims, &raw)?;
            check(&q, queries, &raw)
        }
        Block::Evidence { records } => {
            let raw = render_evidence_block(records);
            let ids: Vec<u32> = records.iter().map(|r| r.claim_id).collect();
            let parsed = parse_evidence(&raw, &ids).map_err(|e| format!("{e}\n{raw}"))?;
            check(&parsed, records, &raw)
        }
        Block::Refined {
            steps,
            answer,
            records,
        } => {
            let raw = render_refined(steps, answer, records);
            let (trace, parsed) =
                parse_refined(&raw, records).map_err(|e| format!("{e}\n{raw}"))?;
            check(&trace.steps, steps, &raw)?;
            check(&parsed, answer, &raw)
        }
    }
}

fn check<T: PartialEq + std::fmt::Debug>(got: &T, want: &T, raw: &str) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("parsed {got:?}\nexpected {want:?}\nfrom\n{raw}"))
    }
}
