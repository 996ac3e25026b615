//! Fenced text grammar for stage completions, with parsers and canonical
//! serializers.
//!
//! Each stage answers inside named fences, one keyword at the start of its
//! own line:
//!
//! ```text
//! BEGIN_REASONING            BEGIN_CLAIMS
//! 1. <step>                  1. CLAIM: <text> || QUERY: <question>
//! END_REASONING              END_CLAIMS
//! BEGIN_ANSWER
//! <answer>                   BEGIN_EVIDENCE
//! END_ANSWER                 1. VERDICT: <token> || EVIDENCE: <text> || SOURCE: <text>
//!                            END_EVIDENCE
//! ```
//!
//! The refinement stage adds `[n]` markers to the answer and a
//! `BEGIN_SOURCES`/`END_SOURCES` fence listing `n. <source>` lines.
//!
//! A fence keyword occurring inside content is escaped by prefixing one
//! backslash; a run of k backslashes before a keyword becomes k+1. Parsers
//! undo exactly one level.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use thiserror::Error;

use crate::model::{
    marker_indices, CitationMarker, CitedAnswer, ClaimOrigin, FactualClaim, OutputStage,
    ReasoningTrace, SourceRef, StageTag, Verdict, VerificationQuery, VerificationRecord,
};
use crate::provider::ChatMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fence {
    Reasoning,
    Answer,
    Claims,
    Evidence,
    Sources,
}

impl Fence {
    pub const ALL: [Fence; 5] = [
        Fence::Reasoning,
        Fence::Answer,
        Fence::Claims,
        Fence::Evidence,
        Fence::Sources,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fence::Reasoning => "REASONING",
            Fence::Answer => "ANSWER",
            Fence::Claims => "CLAIMS",
            Fence::Evidence => "EVIDENCE",
            Fence::Sources => "SOURCES",
        }
    }

    pub fn begin(self) -> &'static str {
        match self {
            Fence::Reasoning => "BEGIN_REASONING",
            Fence::Answer => "BEGIN_ANSWER",
            Fence::Claims => "BEGIN_CLAIMS",
            Fence::Evidence => "BEGIN_EVIDENCE",
            Fence::Sources => "BEGIN_SOURCES",
        }
    }

    pub fn end(self) -> &'static str {
        match self {
            Fence::Reasoning => "END_REASONING",
            Fence::Answer => "END_ANSWER",
            Fence::Claims => "END_CLAIMS",
            Fence::Evidence => "END_EVIDENCE",
            Fence::Sources => "END_SOURCES",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing fence: {0}")]
    MissingFence(&'static str),
    #[error("empty fence: {0}")]
    EmptyFence(&'static str),
    #[error("line {line}: expected {expected}, got {content:?}")]
    MalformedLine {
        line: usize,
        expected: &'static str,
        content: String,
    },
    #[error("numbering error: expected item {expected}, found {found}")]
    NumberingGap { expected: u32, found: u32 },
    #[error("line {line}: missing separator \"{separator}\"")]
    MissingSeparator {
        line: usize,
        separator: &'static str,
    },
    #[error("line {line}: missing or empty field {field}")]
    MissingField { line: usize, field: &'static str },
    #[error("no claims extracted")]
    NoClaims,
    #[error("line {line}: unknown verdict {token:?}")]
    UnknownVerdict { line: usize, token: String },
    #[error("claim ids do not match: missing {missing:?}, unexpected {extra:?}")]
    ClaimIdMismatch { missing: Vec<u32>, extra: Vec<u32> },
    #[error("duplicate entry for claim {0}")]
    DuplicateId(u32),
    #[error("citation markers have gaps: missing {missing:?}")]
    MarkerGap { missing: Vec<u32> },
    #[error("SOURCES lists {found} entries but markers go up to [{needed}]")]
    TooFewSources { needed: u32, found: u32 },
}

// ---------------------------------------------------------------------------
// Escaping

fn keyword_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(\\*)((?:BEGIN|END)_(?:REASONING|ANSWER|CLAIMS|EVIDENCE|SOURCES))")
            .expect("valid keyword regex")
    })
}

/// Adds one escaping backslash in front of every fence keyword.
pub fn escape(text: &str) -> String {
    keyword_regex()
        .replace_all(text, |c: &Captures| format!("\\{}{}", &c[1], &c[2]))
        .into_owned()
}

/// Removes one escaping backslash in front of every escaped fence keyword.
pub fn unescape(text: &str) -> String {
    keyword_regex()
        .replace_all(text, |c: &Captures| {
            let slashes = &c[1];
            let kept = if slashes.is_empty() {
                ""
            } else {
                &slashes[1..]
            };
            format!("{kept}{}", &c[2])
        })
        .into_owned()
}

/// Collapses every whitespace run to one space and trims.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Fence extraction

struct FenceBody<'a> {
    /// (1-based line number in the raw text, line content)
    lines: Vec<(usize, &'a str)>,
}

impl FenceBody<'_> {
    fn text(&self) -> String {
        self.lines
            .iter()
            .map(|(_, l)| *l)
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn is_blank(&self) -> bool {
        self.lines.iter().all(|(_, l)| l.trim().is_empty())
    }

    fn content_lines(&self) -> impl Iterator<Item = (usize, &str)> {
        self.lines
            .iter()
            .map(|(n, l)| (*n, l.trim()))
            .filter(|(_, l)| !l.is_empty())
    }
}

/// Returns the text after `keyword` when `line` starts with it as a whole word.
fn strip_keyword<'a>(line: &'a str, keyword: &str) -> Option<&'a str> {
    let rest = line.trim_start().strip_prefix(keyword)?;
    match rest.chars().next() {
        Some(c) if c.is_alphanumeric() || c == '_' => None,
        _ => Some(rest),
    }
}

fn find_fence(raw: &str, fence: Fence) -> Result<Option<FenceBody<'_>>, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let Some(start) = lines
        .iter()
        .position(|l| strip_keyword(l, fence.begin()).is_some())
    else {
        return Ok(None);
    };
    let mut body = Vec::new();
    let first = strip_keyword(lines[start], fence.begin()).unwrap_or_default();
    if !first.trim().is_empty() {
        body.push((start + 1, first.trim()));
    }
    for (i, line) in lines.iter().enumerate().skip(start + 1) {
        if strip_keyword(line, fence.end()).is_some() {
            return Ok(Some(FenceBody { lines: body }));
        }
        body.push((i + 1, *line));
    }
    Err(ParseError::MissingFence(fence.end()))
}

fn require_fence(raw: &str, fence: Fence) -> Result<FenceBody<'_>, ParseError> {
    find_fence(raw, fence)?.ok_or(ParseError::MissingFence(fence.begin()))
}

fn numbered_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)[.)](?:\s+(.*))?$").expect("valid numbering regex"))
}

fn split_number(line: &str) -> Option<(u32, &str)> {
    let caps = numbered_regex().captures(line)?;
    let n = caps[1].parse().ok()?;
    Some((n, caps.get(2).map_or("", |m| m.as_str())))
}

/// Splits a reasoning fence into steps: numbered items when any line is
/// numbered, otherwise blank-line separated paragraphs.
fn split_steps(body: &FenceBody<'_>) -> Vec<String> {
    let numbered = body
        .lines
        .iter()
        .any(|(_, l)| numbered_regex().is_match(l) && !l.trim().is_empty());
    let mut steps: Vec<String> = Vec::new();
    if numbered {
        for (_, line) in body.content_lines() {
            match split_number(line) {
                Some((_, rest)) => steps.push(rest.trim().to_string()),
                None => match steps.last_mut() {
                    Some(last) => {
                        last.push(' ');
                        last.push_str(line);
                    }
                    None => steps.push(line.to_string()),
                },
            }
        }
    } else {
        let mut current: Vec<&str> = Vec::new();
        for (_, line) in &body.lines {
            let line = line.trim();
            if line.is_empty() {
                if !current.is_empty() {
                    steps.push(current.join(" "));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            steps.push(current.join(" "));
        }
    }
    steps
        .into_iter()
        .map(|s| unescape(s.trim()))
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_reasoning(raw: &str, stage: OutputStage) -> Result<(ReasoningTrace, String), ParseError> {
    let reasoning = require_fence(raw, Fence::Reasoning)?;
    let answer = require_fence(raw, Fence::Answer)?;
    if reasoning.is_blank() {
        return Err(ParseError::EmptyFence(Fence::Reasoning.name()));
    }
    if answer.is_blank() {
        return Err(ParseError::EmptyFence(Fence::Answer.name()));
    }
    let trace = ReasoningTrace {
        steps: split_steps(&reasoning),
        raw: reasoning.text(),
        stage,
    };
    Ok((trace, unescape(answer.text().trim())))
}

// ---------------------------------------------------------------------------
// Parsers

/// Parses a chain-of-thought completion into a preliminary trace and answer.
pub fn parse_cot(raw: &str) -> Result<(ReasoningTrace, CitedAnswer), ParseError> {
    let (trace, answer) = parse_reasoning(raw, OutputStage::Initial)?;
    Ok((trace, CitedAnswer::initial(answer)))
}

const CLAIM_LABEL: &str = "CLAIM:";
const QUERY_SEP: &str = "|| QUERY:";
const ORIGIN_SEP: &str = "|| ORIGIN:";
const VERDICT_LABEL: &str = "VERDICT:";
const EVIDENCE_SEP: &str = "|| EVIDENCE:";
const SOURCE_SEP: &str = "|| SOURCE:";

fn field(text: &str, line: usize, name: &'static str) -> Result<String, ParseError> {
    let t = unescape(text.trim());
    if t.is_empty() {
        Err(ParseError::MissingField { line, field: name })
    } else {
        Ok(t)
    }
}

/// Parses the claim-extraction completion into paired claims and queries.
pub fn parse_claims(raw: &str) -> Result<(Vec<FactualClaim>, Vec<VerificationQuery>), ParseError> {
    let body = require_fence(raw, Fence::Claims)?;
    let mut claims = Vec::new();
    let mut queries = Vec::new();
    for (line_no, line) in body.content_lines() {
        let expected = claims.len() as u32 + 1;
        let (n, rest) = split_number(line).ok_or_else(|| ParseError::MalformedLine {
            line: line_no,
            expected: "a numbered claim line",
            content: line.to_string(),
        })?;
        if n != expected {
            return Err(ParseError::NumberingGap { expected, found: n });
        }
        let rest = rest.trim_start().strip_prefix(CLAIM_LABEL).ok_or_else(|| {
            ParseError::MalformedLine {
                line: line_no,
                expected: "CLAIM: <text> || QUERY: <text>",
                content: line.to_string(),
            }
        })?;
        let (claim_text, query_part) =
            rest.split_once(QUERY_SEP)
                .ok_or(ParseError::MissingSeparator {
                    line: line_no,
                    separator: QUERY_SEP,
                })?;
        let (query_text, origin) = match query_part.rfind(ORIGIN_SEP) {
            Some(pos) => {
                let token = query_part[pos + ORIGIN_SEP.len()..].trim();
                let origin = match token.to_ascii_uppercase().as_str() {
                    "ANSWER" => ClaimOrigin::Answer,
                    "CHAIN" => ClaimOrigin::Chain,
                    _ => {
                        return Err(ParseError::MalformedLine {
                            line: line_no,
                            expected: "ORIGIN: ANSWER or ORIGIN: CHAIN",
                            content: line.to_string(),
                        })
                    }
                };
                (&query_part[..pos], origin)
            }
            None => (query_part, ClaimOrigin::Chain),
        };
        claims.push(FactualClaim {
            claim_id: n,
            text: field(claim_text, line_no, "CLAIM")?,
            origin,
        });
        queries.push(VerificationQuery {
            claim_id: n,
            text: field(query_text, line_no, "QUERY")?,
        });
    }
    if claims.is_empty() {
        return Err(ParseError::NoClaims);
    }
    Ok((claims, queries))
}

/// Parses the verification completion, requiring exactly one record per
/// expected claim id. Records come back in `expected_claim_ids` order.
pub fn parse_evidence(
    raw: &str,
    expected_claim_ids: &[u32],
) -> Result<Vec<VerificationRecord>, ParseError> {
    let body = require_fence(raw, Fence::Evidence)?;
    let mut found: BTreeMap<u32, VerificationRecord> = BTreeMap::new();
    for (line_no, line) in body.content_lines() {
        let (id, rest) = split_number(line).ok_or_else(|| ParseError::MalformedLine {
            line: line_no,
            expected: "a numbered evidence line",
            content: line.to_string(),
        })?;
        let rest = rest
            .trim_start()
            .strip_prefix(VERDICT_LABEL)
            .ok_or_else(|| ParseError::MalformedLine {
                line: line_no,
                expected: "VERDICT: <token> || EVIDENCE: <text> || SOURCE: <text>",
                content: line.to_string(),
            })?;
        let (token, rest) = rest
            .split_once(EVIDENCE_SEP)
            .ok_or(ParseError::MissingField {
                line: line_no,
                field: "EVIDENCE",
            })?;
        let token = token.trim();
        let verdict = Verdict::from_token(&token.to_ascii_uppercase()).ok_or_else(|| {
            ParseError::UnknownVerdict {
                line: line_no,
                token: token.to_string(),
            }
        })?;
        let (evidence, source) = rest
            .rsplit_once(SOURCE_SEP)
            .ok_or(ParseError::MissingField {
                line: line_no,
                field: "SOURCE",
            })?;
        let record = VerificationRecord {
            claim_id: id,
            verdict,
            evidence: field(evidence, line_no, "EVIDENCE")?,
            source: field(source, line_no, "SOURCE")?,
        };
        if found.insert(id, record).is_some() {
            return Err(ParseError::DuplicateId(id));
        }
    }
    let expected: BTreeSet<u32> = expected_claim_ids.iter().copied().collect();
    let got: BTreeSet<u32> = found.keys().copied().collect();
    if expected != got {
        return Err(ParseError::ClaimIdMismatch {
            missing: expected.difference(&got).copied().collect(),
            extra: got.difference(&expected).copied().collect(),
        });
    }
    Ok(expected_claim_ids
        .iter()
        .filter_map(|id| found.remove(id))
        .collect())
}

/// Parses the refinement completion. Each marker `[n]` is resolved through
/// the n-th SOURCES entry to the first verification record whose source
/// matches it after whitespace normalization, or kept as an unattributed
/// source otherwise.
pub fn parse_refined(
    raw: &str,
    verifications: &[VerificationRecord],
) -> Result<(ReasoningTrace, CitedAnswer), ParseError> {
    let (trace, answer_text) = parse_reasoning(raw, OutputStage::Final)?;
    let markers = marker_indices(&answer_text);
    let max = markers.last().copied().unwrap_or(0);
    let missing: Vec<u32> = (1..=max)
        .filter(|n| markers.binary_search(n).is_err())
        .collect();
    if !missing.is_empty() {
        return Err(ParseError::MarkerGap { missing });
    }

    let mut sources: Vec<String> = Vec::new();
    match find_fence(raw, Fence::Sources)? {
        Some(body) => {
            for (line_no, line) in body.content_lines() {
                let expected = sources.len() as u32 + 1;
                let (n, rest) = split_number(line).ok_or_else(|| ParseError::MalformedLine {
                    line: line_no,
                    expected: "a numbered source line",
                    content: line.to_string(),
                })?;
                if n != expected {
                    return Err(ParseError::NumberingGap { expected, found: n });
                }
                sources.push(field(rest, line_no, "SOURCE")?);
            }
        }
        None if max > 0 => return Err(ParseError::MissingFence(Fence::Sources.begin())),
        None => {}
    }
    if (sources.len() as u32) < max {
        return Err(ParseError::TooFewSources {
            needed: max,
            found: sources.len() as u32,
        });
    }

    let normalized: Vec<String> = verifications
        .iter()
        .map(|r| normalize_ws(&r.source))
        .collect();
    let markers = markers
        .iter()
        .map(|&index| {
            let source = &sources[index as usize - 1];
            let key = normalize_ws(source);
            let source_ref = match normalized.iter().position(|s| *s == key) {
                Some(i) => SourceRef::Record(i),
                None => SourceRef::Unattributed(source.clone()),
            };
            CitationMarker { index, source_ref }
        })
        .collect();
    Ok((
        trace,
        CitedAnswer {
            text: answer_text,
            markers,
            stage: OutputStage::Final,
        },
    ))
}

// ---------------------------------------------------------------------------
// Canonical serializers

fn render_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, escape(s)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Canonical chain-of-thought completion for the given steps and answer.
pub fn render_cot(steps: &[String], answer: &str) -> String {
    format!(
        "BEGIN_REASONING\n{}\nEND_REASONING\nBEGIN_ANSWER\n{}\nEND_ANSWER",
        render_steps(steps),
        escape(answer)
    )
}

/// Claims and their queries as a `BEGIN_CLAIMS` block. Queries are paired
/// with claims by claim id.
pub fn render_claims_block(claims: &[FactualClaim], queries: &[VerificationQuery]) -> String {
    let mut out = String::from("BEGIN_CLAIMS\n");
    for claim in claims {
        let query = queries
            .iter()
            .find(|q| q.claim_id == claim.claim_id)
            .map(|q| q.text.as_str())
            .unwrap_or_default();
        out.push_str(&format!(
            "{}. CLAIM: {} || QUERY: {}",
            claim.claim_id,
            escape(&claim.text),
            escape(query)
        ));
        if claim.origin == ClaimOrigin::Answer {
            out.push_str(" || ORIGIN: ANSWER");
        }
        out.push('\n');
    }
    out.push_str("END_CLAIMS");
    out
}

/// Numbered verification questions, one per line.
pub fn render_queries_block(queries: &[VerificationQuery]) -> String {
    queries
        .iter()
        .map(|q| format!("{}. QUERY: {}", q.claim_id, escape(&q.text)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_evidence_block(records: &[VerificationRecord]) -> String {
    let mut out = String::from("BEGIN_EVIDENCE\n");
    for r in records {
        out.push_str(&format!(
            "{}. VERDICT: {} || EVIDENCE: {} || SOURCE: {}\n",
            r.claim_id,
            r.verdict.token(),
            escape(&r.evidence),
            escape(&r.source)
        ));
    }
    out.push_str("END_EVIDENCE");
    out
}

/// Canonical refinement completion. `records` resolves `SourceRef::Record`
/// markers to their source text.
pub fn render_refined(
    steps: &[String],
    answer: &CitedAnswer,
    records: &[VerificationRecord],
) -> String {
    let mut markers: Vec<&CitationMarker> = answer.markers.iter().collect();
    markers.sort_by_key(|m| m.index);
    let sources: Vec<String> = markers
        .iter()
        .map(|m| {
            let source = CitedAnswer::source_text(m, records).unwrap_or_default();
            format!("{}. {}", m.index, escape(source))
        })
        .collect();
    let mut out = format!(
        "BEGIN_REASONING\n{}\nEND_REASONING\nBEGIN_ANSWER\n{}\nEND_ANSWER\nBEGIN_SOURCES\n",
        render_steps(steps),
        escape(&answer.text)
    );
    for s in sources {
        out.push_str(&s);
        out.push('\n');
    }
    out.push_str("END_SOURCES");
    out
}

// ---------------------------------------------------------------------------
// Instructions and repair

const ESCAPE_NOTE: &str = "Put each fence keyword at the start of its own line. If your content must contain a fence keyword literally, prefix it with a backslash, e.g. \\END_ANSWER.";

const COT_GRAMMAR: &str = "Format your reply exactly as follows:
BEGIN_REASONING
1. <first reasoning step>
2. <next reasoning step>
END_REASONING
BEGIN_ANSWER
<final answer>
END_ANSWER";

const CLAIMS_GRAMMAR: &str = "Format your reply exactly as follows, numbering claims 1, 2, 3, ... without gaps:
BEGIN_CLAIMS
1. CLAIM: <one declarative, objectively checkable statement> || QUERY: <one question that verifies it>
2. CLAIM: <statement taken from the answer> || QUERY: <question> || ORIGIN: ANSWER
END_CLAIMS
Mark a claim with \"|| ORIGIN: ANSWER\" when it comes from the answer rather than the reasoning. If there is nothing to verify, reply with BEGIN_CLAIMS and END_CLAIMS on consecutive lines.";

const EVIDENCE_GRAMMAR: &str = "Format your reply exactly as follows, one line per query number:
BEGIN_EVIDENCE
1. VERDICT: <CONFIRMED|REFUTED|NEEDS_CONTEXT|ALTERNATIVE> || EVIDENCE: <evidence text> || SOURCE: <citation source>
END_EVIDENCE";

const REFINED_GRAMMAR: &str = "Format your reply exactly as follows:
BEGIN_REASONING
1. <first refined reasoning step>
2. <next refined reasoning step>
END_REASONING
BEGIN_ANSWER
<refined answer with citation markers such as [1] and [2] placed after the statements they support>
END_ANSWER
BEGIN_SOURCES
1. <source for marker [1], copied exactly from the evidence>
2. <source for marker [2]>
END_SOURCES
Number markers 1, 2, 3, ... without gaps. Leave the SOURCES fence empty if the answer carries no markers.";

/// Output-format instructions for a stage, quoted verbatim in its prompt.
pub fn grammar_instructions(stage: StageTag) -> &'static str {
    match stage {
        StageTag::InitialCot | StageTag::StandardCot | StageTag::RagCot => COT_GRAMMAR,
        StageTag::ClaimExtract => CLAIMS_GRAMMAR,
        StageTag::VerifySimulate => EVIDENCE_GRAMMAR,
        StageTag::RefineIntegrate => REFINED_GRAMMAR,
    }
}

pub fn escape_note() -> &'static str {
    ESCAPE_NOTE
}

/// Corrective follow-up message for a completion that failed to parse.
pub fn repair_prompt(stage: StageTag, error: &ParseError) -> ChatMessage {
    let hint = match error {
        ParseError::NumberingGap { expected, .. } => {
            format!(
                "Please renumber claims contiguously starting from 1; item {expected} is missing."
            )
        }
        ParseError::UnknownVerdict { .. } => format!(
            "Use only these verdict tokens: {}.",
            Verdict::ALL.map(|v| v.token()).join(", ")
        ),
        ParseError::MissingFence(name) => {
            format!("The fence keyword {name} is missing; every fence must be opened and closed.")
        }
        ParseError::EmptyFence(name) => format!("The {name} fence must not be empty."),
        ParseError::ClaimIdMismatch { .. } | ParseError::DuplicateId(_) => {
            "Give exactly one evidence line for each query number.".to_string()
        }
        ParseError::MarkerGap { .. } | ParseError::TooFewSources { .. } => {
            "Number citation markers 1, 2, 3, ... without gaps and list one source per marker."
                .to_string()
        }
        ParseError::NoClaims => "List at least one claim.".to_string(),
        _ => "Follow the line format exactly.".to_string(),
    };
    ChatMessage::user(format!(
        "Your previous reply could not be parsed: {error}.\n{hint}\nReply again in full.\n{}\n{ESCAPE_NOTE}",
        grammar_instructions(stage)
    ))
}

impl fmt::Display for Fence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
