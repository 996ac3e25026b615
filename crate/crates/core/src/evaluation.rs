//! Gold matching, the three metrics (factual accuracy, hallucination rate,
//! citation F1), aggregation and report rendering.
//!
//! Everything is generic over [`Scalar`] so the same code can be run in exact
//! rational arithmetic (used by the tests) or in `f64` (used by the CLI).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    method_label, strip_markers, AblationConfig, CitedAnswer, GoldFact, GoldLabel, Method,
    RunRecord, TaskInstance, TaskType,
};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// Label of the per-method row aggregated over all task types.
pub const ALL_TASKS: &str = "All";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Correct,
    Hallucinated,
    Neutral,
}

impl Bucket {
    fn for_label(label: Option<GoldLabel>) -> Self {
        match label {
            Some(GoldLabel::Supported) => Bucket::Correct,
            Some(GoldLabel::Neutral) => Bucket::Neutral,
            Some(GoldLabel::Refuted) | None => Bucket::Hallucinated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimMatch<S> {
    pub claim_id: u32,
    pub matched_fact_id: Option<String>,
    pub overlap_score: S,
    pub bucket: Bucket,
}

/// Lowercase, punctuation removed, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_set(text: &str) -> BTreeSet<String> {
    normalize(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Jaccard similarity of the normalized token sets; `0` when both are empty.
pub fn jaccard<S: Scalar>(a: &str, b: &str) -> S {
    let (a, b) = (token_set(a), token_set(b));
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    S::ratio(inter, union)
}

/// Best gold fact for `claim_text` with overlap at least `threshold`; the
/// earliest fact wins ties.
pub fn match_claim<S: Scalar>(
    claim_id: u32,
    claim_text: &str,
    gold_facts: &[GoldFact],
    threshold: S,
) -> ClaimMatch<S> {
    let mut best: Option<(usize, S)> = None;
    let mut best_overlap = S::zero();
    for (i, fact) in gold_facts.iter().enumerate() {
        let overlap: S = jaccard(claim_text, &fact.statement);
        if overlap > best_overlap {
            best_overlap = overlap;
        }
        if overlap >= threshold && best.is_none_or(|(_, b)| overlap > b) {
            best = Some((i, overlap));
        }
    }
    match best {
        Some((i, overlap)) => ClaimMatch {
            claim_id,
            matched_fact_id: Some(gold_facts[i].fact_id.clone()),
            overlap_score: overlap,
            bucket: Bucket::for_label(Some(gold_facts[i].label)),
        },
        None => ClaimMatch {
            claim_id,
            matched_fact_id: None,
            overlap_score: best_overlap,
            bucket: Bucket::Hallucinated,
        },
    }
}

fn sentence_boundary() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?]\s+\p{Lu}").expect("valid boundary regex"))
}

/// Splits on `.`, `!` or `?` followed by whitespace and a capital letter.
/// Sentences keep their terminal punctuation and any citation markers.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for m in sentence_boundary().find_iter(text) {
        // the match ends just after the capital; cut after the punctuation
        let end = m.start() + 1;
        out.push(text[start..end].trim().to_owned());
        let cap_len = m.as_str().chars().last().map_or(0, char::len_utf8);
        start = m.end() - cap_len;
    }
    out.push(text[start..].trim().to_owned());
    out.retain(|s| !s.is_empty());
    out
}

/// Metric values shared by per-task and aggregated rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics<S> {
    pub factual_accuracy: S,
    pub hallucination_rate: S,
    pub neutral_rate: S,
    pub citation_precision: S,
    pub citation_recall: S,
    pub citation_f1: S,
}

impl<S: Scalar> Metrics<S> {
    pub fn zero() -> Self {
        let z = S::zero();
        Metrics {
            factual_accuracy: z,
            hallucination_rate: z,
            neutral_rate: z,
            citation_precision: z,
            citation_recall: z,
            citation_f1: z,
        }
    }

    pub fn bucket_sum(&self) -> S {
        self.factual_accuracy + self.hallucination_rate + self.neutral_rate
    }

    fn values(&self) -> [S; 6] {
        [
            self.factual_accuracy,
            self.hallucination_rate,
            self.neutral_rate,
            self.citation_precision,
            self.citation_recall,
            self.citation_f1,
        ]
    }

    fn from_values(v: [S; 6]) -> Self {
        Metrics {
            factual_accuracy: v[0],
            hallucination_rate: v[1],
            neutral_rate: v[2],
            citation_precision: v[3],
            citation_recall: v[4],
            citation_f1: v[5],
        }
    }

    /// Unweighted mean; zero for an empty slice.
    pub fn mean(items: &[Metrics<S>]) -> Self {
        if items.is_empty() {
            return Self::zero();
        }
        let n = S::from_count(items.len());
        let mut acc = [S::zero(); 6];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a = *a + v;
            }
        }
        Self::from_values(acc.map(|a| a / n))
    }

    pub fn to_f64(&self) -> Metrics<f64> {
        Metrics::from_values(self.values().map(Scalar::to_f64_lossy))
    }
}

/// `2PR / (P + R)`, zero when `P + R = 0`.
pub fn f1<S: Scalar>(precision: S, recall: S) -> S {
    let sum = precision + recall;
    if sum == S::zero() {
        S::zero()
    } else {
        (S::one() + S::one()) * precision * recall / sum
    }
}

/// Citation precision, recall and F1 from raw counts.
///
/// With neither markers nor citation-requiring facts the run is perfect by
/// convention. Otherwise an empty denominator gives precision 0 (nothing was
/// cited although something should have been) or recall 1 (nothing needed
/// citing).
pub fn citation_scores<S: Scalar>(
    correct_markers: usize,
    total_markers: usize,
    covered_required: usize,
    total_required: usize,
) -> (S, S, S) {
    if total_markers == 0 && total_required == 0 {
        return (S::one(), S::one(), S::one());
    }
    let precision = S::ratio(correct_markers, total_markers);
    let recall = if total_required == 0 {
        S::one()
    } else {
        S::ratio(covered_required, total_required)
    };
    (precision, recall, f1(precision, recall))
}

/// Scores for one run against its task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRowOf<S> {
    pub task_id: String,
    pub task_type: TaskType,
    pub method: String,
    #[serde(flatten)]
    pub metrics: Metrics<S>,
    pub claim_count: usize,
    pub marker_count: usize,
    pub correct_markers: usize,
    /// No claims were available to score; claim metrics are conventional.
    #[serde(default)]
    pub no_claims: bool,
    pub matches: Vec<ClaimMatch<S>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("run for task '{0}' has no final output")]
    MissingFinal(String),
    #[error("run task_id '{run}' does not match task '{task}'")]
    TaskMismatch { run: String, task: String },
    #[error("task_id '{0}' not found in dataset")]
    OrphanTask(String),
    #[error("conflicting rows for task type '{task_type}', method '{method}'")]
    Conflict { task_type: String, method: String },
}

struct ScoredClaim {
    id: u32,
    text: String,
}

/// Scores a finished run. Claims are the run's extracted claims, or, when it
/// has none, the sentences of its final answer. Each citation marker is
/// judged by the final-answer sentence that carries it, so a refined answer
/// earns citation credit for its corrections.
pub fn score_run<S: Scalar>(
    run: &RunRecord,
    task: &TaskInstance,
    threshold: S,
) -> Result<MetricRowOf<S>, EvalError> {
    if run.task_id != task.id {
        return Err(EvalError::TaskMismatch {
            run: run.task_id.clone(),
            task: task.id.clone(),
        });
    }
    let final_output = run
        .final_output
        .as_ref()
        .ok_or_else(|| EvalError::MissingFinal(run.task_id.clone()))?;
    let answer = &final_output.answer;
    let facts = &task.gold_facts;

    let claims: Vec<ScoredClaim> = if run.claims.is_empty() {
        split_sentences(&answer.plain_text())
            .into_iter()
            .enumerate()
            .map(|(i, text)| ScoredClaim {
                id: i as u32 + 1,
                text,
            })
            .collect()
    } else {
        run.claims
            .iter()
            .map(|c| ScoredClaim {
                id: c.claim_id,
                text: c.text.clone(),
            })
            .collect()
    };
    let matches: Vec<ClaimMatch<S>> = claims
        .iter()
        .map(|c| match_claim(c.id, &c.text, facts, threshold))
        .collect();

    let total = matches.len();
    let count = |b: Bucket| matches.iter().filter(|m| m.bucket == b).count();
    let (accuracy, hallucination, neutral) = if total == 0 {
        (S::zero(), S::zero(), S::one())
    } else {
        (
            S::ratio(count(Bucket::Correct), total),
            S::ratio(count(Bucket::Hallucinated), total),
            S::ratio(count(Bucket::Neutral), total),
        )
    };

    let sentences = split_sentences(&answer.text);
    let mut correct_markers = 0;
    let mut covered: BTreeSet<&str> = BTreeSet::new();
    for marker in &answer.markers {
        let Some(m) = marker_claim(marker.index, &sentences, facts, threshold) else {
            continue;
        };
        let (Bucket::Correct, Some(fact_id)) = (m.bucket, m.matched_fact_id.as_deref()) else {
            continue;
        };
        let fact = facts
            .iter()
            .find(|f| f.fact_id == fact_id)
            .expect("matched fact exists");
        let source = normalize(CitedAnswer::source_text(marker, &run.verifications).unwrap_or(""));
        let sourced = fact.allowed_sources.iter().any(|allowed| {
            let allowed = normalize(allowed);
            !allowed.is_empty() && source.contains(&allowed)
        });
        if sourced {
            correct_markers += 1;
            covered.insert(fact.fact_id.as_str());
        }
    }
    let required: Vec<&GoldFact> = facts.iter().filter(|f| f.requires_citation).collect();
    let covered_required = required
        .iter()
        .filter(|f| covered.contains(f.fact_id.as_str()))
        .count();
    let (precision, recall, f1) = citation_scores(
        correct_markers,
        answer.markers.len(),
        covered_required,
        required.len(),
    );

    Ok(MetricRowOf {
        task_id: task.id.clone(),
        task_type: task.task_type,
        method: run.method_label(),
        metrics: Metrics {
            factual_accuracy: accuracy,
            hallucination_rate: hallucination,
            neutral_rate: neutral,
            citation_precision: precision,
            citation_recall: recall,
            citation_f1: f1,
        },
        claim_count: total,
        marker_count: answer.markers.len(),
        correct_markers,
        no_claims: total == 0,
        matches,
    })
}

/// The claim a marker vouches for: the final-answer sentence carrying it.
fn marker_claim<S: Scalar>(
    index: u32,
    sentences: &[String],
    facts: &[GoldFact],
    threshold: S,
) -> Option<ClaimMatch<S>> {
    let tag = format!("[{index}]");
    let sentence = sentences.iter().find(|s| s.contains(&tag))?;
    Some(match_claim(
        index,
        &strip_markers(sentence),
        facts,
        threshold,
    ))
}

/// One aggregated row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRowOf<S> {
    /// Task-type label, or [`ALL_TASKS`] for the per-method grand row.
    pub task_type: String,
    pub method: String,
    pub task_count: usize,
    #[serde(flatten)]
    pub metrics: Metrics<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReportOf<S> {
    pub rows: Vec<MetricRowOf<S>>,
    pub groups: Vec<GroupRowOf<S>>,
}

impl<S> Default for EvalReportOf<S> {
    fn default() -> Self {
        EvalReportOf {
            rows: Vec::new(),
            groups: Vec::new(),
        }
    }
}

/// Sort key placing baselines first, then ablated variants in table order,
/// then the full pipeline.
pub fn method_rank(label: &str) -> (usize, String) {
    let mut known = vec![
        method_label(Method::StandardCot, &AblationConfig::FULL),
        method_label(Method::CotRag, &AblationConfig::FULL),
    ];
    known.extend(
        AblationConfig::table_variants()
            .iter()
            .map(|a| method_label(Method::Verifact, a)),
    );
    match known.iter().position(|k| k == label) {
        Some(i) => (i, String::new()),
        None => (known.len() - 1, label.to_owned()),
    }
}

fn task_type_rank(label: &str) -> usize {
    TaskType::from_label(label).map_or(usize::MAX, |t| t as usize)
}

/// Method sort key paired with the method label.
type MethodKey = ((usize, String), String);

/// Mean of the rows per (task type, method) plus a grand row per method.
/// Rows are sorted by task id first, so input order does not matter.
pub fn aggregate<S: Scalar>(mut rows: Vec<MetricRowOf<S>>) -> EvalReportOf<S> {
    rows.sort_by(|a, b| {
        (a.task_id.as_str(), method_rank(&a.method))
            .cmp(&(b.task_id.as_str(), method_rank(&b.method)))
    });
    let mut groups: BTreeMap<(usize, MethodKey), Vec<Metrics<S>>> = BTreeMap::new();
    let mut grand: BTreeMap<MethodKey, Vec<Metrics<S>>> = BTreeMap::new();
    for row in &rows {
        let label = row.task_type.label();
        groups
            .entry((
                task_type_rank(label),
                (method_rank(&row.method), row.method.clone()),
            ))
            .or_default()
            .push(row.metrics);
        grand
            .entry((method_rank(&row.method), row.method.clone()))
            .or_default()
            .push(row.metrics);
    }
    let mut out: Vec<GroupRowOf<S>> = groups
        .into_iter()
        .map(|((tt, (_, method)), items)| GroupRowOf {
            task_type: TaskType::ALL[tt].label().to_owned(),
            method,
            task_count: items.len(),
            metrics: Metrics::mean(&items),
        })
        .collect();
    out.extend(grand.into_iter().map(|((_, method), items)| GroupRowOf {
        task_type: ALL_TASKS.to_owned(),
        method,
        task_count: items.len(),
        metrics: Metrics::mean(&items),
    }));
    EvalReportOf { rows, groups: out }
}

/// Combines reports. Two inputs contributing the same (task type, method)
/// group is an error; the merged groups are recomputed from the task rows.
pub fn merge_reports<S: Scalar>(
    reports: Vec<EvalReportOf<S>>,
) -> Result<EvalReportOf<S>, EvalError> {
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut rows = Vec::new();
    for report in reports {
        let mut own: BTreeSet<(String, String)> = BTreeSet::new();
        for row in &report.rows {
            own.insert((row.task_type.label().to_owned(), row.method.clone()));
        }
        for key in own {
            if seen.contains(&key) {
                return Err(EvalError::Conflict {
                    task_type: key.0,
                    method: key.1,
                });
            }
            seen.insert(key);
        }
        rows.extend(report.rows);
    }
    Ok(aggregate(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    #[default]
    Plain,
    Delimited,
}

impl ReportFormat {
    fn separator(self) -> &'static str {
        match self {
            ReportFormat::Plain => " | ",
            ReportFormat::Delimited => "\t",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" | "plain-table" => Ok(ReportFormat::Plain),
            "delimited" | "tsv" => Ok(ReportFormat::Delimited),
            other => Err(format!(
                "unknown report format '{other}' (expected plain or delimited)"
            )),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 5] = [
    "Task Type",
    "Method",
    "Factual ACC",
    "Hallucination (↓)",
    "Citation Quality",
];

pub const ABLATION_COLUMNS: [&str; 4] = [
    "Method Variant",
    "Factual ACC",
    "Hallucination (↓)",
    "Citation Quality",
];

/// Accuracy and hallucination as integer percentages, F1 to two decimals.
pub fn metric_cells<S: Scalar>(m: &Metrics<S>) -> [String; 3] {
    let pct = |v: S| format!("{:.0}", (v.to_f64_lossy() * 100.0).round());
    [
        pct(m.factual_accuracy),
        pct(m.hallucination_rate),
        format!("{:.2}", m.citation_f1.to_f64_lossy()),
    ]
}

fn render_lines(header: &[&str], rows: Vec<Vec<String>>, format: ReportFormat) -> String {
    let sep = format.separator();
    let mut out = header.join(sep);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(sep));
        out.push('\n');
    }
    out
}

/// Table of group rows: task type, method, accuracy %, hallucination %, F1.
pub fn render_report<S: Scalar>(report: &EvalReportOf<S>, format: ReportFormat) -> String {
    let rows = report
        .groups
        .iter()
        .map(|g| {
            let mut cells = vec![g.task_type.clone(), g.method.clone()];
            cells.extend(metric_cells(&g.metrics));
            cells
        })
        .collect();
    render_lines(&REPORT_COLUMNS, rows, format)
}

/// Ablation comparison: an optional baseline, the three single-stage
/// ablations, then the full pipeline, each aggregated over all task types.
pub fn render_ablation_table<S: Scalar>(
    report: &EvalReportOf<S>,
    baseline: Option<&str>,
    format: ReportFormat,
) -> String {
    let grand = |method: &str| {
        report
            .groups
            .iter()
            .find(|g| g.task_type == ALL_TASKS && g.method == method)
    };
    let mut rows = Vec::new();
    if let Some(g) = baseline.and_then(grand) {
        let mut cells = vec![format!("{} (Baseline)", g.method)];
        cells.extend(metric_cells(&g.metrics));
        rows.push(cells);
    }
    for ablation in AblationConfig::table_variants() {
        let label = method_label(Method::Verifact, &ablation);
        if let Some(g) = grand(&label) {
            let name = if ablation.is_full() {
                format!("{label} (Full)")
            } else {
                label
            };
            let mut cells = vec![name];
            cells.extend(metric_cells(&g.metrics));
            rows.push(cells);
        }
    }
    render_lines(&ABLATION_COLUMNS, rows, format)
}
