//! Domain types shared across the pipeline, evaluation and CLI.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::provider::ChatMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    FactualQa,
    SummarizationCited,
    Explanatory,
    Controversial,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::FactualQa,
        TaskType::SummarizationCited,
        TaskType::Explanatory,
        TaskType::Controversial,
    ];

    /// Row label used in rendered reports.
    pub fn label(self) -> &'static str {
        match self {
            TaskType::FactualQa => "Complex Factual QA",
            TaskType::SummarizationCited => "Summarization with Citations",
            TaskType::Explanatory => "Explanatory Content Generation",
            TaskType::Controversial => "Controversial Topic Analysis",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label() == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub text: String,
}

/// One input query plus its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task_type: TaskType,
    pub query: String,
    #[serde(default)]
    pub source_documents: Vec<SourceDocument>,
    #[serde(default)]
    pub gold_facts: Vec<GoldFact>,
}

impl TaskInstance {
    /// The query as presented to the model: the raw query, followed by any
    /// attached source documents.
    pub fn prompt_query(&self) -> String {
        if self.source_documents.is_empty() {
            return self.query.clone();
        }
        let mut out = self.query.clone();
        out.push_str("\n\nSource documents:");
        for doc in &self.source_documents {
            out.push_str(&format!("\n[{}] {}", doc.doc_id, doc.text));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldLabel {
    Supported,
    Refuted,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldFact {
    pub fact_id: String,
    pub statement: String,
    pub label: GoldLabel,
    #[serde(default)]
    pub allowed_sources: Vec<String>,
    #[serde(default)]
    pub requires_citation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputStage {
    Initial,
    Final,
}

/// A reasoning chain, either the preliminary one or the refined one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub steps: Vec<String>,
    /// Verbatim fence body the steps were parsed from.
    pub raw: String,
    pub stage: OutputStage,
}

impl ReasoningTrace {
    /// Steps joined by single spaces.
    pub fn joined(&self) -> String {
        self.steps.join(" ")
    }

    pub fn with_stage(&self, stage: OutputStage) -> Self {
        ReasoningTrace {
            stage,
            ..self.clone()
        }
    }
}

/// Where a citation marker points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRef {
    /// Index into the run's verification record list.
    Record(usize),
    /// A source the model cited that matches no verification record.
    Unattributed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationMarker {
    pub index: u32,
    pub source_ref: SourceRef,
}

/// An answer, possibly carrying inline `[n]` citation markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitedAnswer {
    pub text: String,
    #[serde(default)]
    pub markers: Vec<CitationMarker>,
    pub stage: OutputStage,
}

impl CitedAnswer {
    pub fn initial(text: impl Into<String>) -> Self {
        CitedAnswer {
            text: text.into(),
            markers: Vec::new(),
            stage: OutputStage::Initial,
        }
    }

    /// Answer text with every `[n]` marker removed.
    pub fn plain_text(&self) -> String {
        strip_markers(&self.text)
    }

    /// Source text the marker resolves to.
    pub fn source_text<'a>(
        marker: &'a CitationMarker,
        records: &'a [VerificationRecord],
    ) -> Option<&'a str> {
        match &marker.source_ref {
            SourceRef::Record(i) => records.get(*i).map(|r| r.source.as_str()),
            SourceRef::Unattributed(s) => Some(s.as_str()),
        }
    }

    /// Checks the marker invariants against the records the markers index into.
    pub fn check(&self, records: &[VerificationRecord]) -> Result<(), String> {
        if self.stage == OutputStage::Initial && !self.markers.is_empty() {
            return Err("initial answer carries citation markers".into());
        }
        let in_text: BTreeSet<u32> = marker_indices(&self.text).into_iter().collect();
        let expected: BTreeSet<u32> = (1..=in_text.len() as u32).collect();
        if in_text != expected {
            return Err(format!(
                "marker indices {in_text:?} are not contiguous from 1"
            ));
        }
        let listed: BTreeSet<u32> = self.markers.iter().map(|m| m.index).collect();
        if self.stage == OutputStage::Final && listed != in_text {
            return Err(format!(
                "marker list {listed:?} does not match markers in text {in_text:?}"
            ));
        }
        for m in &self.markers {
            if let SourceRef::Record(i) = m.source_ref {
                if i >= records.len() {
                    return Err(format!("marker [{}] points at missing record {i}", m.index));
                }
            }
        }
        Ok(())
    }
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").expect("valid marker regex"))
}

/// Sorted, de-duplicated `[n]` marker indices found in `text`.
pub fn marker_indices(text: &str) -> Vec<u32> {
    let set: BTreeSet<u32> = marker_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    set.into_iter().collect()
}

/// Removes `[n]` markers and the whitespace run directly before each one.
pub fn strip_markers(text: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\s*\[\d+\]").expect("valid marker regex"));
    re.replace_all(text, "").into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimOrigin {
    Chain,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualClaim {
    pub claim_id: u32,
    pub text: String,
    pub origin: ClaimOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationQuery {
    pub claim_id: u32,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirmed,
    Refuted,
    NeedsContext,
    Alternative,
}

impl Verdict {
    pub const ALL: [Verdict; 4] = [
        Verdict::Confirmed,
        Verdict::Refuted,
        Verdict::NeedsContext,
        Verdict::Alternative,
    ];

    /// Wire token used in the evidence grammar.
    pub fn token(self) -> &'static str {
        match self {
            Verdict::Confirmed => "CONFIRMED",
            Verdict::Refuted => "REFUTED",
            Verdict::NeedsContext => "NEEDS_CONTEXT",
            Verdict::Alternative => "ALTERNATIVE",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Verdict::ALL.into_iter().find(|v| v.token() == token)
    }
}

/// Evidence and simulated source produced for one claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub claim_id: u32,
    pub verdict: Verdict,
    pub evidence: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub skip_claim_extraction: bool,
    pub skip_verification: bool,
    pub skip_refinement: bool,
}

impl AblationConfig {
    pub const FULL: AblationConfig = AblationConfig {
        skip_claim_extraction: false,
        skip_verification: false,
        skip_refinement: false,
    };

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    /// The three single-stage ablations plus the full pipeline, in report order.
    pub fn table_variants() -> [AblationConfig; 4] {
        [
            AblationConfig {
                skip_claim_extraction: true,
                ..Self::FULL
            },
            AblationConfig {
                skip_verification: true,
                ..Self::FULL
            },
            AblationConfig {
                skip_refinement: true,
                ..Self::FULL
            },
            Self::FULL,
        ]
    }

    /// All eight flag combinations.
    pub fn all_combinations() -> Vec<AblationConfig> {
        (0..8u8)
            .map(|bits| AblationConfig {
                skip_claim_extraction: bits & 1 != 0,
                skip_verification: bits & 2 != 0,
                skip_refinement: bits & 4 != 0,
            })
            .collect()
    }

    /// Short slug, e.g. for file names.
    pub fn slug(&self) -> String {
        if self.is_full() {
            return "full".into();
        }
        let mut parts = Vec::new();
        if self.skip_claim_extraction {
            parts.push("no-claim-extraction");
        }
        if self.skip_verification {
            parts.push("no-verification");
        }
        if self.skip_refinement {
            parts.push("no-refinement");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Verifact,
    StandardCot,
    CotRag,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Verifact => "verifact",
            Method::StandardCot => "standard_cot",
            Method::CotRag => "cot_rag",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "verifact" => Ok(Method::Verifact),
            "standard_cot" => Ok(Method::StandardCot),
            "cot_rag" => Ok(Method::CotRag),
            _ => Err(format!(
                "unknown method '{s}' (expected verifact, standard_cot or cot_rag)"
            )),
        }
    }
}

/// Human-readable label for a method and ablation, as shown in report tables.
pub fn method_label(method: Method, ablation: &AblationConfig) -> String {
    match method {
        Method::StandardCot => "Standard CoT".into(),
        Method::CotRag => "CoT + Basic RAG".into(),
        Method::Verifact => {
            let mut without = Vec::new();
            if ablation.skip_claim_extraction {
                without.push("Claim Extraction");
            }
            if ablation.skip_verification {
                without.push("Verification Simulation");
            }
            if ablation.skip_refinement {
                without.push("Refinement & Integration");
            }
            if without.is_empty() {
                "VeriFact-CoT".into()
            } else {
                format!("VeriFact-CoT w/o {}", without.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    InitialCot,
    ClaimExtract,
    VerifySimulate,
    RefineIntegrate,
    StandardCot,
    RagCot,
}

impl StageTag {
    pub const ALL: [StageTag; 6] = [
        StageTag::InitialCot,
        StageTag::ClaimExtract,
        StageTag::VerifySimulate,
        StageTag::RefineIntegrate,
        StageTag::StandardCot,
        StageTag::RagCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::InitialCot => "initial_cot",
            StageTag::ClaimExtract => "claim_extract",
            StageTag::VerifySimulate => "verify_simulate",
            StageTag::RefineIntegrate => "refine_integrate",
            StageTag::StandardCot => "standard_cot",
            StageTag::RagCot => "rag_cot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        StageTag::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

/// One provider round trip inside a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCall {
    pub messages: Vec<ChatMessage>,
    /// Completion text, absent when the call failed.
    pub raw: Option<String>,
    pub retry_count: u32,
    pub usage: TokenUsage,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageArtifact {
    Reasoning {
        trace: ReasoningTrace,
        answer: CitedAnswer,
    },
    Claims {
        claims: Vec<FactualClaim>,
        queries: Vec<VerificationQuery>,
    },
    Evidence {
        records: Vec<VerificationRecord>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Status,
    Timeout,
    MalformedEnvelope,
    Unscripted,
    AmbiguousScript,
    Prompt,
    Parse,
}

impl FailureKind {
    pub fn is_provider(self) -> bool {
        !matches!(self, FailureKind::Prompt | FailureKind::Parse)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageResult {
    Parsed(StageArtifact),
    Failed(StageFailure),
}

/// Everything that happened in one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage_tag: StageTag,
    /// Provider round trips in order; a repair round adds a second call.
    pub calls: Vec<ProviderCall>,
    /// Final completion text the result was parsed from.
    pub raw: Option<String>,
    pub result: StageResult,
    pub retry_count: u32,
    pub repair_used: bool,
    /// True when the stage output was synthesized without a provider call.
    #[serde(default)]
    pub synthetic: bool,
    pub duration_ms: u64,
    pub usage: TokenUsage,
}

impl StageOutcome {
    pub fn failure(&self) -> Option<&StageFailure> {
        match &self.result {
            StageResult::Failed(f) => Some(f),
            StageResult::Parsed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutput {
    pub trace: ReasoningTrace,
    pub answer: CitedAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFlags {
    /// Claim extraction found nothing to verify; final mirrors initial.
    pub no_claims: bool,
    /// Verification records are attached but were not integrated into the answer.
    pub verification_unintegrated: bool,
    /// The retriever returned no documents.
    pub empty_retrieval: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub stage_tag: StageTag,
    pub kind: FailureKind,
    pub message: String,
}

/// Full transcript of one method run on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub method: Method,
    #[serde(default)]
    pub ablation: AblationConfig,
    pub stages: Vec<StageOutcome>,
    pub initial: Option<RunOutput>,
    #[serde(default)]
    pub claims: Vec<FactualClaim>,
    #[serde(default)]
    pub queries: Vec<VerificationQuery>,
    #[serde(default)]
    pub verifications: Vec<VerificationRecord>,
    #[serde(rename = "final")]
    pub final_output: Option<RunOutput>,
    #[serde(default)]
    pub retrieved: Vec<RetrievedDoc>,
    #[serde(default)]
    pub flags: RunFlags,
    pub failure: Option<RunFailure>,
}

impl RunRecord {
    pub fn new(task_id: impl Into<String>, method: Method, ablation: AblationConfig) -> Self {
        RunRecord {
            task_id: task_id.into(),
            method,
            ablation,
            stages: Vec::new(),
            initial: None,
            claims: Vec::new(),
            queries: Vec::new(),
            verifications: Vec::new(),
            final_output: None,
            retrieved: Vec::new(),
            flags: RunFlags::default(),
            failure: None,
        }
    }

    pub fn method_label(&self) -> String {
        method_label(self.method, &self.ablation)
    }

    pub fn provider_call_count(&self) -> usize {
        self.stages.iter().map(|s| s.calls.len()).sum()
    }

    /// Copy with every timing and token-usage field zeroed, for
    /// comparisons across runs.
    pub fn without_volatile(&self) -> RunRecord {
        let mut out = self.clone();
        for stage in &mut out.stages {
            stage.duration_ms = 0;
            stage.usage = TokenUsage::default();
            for call in &mut stage.calls {
                call.duration_ms = 0;
                call.usage = TokenUsage::default();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub task_id: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "task '{}': {}: {}",
            self.task_id, self.field, self.message
        )
    }
}

/// Checks every task and gold-fact invariant; one error per violation.
pub fn validate_dataset(tasks: &[TaskInstance]) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    let mut seen_ids = HashSet::new();
    for task in tasks {
        let mut err = |field: &str, message: String| {
            errors.push(ValidationError {
                task_id: task.id.clone(),
                field: field.to_string(),
                message,
            })
        };
        if task.id.trim().is_empty() {
            err("id", "task id is empty".into());
        } else if !seen_ids.insert(task.id.as_str()) {
            err("id", "duplicate task id".into());
        }
        if task.query.trim().is_empty() {
            err("query", "query is empty".into());
        }
        let mut fact_ids = HashSet::new();
        for fact in &task.gold_facts {
            if fact.fact_id.trim().is_empty() {
                err("fact_id", "gold fact id is empty".into());
            } else if !fact_ids.insert(fact.fact_id.as_str()) {
                err("fact_id", format!("duplicate fact_id '{}'", fact.fact_id));
            }
            if fact.statement.trim().is_empty() {
                err(
                    "statement",
                    format!("gold fact '{}' has an empty statement", fact.fact_id),
                );
            }
            if fact.requires_citation {
                if fact.label != GoldLabel::Supported {
                    err(
                        "requires_citation",
                        format!(
                            "gold fact '{}' requires citation but is not supported",
                            fact.fact_id
                        ),
                    );
                }
                if fact.allowed_sources.is_empty() {
                    err(
                        "allowed_sources",
                        format!(
                            "gold fact '{}' requires citation but lists no allowed sources",
                            fact.fact_id
                        ),
                    );
                }
            }
        }
    }
    errors
}
