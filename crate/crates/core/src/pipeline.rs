//! The four-stage verification pipeline, its ablations, and the two
//! chain-of-thought baselines.
//!
//! Stages run strictly in order, one provider call each (plus at most one
//! repair round when a completion does not parse):
//!
//! 1. `initial_cot`: query → preliminary reasoning and answer
//! 2. `claim_extract`: reasoning + answer → claims with verification questions
//! 3. `verify_simulate`: questions → verdict, evidence and simulated source per claim
//! 4. `refine_integrate`: reasoning + answer + evidence → corrected, cited output

use std::time::Instant;

use crate::grammar::{
    normalize_ws, parse_claims, parse_cot, parse_evidence, parse_refined, render_claims_block,
    render_evidence_block, render_queries_block, repair_prompt, ParseError,
};
use crate::model::{
    AblationConfig, CitedAnswer, FactualClaim, FailureKind, Method, OutputStage, ProviderCall,
    ReasoningTrace, RetrievedDoc, RunFailure, RunOutput, RunRecord, StageArtifact, StageFailure,
    StageOutcome, StageResult, StageTag, TaskInstance, TokenUsage, VerificationQuery,
    VerificationRecord,
};
use crate::prompting::{Placeholder, PromptContext, PromptSet};
use crate::provider::{ChatMessage, ChatProvider, CompletionParams};
use crate::retrieval::CorpusIndex;

/// Text of the single query used when claim extraction is skipped.
pub const WHOLE_TEXT_QUERY: &str = "Verify all factual content of the following answer";

/// Default number of retrieved documents for the RAG baseline.
pub const DEFAULT_K: usize = 3;

/// Outcome of one stage plus its parsed value when it succeeded.
#[derive(Debug, Clone)]
pub struct StageRun<T> {
    pub outcome: StageOutcome,
    pub value: Option<T>,
}

impl<T> StageRun<T> {
    fn failure(&self) -> Option<RunFailure> {
        self.outcome.failure().map(|f| RunFailure {
            stage_tag: self.outcome.stage_tag,
            kind: f.kind,
            message: f.message.clone(),
        })
    }
}

/// Runs pipeline stages against one provider and template set.
pub struct Pipeline<'a> {
    provider: &'a dyn ChatProvider,
    prompts: &'a PromptSet,
    params: &'a CompletionParams,
}

fn chain_text(trace: &ReasoningTrace) -> String {
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

fn as_final(output: &RunOutput) -> RunOutput {
    RunOutput {
        trace: output.trace.with_stage(OutputStage::Final),
        answer: CitedAnswer {
            stage: OutputStage::Final,
            ..output.answer.clone()
        },
    }
}

impl<'a> Pipeline<'a> {
    pub fn new(
        provider: &'a dyn ChatProvider,
        prompts: &'a PromptSet,
        params: &'a CompletionParams,
    ) -> Self {
        Pipeline {
            provider,
            prompts,
            params,
        }
    }

    /// Sends `messages`, parses the completion, and grants one repair round
    /// on a parse failure.
    fn run_stage<T>(
        &self,
        stage: StageTag,
        context: &PromptContext,
        parse: impl Fn(&str) -> Result<T, ParseError>,
        artifact: impl Fn(&T) -> StageArtifact,
    ) -> StageRun<T> {
        let started = Instant::now();
        let mut outcome = StageOutcome {
            stage_tag: stage,
            calls: Vec::new(),
            raw: None,
            result: StageResult::Failed(StageFailure {
                kind: FailureKind::Prompt,
                message: String::new(),
            }),
            retry_count: 0,
            repair_used: false,
            synthetic: false,
            duration_ms: 0,
            usage: TokenUsage::default(),
        };
        let finish = |mut outcome: StageOutcome, value: Option<T>| {
            outcome.duration_ms = started.elapsed().as_millis() as u64;
            outcome.retry_count = outcome.calls.iter().map(|c| c.retry_count).sum();
            let mut usage = TokenUsage::default();
            for c in &outcome.calls {
                usage += c.usage;
            }
            outcome.usage = usage;
            StageRun { outcome, value }
        };

        let mut messages = match self.prompts.render(stage, context) {
            Ok(m) => m,
            Err(e) => {
                outcome.result = StageResult::Failed(StageFailure {
                    kind: FailureKind::Prompt,
                    message: e.to_string(),
                });
                return finish(outcome, None);
            }
        };

        for round in 0..2 {
            let call_started = Instant::now();
            let response = self.provider.complete(stage, &messages, self.params);
            let duration_ms = call_started.elapsed().as_millis() as u64;
            let completion = match response {
                Ok(c) => c,
                Err(failure) => {
                    outcome.calls.push(ProviderCall {
                        messages: messages.clone(),
                        raw: None,
                        retry_count: failure.retry_count,
                        usage: TokenUsage::default(),
                        duration_ms,
                    });
                    outcome.result = StageResult::Failed(StageFailure {
                        kind: failure.error.kind(),
                        message: failure.error.to_string(),
                    });
                    return finish(outcome, None);
                }
            };
            outcome.calls.push(ProviderCall {
                messages: messages.clone(),
                raw: Some(completion.text.clone()),
                retry_count: completion.retry_count,
                usage: completion.usage,
                duration_ms,
            });
            outcome.raw = Some(completion.text.clone());
            match parse(&completion.text) {
                Ok(value) => {
                    outcome.result = StageResult::Parsed(artifact(&value));
                    return finish(outcome, Some(value));
                }
                Err(err) if round == 0 => {
                    log::debug!("{stage}: parse failed ({err}); requesting repair");
                    outcome.repair_used = true;
                    messages.push(ChatMessage::assistant(completion.text));
                    messages.push(repair_prompt(stage, &err));
                }
                Err(err) => {
                    outcome.result = StageResult::Failed(StageFailure {
                        kind: FailureKind::Parse,
                        message: err.to_string(),
                    });
                    return finish(outcome, None);
                }
            }
        }
        unreachable!("the repair loop returns within two rounds")
    }

    fn reasoning_stage(&self, stage: StageTag, context: &PromptContext) -> StageRun<RunOutput> {
        self.run_stage(
            stage,
            context,
            |raw| parse_cot(raw).map(|(trace, answer)| RunOutput { trace, answer }),
            |o| StageArtifact::Reasoning {
                trace: o.trace.clone(),
                answer: o.answer.clone(),
            },
        )
    }

    /// Stage 1: preliminary reasoning chain and answer.
    pub fn run_initial_cot(&self, task: &TaskInstance) -> StageRun<RunOutput> {
        let ctx = PromptContext::new().with(Placeholder::Query, task.prompt_query());
        self.reasoning_stage(StageTag::InitialCot, &ctx)
    }

    /// Stage 2: claims and paired verification queries. An empty claim list
    /// is a successful outcome.
    pub fn extract_claims(
        &self,
        initial: &RunOutput,
    ) -> StageRun<(Vec<FactualClaim>, Vec<VerificationQuery>)> {
        let ctx = PromptContext::new()
            .with(Placeholder::Chain, chain_text(&initial.trace))
            .with(Placeholder::Answer, initial.answer.text.clone());
        self.run_stage(
            StageTag::ClaimExtract,
            &ctx,
            |raw| match parse_claims(raw) {
                Err(ParseError::NoClaims) => Ok((Vec::new(), Vec::new())),
                other => other,
            },
            |(claims, queries)| StageArtifact::Claims {
                claims: claims.clone(),
                queries: queries.clone(),
            },
        )
    }

    /// Stage 3: one simulated verification record per query.
    pub fn simulate_verification(
        &self,
        queries: &[VerificationQuery],
    ) -> StageRun<Vec<VerificationRecord>> {
        let ids: Vec<u32> = queries.iter().map(|q| q.claim_id).collect();
        let ctx =
            PromptContext::new().with(Placeholder::QueriesBlock, render_queries_block(queries));
        self.run_stage(
            StageTag::VerifySimulate,
            &ctx,
            |raw| parse_evidence(raw, &ids),
            |records| StageArtifact::Evidence {
                records: records.clone(),
            },
        )
    }

    /// Stage 4: refined reasoning and answer with markers resolved against
    /// `evidence`.
    pub fn refine_and_cite(
        &self,
        initial: &RunOutput,
        claims: &[FactualClaim],
        queries: &[VerificationQuery],
        evidence: &[VerificationRecord],
    ) -> StageRun<RunOutput> {
        let ctx = PromptContext::new()
            .with(Placeholder::Chain, chain_text(&initial.trace))
            .with(Placeholder::Answer, initial.answer.text.clone())
            .with(
                Placeholder::ClaimsBlock,
                render_claims_block(claims, queries),
            )
            .with(Placeholder::EvidenceBlock, render_evidence_block(evidence));
        self.run_stage(
            StageTag::RefineIntegrate,
            &ctx,
            |raw| parse_refined(raw, evidence).map(|(trace, answer)| RunOutput { trace, answer }),
            |o| StageArtifact::Reasoning {
                trace: o.trace.clone(),
                answer: o.answer.clone(),
            },
        )
    }

    /// Full pipeline, or one of its ablated variants.
    pub fn run_verifact(&self, task: &TaskInstance, ablation: AblationConfig) -> RunRecord {
        let mut record = RunRecord::new(task.id.clone(), Method::Verifact, ablation);

        let stage1 = self.run_initial_cot(task);
        record.failure = stage1.failure();
        record.stages.push(stage1.outcome);
        let Some(initial) = stage1.value else {
            return record;
        };
        record.initial = Some(initial.clone());

        if ablation.skip_claim_extraction {
            let query = VerificationQuery {
                claim_id: 1,
                text: format!(
                    "{WHOLE_TEXT_QUERY}: Reasoning: {} Answer: {}",
                    normalize_ws(&initial.trace.joined()),
                    normalize_ws(&initial.answer.text)
                ),
            };
            record.stages.push(StageOutcome {
                stage_tag: StageTag::ClaimExtract,
                calls: Vec::new(),
                raw: None,
                result: StageResult::Parsed(StageArtifact::Claims {
                    claims: Vec::new(),
                    queries: vec![query.clone()],
                }),
                retry_count: 0,
                repair_used: false,
                synthetic: true,
                duration_ms: 0,
                usage: TokenUsage::default(),
            });
            record.queries = vec![query];
        } else {
            let stage2 = self.extract_claims(&initial);
            record.failure = stage2.failure();
            record.stages.push(stage2.outcome);
            let Some((claims, queries)) = stage2.value else {
                return record;
            };
            record.claims = claims;
            record.queries = queries;
            if record.queries.is_empty() {
                record.flags.no_claims = true;
                record.final_output = Some(as_final(&initial));
                return record;
            }
        }

        if !ablation.skip_verification {
            let stage3 = self.simulate_verification(&record.queries);
            record.failure = stage3.failure();
            record.stages.push(stage3.outcome);
            let Some(evidence) = stage3.value else {
                return record;
            };
            record.verifications = evidence;
        }

        if ablation.skip_refinement {
            record.flags.verification_unintegrated = true;
            record.final_output = Some(as_final(&initial));
            return record;
        }

        let stage4 = self.refine_and_cite(
            &initial,
            &record.claims,
            &record.queries,
            &record.verifications,
        );
        record.failure = stage4.failure();
        record.stages.push(stage4.outcome);
        record.final_output = stage4.value;
        record
    }

    /// Chain-of-thought baseline with no verification.
    pub fn run_standard_cot(&self, task: &TaskInstance) -> RunRecord {
        let mut record = RunRecord::new(task.id.clone(), Method::StandardCot, AblationConfig::FULL);
        let ctx = PromptContext::new().with(Placeholder::Query, task.prompt_query());
        let stage = self.reasoning_stage(StageTag::StandardCot, &ctx);
        record.failure = stage.failure();
        record.stages.push(stage.outcome);
        if let Some(out) = stage.value {
            record.final_output = Some(as_final(&out));
            record.initial = Some(out);
        }
        record
    }

    /// Chain-of-thought baseline with the top `k` retrieved documents
    /// prepended to the prompt.
    pub fn run_cot_rag(
        &self,
        task: &TaskInstance,
        retriever: &CorpusIndex<f64>,
        k: usize,
    ) -> RunRecord {
        let mut record = RunRecord::new(task.id.clone(), Method::CotRag, AblationConfig::FULL);
        let hits = retriever.retrieve(&task.query, k);
        let docs = hits
            .iter()
            .map(|(id, _)| format!("[{id}] {}", retriever.doc(id).unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("\n");
        record.retrieved = hits
            .into_iter()
            .map(|(doc_id, score)| RetrievedDoc { doc_id, score })
            .collect();
        record.flags.empty_retrieval = record.retrieved.is_empty();
        let ctx = PromptContext::new()
            .with(Placeholder::Query, task.prompt_query())
            .with(Placeholder::RetrievedDocs, docs);
        let stage = self.reasoning_stage(StageTag::RagCot, &ctx);
        record.failure = stage.failure();
        record.stages.push(stage.outcome);
        if let Some(out) = stage.value {
            record.final_output = Some(as_final(&out));
            record.initial = Some(out);
        }
        record
    }
}

/// Number of stage outcomes a successful run with claims should record.
pub fn expected_stage_count(ablation: &AblationConfig) -> usize {
    4 - usize::from(ablation.skip_verification) - usize::from(ablation.skip_refinement)
}

/// Number of provider calls a successful run with claims should make,
/// assuming no repair rounds.
pub fn expected_call_count(ablation: &AblationConfig) -> usize {
    expected_stage_count(ablation) - usize::from(ablation.skip_claim_extraction)
}
