//! Stage prompt templates and rendering.
//!
//! Templates are TOML data files with `system` and `user` keys. The
//! built-in set lives in `templates/`; a directory of `<stage_tag>.toml`
//! files can override any of them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::grammar::{escape, grammar_instructions};
use crate::model::StageTag;
use crate::provider::ChatMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Query,
    Chain,
    Answer,
    ClaimsBlock,
    QueriesBlock,
    EvidenceBlock,
    RetrievedDocs,
}

impl Placeholder {
    pub const ALL: [Placeholder; 7] = [
        Placeholder::Query,
        Placeholder::Chain,
        Placeholder::Answer,
        Placeholder::ClaimsBlock,
        Placeholder::QueriesBlock,
        Placeholder::EvidenceBlock,
        Placeholder::RetrievedDocs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Query => "query",
            Placeholder::Chain => "chain",
            Placeholder::Answer => "answer",
            Placeholder::ClaimsBlock => "claims_block",
            Placeholder::QueriesBlock => "queries_block",
            Placeholder::EvidenceBlock => "evidence_block",
            Placeholder::RetrievedDocs => "retrieved_docs",
        }
    }

    /// Block placeholders carry text produced by the grammar serializers,
    /// which is escaped already; the rest are escaped on substitution.
    fn is_block(self) -> bool {
        matches!(
            self,
            Placeholder::ClaimsBlock | Placeholder::QueriesBlock | Placeholder::EvidenceBlock
        )
    }

    fn from_name(name: &str) -> Option<Self> {
        Placeholder::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values for a template's placeholders.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptContext {
    values: BTreeMap<Placeholder, String>,
}

impl PromptContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, placeholder: Placeholder, value: impl Into<String>) -> Self {
        self.values.insert(placeholder, value.into());
        self
    }

    pub fn get(&self, placeholder: Placeholder) -> Option<&str> {
        self.values.get(&placeholder).map(String::as_str)
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing placeholder {{{0}}}")]
    MissingPlaceholder(Placeholder),
    #[error("unknown stage tag '{0}'")]
    UnknownStage(String),
    #[error("template for stage '{stage}' {message}")]
    InvalidTemplate { stage: StageTag, message: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageTemplate {
    pub stage_tag: StageTag,
    pub system_text: String,
    pub user_template: String,
}

#[derive(Deserialize)]
struct TemplateFile {
    system: String,
    user: String,
}

/// A piece of a parsed template.
enum Segment<'a> {
    Text(&'a str),
    Slot(Placeholder),
}

fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    let mut literal_start = 0usize;
    let mut offset = 0usize;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .and_then(|close| Placeholder::from_name(&after[..close]).map(|p| (p, close)));
        match slot {
            Some((p, close)) => {
                out.push(Segment::Text(&template[literal_start..offset + open]));
                out.push(Segment::Slot(p));
                let consumed = open + 1 + close + 1;
                offset += consumed;
                literal_start = offset;
                rest = &rest[consumed..];
            }
            None => {
                offset += open + 1;
                rest = &rest[open + 1..];
            }
        }
    }
    out.push(Segment::Text(&template[literal_start..]));
    out
}

impl StageTemplate {
    pub fn parse(stage_tag: StageTag, toml_text: &str) -> Result<Self, PromptError> {
        let file: TemplateFile =
            toml::from_str(toml_text).map_err(|e| PromptError::InvalidTemplate {
                stage: stage_tag,
                message: format!("is not valid TOML: {e}"),
            })?;
        let template = StageTemplate {
            stage_tag,
            system_text: file.system,
            user_template: file.user,
        };
        template.validate()?;
        Ok(template)
    }

    /// The template must quote its stage's grammar instructions verbatim.
    pub fn validate(&self) -> Result<(), PromptError> {
        if !self
            .user_template
            .contains(grammar_instructions(self.stage_tag))
        {
            return Err(PromptError::InvalidTemplate {
                stage: self.stage_tag,
                message: "does not quote the stage's output grammar".into(),
            });
        }
        if self.system_text.trim().is_empty() {
            return Err(PromptError::InvalidTemplate {
                stage: self.stage_tag,
                message: "has an empty system text".into(),
            });
        }
        Ok(())
    }

    /// Placeholders referenced by the user template, in first-use order.
    pub fn placeholders(&self) -> Vec<Placeholder> {
        let mut out = Vec::new();
        for seg in segments(&self.user_template) {
            if let Segment::Slot(p) = seg {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Substitutes every placeholder in one pass; substituted values are
    /// never re-scanned.
    pub fn render(&self, context: &PromptContext) -> Result<Vec<ChatMessage>, PromptError> {
        let mut user = String::with_capacity(self.user_template.len());
        for seg in segments(&self.user_template) {
            match seg {
                Segment::Text(t) => user.push_str(t),
                Segment::Slot(p) => {
                    let value = context.get(p).ok_or(PromptError::MissingPlaceholder(p))?;
                    if p.is_block() {
                        user.push_str(value);
                    } else {
                        user.push_str(&escape(value));
                    }
                }
            }
        }
        Ok(vec![
            ChatMessage::system(self.system_text.clone()),
            ChatMessage::user(user),
        ])
    }
}

const BUILTIN: [(StageTag, &str); 6] = [
    (
        StageTag::InitialCot,
        include_str!("../templates/initial_cot.toml"),
    ),
    (
        StageTag::ClaimExtract,
        include_str!("../templates/claim_extract.toml"),
    ),
    (
        StageTag::VerifySimulate,
        include_str!("../templates/verify_simulate.toml"),
    ),
    (
        StageTag::RefineIntegrate,
        include_str!("../templates/refine_integrate.toml"),
    ),
    (
        StageTag::StandardCot,
        include_str!("../templates/standard_cot.toml"),
    ),
    (StageTag::RagCot, include_str!("../templates/rag_cot.toml")),
];

/// The six built-in stage templates.
pub fn default_templates() -> BTreeMap<StageTag, StageTemplate> {
    BUILTIN
        .iter()
        .map(|(tag, text)| {
            let t = StageTemplate::parse(*tag, text).expect("built-in templates are valid");
            (*tag, t)
        })
        .collect()
}

/// The template set used for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<StageTag, StageTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: default_templates(),
        }
    }
}

impl PromptSet {
    pub fn from_templates(templates: BTreeMap<StageTag, StageTemplate>) -> Self {
        PromptSet { templates }
    }

    /// Built-in templates, replaced by any `<stage_tag>.toml` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptSet::default();
        for tag in StageTag::ALL {
            let path = dir.join(format!("{}.toml", tag.as_str()));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            set.templates.insert(tag, StageTemplate::parse(tag, &text)?);
        }
        Ok(set)
    }

    pub fn get(&self, stage: StageTag) -> Option<&StageTemplate> {
        self.templates.get(&stage)
    }

    pub fn render(
        &self,
        stage: StageTag,
        context: &PromptContext,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.templates
            .get(&stage)
            .ok_or_else(|| PromptError::UnknownStage(stage.to_string()))?
            .render(context)
    }

    /// Renders by stage tag name, e.g. `"claim_extract"`.
    pub fn render_named(
        &self,
        stage: &str,
        context: &PromptContext,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        let tag = StageTag::parse(stage).ok_or_else(|| PromptError::UnknownStage(stage.into()))?;
        self.render(tag, context)
    }
}
