//! Chat-completion providers.
//!
//! Every pipeline stage goes through [`ChatProvider::complete`]. Two
//! implementations ship with the crate: [`HttpProvider`], which speaks the
//! common `/chat/completions` JSON protocol, and [`ScriptedProvider`], a
//! deterministic stand-in driven by a script file.

mod http;
mod mock;
mod retry;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FailureKind, StageTag, TokenUsage};

pub use http::HttpProvider;
pub use mock::{load_script, CallCounter, MatchKey, ScriptEntry, ScriptError, ScriptedProvider};
pub use retry::{with_retries, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Checks that a conversation is well formed: nonempty, no blank
/// system/user turns, and the first non-system message is a user turn.
pub fn check_conversation(messages: &[ChatMessage]) -> Result<(), ProviderError> {
    if messages.is_empty() {
        return Err(ProviderError::InvalidRequest("no messages".into()));
    }
    for m in messages {
        if m.role != Role::Assistant && m.content.trim().is_empty() {
            return Err(ProviderError::InvalidRequest(format!(
                "empty {} message",
                m.role
            )));
        }
    }
    match messages.iter().find(|m| m.role != Role::System) {
        Some(m) if m.role == Role::User => Ok(()),
        Some(_) => Err(ProviderError::InvalidRequest(
            "first non-system message must be a user message".into(),
        )),
        None => Err(ProviderError::InvalidRequest("no user message".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(with = "duration_ms")]
    pub request_timeout: Duration,
    pub max_retries: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            model_name: "gpt-4".into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            request_timeout: Duration::from_secs(120),
            max_retries: 2,
        }
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    /// Retries spent before this completion succeeded.
    pub retry_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("provider returned status {status}: {body_excerpt}")]
    Status { status: u16, body_excerpt: String },
    #[error("malformed response envelope: {0}")]
    MalformedEnvelope(String),
    #[error("unscripted request for stage '{stage}'")]
    Unscripted { stage: StageTag },
    #[error("ambiguous script: entries {entries:?} all match a '{stage}' request")]
    AmbiguousScript {
        stage: StageTag,
        entries: Vec<usize>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ProviderError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::Timeout => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub fn kind(&self) -> FailureKind {
        match self {
            ProviderError::Transport(_) => FailureKind::Transport,
            ProviderError::Timeout => FailureKind::Timeout,
            ProviderError::Status { .. } => FailureKind::Status,
            ProviderError::MalformedEnvelope(_) => FailureKind::MalformedEnvelope,
            ProviderError::Unscripted { .. } => FailureKind::Unscripted,
            ProviderError::AmbiguousScript { .. } => FailureKind::AmbiguousScript,
            ProviderError::InvalidRequest(_) => FailureKind::Prompt,
        }
    }
}

/// A provider error together with the retries spent before giving up.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{error} (after {retry_count} retries)")]
pub struct ProviderFailure {
    pub error: ProviderError,
    pub retry_count: u32,
}

impl From<ProviderError> for ProviderFailure {
    fn from(error: ProviderError) -> Self {
        ProviderFailure {
            error,
            retry_count: 0,
        }
    }
}

/// Uniform chat-completion interface.
///
/// The stage tag is carried alongside the messages so scripted providers can
/// key their responses on it; network providers ignore it.
pub trait ChatProvider: Send + Sync {
    fn complete(
        &self,
        stage: StageTag,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, ProviderFailure>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn complete(
        &self,
        stage: StageTag,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, ProviderFailure> {
        (**self).complete(stage, messages, params)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn complete(
        &self,
        stage: StageTag,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, ProviderFailure> {
        (**self).complete(stage, messages, params)
    }
}
