use std::io::ErrorKind;

use serde::{Deserialize, Serialize};

use super::{
    check_conversation, with_retries, ChatMessage, ChatProvider, Completion, CompletionParams,
    ProviderError, ProviderFailure, RetryPolicy,
};
use crate::model::{StageTag, TokenUsage};

const BODY_EXCERPT_LEN: usize = 300;

/// Request body of the chat-completion protocol.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ChatRequestBody {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Client for any endpoint speaking the `/chat/completions` JSON protocol.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpProvider {
    /// `base_url` is the API root, e.g. `https://api.example.com/v1`.
    pub fn new(base_url: &str, api_key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build();
        HttpProvider {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            retry: RetryPolicy::default(),
            agent: config.into(),
        }
    }

    /// Reads the bearer token from `VERIFACT_API_KEY`.
    pub fn from_env(base_url: &str) -> Self {
        Self::new(
            base_url,
            std::env::var("VERIFACT_API_KEY")
                .ok()
                .filter(|k| !k.is_empty()),
        )
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, body: &str, params: &CompletionParams) -> Result<Completion, ProviderError> {
        let mut request = self
            .agent
            .post(&self.endpoint)
            .config()
            .timeout_global(Some(params.request_timeout))
            .build()
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send(body).map_err(map_transport_error)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(map_transport_error)?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status {
                status,
                body_excerpt: text.chars().take(BODY_EXCERPT_LEN).collect(),
            });
        }
        parse_envelope(&text)
    }
}

fn map_transport_error(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        ureq::Error::Io(e) if matches!(e.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock) => {
            ProviderError::Timeout
        }
        ureq::Error::StatusCode(status) => ProviderError::Status {
            status,
            body_excerpt: String::new(),
        },
        other => ProviderError::Transport(other.to_string()),
    }
}

/// Extracts the first choice's content and the token usage from a response body.
pub(crate) fn parse_envelope(text: &str) -> Result<Completion, ProviderError> {
    let body: ChatResponseBody =
        serde_json::from_str(text).map_err(|e| ProviderError::MalformedEnvelope(e.to_string()))?;
    let content = body
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ProviderError::MalformedEnvelope("empty choices array".into()))?
        .message
        .content
        .ok_or_else(|| ProviderError::MalformedEnvelope("choice has no message content".into()))?;
    let usage = body
        .usage
        .map(|u| TokenUsage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok(Completion {
        text: content,
        usage,
        retry_count: 0,
    })
}

impl ChatProvider for HttpProvider {
    fn complete(
        &self,
        _stage: StageTag,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, ProviderFailure> {
        check_conversation(messages)?;
        let body = serde_json::to_string(&ChatRequestBody {
            model: params.model_name.clone(),
            messages: messages.to_vec(),
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
        })
        .map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let (mut completion, retries) = with_retries(&self.retry, params.max_retries, || {
            self.attempt(&body, params)
        })?;
        completion.retry_count = retries;
        Ok(completion)
    }
}
