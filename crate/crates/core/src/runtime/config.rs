use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RuntimeError;
use crate::evaluation::DEFAULT_THRESHOLD;
use crate::model::{AblationConfig, Method};
use crate::pipeline::DEFAULT_K;
use crate::provider::CompletionParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        let params = CompletionParams::default();
        ProviderConfig {
            kind: ProviderKind::Mock,
            base_url: None,
            model: params.model_name,
            script_path: None,
            temperature: params.temperature,
            max_output_tokens: params.max_output_tokens,
            timeout_ms: params.request_timeout.as_millis() as u64,
            max_retries: params.max_retries,
        }
    }
}

impl ProviderConfig {
    pub fn params(&self) -> CompletionParams {
        CompletionParams {
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            request_timeout: Duration::from_millis(self.timeout_ms),
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// Everything a `run`, `eval` or `ablate` invocation needs.
///
/// Loaded from TOML; command-line flags override individual values and
/// relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub k: usize,
    pub threshold: f64,
    pub workers: usize,
    pub provider: ProviderConfig,
    pub prompts: PromptsConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Verifact,
            dataset: None,
            corpus: None,
            out: None,
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
            workers: 1,
            provider: ProviderConfig::default(),
            prompts: PromptsConfig::default(),
            ablation: AblationConfig::FULL,
        }
    }
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RuntimeError> {
        toml::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset);
        resolve(base, &mut self.corpus);
        resolve(base, &mut self.out);
        resolve(base, &mut self.provider.script_path);
        resolve(base, &mut self.prompts.dir);
    }

    /// Checks cross-field constraints before anything is executed.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let fail = |msg: &str| Err(RuntimeError::Config(msg.to_owned()));
        if self.method == Method::CotRag && self.corpus.is_none() {
            return fail("method cot_rag requires a corpus path");
        }
        if self.method != Method::Verifact && !self.ablation.is_full() {
            return fail("ablation flags are only valid with method verifact");
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return fail("threshold must be in (0, 1]");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        let p = &self.provider;
        // also rejects NaN
        if p.temperature.is_nan() || p.temperature < 0.0 {
            return fail("provider.temperature must be >= 0");
        }
        if p.max_output_tokens == 0 {
            return fail("provider.max_output_tokens must be positive");
        }
        match p.kind {
            ProviderKind::Mock if p.script_path.is_none() => {
                fail("provider.kind = \"mock\" requires provider.script_path")
            }
            ProviderKind::Http if p.base_url.is_none() => {
                fail("provider.kind = \"http\" requires provider.base_url")
            }
            _ => Ok(()),
        }
    }
}

/// Parses a comma-separated list of stages to skip.
pub fn parse_ablation_list(list: &str) -> Result<AblationConfig, String> {
    let mut ablation = AblationConfig::FULL;
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "claim-extraction" => ablation.skip_claim_extraction = true,
            "verification" => ablation.skip_verification = true,
            "refinement" => ablation.skip_refinement = true,
            other => return Err(format!(
                "unknown stage '{other}' (expected claim-extraction, verification or refinement)"
            )),
        }
    }
    Ok(ablation)
}
