use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, HashEmbedder, OracleRequest, OracleResponse, Role, Templates};
use crate::error::OracleError;

pub const URL_VAR: &str = "ENGINE_ORACLE_URL";
pub const KEY_VAR: &str = "ENGINE_ORACLE_KEY";
pub const MODEL_VAR: &str = "ENGINE_ORACLE_MODEL";

#[derive(Debug, Clone)]
pub struct LiveSettings {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub request_timeout: Duration,
}

impl LiveSettings {
    /// Reads endpoint settings from `ENGINE_ORACLE_URL`, `ENGINE_ORACLE_KEY`
    /// and `ENGINE_ORACLE_MODEL`.
    pub fn from_env(temperature: f64) -> Result<Self, OracleError> {
        let url = std::env::var(URL_VAR)
            .map_err(|_| OracleError::BackendUnavailable { attempts: 0, last: format!("{URL_VAR} is not set") })?;
        Ok(Self {
            url,
            api_key: std::env::var(KEY_VAR).ok(),
            model: std::env::var(MODEL_VAR).unwrap_or_else(|_| "default".into()),
            temperature,
            request_timeout: Duration::from_secs(600),
        })
    }
}

/// Chat-completions style HTTP backend.
pub struct LiveBackend {
    settings: LiveSettings,
    templates: Templates,
    agent: ureq::Agent,
    embedder: HashEmbedder,
}

impl LiveBackend {
    pub fn new(settings: LiveSettings, templates: Templates) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.request_timeout))
            .build()
            .into();
        Self { settings, templates, agent, embedder: HashEmbedder::default() }
    }

    fn classify(err: ureq::Error) -> OracleError {
        match err {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                OracleError::Transient(format!("http status {code}"))
            }
            ureq::Error::StatusCode(code) => {
                OracleError::BackendUnavailable { attempts: 1, last: format!("http status {code}") }
            }
            other => OracleError::Transient(other.to_string()),
        }
    }
}

impl Backend for LiveBackend {
    fn complete(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        if request.role == Role::Embed {
            let v = self.embedder.embed(request.get("text").unwrap_or(""))?;
            return Ok(OracleResponse { text: String::new(), structured: None, embedding: Some(v) });
        }
        let prompt = self.templates.render(request.role, &request.context)?;
        let body = json!({
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut call = self.agent.post(&self.settings.url).header("Content-Type", "application/json");
        if let Some(key) = &self.settings.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(&body).map_err(Self::classify)?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| OracleError::Transient(format!("unreadable response body: {e}")))?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| OracleError::Transient("response has no message content".into()))?;
        Ok(OracleResponse::text(text))
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "live"
    }
}
