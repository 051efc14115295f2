use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatMessage, CompletionBackend, TeacherRequest};

/// Base URL of an OpenAI-compatible chat-completions server, e.g.
/// `https://host/v1`.
pub const ENDPOINT_ENV: &str = "CHECKLIST_FORGE_ENDPOINT";
/// Bearer token sent with every request, if set.
pub const API_KEY_ENV: &str = "CHECKLIST_FORGE_API_KEY";

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: u32,
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completions client over HTTP(S).
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
    supports_n: bool,
}

impl HttpBackend {
    pub fn new(
        base_url: &str,
        api_key: Option<String>,
        supports_n: bool,
        timeout: Duration,
    ) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client configuration is static");
        Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            supports_n,
        }
    }

    /// Builds a backend from [`ENDPOINT_ENV`] and [`API_KEY_ENV`].
    pub fn from_env(supports_n: bool, timeout: Duration) -> Option<Self> {
        let base = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty());
        Some(Self::new(&base, key, supports_n, timeout))
    }
}

#[async_trait]
impl CompletionBackend for HttpBackend {
    fn supports_n(&self) -> bool {
        self.supports_n
    }

    async fn complete(&self, request: &TeacherRequest) -> Result<Vec<String>, BackendError> {
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            top_p: request.top_p,
            n: request.n,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(BackendError::Fatal(format!(
                "HTTP {status}: {}",
                text.chars().take(512).collect::<String>()
            )));
        }
        let parsed: WireResponse = response
            .json()
            .await
            .map_err(|e| BackendError::Transient(format!("unreadable response body: {e}")))?;
        let mut choices = parsed.choices;
        choices.sort_by_key(|c| c.index);
        Ok(choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}
