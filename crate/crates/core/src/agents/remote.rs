use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Agent, AgentError, AgentSpec, Invocation, Purpose};

const MAX_BACKOFF_MS: u64 = 30_000;
const BODY_EXCERPT: usize = 300;

/// Chat-completions client: POST `<endpoint>/chat/completions` with a text
/// part and, for solve calls, an image part.
pub struct RemoteAgent {
    spec: AgentSpec,
    http: ureq::Agent,
}

impl RemoteAgent {
    pub fn new(spec: AgentSpec) -> Self {
        let http = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .build()
            .into();
        Self { spec, http }
    }

    fn url(&self) -> String {
        let endpoint = self.spec.endpoint.as_deref().unwrap_or_default().trim_end_matches('/');
        format!("{endpoint}/chat/completions")
    }

    fn body(&self, inv: &Invocation<'_>) -> Result<Value, AgentError> {
        let mut content = vec![json!({ "type": "text", "text": inv.prompt })];
        if matches!(inv.purpose, Purpose::Solve(_)) {
            content.push(json!({ "type": "image_url", "image_url": { "url": image_url(&inv.problem.image)? } }));
        }
        Ok(json!({
            "model": self.spec.model_name,
            "temperature": self.spec.temperature,
            "messages": [{ "role": "user", "content": content }],
        }))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.spec.backoff_ms.saturating_mul(1u64 << attempt.min(16)).min(MAX_BACKOFF_MS);
        Duration::from_millis(ms)
    }
}

impl Agent for RemoteAgent {
    fn invoke(&self, inv: &Invocation<'_>) -> Result<String, AgentError> {
        let token = match &self.spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| AgentError::MissingCredentials(var.clone()))?),
            None => None,
        };
        let body = self.body(inv)?;
        let url = self.url();
        let mut last = AgentError::Transport { status: 0, body: "no attempt made".into() };
        for attempt in 0..=self.spec.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            let mut request = self.http.post(&url);
            if let Some(t) = &token {
                request = request.header("Authorization", &format!("Bearer {t}"));
            }
            match request.send_json(&body) {
                Ok(response) => {
                    let status = response.status().as_u16();
                    let text = response.into_body().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return extract_content(&text).ok_or_else(|| AgentError::Transport {
                            status,
                            body: format!("unreadable completion: {}", excerpt(&text)),
                        });
                    }
                    last = AgentError::Transport { status, body: excerpt(&text) };
                    if !(status == 429 || status >= 500) {
                        return Err(last);
                    }
                }
                Err(e) => last = AgentError::Transport { status: 0, body: e.to_string() },
            }
            log::warn!("agent {} attempt {} failed: {last}", self.spec.id, attempt + 1);
        }
        Err(last)
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(BODY_EXCERPT).collect()
}

/// `choices[0].message.content`, either a string or a list of text parts.
fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let content = v.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let text: Vec<&str> = parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect();
            (!text.is_empty()).then(|| text.join(""))
        }
        _ => None,
    }
}

/// Remote URLs pass through; local files are inlined as base64 data URLs.
fn image_url(image: &str) -> Result<String, AgentError> {
    if image.starts_with("http://") || image.starts_with("https://") || image.starts_with("data:") {
        return Ok(image.to_string());
    }
    let path = Path::new(image);
    let bytes = std::fs::read(path).map_err(|e| AgentError::Image { path: image.to_string(), reason: e.to_string() })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}
