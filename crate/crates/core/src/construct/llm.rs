//! External LLM client for error identification and conversation building
//! on real data.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::codebook::ErrorCodebook;
use super::oracle::{ErrorOracle, IdentifiedError};
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::world::vocab;

pub const PROMPT_TEMPLATE_V1: &str = include_str!("../../assets/nsft_prompt_v1.txt");
pub const TOKEN_ENV_VAR: &str = "NSFT_LLM_TOKEN";

/// Sends one request body and returns the raw response body.
pub trait Transport: Send + Sync {
    fn post(&self, body: &str) -> Result<String>;
}

/// JSON-over-HTTP transport. The bearer token, if any, is read from
/// [`TOKEN_ENV_VAR`].
pub struct HttpTransport {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }

    pub fn from_env(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self::new(endpoint, std::env::var(TOKEN_ENV_VAR).ok(), timeout)
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &str) -> Result<String> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| Error::Transport(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub model: String,
    /// Extra attempts after a rejected response.
    pub max_retries: usize,
    /// Requests in flight at once in [`LlmOracle::query_batch`].
    pub concurrency: usize,
    pub turns: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4".into(),
            max_retries: 3,
            concurrency: 4,
            turns: super::build::DEFAULT_TURNS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextTurn {
    pub question: String,
    pub answer: String,
}

/// Validated structured reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmResponse {
    pub errors: Vec<IdentifiedError>,
    pub turns: Vec<TextTurn>,
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    attempt: usize,
    request: &'a str,
    response: Option<&'a str>,
    rejected_because: Option<&'a str>,
}

pub struct LlmOracle<T: Transport> {
    transport: T,
    config: LlmConfig,
    template: String,
    audit: Option<Mutex<File>>,
}

impl<T: Transport> LlmOracle<T> {
    pub fn new(transport: T, config: LlmConfig) -> Self {
        Self {
            transport,
            config,
            template: PROMPT_TEMPLATE_V1.to_string(),
            audit: None,
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = template.into();
        self
    }

    /// Appends every request and response to `path` as JSON lines.
    pub fn with_audit_file(mut self, path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.audit = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn prompt(&self, rejected: &str, chosen: &str, codebook: &ErrorCodebook) -> String {
        self.template
            .replace("{codebook}", &codebook.render())
            .replace("{ground_truth}", chosen)
            .replace("{response}", rejected)
            .replace("{turns}", &self.config.turns.to_string())
    }

    fn request_body(&self, prompt: &str) -> String {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [{"role": "user", "content": prompt}],
        })
        .to_string()
    }

    fn audit(&self, record: &AuditRecord<'_>) {
        if let Some(f) = &self.audit {
            let line = serde_json::to_string(record).expect("serializable");
            let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
            // auditing must not break the pipeline
            let _ = writeln!(f, "{line}");
        }
    }

    /// Asks for errors and turns, retrying on malformed replies.
    pub fn query(&self, rejected: &str, chosen: &str, codebook: &ErrorCodebook) -> Result<LlmResponse> {
        let body = self.request_body(&self.prompt(rejected, chosen, codebook));
        let rejected_len = rejected.split_whitespace().count();
        let chosen_len = chosen.split_whitespace().count();
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.transport.post(&body) {
                Ok(raw) => match parse_reply(&raw, rejected_len, chosen_len, codebook) {
                    Ok(r) => {
                        self.audit(&AuditRecord {
                            attempt,
                            request: &body,
                            response: Some(&raw),
                            rejected_because: None,
                        });
                        return Ok(r);
                    }
                    Err(reason) => {
                        self.audit(&AuditRecord {
                            attempt,
                            request: &body,
                            response: Some(&raw),
                            rejected_because: Some(&reason),
                        });
                        last = Some(Error::OracleSchema {
                            attempts: attempt,
                            reason,
                            raw,
                        });
                    }
                },
                Err(e) => {
                    let reason = e.to_string();
                    self.audit(&AuditRecord {
                        attempt,
                        request: &body,
                        response: None,
                        rejected_because: Some(&reason),
                    });
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// Runs [`Self::query`] over many items with bounded concurrency.
    /// Results come back in input order.
    pub fn query_batch(&self, items: &[(String, String)], codebook: &ErrorCodebook) -> Vec<Result<LlmResponse>> {
        let slots: Vec<Mutex<Option<Result<LlmResponse>>>> = items.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.concurrency.clamp(1, items.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((rejected, chosen)) = items.get(i) else { break };
                    let r = self.query(rejected, chosen, codebook);
                    *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|p| p.into_inner())
                    .expect("every slot filled")
            })
            .collect()
    }
}

impl<T: Transport> ErrorOracle for LlmOracle<T> {
    fn identify_errors(
        &self,
        rejected: &[TokenId],
        chosen: &[TokenId],
        codebook: &ErrorCodebook,
    ) -> Result<Vec<IdentifiedError>> {
        let r = self.query(&vocab::detokenize(rejected), &vocab::detokenize(chosen), codebook)?;
        Ok(r.errors)
    }
}

/// Extracts the structured reply from either an OpenAI-style chat completion
/// or a bare JSON object, and validates it.
fn parse_reply(
    raw: &str,
    rejected_len: usize,
    chosen_len: usize,
    codebook: &ErrorCodebook,
) -> std::result::Result<LlmResponse, String> {
    let outer: serde_json::Value = serde_json::from_str(raw).map_err(|e| format!("body is not JSON: {e}"))?;
    let content = match outer.pointer("/choices/0/message/content") {
        Some(serde_json::Value::String(s)) => {
            serde_json::from_str(s).map_err(|e| format!("content is not JSON: {e}"))?
        }
        Some(_) => return Err("message content is not a string".into()),
        None => outer,
    };
    let reply: LlmResponse = serde_json::from_value(content).map_err(|e| format!("schema mismatch: {e}"))?;
    for e in &reply.errors {
        e.validate(rejected_len, chosen_len, codebook)
            .map_err(|e| e.to_string())?;
    }
    if reply
        .turns
        .iter()
        .any(|t| t.question.trim().is_empty() || t.answer.trim().is_empty())
    {
        return Err("turn with empty question or answer".into());
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Scripted {
        replies: Vec<String>,
        calls: AtomicUsize,
    }

    impl Transport for Scripted {
        fn post(&self, _body: &str) -> Result<String> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[i.min(self.replies.len() - 1)].clone())
        }
    }

    fn scripted(replies: &[&str]) -> Scripted {
        Scripted {
            replies: replies.iter().map(|s| s.to_string()).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    const GOOD: &str = r#"{"errors":[{"category":"attribute/color","span":[1,2],"correction":"red","evidence":[1,2]}],
        "turns":[{"question":"what color is the cup ?","answer":"red"}]}"#;

    #[test]
    fn free_text_is_retried_then_accepted() {
        let t = scripted(&["Sure! The color is wrong.", GOOD]);
        let o = LlmOracle::new(t, LlmConfig::default());
        let r = o
            .query("two blue cup . <eos>", "two red cup . <eos>", &ErrorCodebook::builtin())
            .unwrap();
        assert_eq!(r.errors.len(), 1);
        assert_eq!(o.transport.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn persistent_garbage_is_a_hard_error_with_raw_text() {
        let o = LlmOracle::new(scripted(&["nope"]), LlmConfig::default());
        let e = o.query("a", "b", &ErrorCodebook::builtin()).unwrap_err();
        match e {
            Error::OracleSchema { attempts, raw, .. } => {
                assert_eq!(attempts, 4);
                assert_eq!(raw, "nope");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_category_and_bad_span_are_rejected() {
        let cb = ErrorCodebook::builtin();
        let bad_cat = r#"{"errors":[{"category":"vibes","span":[0,1],"correction":"x","evidence":null}],"turns":[]}"#;
        assert!(parse_reply(bad_cat, 3, 3, &cb).is_err());
        let bad_span =
            r#"{"errors":[{"category":"attribute/color","span":[2,9],"correction":"x","evidence":null}],"turns":[]}"#;
        assert!(parse_reply(bad_span, 3, 3, &cb).is_err());
    }

    #[test]
    fn chat_completion_envelope_is_unwrapped() {
        let wrapped = json!({"choices":[{"message":{"role":"assistant","content":GOOD}}]}).to_string();
        assert!(parse_reply(&wrapped, 5, 5, &ErrorCodebook::builtin()).is_ok());
    }

    #[test]
    fn prompt_fills_every_placeholder() {
        let o = LlmOracle::new(scripted(&[GOOD]), LlmConfig::default());
        let p = o.prompt("RESP", "TRUTH", &ErrorCodebook::builtin());
        assert!(p.contains("RESP") && p.contains("TRUTH") && p.contains("attribute/color"));
        assert!(!p.contains("{codebook}") && !p.contains("{turns}"));
    }
}
