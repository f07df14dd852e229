//! LLM-as-a-judge client contract with an HTTP implementation and a
//! table-driven mock.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{FaithError, Result};

pub const JUDGE_URL_ENV: &str = "FAITHKIT_JUDGE_URL";
pub const JUDGE_TOKEN_ENV: &str = "FAITHKIT_JUDGE_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub messages: Vec<Message>,
    pub max_tokens: u32,
}

impl JudgeRequest {
    /// Roles must alternate starting with the user, and the user speaks last.
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(FaithError::Judge("request has no messages".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != want {
                return Err(FaithError::Judge(format!("message {i} has role {:?}, expected {want:?}", m.role)));
            }
        }
        if self.messages.len() % 2 == 0 {
            return Err(FaithError::Judge("final message must come from the user".into()));
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> &str {
        self.messages.last().map(|m| m.text.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub text: String,
}

/// Must tolerate concurrent calls.
pub trait JudgeClient: Send + Sync {
    fn complete(&self, request: &JudgeRequest) -> Result<JudgeResponse>;
}

/// POSTs the request as JSON to `{base}/v1/judge`.
pub struct HttpJudge {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(base_url: &str, token: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        HttpJudge {
            endpoint: format!("{}/v1/judge", base_url.trim_end_matches('/')),
            token,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Reads the base URL and bearer token from the environment.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(JUDGE_URL_ENV).map_err(|_| FaithError::Judge(format!("{JUDGE_URL_ENV} is not set")))?;
        let token = std::env::var(JUDGE_TOKEN_ENV).ok();
        Ok(Self::new(&url, token, Duration::from_secs(120)))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl JudgeClient for HttpJudge {
    fn complete(&self, request: &JudgeRequest) -> Result<JudgeResponse> {
        request.validate()?;
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| FaithError::Judge(format!("POST {}: {e}", self.endpoint)))?;
        resp.body_mut()
            .read_json::<JudgeResponse>()
            .map_err(|e| FaithError::Judge(format!("bad judge response: {e}")))
    }
}

/// Replies looked up by the final user message; unknown prompts get the
/// fallback reply or an error.
#[derive(Debug, Default)]
pub struct MockJudge {
    table: HashMap<String, String>,
    fallback: Option<String>,
    calls: AtomicUsize,
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    /// Always answers `reply`.
    pub fn constant(reply: &str) -> Self {
        MockJudge {
            fallback: Some(reply.to_string()),
            ..Self::default()
        }
    }

    pub fn with_reply(mut self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.table.insert(prompt.into(), reply.into());
        self
    }

    pub fn insert(&mut self, prompt: impl Into<String>, reply: impl Into<String>) {
        self.table.insert(prompt.into(), reply.into());
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl JudgeClient for MockJudge {
    fn complete(&self, request: &JudgeRequest) -> Result<JudgeResponse> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let key = request.last_user_text();
        self.table
            .get(key)
            .or(self.fallback.as_ref())
            .map(|text| JudgeResponse { text: text.clone() })
            .ok_or_else(|| FaithError::Judge(format!("mock judge has no reply for {key:?}")))
    }
}

/// Retries transport failures up to `max_attempts` times in total.
pub struct RetryingJudge<J> {
    pub inner: J,
    pub max_attempts: usize,
    pub backoff: Duration,
}

impl<J: JudgeClient> RetryingJudge<J> {
    pub fn new(inner: J, max_attempts: usize) -> Self {
        RetryingJudge {
            inner,
            max_attempts: max_attempts.max(1),
            backoff: Duration::from_millis(200),
        }
    }
}

impl<J: JudgeClient> JudgeClient for RetryingJudge<J> {
    fn complete(&self, request: &JudgeRequest) -> Result<JudgeResponse> {
        let mut last = None;
        for attempt in 0..self.max_attempts {
            match self.inner.complete(request) {
                Ok(r) => return Ok(r),
                Err(e @ FaithError::Judge(_)) => {
                    last = Some(e);
                    if attempt + 1 < self.max_attempts {
                        std::thread::sleep(self.backoff * (attempt as u32 + 1));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
