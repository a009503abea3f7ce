//! Linguistic realization backends.
//!
//! The stub renders a compact template and is a pure function of the
//! directive and the speaker's private payload. The http backend sends the
//! directive to a chat-completion endpoint.

use serde::{Deserialize, Serialize};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::directive::{Level, RealizationDirective};
use crate::error::{OscError, Result};
use crate::policy::Objective;
use crate::text::{AgentId, DialogueAct, PrivatePayload};

pub const API_KEY_ENV: &str = "OSC_API_KEY";

const FILLER: [&str; 10] = [
    "considering",
    "the",
    "current",
    "evidence",
    "and",
    "our",
    "shared",
    "plan",
    "so",
    "far",
];

/// Objectives whose message carries task facts.
pub fn is_informative(o: Objective) -> bool {
    matches!(
        o,
        Objective::ProposeStep
            | Objective::ProvideEvidence
            | Objective::SummarizeState
            | Objective::AlignPlanElement
    )
}

/// Deterministic template realization.
pub fn realize_stub(d: &RealizationDirective, payload: &PrivatePayload) -> (String, DialogueAct) {
    let a = &d.action;
    let own = payload.share.map(|s| format!("{}={s}", d.speaker));
    let mut facts: Vec<String> = Vec::new();
    if is_informative(a.objective) {
        match a.detail {
            Level::Low => {}
            Level::Medium => facts.extend(own.clone()),
            Level::High => facts.extend(
                payload
                    .fact_text(d.speaker)
                    .split_whitespace()
                    .map(String::from),
            ),
        }
    }
    if !d.open_requests.is_empty() {
        if let Some(o) = &own {
            if !facts.contains(o) {
                facts.push(o.clone());
            }
        }
    }
    let filler_words = match a.detail {
        Level::Low => 0,
        Level::Medium => 3,
        Level::High => 6,
    };
    let mut body: Vec<&str> = facts.iter().map(String::as_str).collect();
    body.extend(FILLER.iter().take(filler_words));
    let text = format!(
        "[{}]→{} | {} detail, {} | {}",
        a.objective.name(),
        a.target,
        a.detail.word(),
        a.assertiveness.tone(),
        body.join(" ")
    );
    (text.trim_end().to_string(), a.objective.act())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub aggregator_model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            aggregator_model: "default".into(),
            temperature: 0.7,
            top_p: 0.9,
            max_tokens: 512,
            retries: 2,
            backoff_ms: 250,
            timeout_s: 60,
            max_in_flight: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HttpBackend {
    cfg: HttpConfig,
    key: String,
    agent: ureq::Agent,
    slots: Arc<Slots>,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

impl HttpBackend {
    /// Fails without a credential, before any network activity.
    pub fn new(cfg: HttpConfig, key: Option<String>) -> Result<Self> {
        let key = key.filter(|k| !k.is_empty()).ok_or_else(|| {
            OscError::Config(format!(
                "http backend needs the {API_KEY_ENV} environment variable"
            ))
        })?;
        if cfg.base_url.is_empty() {
            return Err(OscError::Config(
                "http backend needs backend.http.base_url".into(),
            ));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s)))
            .build()
            .into();
        if cfg.max_in_flight == 0 {
            return Err(OscError::Config(
                "backend.http.max_in_flight must be positive".into(),
            ));
        }
        let slots = Arc::new(Slots {
            free: Mutex::new(cfg.max_in_flight),
            cv: Condvar::new(),
        });
        Ok(HttpBackend {
            cfg,
            key,
            agent,
            slots,
        })
    }

    pub fn from_env(cfg: HttpConfig) -> Result<Self> {
        Self::new(cfg, std::env::var(API_KEY_ENV).ok())
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    pub fn request_body(&self, model: &str, system: &str, user: &str) -> serde_json::Value {
        serde_json::json!({
            "model": model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "max_tokens": self.cfg.max_tokens,
        })
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<String> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", format!("Bearer {}", self.key))
            .send_json(body)
            .map_err(|e| OscError::Backend(format!("POST {url}: {e}")))?;
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| OscError::Backend(format!("reading response from {url}: {e}")))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| OscError::Backend(format!("response from {url} has no message content")))
    }

    pub fn chat(&self, model: &str, system: &str, user: &str) -> Result<String> {
        let body = self.request_body(model, system, user);
        let mut last = None;
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            let slot = self.slots.acquire();
            let res = self.post_once(&body);
            drop(slot);
            match res {
                Ok(text) => return Ok(text),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn realize(&self, d: &RealizationDirective) -> Result<(String, DialogueAct)> {
        let (system, user) = d.render();
        let text = self.chat(&self.cfg.model, &system, &user)?;
        Ok((text, d.action.objective.act()))
    }

    pub fn contribute(
        &self,
        agent: AgentId,
        query: &str,
        own_state: &str,
        models: &str,
    ) -> Result<String> {
        let system = format!("you are {agent}. give your final answer to: {query}");
        let user =
            format!("own state: {own_state}\ncollaborator models: {models}\nanswer concisely.");
        self.chat(&self.cfg.model, &system, &user)
    }

    pub fn aggregate(&self, query: &str, contributions: &[String]) -> Result<String> {
        let system = format!("combine the team's answers to: {query}");
        let user = contributions
            .iter()
            .enumerate()
            .map(|(i, c)| format!("agent{i}: {c}"))
            .collect::<Vec<_>>()
            .join("\n");
        self.chat(&self.cfg.aggregator_model, &system, &user)
    }
}

/// The realization backend an episode talks to.
#[derive(Clone, Debug)]
pub enum Backend {
    Stub,
    Http(HttpBackend),
}

impl Backend {
    pub fn kind(&self) -> super::config::BackendKind {
        match self {
            Backend::Stub => super::config::BackendKind::Stub,
            Backend::Http(_) => super::config::BackendKind::Http,
        }
    }

    pub fn realize(
        &self,
        d: &RealizationDirective,
        payload: &PrivatePayload,
    ) -> Result<(String, DialogueAct)> {
        match self {
            Backend::Stub => Ok(realize_stub(d, payload)),
            Backend::Http(h) => h.realize(d),
        }
    }
}
