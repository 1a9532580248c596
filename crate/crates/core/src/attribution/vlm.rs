//! OpenAI-compatible chat-completions client for VLM judgments.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    compose_triptych, parse_pair_answer, parse_relabel_answer, Judgment, JudgmentBackend, PromptStore,
    PromptVars, RelabelOutcome, RelabelQuery, TriptychQuery,
};
use crate::domain::{ImageTensor, PairVote};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    /// Extra attempts after the first failure.
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub vars: PromptVars,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key: None,
            timeout_secs: 60,
            max_retries: 2,
            retry_backoff_ms: 500,
            vars: PromptVars::eyeglasses(),
        }
    }
}

pub struct VlmBackend {
    config: VlmConfig,
    prompts: PromptStore,
    client: reqwest::blocking::Client,
}

impl VlmBackend {
    pub fn new(config: VlmConfig, prompts: PromptStore) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(Self {
            config,
            prompts,
            client,
        })
    }

    fn request_once(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {text}"));
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("bad JSON body: {e}"))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("response has no message content: {text}"))
    }

    /// Sends one prompt with one image; `Err` carries the last failure after
    /// the retry budget is spent.
    fn ask(&self, prompt: &str, image: &ImageTensor) -> std::result::Result<String, String> {
        let png = image.encode_png().map_err(|e| e.to_string())?;
        let url = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(png)
        );
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": url}}
                ]
            }]
        });
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * attempt as u64));
            }
            match self.request_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("VLM request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }
}

impl JudgmentBackend for VlmBackend {
    fn judge_pair(&self, query: &TriptychQuery) -> Result<Judgment<PairVote>> {
        let vars = PromptVars {
            attribute: query.task_attribute.clone(),
            ..self.config.vars.clone()
        };
        let prompt = self.prompts.render(&query.prompt_template_id, &vars)?;
        let image = compose_triptych(&query.original, &query.perturbed, &query.diff_mask)?;
        Ok(match self.ask(&prompt, &image) {
            Ok(text) => Judgment {
                outcome: parse_pair_answer(&text),
                raw_response: Some(text),
                error: None,
            },
            Err(e) => Judgment {
                outcome: PairVote::Ambiguous,
                raw_response: None,
                error: Some(e),
            },
        })
    }

    fn relabel(&self, query: &RelabelQuery) -> Result<Judgment<RelabelOutcome>> {
        let prompt = self.prompts.render(&query.prompt_template_id, &self.config.vars)?;
        Ok(match self.ask(&prompt, &query.image) {
            Ok(text) => Judgment {
                outcome: parse_relabel_answer(&text, &self.config.vars.label_key),
                raw_response: Some(text),
                error: None,
            },
            Err(e) => Judgment {
                outcome: RelabelOutcome::Ambiguous,
                raw_response: None,
                error: Some(e),
            },
        })
    }

    fn deterministic(&self) -> bool {
        false
    }
}
