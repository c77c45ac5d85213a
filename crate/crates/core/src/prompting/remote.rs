//! Chat-completions client for a remote vision-language model.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{column_label, row_label, AnnotatedObservation, PromptError, WaypointProvider};
use crate::geometry::{sequence_from_value, BlockSequence};

pub const METAPROMPT_VERSION: u32 = 1;
pub const METAPROMPT_TEMPLATE: &str = include_str!("../../prompts/metaprompt_v1.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. No
    /// authorization header is sent when unset.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Follow-up attempts after a malformed answer.
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> usize {
    3
}

/// The first balanced `[...]` in `text` that parses as JSON.
pub fn extract_first_array(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'[') {
        let mut depth = 0usize;
        for (j, &b) in bytes.iter().enumerate().skip(start) {
            match b {
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(v) = serde_json::from_str::<Value>(&text[start..=j]) {
                            if v.is_array() {
                                return Some(v);
                            }
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

fn join_labels(labels: impl Iterator<Item = String>) -> String {
    labels.collect::<Vec<_>>().join(", ")
}

pub fn fill_metaprompt(annotation: &AnnotatedObservation, instruction: &str) -> String {
    let g = &annotation.grid;
    let labels = |it: &mut dyn Iterator<Item = &super::KeypointCandidate>| join_labels(it.map(|c| c.label.clone()));
    METAPROMPT_TEMPLATE
        .replace("{cols}", &g.cols.to_string())
        .replace("{rows}", &g.rows.to_string())
        .replace("{levels}", &g.height_levels.to_string())
        .replace("{col_labels}", &join_labels((0..g.cols).map(column_label)))
        .replace("{row_labels}", &join_labels((0..g.rows).map(row_label)))
        .replace(
            "{level_labels}",
            &join_labels(annotation.side_lines.iter().map(|l| l.label.clone())),
        )
        .replace("{grasp_labels}", &labels(&mut annotation.grasp_candidates()))
        .replace("{target_labels}", &labels(&mut annotation.target_candidates()))
        .replace("{max_col}", &(g.cols - 1).to_string())
        .replace("{max_row}", &(g.rows - 1).to_string())
        .replace("{max_level}", &(g.height_levels - 1).to_string())
        .replace("{instruction}", instruction)
}

fn data_url(png: &[u8]) -> String {
    format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    )
}

pub struct RemoteProvider {
    pub config: EndpointConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider").field("config", &self.config).finish()
    }
}

impl RemoteProvider {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { config, agent }
    }

    /// The request body for the first attempt.
    pub fn initial_messages(
        &self,
        annotation: &AnnotatedObservation,
        instruction: &str,
    ) -> Result<Vec<Value>, PromptError> {
        let enc = |r: &super::raster::Raster| r.to_png().map_err(|e| PromptError::Encode(e.to_string()));
        let top = enc(&annotation.rendered_top)?;
        let side = enc(&annotation.rendered_side)?;
        Ok(vec![json!({
            "role": "user",
            "content": [
                {"type": "text", "text": fill_metaprompt(annotation, instruction)},
                {"type": "image_url", "image_url": {"url": data_url(&top)}},
                {"type": "image_url", "image_url": {"url": data_url(&side)}},
            ],
        })])
    }

    fn complete(&self, messages: &[Value]) -> Result<String, PromptError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var).map_err(|_| PromptError::MissingApiKey(var.clone()))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = json!({"model": self.config.model, "messages": messages, "temperature": 0});
        let mut resp = req.send_json(&body).map_err(|e| PromptError::Network(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| PromptError::Response(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| PromptError::Response("missing choices[0].message.content".into()))
    }
}

impl WaypointProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn query(&mut self, annotation: &AnnotatedObservation, instruction: &str) -> Result<BlockSequence, PromptError> {
        let mut messages = self.initial_messages(annotation, instruction)?;
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            let answer = self.complete(&messages)?;
            let parsed = extract_first_array(&answer)
                .ok_or_else(|| "the answer contains no JSON array".to_string())
                .and_then(|v| sequence_from_value(&v, &annotation.grid).map_err(|e| e.to_string()));
            match parsed {
                Ok(seq) => return Ok(seq),
                Err(e) => {
                    last = e;
                    messages.push(json!({"role": "assistant", "content": answer}));
                    messages.push(json!({
                        "role": "user",
                        "content": format!(
                            "That trajectory could not be used: {last}. Reply again and end with one JSON array of [x, y, z] integer triples inside the grid."
                        ),
                    }));
                }
            }
        }
        Err(PromptError::RetriesExhausted {
            attempts: self.config.retries + 1,
            last,
        })
    }
}
