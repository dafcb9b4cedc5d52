// SPDX-License-Identifier: MIT OR Apache-2.0

//! Complexity scoring of features by an external chat-completion endpoint.
//!
//! The prompt is the committed rubric (`fixtures/complexity_rubric.md`)
//! followed by up to ten top-activation documents, each a window of 100
//! tokens around the strongest activation, with every firing token written as
//! `<<text, activation>>`.
//!
//! Responses are accepted in several shapes: an OpenAI-style `choices` list,
//! a `content` block list, or the bare result object. The message text may be
//! wrapped in whitespace or a code fence.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::rules::{FeatureEntry, TopSample, Vocabulary};
use crate::stats::{pearson, pearson_p_value};

/// Scoring rubric sent ahead of the documents.
pub const RUBRIC: &str = include_str!("../fixtures/complexity_rubric.md");
pub const MAX_SAMPLES: usize = 10;
pub const WINDOW_TOKENS: usize = 100;
pub const MIN_COMPLEXITY: f64 = 1.0;
pub const MAX_COMPLEXITY: f64 = 5.0;

fn format_activation(v: f32) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{r}")
}

/// Window of `WINDOW_TOKENS` tokens around the strongest activation.
fn render_sample(sample: &TopSample, vocab: &Vocabulary) -> String {
    let peak = sample
        .activations
        .iter()
        .fold(None::<(u32, f32)>, |best, &(p, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((p, v)),
        })
        .map_or(0, |(p, _)| p as usize);
    let half = WINDOW_TOKENS / 2;
    let len = sample.tokens.len();
    let lo = peak.saturating_sub(half).min(len.saturating_sub(WINDOW_TOKENS));
    let hi = (lo + WINDOW_TOKENS).min(len);
    let mut out = String::new();
    for pos in lo..hi {
        let text = vocab.text(sample.tokens[pos]);
        let a = sample.activation_at(pos);
        if a > 0.0 {
            out.push_str(&format!("<<{text}, {}>>", format_activation(a)));
        } else {
            out.push_str(&text);
        }
    }
    out
}

/// Rubric followed by the feature's top documents.
pub fn render_prompt(entry: &FeatureEntry, vocab: &Vocabulary) -> Result<String> {
    if entry.samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "feature {} has no activating samples",
            entry.feature
        )));
    }
    let mut out = String::from(RUBRIC);
    out.push_str("\n## Documents\n");
    for (k, s) in entry.samples.iter().take(MAX_SAMPLES).enumerate() {
        out.push_str(&format!("\n### Document {}\n{}\n", k + 1, render_sample(s, vocab)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Full URL of the chat-completion endpoint.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env_var: Option<String>,
    pub timeout_seconds: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// First retry delay; doubles on every retry.
    pub backoff_initial_ms: u64,
    pub max_concurrency: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model_name: String::new(),
            auth_token_env_var: None,
            timeout_seconds: 60.0,
            max_retries: 3,
            temperature: 0.0,
            backoff_initial_ms: 500,
            max_concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub feature: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub feature: usize,
    pub summarization: String,
    pub complexity: f64,
    /// The reported complexity was outside [1, 5].
    pub clamped: bool,
    pub retries: u32,
}

/// The result object extracted from a response body.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedScore {
    pub summarization: String,
    pub complexity: f64,
    pub clamped: bool,
}

fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        if let Some(inner) = rest.trim_end().strip_suffix("```") {
            return inner.trim();
        }
    }
    t
}

/// Message text inside a chat-completion style envelope, if any.
fn message_text(body: &Value) -> Option<String> {
    if let Some(c) = body.pointer("/choices/0/message/content").and_then(Value::as_str) {
        return Some(c.to_string());
    }
    if let Some(c) = body.pointer("/choices/0/text").and_then(Value::as_str) {
        return Some(c.to_string());
    }
    match body.get("content") {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Array(blocks)) => {
            let text: String = blocks
                .iter()
                .filter_map(|b| b.get("text").and_then(Value::as_str))
                .collect();
            (!text.is_empty()).then_some(text)
        }
        _ => None,
    }
}

fn score_from_object(obj: &Map<String, Value>, raw: &str) -> Result<ParsedScore> {
    let fail = |m: &str| Error::Parse {
        message: m.to_string(),
        raw: raw.to_string(),
    };
    let summarization = obj
        .get("summarization")
        .and_then(Value::as_str)
        .ok_or_else(|| fail("missing string field \"summarization\""))?
        .to_string();
    let complexity = match obj.get("complexity") {
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|c| c.is_finite())
    .ok_or_else(|| fail("missing numeric field \"complexity\""))?;
    let extra: Vec<&String> = obj
        .keys()
        .filter(|k| *k != "summarization" && *k != "complexity")
        .collect();
    if !extra.is_empty() {
        log::warn!("annotator response has extra fields {extra:?}");
    }
    let clamped_value = complexity.clamp(MIN_COMPLEXITY, MAX_COMPLEXITY);
    let clamped = clamped_value != complexity;
    if clamped {
        log::warn!("complexity {complexity} outside [1, 5]; clamped to {clamped_value}");
    }
    Ok(ParsedScore {
        summarization,
        complexity: clamped_value,
        clamped,
    })
}

/// Extract `{summarization, complexity}` from a response body.
pub fn parse_response(raw: &str) -> Result<ParsedScore> {
    let fail = |m: String| Error::Parse {
        message: m,
        raw: raw.to_string(),
    };
    let body: Value = serde_json::from_str(strip_fence(raw)).map_err(|e| fail(format!("body is not JSON: {e}")))?;
    if let Some(obj) = body.as_object() {
        if obj.contains_key("summarization") {
            return score_from_object(obj, raw);
        }
    }
    let text = message_text(&body).ok_or_else(|| fail("no message content in response".into()))?;
    let inner = strip_fence(&text);
    let value: Value = serde_json::from_str(inner)
        .or_else(|_| {
            // Tolerate prose around the object.
            match (inner.find('{'), inner.rfind('}')) {
                (Some(a), Some(b)) if a < b => serde_json::from_str(&inner[a..=b]),
                _ => serde_json::from_str(inner),
            }
        })
        .map_err(|e| fail(format!("message is not a JSON object: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| fail("message is not a JSON object".into()))?;
    score_from_object(obj, raw)
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Send one request, retrying on 429 and 5xx with exponential backoff. The
/// whole call is bounded by `timeout_seconds * (max_retries + 1)`.
pub fn annotate(cfg: &EndpointConfig, request: &AnnotationRequest) -> Result<AnnotationResult> {
    if cfg.base_url.is_empty() {
        return Err(Error::InvalidInput("annotator endpoint URL is empty".into()));
    }
    if !(cfg.timeout_seconds > 0.0) {
        return Err(Error::InvalidInput("timeout must be positive".into()));
    }
    let token = match &cfg.auth_token_env_var {
        Some(var) => Some(std::env::var(var).map_err(|_| {
            Error::InvalidInput(format!("environment variable {var} holding the auth token is not set"))
        })?),
        None => None,
    };
    let per_try = Duration::from_secs_f64(cfg.timeout_seconds);
    let deadline = Instant::now() + per_try * (cfg.max_retries + 1);
    let body = json!({
        "model": cfg.model_name,
        "temperature": cfg.temperature,
        "messages": [{"role": "user", "content": request.prompt}],
    });
    let mut retries = 0u32;
    let mut delay = Duration::from_millis(cfg.backoff_initial_ms);
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(Error::Http(format!("deadline exceeded after {retries} retries")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(per_try.min(remaining)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&cfg.base_url).header("content-type", "application/json");
        if let Some(t) = &token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let outcome = req.send_json(&body).and_then(|resp| {
            let status = resp.status().as_u16();
            resp.into_body().read_to_string().map(|text| (status, text))
        });
        let failure = match outcome {
            Ok((status, text)) if (200..300).contains(&status) => {
                let parsed = parse_response(&text)?;
                return Ok(AnnotationResult {
                    feature: request.feature,
                    summarization: parsed.summarization,
                    complexity: parsed.complexity,
                    clamped: parsed.clamped,
                    retries,
                });
            }
            Ok((status, text)) if retryable(status) => format!("status {status}: {}", text.trim()),
            Ok((status, text)) => return Err(Error::Http(format!("status {status}: {}", text.trim()))),
            Err(e) => format!("request failed: {e}"),
        };
        if retries >= cfg.max_retries {
            return Err(Error::Http(format!("giving up after {retries} retries; last error {failure}")));
        }
        let remaining = deadline.saturating_duration_since(Instant::now());
        if delay >= remaining {
            return Err(Error::Http(format!("no time left to retry; last error {failure}")));
        }
        log::warn!("annotator: {failure}; retrying in {delay:?}");
        std::thread::sleep(delay);
        delay *= 2;
        retries += 1;
    }
}

/// Annotate many features with at most `max_concurrency` requests in
/// flight; results are ordered by feature id.
pub fn annotate_many(cfg: &EndpointConfig, requests: &[AnnotationRequest]) -> Vec<(usize, Result<AnnotationResult>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_concurrency.max(1))
        .build();
    let run = || {
        requests
            .par_iter()
            .map(|r| (r.feature, annotate(cfg, r)))
            .collect::<Vec<_>>()
    };
    let mut out = match pool {
        Ok(p) => p.install(run),
        Err(_) => run(),
    };
    out.sort_by_key(|(f, _)| *f);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation between peak emergence step and complexity, with a
/// two-sided t-test p-value.
pub fn complexity_vs_peak(pairs: &[(f64, f64)]) -> Result<Correlation> {
    if pairs.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 annotated features, got {}",
            pairs.len()
        )));
    }
    let (peaks, scores): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let r = pearson(&peaks, &scores)?;
    Ok(Correlation {
        r,
        p_value: pearson_p_value(r, pairs.len())?,
        n: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(samples: Vec<TopSample>) -> FeatureEntry {
        FeatureEntry {
            feature: 7,
            samples,
            total_activations: 1,
        }
    }

    #[test]
    fn marker_syntax() {
        let vocab = Vocabulary {
            tokens: vec!["The".into(), " tok".into(), " end".into()],
        };
        let s = TopSample {
            shard: 0,
            sequence: 0,
            start_row: 0,
            max_activation: 3.2,
            tokens: vec![0, 1, 2],
            activations: vec![(1, 3.2)],
        };
        let p = render_prompt(&entry(vec![s]), &vocab).unwrap();
        assert!(p.starts_with(RUBRIC));
        assert!(p.contains("The<< tok, 3.2>> end"), "{p}");
        assert!(render_prompt(&entry(vec![]), &vocab).is_err());
    }

    #[test]
    fn window_is_bounded() {
        let s = TopSample {
            shard: 0,
            sequence: 0,
            start_row: 0,
            max_activation: 1.0,
            tokens: (0..500).collect(),
            activations: vec![(250, 1.0)],
        };
        let text = render_sample(&s, &Vocabulary::default());
        assert!(text.starts_with("200"));
        assert!(text.ends_with("299"));
    }

    #[test]
    fn parses_envelopes_and_fences() {
        let bare = r#"{"summarization":"plural nouns","complexity":2}"#;
        let p = parse_response(bare).unwrap();
        assert_eq!((p.summarization.as_str(), p.complexity), ("plural nouns", 2.0));
        let chat = json!({"choices":[{"message":{"content":"```json\n{\"summarization\":\"x\",\"complexity\":3.7}\n```"}}]});
        assert_eq!(parse_response(&chat.to_string()).unwrap().complexity, 3.7);
        let blocks = json!({"content":[{"type":"text","text":"  {\"summarization\":\"y\",\"complexity\":\"4\"} "}]});
        assert_eq!(parse_response(&blocks.to_string()).unwrap().complexity, 4.0);
        let high = parse_response(r#"{"summarization":"z","complexity":7}"#).unwrap();
        assert!(high.clamped && high.complexity == 5.0);
        match parse_response("{not json") {
            Err(Error::Parse { raw, .. }) => assert_eq!(raw, "{not json"),
            other => panic!("{other:?}"),
        }
        assert!(parse_response(r#"{"summarization":"a"}"#).is_err());
    }

    #[test]
    fn increasing_complexity_correlates_fully() {
        let c = complexity_vs_peak(&[(1.0, 1.0), (10.0, 2.0), (100.0, 3.0)]);
        // Not linear in the step, so r < 1; a linear relation gives exactly 1.
        assert!(c.unwrap().r > 0.8);
        let lin = complexity_vs_peak(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)]).unwrap();
        assert!((lin.r - 1.0).abs() < 1e-12);
        assert!(complexity_vs_peak(&[(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)]).is_err());
    }
}
