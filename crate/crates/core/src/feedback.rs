//! Per-trait natural-language feedback from a chat-completion service, with a
//! deterministic offline stub.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::corpus::PromptSpec;
use crate::scoring::ScoreReport;

pub const DEFAULT_API_KEY_ENV: &str = "AES_LLM_API_KEY";
const REPLY_EXCERPT: usize = 512;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("invalid LLM config: {0}")]
    InvalidConfig(String),
    #[error("LLM request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("LLM remote error{}: {body}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    RemoteError { status: Option<u16>, body: String },
    #[error("malformed LLM reply: {0}")]
    MalformedReply(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Chat-completion URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer credential.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First retry delay; each later retry doubles it.
    pub backoff_base_ms: u64,
    pub temperature: f64,
    pub offline_stub: bool,
    /// Upper bound on concurrent remote calls.
    pub max_in_flight: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_base_ms: 500,
            temperature: 0.3,
            offline_stub: true,
            max_in_flight: 4,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        let bad = |m: &str| Err(FeedbackError::InvalidConfig(m.to_string()));
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if !self.offline_stub && (self.endpoint.is_empty() || self.model.is_empty()) {
            return bad("remote mode needs endpoint and model");
        }
        Ok(())
    }

    /// Delay before retry `k` (1-based) is `backoff_base_ms * 2^(k-1)`.
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        (0..self.max_retries)
            .map(|k| Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << k.min(20))))
            .collect()
    }
}

const PLACEHOLDERS: [&str; 4] = ["essay", "genre", "trait_table", "rubric"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub text: String,
}

const BUILTIN_TEMPLATE: &str = "You are reviewing a student essay written for a {genre} prompt.\n\
\n\
Rubric ranges:\n{rubric}\n\
\n\
Scores assigned by the automated scorer:\n{trait_table}\n\
\n\
For each trait, explain what in the essay supports the score and give one concrete, \
actionable suggestion for improvement. Then write a short overall summary.\n\
\n\
Essay:\n\"\"\"\n{essay}\n\"\"\"\n";

impl PromptTemplate {
    /// Rejects templates that name unknown placeholders or none at all.
    pub fn new(version: impl Into<String>, text: impl Into<String>) -> Result<Self, FeedbackError> {
        let text = text.into();
        let names = placeholder_names(&text);
        if let Some(unknown) = names.iter().find(|n| !PLACEHOLDERS.contains(&n.as_str())) {
            return Err(FeedbackError::TemplateMismatch(format!("unknown placeholder {{{unknown}}}")));
        }
        if names.is_empty() {
            return Err(FeedbackError::TemplateMismatch("template uses no placeholder".into()));
        }
        Ok(Self {
            version: version.into(),
            text,
        })
    }

    pub fn builtin() -> Self {
        Self::new("feedback-v1", BUILTIN_TEMPLATE).expect("builtin template is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FeedbackError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeedbackError::TemplateMismatch(format!("{}: {e}", path.display())))?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::new(version, text)
    }

    pub fn missing_placeholders(&self) -> Vec<&'static str> {
        let names = placeholder_names(&self.text);
        PLACEHOLDERS.into_iter().filter(|p| !names.iter().any(|n| n == p)).collect()
    }
}

fn placeholder_names(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                out.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// `name: score/max`, one line per trait in the prompt's declared order.
pub fn trait_table(report: &ScoreReport, spec: &PromptSpec) -> String {
    let mut out = String::new();
    for t in &spec.traits {
        if let Some(s) = report.traits.get(&t.name) {
            let _ = writeln!(out, "{}: {}/{}", t.name, s.rubric, t.range.max());
        }
    }
    out.pop();
    out
}

fn rubric_text(spec: &PromptSpec) -> String {
    let mut out = format!("overall: {}-{}", spec.overall_range.min(), spec.overall_range.max());
    for t in &spec.traits {
        let _ = write!(out, "\n{}: {}-{}", t.name, t.range.min(), t.range.max());
    }
    out
}

/// Substitutes the placeholders in one left-to-right pass, so braces inside
/// the essay are never re-expanded.
pub fn build_prompt(
    report: &ScoreReport,
    essay: &str,
    spec: &PromptSpec,
    template: &PromptTemplate,
) -> Result<String, FeedbackError> {
    if report.prompt_id != spec.prompt_id {
        return Err(FeedbackError::TemplateMismatch(format!(
            "report is for prompt {}, spec is prompt {}",
            report.prompt_id, spec.prompt_id
        )));
    }
    let expected: Vec<&str> = spec.traits.iter().map(|t| t.name.as_str()).collect();
    let mut got: Vec<&str> = report.traits.keys().map(String::as_str).collect();
    let mut sorted = expected.clone();
    sorted.sort_unstable();
    got.sort_unstable();
    if got != sorted {
        return Err(FeedbackError::TemplateMismatch(format!(
            "report traits {got:?} differ from prompt traits {expected:?}"
        )));
    }

    let mut out = String::with_capacity(template.text.len() + essay.len());
    let mut rest = template.text.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').filter(|&c| is_ident(&after[..c]));
        match close.map(|c| (&after[..c], c)) {
            Some((name, c)) => {
                match name {
                    "essay" => out.push_str(essay),
                    "genre" => out.push_str(spec.genre.as_str()),
                    "trait_table" => out.push_str(&trait_table(report, spec)),
                    "rubric" => out.push_str(&rubric_text(spec)),
                    other => {
                        return Err(FeedbackError::TemplateMismatch(format!(
                            "unknown placeholder {{{other}}}"
                        )))
                    }
                }
                rest = &after[c + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    if out.trim().is_empty() {
        return Err(FeedbackError::TemplateMismatch("rendered prompt is empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: FeedbackSource,
    pub model: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub commentary: BTreeMap<String, String>,
    pub overall_summary: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    /// Low below 1/3, mid below 2/3, high otherwise.
    pub fn of(normalized: f64) -> Self {
        if normalized < 1.0 / 3.0 {
            Band::Low
        } else if normalized < 2.0 / 3.0 {
            Band::Mid
        } else {
            Band::High
        }
    }
}

fn display_name(name: &str) -> String {
    name.replace('_', " ")
}

/// Canned advice for one trait in one band.
pub fn stub_commentary(trait_name: &str, band: Band) -> String {
    let t = display_name(trait_name);
    match band {
        Band::Low => format!(
            "{t}: this is the weakest area of the essay. Reread the rubric description for {t}, \
             pick one paragraph, and rewrite it with that criterion as the only goal."
        ),
        Band::Mid => format!(
            "{t}: adequate but uneven. Find the sentence where {t} is weakest and revise it to \
             match the strongest parts of the essay."
        ),
        Band::High => format!(
            "{t}: a clear strength. Keep this level consistent throughout and use it to support \
             the weaker traits."
        ),
    }
}

pub fn stub_summary(band: Band) -> String {
    match band {
        Band::Low => "The essay is below the expected level overall. Focus revisions on the lowest-scoring \
                      traits first, one at a time."
            .to_string(),
        Band::Mid => "The essay meets part of the rubric. Targeted revision of the mid and low traits should \
                      raise the overall score."
            .to_string(),
        Band::High => "The essay is strong overall. Polish the remaining weaker traits to make it consistent."
            .to_string(),
    }
}

pub fn stub_feedback(report: &ScoreReport) -> FeedbackBundle {
    FeedbackBundle {
        commentary: report
            .traits
            .iter()
            .map(|(name, s)| (name.clone(), stub_commentary(name, Band::of(s.normalized))))
            .collect(),
        overall_summary: stub_summary(Band::of(report.overall_normalized)),
        provenance: Provenance {
            source: FeedbackSource::Stub,
            model: "stub".into(),
            latency_ms: 0,
        },
    }
}

fn system_prompt(trait_names: &[&str]) -> String {
    let keys = trait_names
        .iter()
        .map(|t| format!("\"{t}\""))
        .chain(std::iter::once("\"overall_summary\"".to_string()))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "You write feedback on student essays. Reply with exactly one fenced code block \
         tagged json containing a single JSON object whose keys are {keys}. Each value is \
         a string of plain-text feedback for that trait. Do not add other keys."
    )
}

/// Extracts the trait commentary and summary from a reply, or names the
/// sections that are missing.
pub fn parse_reply(reply: &str, trait_names: &[&str]) -> Result<(BTreeMap<String, String>, String), Vec<String>> {
    let block = fenced_json(reply);
    let obj: Option<serde_json::Map<String, Value>> = block.and_then(|b| serde_json::from_str(b).ok());
    let Some(obj) = obj else {
        let mut all: Vec<String> = trait_names.iter().map(|s| s.to_string()).collect();
        all.push("overall_summary".into());
        return Err(all);
    };
    let text_of = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_string);
    let mut missing = Vec::new();
    let mut commentary = BTreeMap::new();
    for &t in trait_names {
        match text_of(t) {
            Some(v) if !v.trim().is_empty() => {
                commentary.insert(t.to_string(), v);
            }
            _ => missing.push(t.to_string()),
        }
    }
    let summary = text_of("overall_summary").filter(|s| !s.trim().is_empty());
    if summary.is_none() {
        missing.push("overall_summary".into());
    }
    if missing.is_empty() {
        Ok((commentary, summary.unwrap_or_default()))
    } else {
        Err(missing)
    }
}

fn fenced_json(reply: &str) -> Option<&str> {
    let start = reply.find("```json")? + "```json".len();
    let body = &reply[start..];
    let end = body.find("```")?;
    Some(body[..end].trim())
}

/// Feedback client; stub or remote according to its config.
#[derive(Debug)]
pub struct LlmClient {
    config: LlmConfig,
    http: reqwest::Client,
    permits: Semaphore,
}

enum Attempt {
    Retry(FeedbackError),
    Fail(FeedbackError),
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self, FeedbackError> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| FeedbackError::InvalidConfig(e.to_string()))?;
        let permits = Semaphore::new(config.max_in_flight);
        Ok(Self {
            config,
            http,
            permits,
        })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub async fn request_feedback(&self, prompt: &str, report: &ScoreReport) -> Result<FeedbackBundle, FeedbackError> {
        if self.config.offline_stub {
            return Ok(stub_feedback(report));
        }
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let started = Instant::now();
        let names: Vec<&str> = report.traits.keys().map(String::as_str).collect();
        let mut messages = vec![
            json!({"role": "system", "content": system_prompt(&names)}),
            json!({"role": "user", "content": prompt}),
        ];

        let reply = self.complete(&messages).await?;
        let (commentary, overall_summary) = match parse_reply(&reply, &names) {
            Ok(v) => v,
            Err(missing) => {
                tracing::warn!(?missing, "feedback reply incomplete, sending repair request");
                messages.push(json!({"role": "assistant", "content": reply}));
                messages.push(json!({
                    "role": "user",
                    "content": format!(
                        "Your reply is missing these sections: {}. Reply again with one fenced json \
                         block containing every required key.",
                        missing.join(", ")
                    ),
                }));
                let repaired = self.complete(&messages).await?;
                parse_reply(&repaired, &names).map_err(|missing| {
                    FeedbackError::MalformedReply(format!("missing sections after repair: {}", missing.join(", ")))
                })?
            }
        };
        Ok(FeedbackBundle {
            commentary,
            overall_summary,
            provenance: Provenance {
                source: FeedbackSource::Remote,
                model: self.config.model.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
            },
        })
    }

    /// One chat completion with retries on timeouts, connection failures,
    /// 429 and 5xx.
    async fn complete(&self, messages: &[Value]) -> Result<String, FeedbackError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let schedule = self.config.backoff_schedule();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let err = match self.attempt(&body, attempts).await {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) => e,
            };
            match schedule.get(attempts as usize - 1) {
                Some(delay) => {
                    tracing::warn!(attempt = attempts, error = %err, "retrying LLM request");
                    tokio::time::sleep(*delay).await;
                }
                None => return Err(err),
            }
        }
    }

    async fn attempt(&self, body: &Value, attempts: u32) -> Result<String, Attempt> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err(Attempt::Retry(FeedbackError::Timeout { attempts })),
            Err(e) => {
                return Err(Attempt::Retry(FeedbackError::RemoteError {
                    status: None,
                    body: e.to_string(),
                }))
            }
        };
        let status = resp.status();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Err(Attempt::Retry(FeedbackError::Timeout { attempts })),
            Err(e) => e.to_string(),
        };
        if !status.is_success() {
            let err = FeedbackError::RemoteError {
                status: Some(status.as_u16()),
                body: excerpt(&text),
            };
            return if status.as_u16() == 429 || status.is_server_error() {
                Err(Attempt::Retry(err))
            } else {
                Err(Attempt::Fail(err))
            };
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fail(FeedbackError::MalformedReply(format!("response is not JSON: {e}"))))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                Attempt::Fail(FeedbackError::MalformedReply(format!(
                    "no choices[0].message.content in {}",
                    excerpt(&text)
                )))
            })
    }
}

fn excerpt(text: &str) -> String {
    match text.char_indices().nth(REPLY_EXCERPT) {
        Some((i, _)) => format!("{}...", &text[..i]),
        None => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::builtin_prompt_table;
    use crate::scoring::TraitScore;

    fn report(prompt_id: u32, normalized: f64) -> (ScoreReport, PromptSpec) {
        let spec = builtin_prompt_table().get(prompt_id).unwrap().clone();
        let traits = spec
            .traits
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    TraitScore {
                        normalized,
                        rubric: t.range.max(),
                    },
                )
            })
            .collect();
        let r = ScoreReport {
            essay_id: "x".into(),
            prompt_id,
            genre: spec.genre,
            overall_normalized: normalized,
            overall_rubric: spec.overall_range.min(),
            traits,
        };
        (r, spec)
    }

    #[test]
    fn genre_only_template() {
        let (r, spec) = report(3, 0.5);
        let t = PromptTemplate::new("t", "{genre}").unwrap();
        assert_eq!(build_prompt(&r, "essay", &spec, &t).unwrap(), "question_answering");
        assert_eq!(t.missing_placeholders(), vec!["essay", "trait_table", "rubric"]);
    }

    #[test]
    fn prompt_eight_trait_table_has_six_lines() {
        let (r, spec) = report(8, 0.5);
        let t = PromptTemplate::new("t", "{trait_table}").unwrap();
        let out = build_prompt(&r, "e", &spec, &t).unwrap();
        assert_eq!(out.lines().count(), 6);
        assert_eq!(out.lines().next().unwrap(), "ideas_and_content: 12/12");
    }

    #[test]
    fn builtin_template_is_deterministic_and_complete() {
        let (r, spec) = report(1, 0.5);
        let t = PromptTemplate::builtin();
        assert!(t.missing_placeholders().is_empty());
        let essay = "Braces {genre} in the essay stay literal.";
        let a = build_prompt(&r, essay, &spec, &t).unwrap();
        assert_eq!(a, build_prompt(&r, essay, &spec, &t).unwrap());
        assert!(a.contains(essay));
    }

    #[test]
    fn template_errors() {
        assert!(matches!(PromptTemplate::new("t", "{essay} {bogus}"), Err(FeedbackError::TemplateMismatch(_))));
        assert!(matches!(PromptTemplate::new("t", "plain text"), Err(FeedbackError::TemplateMismatch(_))));
        let (r, _) = report(1, 0.5);
        let other = builtin_prompt_table().get(3).unwrap().clone();
        assert!(matches!(
            build_prompt(&r, "e", &other, &PromptTemplate::builtin()),
            Err(FeedbackError::TemplateMismatch(_))
        ));
    }

    #[test]
    fn stub_bands() {
        assert_eq!(Band::of(0.1), Band::Low);
        assert_eq!(Band::of(1.0 / 3.0), Band::Mid);
        assert_eq!(Band::of(0.5), Band::Mid);
        assert_eq!(Band::of(2.0 / 3.0), Band::High);
        let (r, _) = report(2, 0.1);
        let fb = stub_feedback(&r);
        assert_eq!(fb.commentary["content"], stub_commentary("content", Band::Low));
        assert_eq!(fb.provenance.source, FeedbackSource::Stub);
        assert_eq!(fb, stub_feedback(&r));
    }

    #[test]
    fn reply_parsing() {
        let names = ["a", "b"];
        let ok = "text\n```json\n{\"a\": \"x\", \"b\": \"y\", \"overall_summary\": \"z\"}\n```\n";
        let (c, s) = parse_reply(ok, &names).unwrap();
        assert_eq!(c["a"], "x");
        assert_eq!(s, "z");
        let partial = "```json\n{\"a\": \"x\", \"overall_summary\": \"z\"}\n```";
        assert_eq!(parse_reply(partial, &names).unwrap_err(), vec!["b".to_string()]);
        assert_eq!(parse_reply("no block", &names).unwrap_err().len(), 3);
    }

    #[test]
    fn backoff_is_monotone() {
        let cfg = LlmConfig {
            max_retries: 5,
            backoff_base_ms: 10,
            ..LlmConfig::default()
        };
        let s = cfg.backoff_schedule();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(s[0], Duration::from_millis(10));
    }

    #[test]
    fn config_validation() {
        assert!(LlmConfig::default().validate().is_ok());
        let remote = LlmConfig {
            offline_stub: false,
            ..LlmConfig::default()
        };
        assert!(remote.validate().is_err());
        let zero = LlmConfig {
            timeout_secs: 0.0,
            ..LlmConfig::default()
        };
        assert!(zero.validate().is_err());
    }
}
