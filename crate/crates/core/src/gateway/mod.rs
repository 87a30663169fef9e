//! Client for the chat-completion services used by the pipeline.
//!
//! Every call goes through [`Gateway::complete`], which renders a named
//! [`PromptTemplate`], enforces the in-flight cap, and retries transport
//! failures. Content failures are never retried here: a well-formed but
//! unusable answer is returned to the caller, whose own verification loop
//! decides what to do with it.
//!
//! Two backends exist. [`remote::RemoteBackend`] posts chat-completion JSON
//! over HTTPS. [`mock::MockBackend`] answers deterministically from the
//! template name, bindings and seed, and can be scripted per call.

pub mod mock;
pub mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{Components, Role};

/// Placeholder name -> value.
pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template `{template}`: placeholder `{{{name}}}` is unbound")]
    UnboundPlaceholder { template: String, name: String },
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("malformed template: {0}")]
    MalformedTemplate(String),
    #[error("template `{template}`: gave up after {attempts} attempts: {message}")]
    Exhausted {
        template: String,
        attempts: u32,
        message: String,
    },
    #[error("template `{template}`: rate limited after {attempts} attempts")]
    RateLimited { template: String, attempts: u32 },
    #[error("template `{template}`: {message}")]
    Fatal { template: String, message: String },
    #[error("template `{template}`: unusable response: {message}")]
    BadResponse { template: String, message: String },
    #[error("configuration: {0}")]
    Config(String),
}

/// Failure reported by a backend for a single transport attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Connection reset, timeout, 5xx: worth retrying.
    Transient(String),
    /// 429 or equivalent: retried with backoff.
    RateLimited(String),
    /// Anything else: surfaced immediately.
    Fatal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Mock,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend `{other}` (expected mock|remote)")),
        }
    }
}

/// Gateway configuration. Only the *name* of the environment variable that
/// holds the API token is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub token_env: String,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Mock,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            token_env: "HALLOC_API_TOKEN".into(),
            max_in_flight: 8,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            seed: 0,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        if self.backend == BackendKind::Remote {
            if self.endpoint.is_empty() {
                return Err(GatewayError::Config("remote backend needs an endpoint".into()));
            }
            if self.token_env.is_empty() {
                return Err(GatewayError::Config("remote backend needs token_env".into()));
            }
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            backoff_base: Duration::ZERO,
        }
    }

    fn delay(&self, retry: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << retry.min(16))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: String,
    pub output: String,
}

/// A named prompt with `{placeholder}` slots. `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub role: String,
    pub body: String,
    pub examples: Vec<Example>,
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn pieces(body: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut out = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let Some(i) = rest.find(['{', '}']) else {
            out.push(Piece::Text(rest));
            break;
        };
        if i > 0 {
            out.push(Piece::Text(&rest[..i]));
        }
        let tail = &rest[i..];
        if let Some(r) = tail.strip_prefix("{{") {
            out.push(Piece::Brace('{'));
            rest = r;
        } else if let Some(r) = tail.strip_prefix("}}") {
            out.push(Piece::Brace('}'));
            rest = r;
        } else if tail.starts_with('}') {
            return Err("unmatched `}`".into());
        } else {
            let close = tail.find('}').ok_or("unterminated `{`")?;
            let name = &tail[1..close];
            if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(format!("bad placeholder `{{{name}}}`"));
            }
            out.push(Piece::Slot(name));
            rest = &tail[close + 1..];
        }
    }
    Ok(out)
}

impl PromptTemplate {
    /// Parses the template file format:
    ///
    /// ```text
    /// name: craft-attr
    /// version: 1
    /// role: <system text>
    /// ---
    /// <body>
    /// ### example
    /// <example input>
    /// ### answer
    /// <example output>
    /// ```
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let bad = |m: &str| GatewayError::MalformedTemplate(m.to_string());
        let (head, rest) = text
            .split_once("\n---\n")
            .ok_or_else(|| bad("missing `---` separator"))?;
        let mut name = None;
        let mut version = 1;
        let mut role = String::new();
        for line in head.lines() {
            let Some((k, v)) = line.split_once(':') else {
                continue;
            };
            match k.trim() {
                "name" => name = Some(v.trim().to_string()),
                "version" => version = v.trim().parse().map_err(|_| bad("bad version"))?,
                "role" => role = v.trim().to_string(),
                _ => {}
            }
        }
        let name = name.ok_or_else(|| bad("missing name"))?;
        let mut sections = rest.split("### example\n");
        let body = sections.next().unwrap_or_default().trim_end().to_string();
        let mut examples = Vec::new();
        for ex in sections {
            let (input, output) = ex
                .split_once("### answer\n")
                .ok_or_else(|| bad("example without `### answer`"))?;
            examples.push(Example {
                input: input.trim_end().to_string(),
                output: output.trim_end().to_string(),
            });
        }
        let t = PromptTemplate {
            name,
            version,
            role,
            body,
            examples,
        };
        pieces(&t.body).map_err(|e| bad(&format!("{}: {e}", t.name)))?;
        Ok(t)
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        pieces(&self.body)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.to_string()),
                _ => None,
            })
            .collect()
    }

    /// Renders the user message: in-context examples first, then the body.
    pub fn render(&self, bindings: &Bindings) -> Result<String, GatewayError> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str("Example:\n");
            out.push_str(&ex.input);
            out.push_str("\nExpected reply:\n");
            out.push_str(&ex.output);
            out.push_str("\n\n");
        }
        let parts =
            pieces(&self.body).map_err(|e| GatewayError::MalformedTemplate(e.to_string()))?;
        for p in parts {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Brace(c) => out.push(c),
                Piece::Slot(name) => {
                    let v = bindings.get(name).ok_or_else(|| GatewayError::UnboundPlaceholder {
                        template: self.name.clone(),
                        name: name.to_string(),
                    })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

const DEFAULT_TEMPLATES: &[&str] = &[
    include_str!("../../templates/craft-attr.txt"),
    include_str!("../../templates/craft-rel.txt"),
    include_str!("../../templates/find-point-attr.txt"),
    include_str!("../../templates/find-point-rel.txt"),
    include_str!("../../templates/find-point-sce.txt"),
    include_str!("../../templates/inject-obj.txt"),
    include_str!("../../templates/inject-attr.txt"),
    include_str!("../../templates/inject-rel.txt"),
    include_str!("../../templates/inject-sce.txt"),
    include_str!("../../templates/verify-obj.txt"),
    include_str!("../../templates/verify-attr.txt"),
    include_str!("../../templates/verify-rel.txt"),
    include_str!("../../templates/verify-sce.txt"),
    include_str!("../../templates/verify-annotation.txt"),
    include_str!("../../templates/entail.txt"),
    include_str!("../../templates/probe.txt"),
];

/// Prompt templates keyed by pipeline stage.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn defaults() -> Self {
        let templates = DEFAULT_TEMPLATES
            .iter()
            .map(|t| {
                let t = PromptTemplate::parse(t).expect("bundled template parses");
                (t.name.clone(), t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Defaults, overridden by every `*.txt` template found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, GatewayError> {
        let mut set = Self::defaults();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            if path.extension().is_some_and(|e| e == "txt") {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
                if let Ok(t) = PromptTemplate::parse(&text) {
                    set.templates.insert(t.name.clone(), t);
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, GatewayError> {
        self.templates
            .get(name)
            .ok_or_else(|| GatewayError::UnknownTemplate(name.to_string()))
    }

    pub fn insert(&mut self, t: PromptTemplate) {
        self.templates.insert(t.name.clone(), t);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

/// What a backend receives for one transport attempt.
pub struct Request<'a> {
    pub template: &'a PromptTemplate,
    pub prompt: &'a str,
    pub bindings: &'a Bindings,
    /// 0 for the first transport attempt of this call.
    pub transport_attempt: u32,
}

pub trait Backend: Send + Sync {
    fn send(&self, req: &Request<'_>) -> Result<String, TransportError>;
}

/// Counting semaphore that also records the peak number of holders.
struct InFlight {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        InFlight {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut cur = self.current.lock().expect("in-flight lock");
        while *cur >= self.max {
            cur = self.freed.wait(cur).expect("in-flight lock");
        }
        *cur += 1;
        self.peak.fetch_max(*cur, Ordering::SeqCst);
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut cur = self.0.current.lock().expect("in-flight lock");
        *cur -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GatewayStats {
    pub calls: u64,
    pub transport_attempts: u64,
    pub retries: u64,
    pub peak_in_flight: usize,
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    templates: TemplateSet,
    policy: RetryPolicy,
    in_flight: InFlight,
    calls: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("policy", &self.policy)
            .field("max_in_flight", &self.in_flight.max)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(
        backend: Box<dyn Backend>,
        templates: TemplateSet,
        max_in_flight: usize,
        policy: RetryPolicy,
    ) -> Self {
        Gateway {
            backend,
            templates,
            policy,
            in_flight: InFlight::new(max_in_flight),
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    /// Builds the remote backend described by `cfg`. The mock backend needs
    /// fixture data and is constructed through [`mock::MockBackend`].
    pub fn remote(cfg: &GatewayConfig, templates: TemplateSet) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend = remote::RemoteBackend::from_config(cfg)?;
        Ok(Self::new(
            Box::new(backend),
            templates,
            cfg.max_in_flight,
            cfg.retry_policy(),
        ))
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            calls: self.calls.load(Ordering::SeqCst),
            transport_attempts: self.attempts.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            peak_in_flight: self.in_flight.peak.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, template: &str, bindings: &Bindings) -> Result<String, GatewayError> {
        let t = self.templates.get(template)?;
        self.complete_with(t, bindings)
    }

    pub fn complete_with(
        &self,
        template: &PromptTemplate,
        bindings: &Bindings,
    ) -> Result<String, GatewayError> {
        let prompt = template.render(bindings)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _slot = self.in_flight.acquire();
                self.attempts.fetch_add(1, Ordering::SeqCst);
                self.backend.send(&Request {
                    template,
                    prompt: &prompt,
                    bindings,
                    transport_attempt: attempt,
                })
            };
            let err = match outcome {
                Ok(text) => return Ok(text),
                Err(TransportError::Fatal(message)) => {
                    return Err(GatewayError::Fatal {
                        template: template.name.clone(),
                        message,
                    })
                }
                Err(e) => e,
            };
            if attempt >= self.policy.max_retries {
                return Err(match err {
                    TransportError::RateLimited(_) => GatewayError::RateLimited {
                        template: template.name.clone(),
                        attempts: attempt + 1,
                    },
                    TransportError::Transient(message) | TransportError::Fatal(message) => {
                        GatewayError::Exhausted {
                            template: template.name.clone(),
                            attempts: attempt + 1,
                            message,
                        }
                    }
                });
            }
            tracing::debug!(template = %template.name, attempt, error = ?err, "retrying");
            std::thread::sleep(self.policy.delay(attempt));
            self.retries.fetch_add(1, Ordering::SeqCst);
            attempt += 1;
        }
    }
}

/// Verdict of a visual entailment judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Entailment {
    Entailed,
    NotEntailed,
}

/// Anything that can judge whether a claim is visually entailed.
pub trait EntailmentJudge: Sync {
    fn name(&self) -> &str;
    fn judge(
        &self,
        image_id: &str,
        claim: &str,
        components: &Components,
    ) -> Result<Entailment, GatewayError>;
}

/// An entailment judge backed by a gateway model.
pub struct GatewayJudge<'a> {
    pub gateway: &'a Gateway,
    pub model: String,
}

impl EntailmentJudge for GatewayJudge<'_> {
    fn name(&self) -> &str {
        &self.model
    }

    fn judge(
        &self,
        image_id: &str,
        claim: &str,
        components: &Components,
    ) -> Result<Entailment, GatewayError> {
        judge_entailment(self.gateway, &self.model, image_id, claim, components)
    }
}

pub fn judge_entailment(
    gateway: &Gateway,
    model: &str,
    image_id: &str,
    claim: &str,
    components: &Components,
) -> Result<Entailment, GatewayError> {
    if claim.trim().is_empty() {
        return Err(GatewayError::BadResponse {
            template: "entail".into(),
            message: "empty claim".into(),
        });
    }
    let b = bindings([
        ("image_id", image_id.to_string()),
        ("model", model.to_string()),
        ("claim", claim.to_string()),
        ("components", encode_components(components)),
    ]);
    let reply = gateway.complete("entail", &b)?;
    match reply.trim().to_ascii_lowercase().as_str() {
        "entailed" => Ok(Entailment::Entailed),
        "not-entailed" | "not entailed" => Ok(Entailment::NotEntailed),
        other => Err(GatewayError::BadResponse {
            template: "entail".into(),
            message: format!("expected entailed|not-entailed, got `{other}`"),
        }),
    }
}

pub fn bindings<const N: usize>(pairs: [(&str, String); N]) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `role=value` lines, the wire form of a component tuple inside prompts.
pub fn encode_components(c: &Components) -> String {
    c.parts()
        .into_iter()
        .map(|(s, r)| format!("{r}={s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn decode_components(text: &str) -> Vec<(String, Role)> {
    text.lines()
        .filter_map(|l| {
            let (r, s) = l.split_once('=')?;
            Some((s.trim().to_string(), r.trim().parse().ok()?))
        })
        .collect()
}
