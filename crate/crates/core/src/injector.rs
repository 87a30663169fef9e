//! Injection of hallucinated answers into source texts.
//!
//! Each entry goes through locate, rewrite and verify, with at most
//! [`MAX_ATTEMPTS`] rewrites before the entry is skipped. Offsets in public
//! types are char offsets.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::forge::HqaEntry;
use crate::gateway::{encode_components, Bindings, Gateway, GatewayError};
use crate::taxonomy::{HType, Pattern, Role};
use crate::text::{
    byte_to_char, char_len, char_slice, char_to_byte, clause_around, contains_word, count_occurrences,
    find_words, overlaps, CLAUSE_BREAKS,
};

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("cannot inject into empty text")]
    EmptyText,
    #[error("injection point {0:?} is not valid for the text")]
    InvalidPoint(Range<usize>),
    #[error("malformed rewrite: {0}")]
    MalformedRewrite(String),
    #[error("{wanted} entries requested but only {available} supplied")]
    InsufficientEntries { wanted: usize, available: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    ReplaceAnswer,
    AugmentPhrase,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionPoint {
    pub mode: InjectionMode,
    /// Char range; empty for `Insert`.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionResult {
    pub modified_text: String,
    pub phrase: String,
    pub components: Vec<(String, Role)>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseAnnotation {
    pub entry_id: String,
    pub htype: HType,
    pub pattern: Pattern,
    pub hallucinated_answer: String,
    pub phrase: String,
    pub components: Vec<(String, Role)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseAnnotations {
    pub entries: Vec<CoarseAnnotation>,
}

impl CoarseAnnotations {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Byte ranges of the recorded phrases in `text`.
    fn protected(&self, text: &str) -> Vec<Range<usize>> {
        self.entries
            .iter()
            .filter_map(|a| text.find(&a.phrase).map(|i| i..i + a.phrase.len()))
            .collect()
    }

    /// Every phrase occurs exactly once and contains its components.
    pub fn holds_over(&self, text: &str) -> bool {
        self.entries.iter().all(|a| {
            count_occurrences(text, &a.phrase) == 1 && a.components.iter().all(|(s, _)| a.phrase.contains(s.as_str()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyFailure {
    PriorPhraseLost,
    PhraseNotUnique,
    MissingComponent,
    ExtraHallucination,
    AnswerMismatch,
}

impl fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(VerifyFailure),
}

fn template(kind: &str, htype: HType) -> String {
    format!("{kind}-{}", htype.short())
}

fn entry_bindings(text: &str, entry: &HqaEntry) -> Bindings {
    let mut b = Bindings::new();
    b.insert("text".into(), text.to_string());
    b.insert("question".into(), entry.question.clone());
    b.insert("htype".into(), entry.htype.as_str().to_string());
    b.insert("answer".into(), entry.hallucinated_answer.clone());
    b.insert("components".into(), encode_components(&entry.components));
    for (s, r) in entry.components.parts() {
        b.insert(r.as_str().to_string(), s.to_string());
    }
    b
}

/// Moves a char offset forward to the end of its sentence so that inserted
/// text never splits a clause.
fn snap_to_clause_end(text: &str, ch: usize) -> usize {
    let byte = char_to_byte(text, ch.min(char_len(text))).unwrap_or(text.len());
    if byte == 0 || text[..byte].trim_end().ends_with(CLAUSE_BREAKS) {
        return byte_to_char(text, byte);
    }
    let end = text[byte..].find(CLAUSE_BREAKS).map_or(text.len(), |i| byte + i + 1);
    byte_to_char(text, end)
}

/// Chooses where to inject: over an occurrence of the truthful answer, after
/// the clause mentioning a component, or at a point the model suggests.
/// Occurrences inside phrases injected earlier are skipped.
pub fn find_injection_point(
    text: &str,
    entry: &HqaEntry,
    prior: &CoarseAnnotations,
    llm: &Gateway,
) -> Result<InjectionPoint, InjectError> {
    if text.trim().is_empty() {
        return Err(InjectError::EmptyText);
    }
    let protected = prior.protected(text);
    let free = |r: &Range<usize>| !protected.iter().any(|p| overlaps(p, r));
    let to_chars = |r: Range<usize>| byte_to_char(text, r.start)..byte_to_char(text, r.end);

    if let Some(r) = find_words(text, &entry.truthful_answer).into_iter().find(|r| free(r)) {
        return Ok(InjectionPoint {
            mode: InjectionMode::ReplaceAnswer,
            span: to_chars(r),
        });
    }
    for (s, _) in entry.components.parts() {
        if let Some(r) = find_words(text, s).into_iter().find(|r| free(r)) {
            return Ok(InjectionPoint {
                mode: InjectionMode::AugmentPhrase,
                span: to_chars(clause_around(text, r.start)),
            });
        }
    }
    let at = if entry.htype == HType::Object {
        char_len(text)
    } else {
        let name = template("find-point", entry.htype);
        let mut b = entry_bindings(text, entry);
        b.insert("what".into(), format!("the {}", entry.htype.as_str().to_lowercase()));
        let reply = llm.complete(&name, &b)?;
        let n: usize = reply.trim().parse().map_err(|_| GatewayError::BadResponse {
            template: name.clone(),
            message: format!("expected a char offset, got `{}`", reply.trim()),
        })?;
        snap_to_clause_end(text, n)
    };
    Ok(InjectionPoint {
        mode: InjectionMode::Insert,
        span: at..at,
    })
}

/// Modified text, phrase and components of a rewrite reply.
type Rewrite = (String, String, Vec<(String, Role)>);

fn parse_rewrite(reply: &str) -> Result<Rewrite, InjectError> {
    let bad = |m: &str| InjectError::MalformedRewrite(m.to_string());
    let json = match (reply.find('{'), reply.rfind('}')) {
        (Some(a), Some(b)) if a < b => &reply[a..=b],
        _ => return Err(bad("reply holds no JSON object")),
    };
    let v: Value = serde_json::from_str(json).map_err(|e| bad(&e.to_string()))?;
    let field = |k: &str| {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing `{k}`")))
    };
    let mut components = Vec::new();
    for c in v.get("components").and_then(Value::as_array).into_iter().flatten() {
        let pair = c
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| bad("components must be [text, role] pairs"))?;
        let (Some(s), Some(r)) = (pair[0].as_str(), pair[1].as_str()) else {
            return Err(bad("components must be [text, role] pairs"));
        };
        components.push((s.to_string(), r.parse::<Role>().map_err(|e| bad(&e))?));
    }
    Ok((field("modified_text")?, field("phrase")?, components))
}

/// Applies one rewrite. `attempt` is 1-based and forwarded to the model.
pub fn inject(
    text: &str,
    entry: &HqaEntry,
    point: &InjectionPoint,
    attempt: u32,
    llm: &Gateway,
) -> Result<InjectionResult, InjectError> {
    let n = char_len(text);
    if point.span.start > point.span.end || point.span.end > n {
        return Err(InjectError::InvalidPoint(point.span.clone()));
    }
    let own_components = || {
        entry
            .components
            .parts()
            .into_iter()
            .map(|(s, r)| (s.to_string(), r))
            .collect::<Vec<_>>()
    };
    if point.mode == InjectionMode::ReplaceAnswer {
        if char_slice(text, point.span.clone()) != Some(entry.truthful_answer.as_str()) {
            return Err(InjectError::InvalidPoint(point.span.clone()));
        }
        let a = char_to_byte(text, point.span.start).unwrap_or(0);
        let b = char_to_byte(text, point.span.end).unwrap_or(text.len());
        let modified = format!("{}{}{}", &text[..a], entry.hallucinated_answer, &text[b..]);
        let phrase = clause_around(&modified, a);
        return Ok(InjectionResult {
            phrase: modified[phrase].to_string(),
            modified_text: modified,
            components: own_components(),
            attempts: attempt,
        });
    }
    let mut b = entry_bindings(text, entry);
    b.insert(
        "mode".into(),
        if point.mode == InjectionMode::AugmentPhrase { "augment" } else { "insert" }.into(),
    );
    b.insert("start".into(), point.span.start.to_string());
    b.insert("end".into(), point.span.end.to_string());
    b.insert("attempt".into(), attempt.to_string());
    let reply = llm.complete(&template("inject", entry.htype), &b)?;
    let (modified_text, phrase, mut components) = parse_rewrite(&reply)?;
    if !modified_text.contains(&entry.hallucinated_answer) {
        return Err(InjectError::MalformedRewrite(format!(
            "rewrite lacks the hallucinated answer `{}`",
            entry.hallucinated_answer
        )));
    }
    if components.is_empty() {
        components = own_components();
    }
    Ok(InjectionResult {
        modified_text,
        phrase: phrase.trim().to_string(),
        components,
        attempts: attempt,
    })
}

/// Runs the five checks in order and reports the first failure.
pub fn verify_injection(
    before: &str,
    result: &InjectionResult,
    entry: &HqaEntry,
    prior: &CoarseAnnotations,
    llm: &Gateway,
) -> Result<Verdict, InjectError> {
    use VerifyFailure::*;
    let after = &result.modified_text;
    let phrase = result.phrase.as_str();
    if prior.entries.iter().any(|a| !after.contains(a.phrase.as_str())) {
        return Ok(Verdict::Fail(PriorPhraseLost));
    }
    if phrase.is_empty()
        || count_occurrences(after, phrase) != 1
        || prior.entries.iter().any(|a| count_occurrences(after, &a.phrase) != 1)
    {
        return Ok(Verdict::Fail(PhraseNotUnique));
    }
    let own = entry.components.parts();
    if own.iter().any(|(s, _)| !phrase.contains(s))
        || result.components.iter().any(|(s, _)| !phrase.contains(s.as_str()))
    {
        return Ok(Verdict::Fail(MissingComponent));
    }
    let mut b = entry_bindings(before, entry);
    b.insert("before".into(), before.to_string());
    b.insert("after".into(), after.clone());
    b.insert("phrase".into(), phrase.to_string());
    let reply = llm.complete(&template("verify", entry.htype), &b)?;
    if !reply.trim().eq_ignore_ascii_case("pass") {
        return Ok(Verdict::Fail(ExtraHallucination));
    }
    let role = own
        .iter()
        .find(|(s, _)| *s == entry.hallucinated_answer)
        .map(|(_, r)| *r);
    let stated = role.and_then(|role| result.components.iter().find(|(_, r)| *r == role));
    if !contains_word(phrase, &entry.hallucinated_answer)
        || stated.is_none_or(|(s, _)| *s != entry.hallucinated_answer)
    {
        return Ok(Verdict::Fail(AnswerMismatch));
    }
    Ok(Verdict::Pass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Injected,
    Skipped,
}

/// One line of `injection_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionLogRecord {
    pub entry_id: String,
    pub attempts: u32,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionRun {
    pub text: String,
    pub annotations: CoarseAnnotations,
    pub skipped: Vec<InjectionLogRecord>,
    pub log: Vec<InjectionLogRecord>,
}

/// Injects the first `n` entries into `paragraph` one after another.
pub fn run_hqa_injection(
    paragraph: &str,
    n: usize,
    entries: &[HqaEntry],
    llm: &Gateway,
) -> Result<InjectionRun, InjectError> {
    if entries.len() < n {
        return Err(InjectError::InsufficientEntries {
            wanted: n,
            available: entries.len(),
        });
    }
    let mut text = paragraph.to_string();
    let mut annotations = CoarseAnnotations::default();
    let mut log = Vec::with_capacity(n);
    for entry in &entries[..n] {
        let point = match find_injection_point(&text, entry, &annotations, llm) {
            Ok(p) => p,
            Err(InjectError::Gateway(GatewayError::BadResponse { message, .. })) => {
                log.push(skip(entry, 0, message));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut last_reason = String::new();
        let mut accepted = None;
        for attempt in 1..=MAX_ATTEMPTS {
            let result = match inject(&text, entry, &point, attempt, llm) {
                Ok(r) => r,
                Err(e @ (InjectError::MalformedRewrite(_) | InjectError::Gateway(GatewayError::BadResponse { .. }))) => {
                    last_reason = e.to_string();
                    continue;
                }
                Err(e) => return Err(e),
            };
            match verify_injection(&text, &result, entry, &annotations, llm)? {
                Verdict::Pass => {
                    accepted = Some(result);
                    break;
                }
                Verdict::Fail(why) => last_reason = why.to_string(),
            }
        }
        match accepted {
            Some(r) => {
                log.push(InjectionLogRecord {
                    entry_id: entry.id.clone(),
                    attempts: r.attempts,
                    outcome: Outcome::Injected,
                    reason: None,
                });
                annotations.entries.push(CoarseAnnotation {
                    entry_id: entry.id.clone(),
                    htype: entry.htype,
                    pattern: entry.pattern,
                    hallucinated_answer: entry.hallucinated_answer.clone(),
                    phrase: r.phrase,
                    components: r.components,
                });
                text = r.modified_text;
            }
            None => log.push(skip(entry, MAX_ATTEMPTS, last_reason)),
        }
    }
    let skipped = log.iter().filter(|r| r.outcome == Outcome::Skipped).cloned().collect();
    Ok(InjectionRun {
        text,
        annotations,
        skipped,
        log,
    })
}

fn skip(entry: &HqaEntry, attempts: u32, reason: String) -> InjectionLogRecord {
    tracing::debug!(entry = %entry.id, %reason, "entry skipped");
    InjectionLogRecord {
        entry_id: entry.id.clone(),
        attempts,
        outcome: Outcome::Skipped,
        reason: Some(reason),
    }
}
