//! Deterministic offline backend.
//!
//! Responses are a pure function of (template name, bindings, seed, fixture
//! world). Tests can queue scripted steps per template to simulate transport
//! failures or bad rewrites; once a script is drained the default handler
//! answers again.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::json;

use super::{decode_components, Backend, Bindings, Request, TransportError};
use crate::scene::SceneGraph;
use crate::taxonomy::{Components, HType, Role};
use crate::text::{char_len, char_to_byte, CLAUSE_BREAKS};

/// One rewrite sentence per hallucination type, with `{answer}` and component
/// placeholders (`{obj}`, `{attr}`, `{rel}`, `{obj1}`, `{obj2}`, `{sce}`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteTemplates(pub BTreeMap<HType, String>);

pub const DEFAULT_REWRITES: &str = include_str!("../../templates/mock_injection.txt");

impl RewriteTemplates {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| format!("expected `type: template`, got `{line}`"))?;
            map.insert(k.parse::<HType>()?, v.trim().to_string());
        }
        for t in HType::ALL {
            if !map.contains_key(&t) {
                return Err(format!("no rewrite template for {t}"));
            }
        }
        Ok(RewriteTemplates(map))
    }

    pub fn fill(&self, htype: HType, bindings: &Bindings) -> String {
        let mut out = self.0[&htype].clone();
        for key in ["answer", "obj", "attr", "rel", "obj1", "obj2", "sce"] {
            if let Some(v) = bindings.get(key) {
                out = out.replace(&format!("{{{key}}}"), v);
            }
        }
        out
    }
}

impl Default for RewriteTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_REWRITES).expect("bundled rewrite templates parse")
    }
}

/// How the mock answers binary probe questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbePolicy {
    /// Answer from the fixture scene graph.
    #[default]
    Oracle,
    AlwaysYes,
    AlwaysNo,
}

impl std::str::FromStr for ProbePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(ProbePolicy::Oracle),
            "always-yes" | "yes" => Ok(ProbePolicy::AlwaysYes),
            "always-no" | "no" => Ok(ProbePolicy::AlwaysNo),
            other => Err(format!("unknown probe policy `{other}`")),
        }
    }
}

/// Fixture data the default handlers consult.
#[derive(Debug, Clone, Default)]
pub struct MockWorld {
    pub graphs: HashMap<String, SceneGraph>,
    pub rewrites: RewriteTemplates,
    pub probe_policy: ProbePolicy,
}

impl MockWorld {
    pub fn with_graphs<I: IntoIterator<Item = SceneGraph>>(graphs: I) -> Self {
        MockWorld {
            graphs: graphs.into_iter().map(|g| (g.image_id.clone(), g)).collect(),
            ..Default::default()
        }
    }
}

pub struct MockCall<'a> {
    pub template: &'a str,
    pub bindings: &'a Bindings,
    pub seed: u64,
    pub world: &'a MockWorld,
    pub transport_attempt: u32,
}

pub type Handler = Arc<dyn Fn(&MockCall<'_>) -> Result<String, TransportError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptStep {
    Reply(String),
    Transient,
    RateLimited,
    Fatal,
    /// Let the default handler answer this call.
    Default,
}

/// Queued responses for calls to a template, optionally restricted to calls
/// whose bindings match every `(key, value)` pair.
#[derive(Debug, Clone)]
pub struct Script {
    template: String,
    when: Vec<(String, String)>,
    steps: VecDeque<ScriptStep>,
}

impl Script {
    /// `template` is an exact name or a prefix ending in `*` (`inject-*`).
    pub fn new(template: &str) -> Self {
        Script {
            template: template.to_string(),
            when: Vec::new(),
            steps: VecDeque::new(),
        }
    }

    pub fn when(mut self, key: &str, value: &str) -> Self {
        self.when.push((key.to_string(), value.to_string()));
        self
    }

    pub fn step(mut self, step: ScriptStep) -> Self {
        self.steps.push_back(step);
        self
    }

    pub fn reply(self, text: &str) -> Self {
        self.step(ScriptStep::Reply(text.to_string()))
    }

    fn matches(&self, template: &str, bindings: &Bindings) -> bool {
        let name_ok = match self.template.strip_suffix('*') {
            Some(prefix) => template.starts_with(prefix),
            None => template == self.template,
        };
        name_ok
            && !self.steps.is_empty()
            && self
                .when
                .iter()
                .all(|(k, v)| bindings.get(k).is_some_and(|b| b == v))
    }
}

/// A recorded call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockRecord {
    pub template: String,
    pub bindings: Bindings,
    pub transport_attempt: u32,
}

pub struct MockBackend {
    seed: u64,
    world: MockWorld,
    handlers: HashMap<String, Handler>,
    scripts: Mutex<Vec<Script>>,
    transcript: Arc<Mutex<Vec<MockRecord>>>,
    delay: Duration,
}

impl MockBackend {
    pub fn new(seed: u64, world: MockWorld) -> Self {
        MockBackend {
            seed,
            world,
            handlers: HashMap::new(),
            scripts: Mutex::new(Vec::new()),
            transcript: Arc::new(Mutex::new(Vec::new())),
            delay: Duration::ZERO,
        }
    }

    /// Replaces the default handler for one exact template name.
    pub fn with_handler(mut self, template: &str, handler: Handler) -> Self {
        self.handlers.insert(template.to_string(), handler);
        self
    }

    pub fn with_script(self, script: Script) -> Self {
        self.scripts.lock().expect("scripts").push(script);
        self
    }

    /// Sleeps this long inside every call; used to observe concurrency.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Shared handle on the call transcript, usable after the backend has
    /// been moved into a gateway.
    pub fn transcript(&self) -> Arc<Mutex<Vec<MockRecord>>> {
        Arc::clone(&self.transcript)
    }

    fn scripted(&self, template: &str, bindings: &Bindings) -> Option<ScriptStep> {
        let mut scripts = self.scripts.lock().expect("scripts");
        scripts
            .iter_mut()
            .find(|s| s.matches(template, bindings))
            .and_then(|s| s.steps.pop_front())
    }
}

impl Backend for MockBackend {
    fn send(&self, req: &Request<'_>) -> Result<String, TransportError> {
        let name = req.template.name.as_str();
        self.transcript.lock().expect("transcript").push(MockRecord {
            template: name.to_string(),
            bindings: req.bindings.clone(),
            transport_attempt: req.transport_attempt,
        });
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        match self.scripted(name, req.bindings) {
            Some(ScriptStep::Reply(text)) => return Ok(text),
            Some(ScriptStep::Transient) => {
                return Err(TransportError::Transient("scripted transient failure".into()))
            }
            Some(ScriptStep::RateLimited) => {
                return Err(TransportError::RateLimited("scripted rate limit".into()))
            }
            Some(ScriptStep::Fatal) => {
                return Err(TransportError::Fatal("scripted fatal failure".into()))
            }
            Some(ScriptStep::Default) | None => {}
        }
        let call = MockCall {
            template: name,
            bindings: req.bindings,
            seed: self.seed,
            world: &self.world,
            transport_attempt: req.transport_attempt,
        };
        if let Some(h) = self.handlers.get(name) {
            return h(&call);
        }
        default_handler(&call)
    }
}

fn get<'a>(call: &'a MockCall<'_>, key: &str) -> Result<&'a str, TransportError> {
    call.bindings
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| TransportError::Fatal(format!("mock `{}` needs binding `{key}`", call.template)))
}

fn default_handler(call: &MockCall<'_>) -> Result<String, TransportError> {
    let t = call.template;
    if t.starts_with("craft-") {
        craft(call)
    } else if t.starts_with("find-point-") {
        Ok(char_len(get(call, "text")?).to_string())
    } else if t.starts_with("inject-") {
        inject(call)
    } else if t == "verify-annotation" {
        verify_annotation(call)
    } else if t.starts_with("verify-") {
        verify_diff(call)
    } else if t == "entail" {
        entail(call)
    } else if t == "probe" {
        probe(call)
    } else {
        Err(TransportError::Fatal(format!("mock has no handler for `{t}`")))
    }
}

/// Parses `- answer (score 0.900000)` lines.
pub fn parse_candidate_lines(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim().strip_prefix("- ")?;
            let (answer, score) = l.rsplit_once(" (score ")?;
            let score = score.strip_suffix(')')?.parse().ok()?;
            Some((answer.to_string(), score))
        })
        .collect()
}

fn craft(call: &MockCall<'_>) -> Result<String, TransportError> {
    let cands = parse_candidate_lines(get(call, "candidates")?);
    cands
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(a, _)| a)
        .ok_or_else(|| TransportError::Fatal("no candidates to choose from".into()))
}

fn inject(call: &MockCall<'_>) -> Result<String, TransportError> {
    let text = get(call, "text")?;
    let htype: HType = get(call, "htype")?.parse().map_err(TransportError::Fatal)?;
    let mode = get(call, "mode")?;
    let start: usize = get(call, "start")?.parse().unwrap_or(0);
    let end: usize = get(call, "end")?.parse().unwrap_or(start);
    let sentence = call.world.rewrites.fill(htype, call.bindings);
    let phrase = sentence.trim_end_matches(CLAUSE_BREAKS).trim().to_string();

    let anchor = char_to_byte(text, if mode == "augment" { end } else { start }).unwrap_or(text.len());
    let pos = if mode == "augment" {
        text[anchor..]
            .find(CLAUSE_BREAKS)
            .map_or(text.len(), |i| anchor + i + 1)
    } else {
        anchor
    };
    let (before, after) = text.split_at(pos);
    let mut insert = String::new();
    if !before.trim().is_empty() {
        if before
            .trim_end()
            .chars()
            .last()
            .is_some_and(|c| !CLAUSE_BREAKS.contains(&c))
        {
            insert.push('.');
        }
        if !before.ends_with(char::is_whitespace) || insert == "." {
            insert.push(' ');
        }
    }
    insert.push_str(&sentence);
    if !after.is_empty() && !after.starts_with(char::is_whitespace) {
        insert.push(' ');
    }
    let modified = format!("{before}{insert}{after}");
    let components: Vec<_> = decode_components(get(call, "components")?)
        .into_iter()
        .map(|(s, r)| json!([s, r]))
        .collect();
    Ok(json!({
        "modified_text": modified,
        "phrase": phrase,
        "components": components,
    })
    .to_string())
}

fn is_filler(c: char) -> bool {
    c.is_whitespace() || c.is_ascii_punctuation()
}

/// Passes iff every changed character lies inside the phrase, widened over
/// adjacent whitespace and punctuation.
pub fn diff_confined_to_phrase(before: &str, after: &str, phrase: &str) -> bool {
    let b: Vec<char> = before.chars().collect();
    let a: Vec<char> = after.chars().collect();
    if a == b {
        return false;
    }
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    let changed = prefix..a.len() - suffix;
    let Some(byte) = after.find(phrase) else {
        return false;
    };
    let mut lo = after[..byte].chars().count();
    let mut hi = lo + phrase.chars().count();
    while lo > 0 && is_filler(a[lo - 1]) {
        lo -= 1;
    }
    while hi < a.len() && is_filler(a[hi]) {
        hi += 1;
    }
    lo <= changed.start && changed.end <= hi
}

fn verify_diff(call: &MockCall<'_>) -> Result<String, TransportError> {
    let ok = diff_confined_to_phrase(get(call, "before")?, get(call, "after")?, get(call, "phrase")?);
    Ok(if ok {
        "pass".into()
    } else {
        "fail: edits outside the injected phrase".into()
    })
}

fn verify_annotation(call: &MockCall<'_>) -> Result<String, TransportError> {
    let htype: HType = get(call, "htype")?.parse().map_err(TransportError::Fatal)?;
    let answer = get(call, "answer")?;
    let parts = decode_components(get(call, "components")?);
    let expected: &[Role] = match htype {
        HType::Object => &[Role::Obj],
        HType::Attribute => &[Role::Attr, Role::Obj],
        HType::Relationship => &[Role::Obj1, Role::Rel, Role::Obj2],
        HType::Scene => &[Role::Sce],
    };
    let roles: Vec<Role> = parts.iter().map(|(_, r)| *r).collect();
    let valid = roles == expected
        && parts.iter().all(|(s, _)| !s.is_empty())
        && !answer.is_empty()
        && parts.iter().any(|(s, _)| s == answer);
    Ok(if valid { "valid" } else { "invalid" }.into())
}

fn components_hold(g: &SceneGraph, parts: &[(String, Role)]) -> bool {
    let find = |role: Role| parts.iter().find(|(_, r)| *r == role).map(|(s, _)| s.clone());
    let c = match (find(Role::Attr), find(Role::Obj), find(Role::Obj1), find(Role::Rel), find(Role::Obj2), find(Role::Sce)) {
        (Some(attr), Some(obj), ..) => Components::Attribute { attr, obj },
        (_, _, Some(obj1), Some(rel), Some(obj2), _) => Components::Relationship { obj1, rel, obj2 },
        (.., Some(sce)) => Components::Scene { sce },
        (None, Some(obj), ..) => Components::Object { obj },
        _ => return false,
    };
    g.supports(&c)
}

fn entail(call: &MockCall<'_>) -> Result<String, TransportError> {
    let parts = decode_components(get(call, "components")?);
    let entailed = call
        .world
        .graphs
        .get(get(call, "image_id")?)
        .is_some_and(|g| components_hold(g, &parts));
    Ok(if entailed { "entailed" } else { "not-entailed" }.into())
}

fn probe(call: &MockCall<'_>) -> Result<String, TransportError> {
    let yes = match call.world.probe_policy {
        ProbePolicy::AlwaysYes => true,
        ProbePolicy::AlwaysNo => false,
        ProbePolicy::Oracle => {
            let g = call.world.graphs.get(get(call, "image_id")?);
            let b = call.bindings;
            let v = |k: &str| b.get(k).cloned().unwrap_or_default();
            let parts: Vec<(String, Role)> = match get(call, "kind")? {
                "attribute" => vec![(v("attr"), Role::Attr), (v("obj"), Role::Obj)],
                "relationship" => vec![
                    (v("subj"), Role::Obj1),
                    (v("rel"), Role::Rel),
                    (v("obj"), Role::Obj2),
                ],
                _ => vec![(v("sce"), Role::Sce)],
            };
            g.is_some_and(|g| components_hold(g, &parts))
        }
    };
    Ok(if yes { "yes" } else { "no" }.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{bindings, Gateway, GatewayError, RetryPolicy, TemplateSet};
    use crate::scene::parse_scene_graph;

    fn gateway(backend: MockBackend, retries: u32) -> Gateway {
        Gateway::new(
            Box::new(backend),
            TemplateSet::defaults(),
            4,
            RetryPolicy {
                max_retries: retries,
                backoff_base: Duration::ZERO,
            },
        )
    }

    fn craft_bindings() -> Bindings {
        bindings([
            ("question", "What color is the lemon?".into()),
            ("truth", "yellow".into()),
            (
                "candidates",
                "- purple (score 0.900000)\n- green (score 0.900000)\n- red (score 0.100000)".into(),
            ),
        ])
    }

    #[test]
    fn crafting_echoes_best_candidate() {
        let gw = gateway(MockBackend::new(0, MockWorld::default()), 0);
        assert_eq!(gw.complete("craft-attr", &craft_bindings()).unwrap(), "green");
    }

    #[test]
    fn same_inputs_same_output() {
        let a = gateway(MockBackend::new(3, MockWorld::default()), 0);
        let b = gateway(MockBackend::new(3, MockWorld::default()), 0);
        let mut bind = bindings([
            ("text", "A dog sleeps.".into()),
            ("htype", "object".into()),
            ("mode", "insert".into()),
            ("start", "13".into()),
            ("end", "13".into()),
            ("answer", "cat".into()),
            ("components", "obj=cat".into()),
            ("attempt", "1".into()),
        ]);
        bind.insert("obj".into(), "cat".into());
        let x = a.complete("inject-obj", &bind).unwrap();
        let y = b.complete("inject-obj", &bind).unwrap();
        assert_eq!(x, y);
        let v: serde_json::Value = serde_json::from_str(&x).unwrap();
        assert_eq!(v["modified_text"], "A dog sleeps. There is a cat.");
        assert_eq!(v["phrase"], "There is a cat");
    }

    #[test]
    fn scripted_transient_then_success_counts_one_retry() {
        let backend = MockBackend::new(0, MockWorld::default())
            .with_script(Script::new("craft-attr").step(ScriptStep::Transient).step(ScriptStep::Default));
        let gw = gateway(backend, 3);
        assert_eq!(gw.complete("craft-attr", &craft_bindings()).unwrap(), "green");
        let stats = gw.stats();
        assert_eq!(stats.retries, 1);
        assert_eq!(stats.transport_attempts, 2);
        assert_eq!(stats.calls, 1);
    }

    #[test]
    fn retries_exhaust_and_rate_limits_surface() {
        let backend = MockBackend::new(0, MockWorld::default()).with_script(
            Script::new("craft-*")
                .step(ScriptStep::Transient)
                .step(ScriptStep::Transient)
                .step(ScriptStep::RateLimited)
                .step(ScriptStep::RateLimited),
        );
        let gw = gateway(backend, 1);
        assert!(matches!(
            gw.complete("craft-attr", &craft_bindings()),
            Err(GatewayError::Exhausted { attempts: 2, .. })
        ));
        assert!(matches!(
            gw.complete("craft-attr", &craft_bindings()),
            Err(GatewayError::RateLimited { attempts: 2, .. })
        ));
    }

    #[test]
    fn content_replies_are_not_retried() {
        let backend = MockBackend::new(0, MockWorld::default())
            .with_script(Script::new("craft-attr").reply("something odd"));
        let gw = gateway(backend, 3);
        assert_eq!(gw.complete("craft-attr", &craft_bindings()).unwrap(), "something odd");
        assert_eq!(gw.stats().retries, 0);
    }

    #[test]
    fn fatal_is_not_retried() {
        let backend =
            MockBackend::new(0, MockWorld::default()).with_script(Script::new("craft-attr").step(ScriptStep::Fatal));
        let gw = gateway(backend, 3);
        assert!(matches!(
            gw.complete("craft-attr", &craft_bindings()),
            Err(GatewayError::Fatal { .. })
        ));
        assert_eq!(gw.stats().transport_attempts, 1);
    }

    #[test]
    fn entailment_follows_the_fixture_graph() {
        let g = parse_scene_graph(
            r#"{"image_id":"7","objects":[{"id":"1","name":"dog","attributes":["brown"]},{"id":"2","name":"sofa"}],"relations":[{"subject":"1","predicate":"on","object":"2"}]}"#,
        )
        .unwrap();
        let gw = gateway(MockBackend::new(0, MockWorld::with_graphs([g])), 0);
        use crate::gateway::{judge_entailment, Entailment};
        use crate::taxonomy::Components;
        let ok = Components::Attribute { attr: "brown".into(), obj: "dog".into() };
        assert_eq!(judge_entailment(&gw, "m", "7", "the dog is brown", &ok).unwrap(), Entailment::Entailed);
        let rel = Components::Relationship { obj1: "dog".into(), rel: "on".into(), obj2: "sofa".into() };
        assert_eq!(judge_entailment(&gw, "m", "7", "dog on sofa", &rel).unwrap(), Entailment::Entailed);
        let absent = Components::Object { obj: "cat".into() };
        assert_eq!(
            judge_entailment(&gw, "m", "7", "there is a cat", &absent).unwrap(),
            Entailment::NotEntailed
        );
    }

    #[test]
    fn in_flight_never_exceeds_cap() {
        let backend = MockBackend::new(0, MockWorld::default()).with_delay(Duration::from_millis(5));
        let gw = Gateway::new(Box::new(backend), TemplateSet::defaults(), 3, RetryPolicy::none());
        let b = craft_bindings();
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| {
                    for _ in 0..3 {
                        gw.complete("craft-attr", &b).unwrap();
                    }
                });
            }
        });
        let stats = gw.stats();
        assert_eq!(stats.calls, 36);
        assert!(stats.peak_in_flight <= 3, "peak {}", stats.peak_in_flight);
        assert!(stats.peak_in_flight >= 2);
    }

    #[test]
    fn diff_check() {
        assert!(diff_confined_to_phrase("The shelf is white.", "The shelf is brown.", "The shelf is brown"));
        assert!(diff_confined_to_phrase("A dog sleeps.", "A dog sleeps. There is a cat.", "There is a cat"));
        assert!(!diff_confined_to_phrase(
            "A dog sleeps.",
            "A red dog sleeps. There is a cat.",
            "There is a cat"
        ));
        assert!(!diff_confined_to_phrase("same", "same", "same"));
    }

    #[test]
    fn rewrite_file_needs_every_type() {
        assert!(RewriteTemplates::parse("object: There is a {answer}.").is_err());
        let r = RewriteTemplates::default();
        let b = bindings([("obj1", "cat".into()), ("rel", "on".into()), ("obj2", "mat".into())]);
        assert_eq!(r.fill(HType::Relationship, &b), "The cat is on the mat.");
    }
}
