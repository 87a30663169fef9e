//! Co-occurrence statistics, hallucination candidates and binary bias probes.
//!
//! Two bias mechanisms drive candidate generation:
//!
//! * concept association: borrow a same-category trait from another object in
//!   the image ([`cab_candidates`]);
//! * statistical priors: answers that are more frequent than the truth given
//!   the question text (language prior) or given the objects in the image
//!   (image prior), or both ([`prior_candidates`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{annotate_components, answer_role, QaRecord, SceneError, SceneGraph};
use crate::taxonomy::{Components, HType, Pattern, Role};
use crate::text::{canonicalize, find_words};

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("the scene-graph corpus is empty")]
    EmptyCorpus,
    #[error("not enough material for the {kind:?}/{prior:?} stratum: wanted {wanted} yes and {wanted} no probes, found {yes} and {no}")]
    InsufficientMaterial {
        kind: ProbeKind,
        prior: PriorSource,
        wanted: usize,
        yes: usize,
        no: usize,
    },
    #[error("{answers} answers for {probes} probes")]
    LengthMismatch { answers: usize, probes: usize },
    #[error("bad probe template file: {0}")]
    Template(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Separator used in composite conditioning keys, e.g. `window | shelf`.
pub const KEY_SEP: &str = " | ";

pub fn pair_key(a: &str, b: &str) -> String {
    format!("{a}{KEY_SEP}{b}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Freq {
    pub count: u64,
    pub prob: f64,
}

/// Conditioning key -> value -> frequency. Probabilities under each key sum
/// to one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CondFreq(pub BTreeMap<String, BTreeMap<String, Freq>>);

type Counts = BTreeMap<String, BTreeMap<String, u64>>;

fn bump(counts: &mut Counts, key: &str, value: &str) {
    *counts
        .entry(key.to_string())
        .or_default()
        .entry(value.to_string())
        .or_default() += 1;
}

impl CondFreq {
    fn from_counts(counts: Counts) -> Self {
        CondFreq(
            counts
                .into_iter()
                .map(|(k, values)| {
                    let total: u64 = values.values().sum();
                    let values = values
                        .into_iter()
                        .map(|(v, count)| {
                            (
                                v,
                                Freq {
                                    count,
                                    prob: count as f64 / total as f64,
                                },
                            )
                        })
                        .collect();
                    (k, values)
                })
                .collect(),
        )
    }

    pub fn get(&self, key: &str, value: &str) -> Option<Freq> {
        self.0.get(key)?.get(value).copied()
    }

    pub fn prob(&self, key: &str, value: &str) -> f64 {
        self.get(key, value).map_or(0.0, |f| f.prob)
    }

    pub fn given<'a>(&'a self, key: &str) -> impl Iterator<Item = (&'a str, Freq)> + 'a {
        self.0
            .get(key)
            .into_iter()
            .flat_map(|m| m.iter().map(|(v, f)| (v.as_str(), *f)))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest deviation of any per-key probability sum from one.
    pub fn normalization_error(&self) -> f64 {
        self.0
            .values()
            .map(|m| (m.values().map(|f| f.prob).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    /// P(attribute | object name), counted per object instance.
    pub attr_given_obj: CondFreq,
    /// Raw counts of `subject | predicate | object` name triples.
    pub rel_triple: BTreeMap<String, u64>,
    /// P(predicate | subject, object).
    pub pred_given_pair: CondFreq,
    /// P(subject | predicate, object).
    pub subj_given_pred_obj: CondFreq,
    /// P(scene label | object name), counted once per image and object name.
    pub scene_given_obj: CondFreq,
    /// P(answer | question template), per question type.
    pub qa_answer_freq: BTreeMap<HType, CondFreq>,
    pub graphs: u64,
    pub questions: u64,
}

/// Question text with bound object names replaced by `<obj>` (and `<subj>`
/// for relationship subjects), so that questions about different objects of
/// the same form share a template.
pub fn question_template(q: &QaRecord, g: Option<&SceneGraph>) -> String {
    let mut text = canonicalize(&q.question);
    let Some(g) = g else { return text };
    let names = [
        (q.referenced.subject.as_ref(), "<subj>"),
        (q.referenced.object.as_ref(), "<obj>"),
    ];
    for (id, slot) in names {
        let Some(name) = id.and_then(|id| g.object(id)).map(|o| o.name.as_str()) else {
            continue;
        };
        let hits = find_words(&text, name);
        if let Some(r) = hits.first() {
            text.replace_range(r.clone(), slot);
        }
    }
    text
}

/// Mines the table in a single pass over graphs and questions.
pub fn build_cooccurrence<'a, G, Q>(corpus: G, questions: Q) -> Result<CooccurrenceTable, MinerError>
where
    G: IntoIterator<Item = &'a SceneGraph>,
    Q: IntoIterator<Item = &'a QaRecord>,
{
    let mut attr = Counts::new();
    let mut triples = BTreeMap::new();
    let mut pred = Counts::new();
    let mut subj = Counts::new();
    let mut scene = Counts::new();
    let mut by_id: HashMap<&str, &SceneGraph> = HashMap::new();
    let mut graphs = 0;
    for g in corpus {
        graphs += 1;
        by_id.insert(g.image_id.as_str(), g);
        for o in &g.objects {
            for a in &o.attributes {
                bump(&mut attr, &o.name, a);
            }
        }
        for (s, p, o) in g.named_relations() {
            *triples.entry(format!("{s}{KEY_SEP}{p}{KEY_SEP}{o}")).or_insert(0u64) += 1;
            bump(&mut pred, &pair_key(s, o), p);
            bump(&mut subj, &pair_key(p, o), s);
        }
        for name in g.object_names() {
            for label in &g.scene_labels {
                bump(&mut scene, name, label);
            }
        }
    }
    if graphs == 0 {
        return Err(MinerError::EmptyCorpus);
    }
    let mut qa: BTreeMap<HType, Counts> = BTreeMap::new();
    let mut questions_seen = 0;
    for q in questions {
        questions_seen += 1;
        let template = question_template(q, by_id.get(q.image_id.as_str()).copied());
        bump(qa.entry(q.qtype).or_default(), &template, &q.answer);
    }
    Ok(CooccurrenceTable {
        attr_given_obj: CondFreq::from_counts(attr),
        rel_triple: triples,
        pred_given_pair: CondFreq::from_counts(pred),
        subj_given_pred_obj: CondFreq::from_counts(subj),
        scene_given_obj: CondFreq::from_counts(scene),
        qa_answer_freq: qa
            .into_iter()
            .map(|(t, c)| (t, CondFreq::from_counts(c)))
            .collect(),
        graphs,
        questions: questions_seen,
    })
}

/// Thresholds for "highly co-occurring".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub min_prob: f64,
    pub min_support: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            min_prob: 0.2,
            min_support: 3,
        }
    }
}

impl MinerConfig {
    pub fn is_high(&self, f: Freq) -> bool {
        f.prob >= self.min_prob && f.count >= self.min_support
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    pub pattern: Pattern,
    pub score: f64,
}

/// Score descending, then answer ascending.
pub fn rank(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.answer.cmp(&b.answer)));
}

/// Attribute categories used to keep concept-association candidates in the
/// same category as the truthful attribute (a colour for a colour question).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeCategories(HashMap<String, String>);

impl Default for AttributeCategories {
    fn default() -> Self {
        let table: &[(&str, &[&str])] = &[
            (
                "color",
                &[
                    "white", "black", "red", "green", "blue", "yellow", "purple", "brown", "gray",
                    "grey", "orange", "pink", "silver", "gold", "beige", "tan", "dark", "light",
                ],
            ),
            (
                "material",
                &[
                    "wood", "wooden", "glass", "metal", "metallic", "plastic", "stone", "brick",
                    "concrete", "leather", "cloth", "paper", "ceramic", "marble", "steel",
                ],
            ),
            (
                "size",
                &["large", "small", "big", "tiny", "tall", "short", "huge", "little", "long"],
            ),
            ("shape", &["round", "square", "rectangular", "circular", "oval"]),
            ("pattern", &["striped", "checkered", "plaid", "dotted", "floral"]),
            (
                "state",
                &["open", "closed", "empty", "full", "wet", "dry", "clean", "dirty", "lit"],
            ),
        ];
        let mut map = HashMap::new();
        for (cat, words) in table {
            for w in *words {
                map.insert((*w).to_string(), (*cat).to_string());
            }
        }
        AttributeCategories(map)
    }
}

impl AttributeCategories {
    pub fn category(&self, attr: &str) -> Option<&str> {
        self.0.get(attr).map(String::as_str)
    }

    /// Same category, or the truth's category is unknown.
    pub fn compatible(&self, truth: &str, other: &str) -> bool {
        match self.category(truth) {
            None => true,
            Some(c) => self.category(other) == Some(c),
        }
    }
}

/// The truthful components, the slot the answer fills and the trait in it.
fn resolve(q: &QaRecord, g: &SceneGraph) -> Result<(Components, Role, String), MinerError> {
    let truth = annotate_components(q, g)?;
    let role = answer_role(q, &truth);
    let trait_ = truth.get(role).unwrap_or(&q.answer).to_string();
    Ok((truth, role, trait_))
}

/// Concept-association candidates: traits of the same category that belong
/// to *other* objects of the same image.
pub fn cab_candidates(
    q: &QaRecord,
    g: &SceneGraph,
    categories: &AttributeCategories,
) -> Result<Vec<Candidate>, MinerError> {
    let (truth, role, trait_) = resolve(q, g)?;
    let excluded = |a: &str| a == trait_ || a == q.answer;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let pool;
    match role {
        Role::Attr => {
            let id = q.referenced.object.as_deref().unwrap_or_default();
            let target = g.object(id).expect("resolved above");
            let others: Vec<_> = g.objects.iter().filter(|o| o.id != id).collect();
            pool = others.len();
            for o in others {
                for a in &o.attributes {
                    if !excluded(a) && !target.has_attribute(a) && categories.compatible(&trait_, a) {
                        *counts.entry(a.clone()).or_default() += 1;
                    }
                }
            }
        }
        Role::Rel => {
            let (s, o) = (
                q.referenced.subject.as_deref().unwrap_or_default(),
                q.referenced.object.as_deref().unwrap_or_default(),
            );
            let (sn, on) = (truth.get(Role::Obj1).unwrap_or_default(), truth.get(Role::Obj2).unwrap_or_default());
            let others: Vec<_> = g
                .relations
                .iter()
                .filter(|r| !(r.subject == s && r.object == o))
                .collect();
            pool = others.len();
            for r in others {
                if !excluded(&r.predicate) && !g.has_named_relation(sn, &r.predicate, on) {
                    *counts.entry(r.predicate.clone()).or_default() += 1;
                }
            }
        }
        Role::Obj1 => {
            let (rel, on) = (truth.get(Role::Rel).unwrap_or_default(), truth.get(Role::Obj2).unwrap_or_default());
            let bound: BTreeSet<&str> = [q.referenced.subject.as_deref(), q.referenced.object.as_deref()]
                .into_iter()
                .flatten()
                .collect();
            let others: Vec<_> = g.objects.iter().filter(|o| !bound.contains(o.id.as_str())).collect();
            pool = others.len();
            for o in others {
                if !excluded(&o.name) && o.name != on && !g.has_named_relation(&o.name, rel, on) {
                    *counts.entry(o.name.clone()).or_default() += 1;
                }
            }
        }
        _ => return Ok(Vec::new()),
    }
    let mut out: Vec<_> = counts
        .into_iter()
        .map(|(answer, n)| Candidate {
            answer,
            pattern: Pattern::Cab,
            score: n as f64 / pool as f64,
        })
        .collect();
    rank(&mut out);
    Ok(out)
}

/// Statistical-prior candidates, at most `k` per prior class.
pub fn prior_candidates(
    q: &QaRecord,
    t: &CooccurrenceTable,
    g: &SceneGraph,
    k: usize,
    cfg: &MinerConfig,
) -> Result<Vec<Candidate>, MinerError> {
    let (truth, role, trait_) = resolve(q, g)?;
    let contradicts = |answer: &str| truth.with(role, answer).is_some_and(|c| !g.supports(&c));
    let eligible = |answer: &str| answer != trait_ && answer != q.answer && contradicts(answer);

    let mut lang: BTreeMap<String, f64> = BTreeMap::new();
    if let Some(dist) = t.qa_answer_freq.get(&q.qtype) {
        let template = question_template(q, Some(g));
        let truth_p = dist.prob(&template, &q.answer);
        for (a, f) in dist.given(&template) {
            if f.prob > truth_p && cfg.is_high(f) && eligible(a) {
                lang.insert(a.to_string(), f.prob);
            }
        }
    }

    let mut image: BTreeMap<String, f64> = BTreeMap::new();
    let mut offer = |a: &str, f: Freq| {
        if cfg.is_high(f) && eligible(a) {
            let e = image.entry(a.to_string()).or_insert(0.0);
            *e = e.max(f.prob);
        }
    };
    match role {
        Role::Attr => {
            let obj = truth.get(Role::Obj).unwrap_or_default();
            for (a, f) in t.attr_given_obj.given(obj) {
                offer(a, f);
            }
        }
        Role::Rel => {
            let key = pair_key(truth.get(Role::Obj1).unwrap_or_default(), truth.get(Role::Obj2).unwrap_or_default());
            for (p, f) in t.pred_given_pair.given(&key) {
                offer(p, f);
            }
        }
        Role::Obj1 => {
            let key = pair_key(truth.get(Role::Rel).unwrap_or_default(), truth.get(Role::Obj2).unwrap_or_default());
            for (s, f) in t.subj_given_pred_obj.given(&key) {
                offer(s, f);
            }
        }
        Role::Sce => {
            for name in g.object_names() {
                for (s, f) in t.scene_given_obj.given(name) {
                    offer(s, f);
                }
            }
        }
        Role::Obj | Role::Obj2 => {}
    }

    let mut classes: BTreeMap<Pattern, Vec<Candidate>> = BTreeMap::new();
    let answers: BTreeSet<&String> = lang.keys().chain(image.keys()).collect();
    for a in answers {
        let (pattern, score) = match (lang.get(a), image.get(a)) {
            (Some(&l), Some(&i)) => (Pattern::LangImagePrior, l.max(i)),
            (Some(&l), None) => (Pattern::LangPrior, l),
            (None, Some(&i)) => (Pattern::ImagePrior, i),
            (None, None) => unreachable!(),
        };
        classes.entry(pattern).or_default().push(Candidate {
            answer: a.clone(),
            pattern,
            score,
        });
    }
    let mut out = Vec::new();
    for (_, mut cands) in classes {
        rank(&mut cands);
        cands.truncate(k);
        out.extend(cands);
    }
    rank(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

impl std::str::FromStr for YesNo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_end_matches('.').to_ascii_lowercase().as_str() {
            "yes" => Ok(YesNo::Yes),
            "no" => Ok(YesNo::No),
            other => Err(format!("expected yes/no, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Attribute,
    Relationship,
    Scene,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Attribute, ProbeKind::Relationship, ProbeKind::Scene];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Attribute => "attribute",
            ProbeKind::Relationship => "relationship",
            ProbeKind::Scene => "scene",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    LangPrior,
    ImagePrior,
}

impl PriorSource {
    pub const ALL: [PriorSource; 2] = [PriorSource::LangPrior, PriorSource::ImagePrior];
}

pub type Stratum = (ProbeKind, PriorSource);

pub fn all_strata() -> Vec<Stratum> {
    ProbeKind::ALL
        .iter()
        .flat_map(|&k| PriorSource::ALL.iter().map(move |&p| (k, p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeQuestion {
    pub text: String,
    pub gold: YesNo,
    pub probe_kind: ProbeKind,
    pub prior_source: PriorSource,
    pub image_id: String,
    /// The claim the question asks about.
    pub claim: Components,
}

/// One question template per probe kind, placeholders `{obj}`, `{attr}`,
/// `{subj}`, `{rel}`, `{sce}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeTemplates(BTreeMap<ProbeKind, String>);

pub const DEFAULT_PROBE_TEMPLATES: &str = include_str!("../templates/probe_templates.txt");

impl Default for ProbeTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_PROBE_TEMPLATES).expect("bundled probe templates parse")
    }
}

impl ProbeTemplates {
    pub fn parse(text: &str) -> Result<Self, MinerError> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| MinerError::Template(format!("expected `kind: template`, got `{line}`")))?;
            let kind = match k.trim() {
                "attribute" => ProbeKind::Attribute,
                "relationship" => ProbeKind::Relationship,
                "scene" => ProbeKind::Scene,
                other => return Err(MinerError::Template(format!("unknown probe kind `{other}`"))),
            };
            map.insert(kind, v.trim().to_string());
        }
        for k in ProbeKind::ALL {
            if !map.contains_key(&k) {
                return Err(MinerError::Template(format!("no template for {}", k.as_str())));
            }
        }
        Ok(ProbeTemplates(map))
    }

    pub fn render(&self, claim: &Components) -> String {
        let (kind, pairs): (ProbeKind, Vec<(&str, &str)>) = match claim {
            Components::Attribute { attr, obj } => (ProbeKind::Attribute, vec![("attr", attr), ("obj", obj)]),
            Components::Relationship { obj1, rel, obj2 } => (
                ProbeKind::Relationship,
                vec![("subj", obj1), ("rel", rel), ("obj", obj2)],
            ),
            Components::Scene { sce } => (ProbeKind::Scene, vec![("sce", sce)]),
            Components::Object { obj } => (ProbeKind::Attribute, vec![("obj", obj)]),
        };
        let mut out = self.0[&kind].clone();
        for (k, v) in pairs {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

fn lang_answers(t: &CooccurrenceTable, qtype: HType, cfg: &MinerConfig) -> Vec<String> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    if let Some(dist) = t.qa_answer_freq.get(&qtype) {
        for values in dist.0.values() {
            for (a, f) in values {
                if cfg.is_high(*f) && a != "yes" && a != "no" {
                    let e = best.entry(a.as_str()).or_insert(0.0);
                    *e = e.max(f.prob);
                }
            }
        }
    }
    let mut v: Vec<_> = best.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(a, _)| a.to_string()).collect()
}

fn high_values<'a>(dist: &'a CondFreq, key: &str, cfg: &MinerConfig) -> Vec<&'a str> {
    let mut v: Vec<_> = dist.given(key).filter(|(_, f)| cfg.is_high(*f)).collect();
    v.sort_by(|a, b| b.1.prob.total_cmp(&a.1.prob).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(s, _)| s).collect()
}

/// Claims true in `g` for the kind.
fn true_claims(g: &SceneGraph, kind: ProbeKind) -> Vec<Components> {
    match kind {
        ProbeKind::Attribute => g
            .objects
            .iter()
            .flat_map(|o| {
                o.attributes.iter().map(|a| Components::Attribute {
                    attr: a.clone(),
                    obj: o.name.clone(),
                })
            })
            .collect(),
        ProbeKind::Relationship => g
            .named_relations()
            .map(|(s, p, o)| Components::Relationship {
                obj1: s.into(),
                rel: p.into(),
                obj2: o.into(),
            })
            .collect(),
        ProbeKind::Scene => g
            .scene_labels
            .iter()
            .map(|s| Components::Scene { sce: s.clone() })
            .collect(),
    }
}

/// Highly co-occurring claims that `g` contradicts.
fn false_claims(
    t: &CooccurrenceTable,
    g: &SceneGraph,
    kind: ProbeKind,
    prior: PriorSource,
    lang: &[String],
    predicates: &BTreeSet<&str>,
    cfg: &MinerConfig,
) -> Vec<Components> {
    let mut out = Vec::new();
    match (kind, prior) {
        (ProbeKind::Attribute, _) => {
            for o in &g.objects {
                let pool: Vec<&str> = match prior {
                    PriorSource::ImagePrior => high_values(&t.attr_given_obj, &o.name, cfg),
                    PriorSource::LangPrior => lang.iter().map(String::as_str).collect(),
                };
                let pick = pool.into_iter().map(|a| Components::Attribute {
                    attr: a.into(),
                    obj: o.name.clone(),
                });
                out.extend(pick.filter(|c| !g.supports(c)).take(1));
            }
        }
        (ProbeKind::Relationship, _) => {
            for (s, p, o) in g.named_relations() {
                let mut pool: Vec<Components> = match prior {
                    PriorSource::ImagePrior => high_values(&t.pred_given_pair, &pair_key(s, o), cfg)
                        .into_iter()
                        .map(|p2| Components::Relationship {
                            obj1: s.into(),
                            rel: p2.into(),
                            obj2: o.into(),
                        })
                        .collect(),
                    PriorSource::LangPrior => lang
                        .iter()
                        .filter(|a| predicates.contains(a.as_str()))
                        .map(|p2| Components::Relationship {
                            obj1: s.into(),
                            rel: p2.clone(),
                            obj2: o.into(),
                        })
                        .collect(),
                };
                if prior == PriorSource::ImagePrior {
                    pool.extend(
                        high_values(&t.subj_given_pred_obj, &pair_key(p, o), cfg)
                            .into_iter()
                            .map(|s2| Components::Relationship {
                                obj1: s2.into(),
                                rel: p.into(),
                                obj2: o.into(),
                            }),
                    );
                }
                out.extend(pool.into_iter().filter(|c| !g.supports(c)).take(1));
            }
        }
        (ProbeKind::Scene, PriorSource::ImagePrior) => {
            let mut best: BTreeMap<&str, f64> = BTreeMap::new();
            for name in g.object_names() {
                for (s, f) in t.scene_given_obj.given(name) {
                    if cfg.is_high(f) && !g.has_scene(s) {
                        let e = best.entry(s).or_insert(0.0);
                        *e = e.max(f.prob);
                    }
                }
            }
            let pick = best
                .into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)));
            out.extend(pick.map(|(s, _)| Components::Scene { sce: s.into() }));
        }
        (ProbeKind::Scene, PriorSource::LangPrior) => {
            out.extend(
                lang.iter()
                    .map(|s| Components::Scene { sce: s.clone() })
                    .filter(|c| !g.supports(c))
                    .take(1),
            );
        }
    }
    out
}

/// Balanced binary probes: per requested stratum exactly `n_per_stratum`
/// Yes-gold and `n_per_stratum` No-gold questions.
pub fn generate_probes(
    t: &CooccurrenceTable,
    corpus: &[SceneGraph],
    strata: &[Stratum],
    n_per_stratum: usize,
    templates: &ProbeTemplates,
    cfg: &MinerConfig,
) -> Result<Vec<ProbeQuestion>, MinerError> {
    if n_per_stratum == 0 {
        return Ok(Vec::new());
    }
    if corpus.is_empty() {
        return Err(MinerError::EmptyCorpus);
    }
    let predicates: BTreeSet<&str> = t
        .pred_given_pair
        .0
        .values()
        .flat_map(|m| m.keys().map(String::as_str))
        .collect();
    let mut out = Vec::new();
    for &(kind, prior) in strata {
        let qtype = match kind {
            ProbeKind::Attribute => HType::Attribute,
            ProbeKind::Relationship => HType::Relationship,
            ProbeKind::Scene => HType::Scene,
        };
        let lang = lang_answers(t, qtype, cfg);
        let mut yes = Vec::new();
        let mut no = Vec::new();
        let mut seen = BTreeSet::new();
        for g in corpus {
            if yes.len() >= n_per_stratum && no.len() >= n_per_stratum {
                break;
            }
            let mut push = |claim: Components, gold: YesNo, bucket: &mut Vec<ProbeQuestion>| {
                let text = templates.render(&claim);
                if bucket.len() < n_per_stratum && seen.insert((g.image_id.clone(), text.clone())) {
                    bucket.push(ProbeQuestion {
                        text,
                        gold,
                        probe_kind: kind,
                        prior_source: prior,
                        image_id: g.image_id.clone(),
                        claim,
                    });
                }
            };
            for c in true_claims(g, kind) {
                push(c, YesNo::Yes, &mut yes);
            }
            for c in false_claims(t, g, kind, prior, &lang, &predicates, cfg) {
                push(c, YesNo::No, &mut no);
            }
        }
        if yes.len() < n_per_stratum || no.len() < n_per_stratum {
            return Err(MinerError::InsufficientMaterial {
                kind,
                prior,
                wanted: n_per_stratum,
                yes: yes.len(),
                no: no.len(),
            });
        }
        out.extend(yes);
        out.extend(no);
    }
    Ok(out)
}

/// Binary-probe scores with Yes as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_rate: f64,
    pub n: usize,
}

impl ProbeReport {
    /// Reads a row laid out as `A, P, R, F1, Yes%` (separated by `&`, `,` or
    /// whitespace).
    pub fn from_row(row: &str) -> Result<Self, String> {
        let vals: Vec<f64> = row
            .split(|c: char| c == '&' || c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
            .collect::<Result<_, _>>()?;
        let [accuracy, precision, recall, f1, yes_rate] = vals[..] else {
            return Err(format!("expected 5 values, got {}", vals.len()));
        };
        Ok(ProbeReport {
            accuracy,
            precision,
            recall,
            f1,
            yes_rate,
            n: 0,
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score_probes(answers: &[YesNo], probes: &[ProbeQuestion]) -> Result<ProbeReport, MinerError> {
    if answers.len() != probes.len() {
        return Err(MinerError::LengthMismatch {
            answers: answers.len(),
            probes: probes.len(),
        });
    }
    let (mut tp, mut fp, mut fne, mut correct, mut yes) = (0, 0, 0, 0, 0);
    for (a, p) in answers.iter().zip(probes) {
        match (a, p.gold) {
            (YesNo::Yes, YesNo::Yes) => tp += 1,
            (YesNo::Yes, YesNo::No) => fp += 1,
            (YesNo::No, YesNo::Yes) => fne += 1,
            (YesNo::No, YesNo::No) => {}
        }
        correct += usize::from(*a == p.gold);
        yes += usize::from(*a == YesNo::Yes);
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ProbeReport {
        accuracy: ratio(correct, answers.len()),
        precision,
        recall,
        f1,
        yes_rate: ratio(yes, answers.len()),
        n: answers.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{parse_scene_graph, Binding};
    use proptest::prelude::*;

    fn graph(id: &str, objects: &[(&str, &str, &[&str])], rels: &[(&str, &str, &str)], scenes: &[&str]) -> SceneGraph {
        let objects: Vec<_> = objects
            .iter()
            .map(|(id, name, attrs)| serde_json::json!({"id": id, "name": name, "attributes": attrs}))
            .collect();
        let relations: Vec<_> = rels
            .iter()
            .map(|(s, p, o)| serde_json::json!({"subject": s, "predicate": p, "object": o}))
            .collect();
        parse_scene_graph(
            &serde_json::json!({"image_id": id, "objects": objects, "relations": relations, "scene_labels": scenes})
                .to_string(),
        )
        .unwrap()
    }

    fn attr_q(image: &str, obj: &str, answer: &str) -> QaRecord {
        QaRecord {
            id: format!("{image}-{obj}"),
            image_id: image.into(),
            question: "What color is the lemon?".into(),
            answer: answer.into(),
            qtype: HType::Attribute,
            referenced: Binding {
                object: Some(obj.into()),
                attribute: Some(answer.into()),
                ..Default::default()
            },
            decoy: None,
        }
    }

    #[test]
    fn single_attribute_corpus() {
        let gs = [graph("1", &[("1", "shelf", &["white"])], &[], &[]), graph("2", &[("1", "shelf", &["white"])], &[], &[])];
        let t = build_cooccurrence(&gs, &[]).unwrap();
        assert_eq!(t.attr_given_obj.get("shelf", "white"), Some(Freq { count: 2, prob: 1.0 }));
    }

    #[test]
    fn hand_counted_conditionals() {
        let gs = [
            graph("1", &[("1", "shelf", &["white"])], &[], &[]),
            graph("2", &[("1", "shelf", &["white"])], &[], &[]),
            graph("3", &[("1", "shelf", &["brown"])], &[], &[]),
        ];
        let t = build_cooccurrence(&gs, &[]).unwrap();
        assert_eq!(t.attr_given_obj.prob("shelf", "white"), 2.0 / 3.0);
        assert_eq!(t.attr_given_obj.prob("shelf", "brown"), 1.0 / 3.0);
        assert!(t.attr_given_obj.normalization_error() <= 1e-9);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(build_cooccurrence(&[], &[]), Err(MinerError::EmptyCorpus)));
    }

    #[test]
    fn relation_and_scene_tables() {
        let gs = [
            graph("1", &[("1", "window", &[]), ("2", "shelf", &[])], &[("1", "above", "2")], &["indoors"]),
            graph("2", &[("1", "window", &[]), ("2", "shelf", &[])], &[("1", "near", "2")], &["indoors", "office"]),
        ];
        let t = build_cooccurrence(&gs, &[]).unwrap();
        assert_eq!(t.pred_given_pair.prob("window | shelf", "above"), 0.5);
        assert_eq!(t.subj_given_pred_obj.prob("near | shelf", "window"), 1.0);
        assert_eq!(t.rel_triple["window | above | shelf"], 1);
        assert_eq!(t.scene_given_obj.get("shelf", "indoors").unwrap().count, 2);
        assert_eq!(t.scene_given_obj.prob("shelf", "office"), 1.0 / 3.0);
    }

    #[test]
    fn question_templates_hide_the_bound_object() {
        let g = graph("1", &[("7", "lemon", &["yellow"])], &[], &[]);
        let q = attr_q("1", "7", "yellow");
        assert_eq!(question_template(&q, Some(&g)), "what color is the <obj>?");
    }

    #[test]
    fn cab_borrows_from_other_objects() {
        let cats = AttributeCategories::default();
        let g = graph("1", &[("1", "lemon", &["yellow"]), ("2", "eggplant", &["purple"])], &[], &[]);
        let c = cab_candidates(&attr_q("1", "1", "yellow"), &g, &cats).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].answer, "purple");
        assert_eq!(c[0].pattern, Pattern::Cab);

        let g = graph("1", &[("1", "shelf", &["wood"]), ("2", "window", &["glass", "tall"])], &[], &[]);
        let mut q = attr_q("1", "1", "wood");
        q.question = "What material is the shelf?".into();
        let c = cab_candidates(&q, &g, &cats).unwrap();
        let answers: Vec<_> = c.iter().map(|c| c.answer.as_str()).collect();
        assert_eq!(answers, vec!["glass"]);

        let lonely = graph("1", &[("1", "lemon", &["yellow"])], &[], &[]);
        assert!(cab_candidates(&attr_q("1", "1", "yellow"), &lonely, &cats).unwrap().is_empty());
    }

    #[test]
    fn cab_relationship_predicates() {
        let g = graph(
            "1",
            &[("1", "window", &[]), ("2", "shelf", &[]), ("3", "cup", &[])],
            &[("1", "above", "2"), ("3", "on", "2")],
            &[],
        );
        let q = QaRecord {
            id: "r".into(),
            image_id: "1".into(),
            question: "Is the window above or below the shelf?".into(),
            answer: "above".into(),
            qtype: HType::Relationship,
            referenced: Binding {
                subject: Some("1".into()),
                predicate: Some("above".into()),
                object: Some("2".into()),
                ..Default::default()
            },
            decoy: None,
        };
        let c = cab_candidates(&q, &g, &AttributeCategories::default()).unwrap();
        assert_eq!(c.iter().map(|c| c.answer.as_str()).collect::<Vec<_>>(), vec!["on"]);
    }

    fn shelves(white: usize, brown: usize) -> Vec<SceneGraph> {
        (0..white)
            .map(|i| graph(&format!("w{i}"), &[("1", "shelf", &["white"])], &[], &[]))
            .chain((0..brown).map(|i| graph(&format!("b{i}"), &[("1", "shelf", &["brown"])], &[], &[])))
            .collect()
    }

    #[test]
    fn image_prior_argmax() {
        let t = build_cooccurrence(&shelves(9, 1), &[]).unwrap();
        let g = graph("x", &[("1", "shelf", &["brown"])], &[], &[]);
        let mut q = attr_q("x", "1", "brown");
        q.question = "What color is the shelf?".into();
        let c = prior_candidates(&q, &t, &g, 3, &MinerConfig::default()).unwrap();
        assert_eq!(
            c,
            vec![Candidate { answer: "white".into(), pattern: Pattern::ImagePrior, score: 0.9 }]
        );
    }

    #[test]
    fn prior_edge_cases() {
        let g = graph("x", &[("1", "shelf", &["white"])], &[], &[]);
        let q = attr_q("x", "1", "white");
        let empty = CooccurrenceTable::default();
        assert!(prior_candidates(&q, &empty, &g, 3, &MinerConfig::default()).unwrap().is_empty());
        let t = build_cooccurrence(&shelves(9, 0), &[]).unwrap();
        assert!(prior_candidates(&q, &t, &g, 3, &MinerConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn language_and_combined_priors() {
        let mut gs = shelves(9, 1);
        gs.push(graph("x", &[("1", "shelf", &["brown"])], &[], &[]));
        let mut qs: Vec<QaRecord> = (0..4)
            .map(|i| {
                let mut q = attr_q(&format!("w{i}"), "1", "white");
                q.question = "What color is the shelf?".into();
                q
            })
            .collect();
        let mut target = attr_q("x", "1", "brown");
        target.question = "What color is the shelf?".into();
        qs.push(target.clone());
        let t = build_cooccurrence(&gs, &qs).unwrap();
        let c = prior_candidates(&target, &t, &gs[10], 3, &MinerConfig::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].answer, "white");
        assert_eq!(c[0].pattern, Pattern::LangImagePrior);
        // image 9/11 beats language 4/5
        assert_eq!(c[0].score, 9.0 / 11.0);
    }

    fn lemon_table() -> CooccurrenceTable {
        let gs: Vec<_> = (0..3)
            .map(|i| graph(&format!("p{i}"), &[("1", "lemon", &["purple"])], &[], &[]))
            .collect();
        build_cooccurrence(&gs, &[]).unwrap()
    }

    #[test]
    fn lemon_probes() {
        let corpus = [graph("1", &[("1", "lemon", &["yellow"]), ("2", "eggplant", &["purple"])], &[], &[])];
        let probes = generate_probes(
            &lemon_table(),
            &corpus,
            &[(ProbeKind::Attribute, PriorSource::ImagePrior)],
            1,
            &ProbeTemplates::default(),
            &MinerConfig::default(),
        )
        .unwrap();
        let got: Vec<_> = probes.iter().map(|p| (p.text.as_str(), p.gold)).collect();
        assert_eq!(got, vec![("Is the lemon yellow?", YesNo::Yes), ("Is the lemon purple?", YesNo::No)]);
    }

    #[test]
    fn probe_edge_cases() {
        let corpus = [graph("1", &[("1", "lemon", &["yellow"])], &[], &[])];
        let t = lemon_table();
        let tpl = ProbeTemplates::default();
        let cfg = MinerConfig::default();
        assert!(generate_probes(&t, &corpus, &all_strata(), 0, &tpl, &cfg).unwrap().is_empty());
        assert!(matches!(
            generate_probes(&t, &corpus, &[(ProbeKind::Relationship, PriorSource::ImagePrior)], 1, &tpl, &cfg),
            Err(MinerError::InsufficientMaterial { kind: ProbeKind::Relationship, .. })
        ));
    }

    fn balanced(n: usize) -> Vec<ProbeQuestion> {
        (0..2 * n)
            .map(|i| ProbeQuestion {
                text: format!("q{i}"),
                gold: if i < n { YesNo::Yes } else { YesNo::No },
                probe_kind: ProbeKind::Scene,
                prior_source: PriorSource::LangPrior,
                image_id: "1".into(),
                claim: Components::Scene { sce: "x".into() },
            })
            .collect()
    }

    #[test]
    fn probe_scores() {
        let probes = balanced(5);
        let perfect: Vec<_> = probes.iter().map(|p| p.gold).collect();
        let r = score_probes(&perfect, &probes).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1, r.yes_rate), (1.0, 1.0, 1.0, 1.0, 0.5));

        let yes = vec![YesNo::Yes; probes.len()];
        let r = score_probes(&yes, &probes).unwrap();
        assert_eq!((r.accuracy, r.recall, r.yes_rate), (0.5, 1.0, 1.0));

        assert!(matches!(score_probes(&yes[..3], &probes), Err(MinerError::LengthMismatch { .. })));
    }

    #[test]
    fn f1_from_constructed_precision() {
        // 7 true yes out of 25 predicted yes; no false negatives: P = 0.28, R = 1.
        let mut probes = balanced(25);
        probes.truncate(7);
        probes.extend(balanced(18).into_iter().skip(18));
        let answers = vec![YesNo::Yes; probes.len()];
        let r = score_probes(&answers, &probes).unwrap();
        assert!((r.precision - 0.28).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 0.4375).abs() < 1e-12);
    }

    #[test]
    fn table_row_reads_in_order() {
        let r = ProbeReport::from_row("0.47 & 0.45 & 0.29 & 0.36 & 0.32").unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1, r.yes_rate), (0.47, 0.45, 0.29, 0.36, 0.32));
        assert!(ProbeReport::from_row("0.1 0.2").is_err());
    }

    proptest! {
        #[test]
        fn conditionals_are_normalized(attrs in prop::collection::vec(
            (prop::sample::select(vec!["shelf", "cup", "dog"]), prop::collection::vec(prop::sample::select(vec!["red", "white", "big"]), 0..3)),
            1..20,
        )) {
            let gs: Vec<_> = attrs.iter().enumerate().map(|(i, (name, a))| {
                let a: Vec<&str> = a.clone();
                graph(&i.to_string(), &[("1", name, &a)], &[], &["indoors"])
            }).collect();
            let t = build_cooccurrence(&gs, &[]).unwrap();
            prop_assert!(t.attr_given_obj.normalization_error() <= 1e-9);
            prop_assert!(t.scene_given_obj.normalization_error() <= 1e-9);
            for m in t.attr_given_obj.0.values() {
                for f in m.values() {
                    prop_assert!(f.count >= 1 && (0.0..=1.0).contains(&f.prob));
                }
            }
        }

        #[test]
        fn cab_never_echoes_truth(own in prop::collection::vec(prop::sample::select(vec!["red", "white", "blue", "glass"]), 1..3),
                                  other in prop::collection::vec(prop::sample::select(vec!["red", "white", "blue", "glass", "wood"]), 0..4)) {
            let g = graph("1", &[("1", "cup", &own), ("2", "plate", &other)], &[], &[]);
            let q = attr_q("1", "1", own[0]);
            for c in cab_candidates(&q, &g, &AttributeCategories::default()).unwrap() {
                prop_assert_ne!(&c.answer, own[0]);
                prop_assert!(!g.object("1").unwrap().has_attribute(&c.answer));
            }
        }

        #[test]
        fn yes_rate_is_exact(answers in prop::collection::vec(any::<bool>(), 1..200)) {
            let probes = balanced(answers.len());
            let probes = &probes[..answers.len()];
            let yn: Vec<_> = answers.iter().map(|&b| if b { YesNo::Yes } else { YesNo::No }).collect();
            let k = answers.iter().filter(|&&b| b).count();
            let r = score_probes(&yn, probes).unwrap();
            prop_assert_eq!(r.yes_rate, k as f64 / answers.len() as f64);
        }
    }
}
