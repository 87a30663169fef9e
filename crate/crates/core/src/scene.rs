//! Scene graphs and typed visual questions.
//!
//! Input files follow a line-delimited GQA-like layout:
//!
//! ```text
//! {"image_id":"1","objects":[{"id":"1","name":"shelf","attributes":["white"]}],
//!  "relations":[],"scene_labels":["indoors"]}
//! ```
//!
//! Unknown keys are ignored so that richer GQA exports load unchanged.
//! Names, attributes, predicates and scene labels are canonicalized on load.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::taxonomy::{Components, HType, Role};
use crate::text::canonicalize;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("image {image_id}: relation references missing object id `{id}`")]
    DanglingReference { image_id: String, id: String },
    #[error("unresolved binding: {0}")]
    UnresolvedBinding(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneObject {
    pub id: String,
    pub name: String,
    /// Canonical attributes, de-duplicated, first occurrence order.
    pub attributes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl SceneObject {
    pub fn has_attribute(&self, attr: &str) -> bool {
        self.attributes.iter().any(|a| a == attr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Relation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub scene_labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl SceneGraph {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.index.get(id).map(|&i| &self.objects[i])
    }

    pub fn has_object_named(&self, name: &str) -> bool {
        self.objects.iter().any(|o| o.name == name)
    }

    pub fn object_names(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.name.as_str()).collect()
    }

    /// Relations resolved to `(subject name, predicate, object name)`.
    pub fn named_relations(&self) -> impl Iterator<Item = (&str, &str, &str)> + '_ {
        self.relations.iter().map(move |r| {
            (
                self.object(&r.subject).map_or("", |o| o.name.as_str()),
                r.predicate.as_str(),
                self.object(&r.object).map_or("", |o| o.name.as_str()),
            )
        })
    }

    pub fn has_named_relation(&self, subject: &str, predicate: &str, object: &str) -> bool {
        self.named_relations()
            .any(|(s, p, o)| s == subject && p == predicate && o == object)
    }

    pub fn has_scene(&self, label: &str) -> bool {
        self.scene_labels.iter().any(|s| s == label)
    }

    /// Whether the graph makes the component tuple true: the object exists,
    /// an object of that name carries the attribute, the named relation is
    /// present, or the scene label is present.
    pub fn supports(&self, c: &Components) -> bool {
        match c {
            Components::Object { obj } => self.has_object_named(obj),
            Components::Attribute { attr, obj } => self
                .objects
                .iter()
                .any(|o| &o.name == obj && o.has_attribute(attr)),
            Components::Relationship { obj1, rel, obj2 } => self.has_named_relation(obj1, rel, obj2),
            Components::Scene { sce } => self.has_scene(sce),
        }
    }

    /// Serializes back to the ingestion schema (one line, no trailing newline).
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("scene graph serializes")
    }
}

fn id_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "expected string or number id, got {other}"
        ))),
    }
}

#[derive(Deserialize)]
struct RawObject {
    #[serde(deserialize_with = "id_string")]
    id: String,
    name: String,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default)]
    bbox: Option<BBox>,
}

#[derive(Deserialize)]
struct RawRelation {
    #[serde(deserialize_with = "id_string")]
    subject: String,
    predicate: String,
    #[serde(deserialize_with = "id_string")]
    object: String,
}

#[derive(Deserialize)]
struct RawGraph {
    #[serde(deserialize_with = "id_string")]
    image_id: String,
    #[serde(default)]
    objects: Vec<RawObject>,
    #[serde(default)]
    relations: Vec<RawRelation>,
    #[serde(default)]
    scene_labels: Vec<String>,
}

fn dedup_canonical(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| canonicalize(&s))
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}

impl TryFrom<RawGraph> for SceneGraph {
    type Error = SceneError;

    fn try_from(raw: RawGraph) -> Result<Self, SceneError> {
        let image_id = raw.image_id;
        let mut index = HashMap::with_capacity(raw.objects.len());
        let mut objects = Vec::with_capacity(raw.objects.len());
        for (i, o) in raw.objects.into_iter().enumerate() {
            let name = canonicalize(&o.name);
            if name.is_empty() {
                return Err(SceneError::Schema(format!(
                    "image {image_id}: object `{}` has an empty name",
                    o.id
                )));
            }
            if let Some(b) = o.bbox {
                if !(b.w > 0.0 && b.h > 0.0) {
                    return Err(SceneError::Schema(format!(
                        "image {image_id}: object `{}` has a degenerate bbox",
                        o.id
                    )));
                }
            }
            if index.insert(o.id.clone(), i).is_some() {
                return Err(SceneError::Schema(format!(
                    "image {image_id}: duplicate object id `{}`",
                    o.id
                )));
            }
            objects.push(SceneObject {
                id: o.id,
                name,
                attributes: dedup_canonical(o.attributes),
                bbox: o.bbox,
            });
        }
        let mut relations = Vec::with_capacity(raw.relations.len());
        for r in raw.relations {
            for id in [&r.subject, &r.object] {
                if !index.contains_key(id) {
                    return Err(SceneError::DanglingReference {
                        image_id: image_id.clone(),
                        id: id.clone(),
                    });
                }
            }
            let predicate = canonicalize(&r.predicate);
            if predicate.is_empty() {
                return Err(SceneError::Schema(format!(
                    "image {image_id}: relation with empty predicate"
                )));
            }
            relations.push(Relation {
                subject: r.subject,
                predicate,
                object: r.object,
            });
        }
        Ok(SceneGraph {
            image_id,
            objects,
            relations,
            scene_labels: dedup_canonical(raw.scene_labels),
            index,
        })
    }
}

/// Parses one scene-graph record.
pub fn parse_scene_graph(record: &str) -> Result<SceneGraph, SceneError> {
    let raw: RawGraph =
        serde_json::from_str(record).map_err(|e| SceneError::Schema(e.to_string()))?;
    SceneGraph::try_from(raw)
}

pub fn load_scenes(path: &Path) -> Result<Vec<SceneGraph>, SceneError> {
    let (_, raws): (_, Vec<RawGraph>) = jsonl::read(path)?;
    raws.into_iter().map(SceneGraph::try_from).collect()
}

pub fn parse_scenes(text: &str) -> Result<Vec<SceneGraph>, SceneError> {
    let (_, raws): (_, Vec<RawGraph>) = jsonl::parse(text)?;
    raws.into_iter().map(SceneGraph::try_from).collect()
}

/// Graph bindings of a question. Which keys are required depends on the
/// question type: `object` for Object, `object` + `attribute` for Attribute,
/// `subject` + `predicate` + `object` for Relationship and `scene` for Scene.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default)]
    pub id: String,
    #[serde(deserialize_with = "id_string")]
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub qtype: HType,
    #[serde(default)]
    pub referenced: Binding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy: Option<String>,
}

impl QaRecord {
    /// Canonicalizes answer and bindings and checks the type invariants.
    pub fn normalized(mut self) -> Result<Self, SceneError> {
        self.answer = canonicalize(&self.answer);
        if self.answer.is_empty() {
            return Err(SceneError::Schema(format!("question `{}`: empty answer", self.id)));
        }
        self.decoy = self.decoy.map(|d| canonicalize(&d)).filter(|d| !d.is_empty());
        let b = &mut self.referenced;
        for v in [&mut b.attribute, &mut b.predicate, &mut b.scene]
            .into_iter()
            .flatten()
        {
            *v = canonicalize(v);
        }
        let missing = |what: &str| {
            SceneError::Schema(format!(
                "question `{}` ({}) lacks a `{what}` binding",
                self.id, self.qtype
            ))
        };
        match self.qtype {
            HType::Object => {
                b.object.as_ref().ok_or_else(|| missing("object"))?;
            }
            HType::Attribute => {
                b.object.as_ref().ok_or_else(|| missing("object"))?;
                if b.attribute.is_none() {
                    b.attribute = Some(self.answer.clone());
                }
            }
            HType::Relationship => {
                b.subject.as_ref().ok_or_else(|| missing("subject"))?;
                b.object.as_ref().ok_or_else(|| missing("object"))?;
                b.predicate.as_ref().ok_or_else(|| missing("predicate"))?;
            }
            HType::Scene => {
                if b.scene.is_none() {
                    b.scene = Some(self.answer.clone());
                }
            }
        }
        Ok(self)
    }
}

pub fn load_questions(path: &Path) -> Result<Vec<QaRecord>, SceneError> {
    let (_, qs): (_, Vec<QaRecord>) = jsonl::read(path)?;
    finish_questions(qs)
}

pub fn parse_questions(text: &str) -> Result<Vec<QaRecord>, SceneError> {
    let (_, qs): (_, Vec<QaRecord>) = jsonl::parse(text)?;
    finish_questions(qs)
}

fn finish_questions(qs: Vec<QaRecord>) -> Result<Vec<QaRecord>, SceneError> {
    qs.into_iter()
        .enumerate()
        .map(|(i, mut q)| {
            if q.id.is_empty() {
                q.id = format!("{}-q{i}", q.image_id);
            }
            q.normalized()
        })
        .collect()
}

/// Keeps the questions whose type is in `filter`, preserving order.
pub fn select_questions<I>(questions: I, filter: &BTreeSet<HType>) -> Vec<QaRecord>
where
    I: IntoIterator<Item = QaRecord>,
{
    questions
        .into_iter()
        .filter(|q| filter.contains(&q.qtype))
        .collect()
}

fn object_name<'g>(g: &'g SceneGraph, id: Option<&String>, q: &QaRecord) -> Result<&'g str, SceneError> {
    let id = id.ok_or_else(|| {
        SceneError::UnresolvedBinding(format!("question `{}` has no object binding", q.id))
    })?;
    g.object(id).map(|o| o.name.as_str()).ok_or_else(|| {
        SceneError::UnresolvedBinding(format!(
            "question `{}` references object `{id}` absent from image {}",
            q.id, g.image_id
        ))
    })
}

/// The truthful component tuple a question is about.
pub fn annotate_components(q: &QaRecord, g: &SceneGraph) -> Result<Components, SceneError> {
    let b = &q.referenced;
    Ok(match q.qtype {
        HType::Object => Components::Object {
            obj: object_name(g, b.object.as_ref(), q)?.to_string(),
        },
        HType::Attribute => Components::Attribute {
            attr: b.attribute.clone().unwrap_or_else(|| q.answer.clone()),
            obj: object_name(g, b.object.as_ref(), q)?.to_string(),
        },
        HType::Relationship => Components::Relationship {
            obj1: object_name(g, b.subject.as_ref(), q)?.to_string(),
            rel: b.predicate.clone().ok_or_else(|| {
                SceneError::UnresolvedBinding(format!("question `{}` has no predicate", q.id))
            })?,
            obj2: object_name(g, b.object.as_ref(), q)?.to_string(),
        },
        HType::Scene => {
            let label = b.scene.clone().unwrap_or_else(|| q.answer.clone());
            if !g.has_scene(&label) {
                return Err(SceneError::UnresolvedBinding(format!(
                    "question `{}` binds scene `{label}` but image {} has labels {:?}",
                    q.id, g.image_id, g.scene_labels
                )));
            }
            Components::Scene { sce: label }
        }
    })
}

/// Which slot of the truthful tuple the question's answer fills. Answers that
/// match no slot (e.g. yes/no questions) target the type's default slot.
pub fn answer_role(q: &QaRecord, truth: &Components) -> Role {
    let parts = truth.parts();
    let default = Components::default_answer_role(q.qtype);
    if parts.iter().any(|(s, r)| *r == default && *s == q.answer) {
        return default;
    }
    parts
        .iter()
        .find(|(s, _)| *s == q.answer)
        .map_or(default, |(_, r)| *r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SHELF_WINDOW: &str = r#"{"image_id":"2370","objects":[{"id":"1","name":"Shelf","attributes":["white"]},{"id":"2","name":"window","attributes":["glass"],"bbox":{"x":1,"y":2,"w":30,"h":40}}],"relations":[{"subject":"2","predicate":"above","object":"1"}],"scene_labels":["indoors"],"width":640}"#;

    fn q(qtype: HType, answer: &str, referenced: Binding) -> QaRecord {
        QaRecord {
            id: "q".into(),
            image_id: "2370".into(),
            question: "?".into(),
            answer: answer.into(),
            qtype,
            referenced,
            decoy: None,
        }
        .normalized()
        .unwrap()
    }

    #[test]
    fn minimal_graph() {
        let g = parse_scene_graph(
            r#"{"image_id":"a","objects":[{"id":"1","name":"shelf","attributes":["white"]}]}"#,
        )
        .unwrap();
        assert_eq!(g.objects.len(), 1);
        assert!(g.relations.is_empty());
        assert_eq!(g.objects[0].attributes, vec!["white"]);
        assert!(g.scene_labels.is_empty());
    }

    #[test]
    fn two_objects_and_a_relation() {
        let g = parse_scene_graph(SHELF_WINDOW).unwrap();
        let expected = SceneGraph {
            image_id: "2370".into(),
            objects: vec![
                SceneObject {
                    id: "1".into(),
                    name: "shelf".into(),
                    attributes: vec!["white".into()],
                    bbox: None,
                },
                SceneObject {
                    id: "2".into(),
                    name: "window".into(),
                    attributes: vec!["glass".into()],
                    bbox: Some(BBox { x: 1.0, y: 2.0, w: 30.0, h: 40.0 }),
                },
            ],
            relations: vec![Relation {
                subject: "2".into(),
                predicate: "above".into(),
                object: "1".into(),
            }],
            scene_labels: vec!["indoors".into()],
            index: HashMap::new(),
        };
        assert_eq!(g.image_id, expected.image_id);
        assert_eq!(g.objects, expected.objects);
        assert_eq!(g.relations, expected.relations);
        assert_eq!(g.scene_labels, expected.scene_labels);
        assert!(g.has_named_relation("window", "above", "shelf"));
    }

    #[test]
    fn dangling_relation_is_rejected() {
        let rec = r#"{"image_id":"a","objects":[{"id":"1","name":"shelf"}],"relations":[{"subject":"1","predicate":"on","object":"999"}]}"#;
        match parse_scene_graph(rec) {
            Err(SceneError::DanglingReference { id, .. }) => assert_eq!(id, "999"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(parse_scene_graph("{"), Err(SceneError::Schema(_))));
        let dup = r#"{"image_id":"a","objects":[{"id":"1","name":"a"},{"id":"1","name":"b"}]}"#;
        assert!(matches!(parse_scene_graph(dup), Err(SceneError::Schema(_))));
        let bbox = r#"{"image_id":"a","objects":[{"id":"1","name":"a","bbox":{"x":0,"y":0,"w":0,"h":3}}]}"#;
        assert!(matches!(parse_scene_graph(bbox), Err(SceneError::Schema(_))));
        let empty = r#"{"image_id":"a","objects":[{"id":"1","name":"  "}]}"#;
        assert!(matches!(parse_scene_graph(empty), Err(SceneError::Schema(_))));
    }

    #[test]
    fn numeric_ids_are_accepted() {
        let g = parse_scene_graph(r#"{"image_id":12,"objects":[{"id":5,"name":"dog"}]}"#).unwrap();
        assert_eq!(g.image_id, "12");
        assert!(g.object("5").is_some());
    }

    fn mixed_questions() -> Vec<QaRecord> {
        let types = [
            HType::Object,
            HType::Attribute,
            HType::Scene,
            HType::Relationship,
            HType::Attribute,
            HType::Object,
            HType::Scene,
            HType::Attribute,
            HType::Relationship,
            HType::Object,
        ];
        types
            .iter()
            .enumerate()
            .map(|(i, &t)| QaRecord {
                id: format!("q{i}"),
                image_id: "1".into(),
                question: String::new(),
                answer: "x".into(),
                qtype: t,
                referenced: Binding::default(),
                decoy: None,
            })
            .collect()
    }

    #[test]
    fn select_by_type() {
        let qs = mixed_questions();
        let one_each: Vec<_> = qs[..4].to_vec();
        let got = select_questions(one_each, &BTreeSet::from([HType::Object]));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].qtype, HType::Object);

        assert!(select_questions(Vec::new(), &BTreeSet::from([HType::Object])).is_empty());

        let filter = BTreeSet::from([HType::Attribute, HType::Scene]);
        let ids: Vec<_> = select_questions(qs.clone(), &filter)
            .into_iter()
            .map(|q| q.id)
            .collect();
        assert_eq!(ids, vec!["q1", "q2", "q4", "q6", "q7"]);
        let once = select_questions(qs, &filter);
        assert_eq!(select_questions(once.clone(), &filter), once);
    }

    #[test]
    fn components_per_type() {
        let g = parse_scene_graph(SHELF_WINDOW).unwrap();
        let attr = q(
            HType::Attribute,
            "white",
            Binding {
                object: Some("1".into()),
                attribute: Some("white".into()),
                ..Default::default()
            },
        );
        assert_eq!(
            annotate_components(&attr, &g).unwrap(),
            Components::Attribute { attr: "white".into(), obj: "shelf".into() }
        );
        let rel = q(
            HType::Relationship,
            "above",
            Binding {
                subject: Some("2".into()),
                predicate: Some("above".into()),
                object: Some("1".into()),
                ..Default::default()
            },
        );
        let c = annotate_components(&rel, &g).unwrap();
        assert_eq!(c.surface(), "window above shelf");
        assert_eq!(answer_role(&rel, &c), Role::Rel);
    }

    #[test]
    fn scene_binding_needs_a_label() {
        let g = parse_scene_graph(r#"{"image_id":"2370","objects":[{"id":"1","name":"shelf"}]}"#)
            .unwrap();
        let sce = q(
            HType::Scene,
            "kitchen",
            Binding { scene: Some("kitchen".into()), ..Default::default() },
        );
        assert!(matches!(
            annotate_components(&sce, &g),
            Err(SceneError::UnresolvedBinding(_))
        ));
        let missing_obj = q(
            HType::Object,
            "cat",
            Binding { object: Some("42".into()), ..Default::default() },
        );
        assert!(matches!(
            annotate_components(&missing_obj, &g),
            Err(SceneError::UnresolvedBinding(_))
        ));
    }

    #[test]
    fn question_invariants() {
        let rec = QaRecord {
            id: "x".into(),
            image_id: "1".into(),
            question: "What is above the shelf?".into(),
            answer: "window".into(),
            qtype: HType::Relationship,
            referenced: Binding { subject: Some("2".into()), ..Default::default() },
            decoy: None,
        };
        assert!(rec.normalized().is_err());
        let qs = parse_questions(
            r#"{"image_id":"1","question":"What color?","answer":" White ","qtype":"attribute","referenced":{"object":"1"},"decoy":"Blue"}"#,
        )
        .unwrap();
        assert_eq!(qs[0].id, "1-q0");
        assert_eq!(qs[0].answer, "white");
        assert_eq!(qs[0].referenced.attribute.as_deref(), Some("white"));
        assert_eq!(qs[0].decoy.as_deref(), Some("blue"));
    }

    fn arb_graph() -> impl Strategy<Value = String> {
        let names = prop::sample::select(vec!["shelf", "window", "dog", "Traffic  Light", "cup"]);
        let attrs = prop::collection::vec(prop::sample::select(vec!["white", "red", "glass", "Tall"]), 0..3);
        prop::collection::vec((names, attrs), 1..6).prop_flat_map(|objs| {
            let n = objs.len();
            let rels = prop::collection::vec((0..n, prop::sample::select(vec!["on", "near", "above"]), 0..n), 0..5);
            let labels = prop::collection::vec(prop::sample::select(vec!["indoors", "sunny", "office"]), 0..3);
            (Just(objs), rels, labels)
        })
        .prop_map(|(objs, rels, labels)| {
            let objects: Vec<_> = objs
                .iter()
                .enumerate()
                .map(|(i, (name, attrs))| serde_json::json!({"id": format!("o{i}"), "name": name, "attributes": attrs}))
                .collect();
            let relations: Vec<_> = rels
                .iter()
                .map(|(s, p, o)| serde_json::json!({"subject": format!("o{s}"), "predicate": p, "object": format!("o{o}")}))
                .collect();
            serde_json::json!({"image_id": "img", "objects": objects, "relations": relations, "scene_labels": labels}).to_string()
        })
    }

    proptest! {
        #[test]
        fn reparse_is_structurally_equal(rec in arb_graph()) {
            let first = parse_scene_graph(&rec).unwrap();
            let second = parse_scene_graph(&first.to_record()).unwrap();
            prop_assert_eq!(&first, &second);
            for r in &first.relations {
                prop_assert!(first.object(&r.subject).is_some());
                prop_assert!(first.object(&r.object).is_some());
            }
        }
    }
}
