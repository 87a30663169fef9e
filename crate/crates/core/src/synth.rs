//! Seeded synthetic corpora: scene graphs, typed questions with decoys and
//! caption paragraphs describing each graph.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::pipeline::SourceText;
use crate::scene::{parse_scene_graph, Binding, QaRecord, SceneGraph};
use crate::taxonomy::HType;
use crate::text::stable_hash;

pub const OBJECTS: &[&str] = &[
    "shelf", "window", "table", "chair", "lamp", "cup", "book", "plant", "dog", "cat", "car", "tree",
    "bench", "clock", "vase", "bottle", "bicycle", "sign", "door", "pillow", "bowl", "laptop",
    "umbrella", "bag", "fence", "boat", "bus", "horse", "bird", "couch",
];
pub const COLORS: &[&str] = &[
    "white", "brown", "black", "red", "green", "blue", "yellow", "gray", "orange", "pink",
];
pub const MATERIALS: &[&str] = &["wooden", "metal", "glass", "plastic"];
pub const PREDICATES: &[&str] = &["above", "below", "near", "behind", "on", "under"];
/// Draw pool for predicates; repeats skew the distribution.
const PREDICATE_DRAWS: &[&str] = &["near", "near", "near", "near", "on", "on", "above", "below", "behind", "under"];
pub const SCENES: &[&str] = &["indoors", "outdoors", "kitchen", "street", "park", "beach", "office", "bedroom"];
const COLOR_DRAWS: &[&str] = &["white", "white", "white", "white", "white", "black", "gray", "brown", "red", "blue"];
const SCENE_DRAWS: &[&str] = &[
    "indoors", "indoors", "indoors", "indoors", "outdoors", "outdoors", "kitchen", "street", "park", "beach",
    "office", "bedroom",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 50,
            seed: 0,
            min_objects: 3,
            max_objects: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub graphs: Vec<SceneGraph>,
    pub questions: Vec<QaRecord>,
    pub sources: Vec<SourceText>,
}

pub fn image_id(i: usize) -> String {
    format!("{}", 1_000_000 + i)
}

/// Colour an object name usually has, so that the corpus carries a prior.
fn usual_color(name: &str) -> &'static str {
    COLORS[(stable_hash(&[name]) % COLORS.len() as u64) as usize]
}

/// Predicate a pair of object names usually stands in.
fn usual_predicate(subject: &str, object: &str) -> &'static str {
    PREDICATES[(stable_hash(&[subject, object]) % PREDICATES.len() as u64) as usize]
}

/// Object a name is usually related to; shares its home scene.
fn usual_partner(name: &str) -> &'static str {
    let i = OBJECTS.iter().position(|o| *o == name).unwrap_or(0);
    OBJECTS[(i + SCENES.len()) % OBJECTS.len()]
}

/// Scene an object name mostly appears in.
fn home_scene(name: &str) -> &'static str {
    let i = OBJECTS.iter().position(|o| *o == name).unwrap_or(0);
    SCENES[i % SCENES.len()]
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str], not: &[&str]) -> Option<&'a str> {
    let open: Vec<&str> = pool.iter().copied().filter(|w| !not.contains(w)).collect();
    open.choose(rng).copied()
}

struct Obj {
    name: &'static str,
    color: &'static str,
    material: Option<&'static str>,
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut corpus = SynthCorpus {
        graphs: Vec::with_capacity(cfg.images),
        questions: Vec::new(),
        sources: Vec::with_capacity(cfg.images),
    };
    for i in 0..cfg.images {
        let id = image_id(i);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash(&["synth", &id]));
        let k = rng.random_range(cfg.min_objects.max(2)..=cfg.max_objects.max(cfg.min_objects.max(2)));
        let scene = SCENE_DRAWS.choose(&mut rng).copied().unwrap_or("indoors");
        let mut names: Vec<&'static str> = OBJECTS.to_vec();
        names.shuffle(&mut rng);
        let mut chosen: Vec<&'static str> = Vec::with_capacity(k);
        while chosen.len() < k.min(OBJECTS.len()) {
            let home = rng.random_bool(0.6);
            let at = names
                .iter()
                .position(|n| !home || home_scene(n) == scene)
                .unwrap_or(0);
            chosen.push(names.remove(at));
        }
        let objs: Vec<Obj> = chosen
            .iter()
            .map(|&name| Obj {
                name,
                color: if rng.random_bool(0.5) {
                    usual_color(name)
                } else {
                    COLOR_DRAWS.choose(&mut rng).copied().unwrap_or("white")
                },
                material: rng.random_bool(0.5).then(|| MATERIALS.choose(&mut rng).copied().unwrap_or("wooden")),
            })
            .collect();
        let mut rels: Vec<(usize, &'static str, usize)> = Vec::new();
        for _ in 0..rng.random_range(2..=4) {
            let s = rng.random_range(0..objs.len());
            let partner = objs.iter().position(|x| x.name == usual_partner(objs[s].name));
            let o = match partner {
                Some(j) if rng.random_bool(0.6) => j,
                _ => rng.random_range(0..objs.len()),
            };
            if s != o && !rels.iter().any(|r| r.0 == s && r.2 == o) {
                let p = if rng.random_bool(0.5) {
                    usual_predicate(objs[s].name, objs[o].name)
                } else {
                    PREDICATE_DRAWS.choose(&mut rng).copied().unwrap_or("near")
                };
                rels.push((s, p, o));
            }
        }

        let record = json!({
            "image_id": id,
            "objects": objs.iter().enumerate().map(|(j, o)| json!({
                "id": j.to_string(),
                "name": o.name,
                "attributes": std::iter::once(o.color).chain(o.material).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "relations": rels.iter().map(|(s, p, o)| json!({
                "subject": s.to_string(), "predicate": p, "object": o.to_string(),
            })).collect::<Vec<_>>(),
            "scene_labels": [scene],
        });
        let graph = parse_scene_graph(&record.to_string()).expect("synthetic graph is well formed");

        let present: Vec<&str> = objs.iter().map(|o| o.name).collect();
        let mut qs = Vec::new();
        let mut push = |question: String, answer: &str, qtype: HType, referenced: Binding, decoy: Option<&str>| {
            qs.push(QaRecord {
                id: format!("{id}-q{}", qs.len()),
                image_id: id.clone(),
                question,
                answer: answer.to_string(),
                qtype,
                referenced,
                decoy: decoy.map(str::to_string),
            });
        };
        for (j, o) in objs.iter().enumerate().take(2) {
            let decoy = if rng.random_bool(0.5) { pick(&mut rng, COLORS, &[o.color]) } else { None };
            push(
                format!("What color is the {}?", o.name),
                o.color,
                HType::Attribute,
                Binding {
                    object: Some(j.to_string()),
                    attribute: Some(o.color.to_string()),
                    ..Default::default()
                },
                decoy,
            );
        }
        for &(s, p, o) in rels.iter().take(2) {
            let decoy = pick(&mut rng, OBJECTS, &present);
            push(
                format!("What is {p} the {}?", objs[o].name),
                objs[s].name,
                HType::Object,
                Binding {
                    object: Some(s.to_string()),
                    ..Default::default()
                },
                decoy,
            );
            let taken: Vec<&str> = rels
                .iter()
                .filter(|r| r.0 == s && r.2 == o)
                .map(|r| r.1)
                .collect();
            let decoy = if rng.random_bool(0.5) { pick(&mut rng, PREDICATES, &taken) } else { None };
            push(
                format!("Where is the {} relative to the {}?", objs[s].name, objs[o].name),
                p,
                HType::Relationship,
                Binding {
                    subject: Some(s.to_string()),
                    predicate: Some(p.to_string()),
                    object: Some(o.to_string()),
                    ..Default::default()
                },
                decoy,
            );
        }
        let decoy = pick(&mut rng, SCENES, &[scene]);
        push(
            "Where was this picture taken?".to_string(),
            scene,
            HType::Scene,
            Binding {
                scene: Some(scene.to_string()),
                ..Default::default()
            },
            decoy,
        );

        let mut sentences = vec![format!("The scene is {scene}.")];
        for o in &objs {
            sentences.push(format!("There is a {} {}.", o.color, o.name));
            if let Some(m) = o.material {
                sentences.push(format!("The {} is {m}.", o.name));
            }
        }
        for &(s, p, o) in &rels {
            sentences.push(format!("The {} is {p} the {}.", objs[s].name, objs[o].name));
        }
        corpus.sources.push(SourceText {
            id: format!("{id}-cap"),
            image_id: id.clone(),
            text: sentences.join(" "),
        });
        corpus.graphs.push(graph);
        corpus.questions.extend(qs);
    }
    corpus
}
