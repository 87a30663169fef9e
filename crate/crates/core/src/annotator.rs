//! Character spans, token labels and the dataset files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::HqaEntry;
use crate::injector::{CoarseAnnotation, CoarseAnnotations};
use crate::jsonl::{self, Header, JsonlError};
use crate::taxonomy::{HType, Pattern, Role};
use crate::text::{byte_to_char, char_len, char_slice, find_words, stable_hash};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("phrase `{0}` not found in the text")]
    PhraseNotFound(String),
    #[error("component `{component}` not found in phrase `{phrase}`")]
    ComponentNotFound { component: String, phrase: String },
    #[error("no instruction template for task {0}")]
    TemplateMissing(Task),
    #[error("task {0} needs a question for its instruction")]
    QuestionMissing(Task),
    #[error("bad instruction template line: {0}")]
    BadTemplate(String),
    #[error("bad split ratios: {0}")]
    BadSplit(String),
    #[error(transparent)]
    Schema(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Instruct,
    Caption,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Vqa, Task::Instruct, Task::Caption];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Instruct => "instruct",
            Task::Caption => "caption",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vqa" => Ok(Task::Vqa),
            "instruct" | "instruction" => Ok(Task::Instruct),
            "caption" => Ok(Task::Caption),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub htype: HType,
    pub role: Role,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub id: String,
    pub image_id: String,
    pub task: Task,
    pub instruction: String,
    pub response: String,
    pub spans: Vec<Span>,
    pub is_hallucinated: bool,
    #[serde(default)]
    pub pattern_tags: Vec<Pattern>,
}

impl AnnotatedSample {
    pub fn validate(&self) -> Result<(), String> {
        let n = char_len(&self.response);
        for s in &self.spans {
            if !(s.start < s.end && s.end <= n) {
                return Err(format!("sample {}: span {}..{} outside response of {n} chars", self.id, s.start, s.end));
            }
        }
        for (i, a) in self.spans.iter().enumerate() {
            for b in &self.spans[i + 1..] {
                if a.htype == b.htype && a.start < b.end && b.start < a.end {
                    return Err(format!("sample {}: overlapping {} spans", self.id, a.htype));
                }
            }
        }
        if self.is_hallucinated == self.spans.is_empty() {
            return Err(format!("sample {}: is_hallucinated disagrees with spans", self.id));
        }
        Ok(())
    }
}

/// A word-level token with char offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabelSet {
    pub tokens: Vec<Token>,
    /// One 0/1 vector per type, each as long as `tokens`.
    pub labels: BTreeMap<HType, Vec<u8>>,
}

impl TokenLabelSet {
    /// 1 where any type is 1.
    pub fn any(&self) -> Vec<u8> {
        (0..self.tokens.len())
            .map(|i| u8::from(self.labels.values().any(|v| v[i] == 1)))
            .collect()
    }
}

/// Locates every component inside its phrase. Repeated component strings
/// (`dog near dog`) take successive occurrences.
pub fn align_spans(annotations: &CoarseAnnotations, text: &str) -> Result<Vec<Span>, AnnotateError> {
    let mut spans = Vec::new();
    for a in &annotations.entries {
        spans.extend(align_one(a, text)?);
    }
    Ok(spans)
}

fn align_one(a: &CoarseAnnotation, text: &str) -> Result<Vec<Span>, AnnotateError> {
    let base = text
        .find(&a.phrase)
        .filter(|_| !a.phrase.is_empty())
        .ok_or_else(|| AnnotateError::PhraseNotFound(a.phrase.clone()))?;
    let phrase = &text[base..base + a.phrase.len()];
    let mut used: Vec<Range<usize>> = Vec::new();
    let mut out = Vec::with_capacity(a.components.len());
    for (component, role) in &a.components {
        let free = |r: &Range<usize>| !used.iter().any(|u| u.start < r.end && r.start < u.end);
        let found = find_words(phrase, component)
            .into_iter()
            .find(free)
            .or_else(|| {
                phrase
                    .match_indices(component.as_str())
                    .map(|(i, s)| i..i + s.len())
                    .find(free)
            })
            .filter(|_| !component.is_empty())
            .ok_or_else(|| AnnotateError::ComponentNotFound {
                component: component.clone(),
                phrase: a.phrase.clone(),
            })?;
        used.push(found.clone());
        out.push(Span {
            start: byte_to_char(text, base + found.start),
            end: byte_to_char(text, base + found.end),
            htype: a.htype,
            role: *role,
        });
    }
    Ok(out)
}

/// Sorts spans and merges overlapping spans of the same type. The merged
/// span keeps the role of its earliest member.
pub fn merge_spans(mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort();
    spans.dedup();
    let mut by_type: BTreeMap<HType, Vec<Span>> = BTreeMap::new();
    for s in spans {
        let list = by_type.entry(s.htype).or_default();
        match list.last_mut() {
            Some(last) if s.start < last.end => last.end = last.end.max(s.end),
            _ => list.push(s),
        }
    }
    let mut out: Vec<Span> = by_type.into_values().flatten().collect();
    out.sort_by_key(|s| (s.start, s.end, s.htype, s.role));
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Whitespace-separated words with leading and trailing punctuation split
/// off one character at a time. Offsets are chars.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let end = i;
        let first_word = (start..end).find(|&k| is_word_char(chars[k]));
        let Some(lo) = first_word else {
            out.extend((start..end).map(|k| Token { text: chars[k].to_string(), start: k, end: k + 1 }));
            continue;
        };
        let hi = (start..end).rev().find(|&k| is_word_char(chars[k])).map_or(end, |k| k + 1);
        out.extend((start..lo).map(|k| Token { text: chars[k].to_string(), start: k, end: k + 1 }));
        out.push(Token {
            text: chars[lo..hi].iter().collect(),
            start: lo,
            end: hi,
        });
        out.extend((hi..end).map(|k| Token { text: chars[k].to_string(), start: k, end: k + 1 }));
    }
    out
}

/// A token is labelled with type `h` when it overlaps any span of type `h`.
pub fn label_tokens(sample: &AnnotatedSample) -> TokenLabelSet {
    let tokens = tokenize(&sample.response);
    let labels = HType::ALL
        .iter()
        .map(|&h| {
            let v = tokens
                .iter()
                .map(|t| {
                    u8::from(
                        sample
                            .spans
                            .iter()
                            .any(|s| s.htype == h && s.start < t.end && t.start < s.end),
                    )
                })
                .collect();
            (h, v)
        })
        .collect();
    TokenLabelSet { tokens, labels }
}

/// Instruction templates per task; `{Q}` stands for the question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplates(pub BTreeMap<Task, Vec<String>>);

pub const DEFAULT_INSTRUCTIONS: &str = include_str!("../templates/instructions.txt");

impl InstructionTemplates {
    pub fn parse(text: &str) -> Result<Self, AnnotateError> {
        let mut map: BTreeMap<Task, Vec<String>> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (task, tpl) = line
                .split_once(':')
                .ok_or_else(|| AnnotateError::BadTemplate(line.to_string()))?;
            let task: Task = task.parse().map_err(AnnotateError::BadTemplate)?;
            map.entry(task).or_default().push(tpl.trim().to_string());
        }
        Ok(InstructionTemplates(map))
    }

    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Picks a template for `id` deterministically and fills in the question.
    pub fn instruction(&self, task: Task, id: &str, question: Option<&str>) -> Result<String, AnnotateError> {
        let list = self
            .0
            .get(&task)
            .filter(|l| !l.is_empty())
            .ok_or(AnnotateError::TemplateMissing(task))?;
        let tpl = &list[(stable_hash(&[id]) % list.len() as u64) as usize];
        if !tpl.contains("{Q}") {
            return Ok(tpl.clone());
        }
        let q = question.ok_or(AnnotateError::QuestionMissing(task))?;
        Ok(tpl.replace("{Q}", q))
    }
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_INSTRUCTIONS).expect("bundled instruction templates parse")
    }
}

/// The coarse annotation of a VQA response that consists of the
/// hallucinated answer alone.
pub fn vqa_annotation(entry: &HqaEntry) -> CoarseAnnotations {
    let role = entry
        .components
        .parts()
        .into_iter()
        .find(|(s, _)| *s == entry.hallucinated_answer)
        .map_or_else(|| crate::taxonomy::Components::default_answer_role(entry.htype), |(_, r)| r);
    CoarseAnnotations {
        entries: vec![CoarseAnnotation {
            entry_id: entry.id.clone(),
            htype: entry.htype,
            pattern: entry.pattern,
            hallucinated_answer: entry.hallucinated_answer.clone(),
            phrase: entry.hallucinated_answer.clone(),
            components: vec![(entry.hallucinated_answer.clone(), role)],
        }],
    }
}

/// What a sample is built from.
#[derive(Debug, Clone, Copy)]
pub struct SampleSource<'a> {
    pub id: &'a str,
    pub image_id: &'a str,
    pub question: Option<&'a str>,
    pub response: &'a str,
    pub annotations: &'a CoarseAnnotations,
}

pub fn assemble_sample(
    task: Task,
    src: SampleSource<'_>,
    templates: &InstructionTemplates,
) -> Result<AnnotatedSample, AnnotateError> {
    let instruction = templates.instruction(task, src.id, src.question)?;
    let spans = merge_spans(align_spans(src.annotations, src.response)?);
    let mut tags: Vec<Pattern> = Vec::new();
    for a in &src.annotations.entries {
        if !tags.contains(&a.pattern) {
            tags.push(a.pattern);
        }
    }
    Ok(AnnotatedSample {
        id: src.id.to_string(),
        image_id: src.image_id.to_string(),
        task,
        instruction,
        response: src.response.to_string(),
        is_hallucinated: !spans.is_empty(),
        spans,
        pattern_tags: tags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(AnnotateError::BadSplit(format!(
                "{} / {} / {} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Partition sizes for `n` items: val and test are rounded, train takes
    /// the rest.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let val = ((n as f64 * self.val).round() as usize).min(n);
        let test = ((n as f64 * self.test).round() as usize).min(n - val);
        [n - val - test, val, test]
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("halloc.{split}.jsonl"))
}

/// Seeded partition of sample indices into train, val and test. Each part
/// keeps input order.
pub fn split_indices(n: usize, ratios: &SplitRatios, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = ratios.sizes(n);
    let mut parts = [idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Writes `halloc.{train,val,test}.jsonl` into `dir` and returns their paths.
pub fn emit_dataset(
    dir: &Path,
    samples: &[AnnotatedSample],
    ratios: &SplitRatios,
    seed: u64,
    header: &Header,
) -> Result<Vec<PathBuf>, AnnotateError> {
    ratios.validate()?;
    for (i, s) in samples.iter().enumerate() {
        s.validate()
            .map_err(|message| JsonlError::Schema { line: i + 1, message })?;
    }
    let mut paths = Vec::new();
    for (name, idx) in SPLIT_NAMES.iter().zip(split_indices(samples.len(), ratios, seed)) {
        let part: Vec<&AnnotatedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let mut h = header.clone();
        h.kind = format!("dataset.{name}");
        let path = split_path(dir, name);
        jsonl::write(&path, Some(&h), &part)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn parse_samples(text: &str) -> Result<Vec<AnnotatedSample>, AnnotateError> {
    Ok(jsonl::parse_checked(text, AnnotatedSample::validate)?.1)
}

/// Reads the given dataset files in order.
pub fn parse_dataset(paths: &[PathBuf]) -> Result<Vec<AnnotatedSample>, AnnotateError> {
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|source| JsonlError::Io {
            path: p.clone(),
            source,
        })?;
        out.extend(parse_samples(&text)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub count: usize,
    pub hallucinated_samples: usize,
    pub per_task: BTreeMap<Task, usize>,
    /// Samples with at least one span of the type.
    pub per_htype: BTreeMap<HType, usize>,
    pub per_pattern: BTreeMap<Pattern, usize>,
    pub mean_words: f64,
    pub mean_hallucinated_words: f64,
    pub hallucinated_word_fraction: f64,
}

pub fn dataset_stats(samples: &[AnnotatedSample]) -> StatsReport {
    let mut r = StatsReport {
        count: samples.len(),
        ..Default::default()
    };
    let (mut words, mut hallucinated) = (0usize, 0usize);
    for s in samples {
        *r.per_task.entry(s.task).or_default() += 1;
        let types: BTreeSet<HType> = s.spans.iter().map(|sp| sp.htype).collect();
        for h in types {
            *r.per_htype.entry(h).or_default() += 1;
        }
        for p in &s.pattern_tags {
            *r.per_pattern.entry(*p).or_default() += 1;
        }
        r.hallucinated_samples += usize::from(s.is_hallucinated);
        let labels = label_tokens(s);
        words += labels.tokens.len();
        hallucinated += labels.any().iter().filter(|&&x| x == 1).count();
    }
    if !samples.is_empty() {
        r.mean_words = words as f64 / samples.len() as f64;
        r.mean_hallucinated_words = hallucinated as f64 / samples.len() as f64;
    }
    if words > 0 {
        r.hallucinated_word_fraction = hallucinated as f64 / words as f64;
    }
    r
}

/// Text of a span, for display.
pub fn span_text<'a>(sample: &'a AnnotatedSample, span: &Span) -> Option<&'a str> {
    char_slice(&sample.response, span.range())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Components;
    use proptest::prelude::*;

    fn ann(htype: HType, phrase: &str, comps: &[(&str, Role)]) -> CoarseAnnotation {
        CoarseAnnotation {
            entry_id: "e".into(),
            htype,
            pattern: Pattern::Cab,
            hallucinated_answer: comps[0].0.into(),
            phrase: phrase.into(),
            components: comps.iter().map(|(s, r)| (s.to_string(), *r)).collect(),
        }
    }

    fn sample(response: &str, spans: Vec<Span>) -> AnnotatedSample {
        AnnotatedSample {
            id: "s".into(),
            image_id: "1".into(),
            task: Task::Caption,
            instruction: "Describe the image in detail.".into(),
            response: response.into(),
            is_hallucinated: !spans.is_empty(),
            spans,
            pattern_tags: vec![],
        }
    }

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn glass_shelf_alignment() {
        let text = "There is a glass shelf by the door.";
        let a = CoarseAnnotations {
            entries: vec![ann(HType::Attribute, "a glass shelf", &[("glass", Role::Attr), ("shelf", Role::Obj)])],
        };
        let spans = align_spans(&a, text).unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(char_slice(text, spans[0].range()), Some("glass"));
        assert_eq!(char_slice(text, spans[1].range()), Some("shelf"));
        assert_eq!((spans[0].start, spans[0].end), (11, 16));

        let bad = CoarseAnnotations {
            entries: vec![ann(HType::Attribute, "a glass shelf", &[("wooden", Role::Attr)])],
        };
        assert!(matches!(align_spans(&bad, text), Err(AnnotateError::ComponentNotFound { .. })));
        let lost = CoarseAnnotations {
            entries: vec![ann(HType::Object, "a cat", &[("cat", Role::Obj)])],
        };
        assert!(matches!(align_spans(&lost, text), Err(AnnotateError::PhraseNotFound(_))));
        assert!(align_spans(&CoarseAnnotations::default(), text).unwrap().is_empty());
    }

    #[test]
    fn repeated_components_take_successive_occurrences() {
        let text = "A dog near a dog.";
        let a = CoarseAnnotations {
            entries: vec![ann(
                HType::Relationship,
                "A dog near a dog",
                &[("dog", Role::Obj1), ("near", Role::Rel), ("dog", Role::Obj2)],
            )],
        };
        let spans = align_spans(&a, text).unwrap();
        assert_eq!(spans.iter().map(|s| s.start).collect::<Vec<_>>(), vec![2, 6, 13]);
    }

    #[test]
    fn unicode_offsets_are_chars() {
        let text = "Un café très chaud.";
        let a = CoarseAnnotations {
            entries: vec![ann(HType::Attribute, "café très chaud", &[("chaud", Role::Attr), ("café", Role::Obj)])],
        };
        let spans = align_spans(&a, text).unwrap();
        assert_eq!(char_slice(text, spans[0].range()), Some("chaud"));
        assert_eq!((spans[1].start, spans[1].end), (3, 7));
    }

    #[test]
    fn tokenizer() {
        let t = tokenize("A glass shelf.");
        assert_eq!(texts(&t), ["A", "glass", "shelf", "."]);
        let offs: Vec<_> = t.iter().map(|t| (t.start, t.end)).collect();
        assert_eq!(offs, [(0, 1), (2, 7), (8, 13), (13, 14)]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("hi"), vec![Token { text: "hi".into(), start: 0, end: 2 }]);
        assert_eq!(texts(&tokenize("(don't!) ...")), ["(", "don't", "!", ")", ".", ".", "."]);
    }

    #[test]
    fn labels_follow_overlap() {
        let s = sample(
            "A glass shelf.",
            vec![
                Span { start: 2, end: 7, htype: HType::Attribute, role: Role::Attr },
                Span { start: 8, end: 13, htype: HType::Attribute, role: Role::Obj },
            ],
        );
        let l = label_tokens(&s);
        assert_eq!(l.labels[&HType::Attribute], vec![0, 1, 1, 0]);
        assert_eq!(l.labels[&HType::Object], vec![0; 4]);

        let s = sample(
            "The window is above the shelf",
            vec![
                Span { start: 4, end: 10, htype: HType::Relationship, role: Role::Obj1 },
                Span { start: 14, end: 19, htype: HType::Relationship, role: Role::Rel },
                Span { start: 24, end: 29, htype: HType::Relationship, role: Role::Obj2 },
            ],
        );
        assert_eq!(label_tokens(&s).labels[&HType::Relationship], vec![0, 1, 0, 1, 0, 1]);

        let clean = label_tokens(&sample("Nothing here.", vec![]));
        assert!(clean.labels.values().all(|v| v.iter().all(|&x| x == 0)));
    }

    fn entry() -> HqaEntry {
        HqaEntry {
            id: "q1".into(),
            image_id: "1".into(),
            question: "What color is the shelf?".into(),
            truthful_answer: "brown".into(),
            hallucinated_answer: "white".into(),
            htype: HType::Attribute,
            pattern: Pattern::LangPrior,
            components: Components::Attribute { attr: "white".into(), obj: "shelf".into() },
        }
    }

    #[test]
    fn samples_per_task() {
        let t = InstructionTemplates::default();
        let e = entry();
        let ann = vqa_annotation(&e);
        let src = SampleSource {
            id: "q1",
            image_id: "1",
            question: Some(&e.question),
            response: "white",
            annotations: &ann,
        };
        let vqa = assemble_sample(Task::Vqa, src, &t).unwrap();
        assert_eq!(vqa.spans, vec![Span { start: 0, end: 5, htype: HType::Attribute, role: Role::Attr }]);
        assert!(vqa.instruction.contains("What color is the shelf?"));
        assert_eq!(vqa.pattern_tags, vec![Pattern::LangPrior]);

        let empty = CoarseAnnotations::default();
        let cap = assemble_sample(
            Task::Caption,
            SampleSource { id: "c", image_id: "1", question: None, response: "A shelf.", annotations: &empty },
            &t,
        )
        .unwrap();
        assert!(!cap.is_hallucinated && cap.spans.is_empty());

        let inst_ann = CoarseAnnotations {
            entries: vec![ann_from("The shelf is brown", &[("brown", Role::Attr), ("shelf", Role::Obj)])],
        };
        let inst = assemble_sample(
            Task::Instruct,
            SampleSource {
                id: "i",
                image_id: "1",
                question: Some("What color is the shelf?"),
                response: "The shelf is brown.",
                annotations: &inst_ann,
            },
            &t,
        )
        .unwrap();
        assert_eq!(inst.spans.len(), 2);
        assert!(inst.spans.iter().all(|s| s.htype == HType::Attribute));

        let no_caption = InstructionTemplates::parse("vqa: {Q}").unwrap();
        assert!(matches!(
            assemble_sample(Task::Caption, SampleSource { id: "c", image_id: "1", question: None, response: "x", annotations: &empty }, &no_caption),
            Err(AnnotateError::TemplateMissing(Task::Caption))
        ));
    }

    fn ann_from(phrase: &str, comps: &[(&str, Role)]) -> CoarseAnnotation {
        ann(HType::Attribute, phrase, comps)
    }

    #[test]
    fn same_type_overlaps_merge() {
        let a = Span { start: 0, end: 5, htype: HType::Object, role: Role::Obj };
        let b = Span { start: 3, end: 8, htype: HType::Object, role: Role::Obj };
        let c = Span { start: 3, end: 8, htype: HType::Relationship, role: Role::Obj1 };
        let m = merge_spans(vec![b, c, a]);
        assert_eq!(m, vec![Span { start: 0, end: 8, htype: HType::Object, role: Role::Obj }, c]);
    }

    #[test]
    fn split_sizes() {
        let r = SplitRatios::default();
        let [a, b, c] = r.sizes(155_953);
        assert_eq!(a + b + c, 155_953);
        for (got, want) in [(a, 0.8), (b, 0.1), (c, 0.1)] {
            assert!((got as f64 - want * 155_953.0).abs() <= 1.0);
        }
        for seed in [0, 1, 99] {
            let parts = split_indices(1000, &r, seed);
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..1000).collect::<Vec<_>>());
        }
        assert_ne!(split_indices(50, &r, 1), split_indices(50, &r, 2));
        assert!(SplitRatios { train: 0.5, val: 0.1, test: 0.1 }.validate().is_err());
    }

    #[test]
    fn corrupt_lines_name_their_number() {
        let good = serde_json::to_string(&sample("x", vec![])).unwrap();
        let text = format!("{good}\n{{\"id\": 3\n");
        match parse_samples(&text) {
            Err(AnnotateError::Schema(JsonlError::Schema { line, .. })) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let lying = serde_json::to_string(&AnnotatedSample { is_hallucinated: true, ..sample("x", vec![]) }).unwrap();
        match parse_samples(&format!("{good}\n\n{lying}\n")) {
            Err(AnnotateError::Schema(JsonlError::Schema { line, .. })) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_arithmetic() {
        let a = sample("a b c d", vec![Span { start: 0, end: 1, htype: HType::Object, role: Role::Obj }]);
        let b = sample("e f g h", vec![]);
        let r = dataset_stats(&[a, b]);
        assert_eq!(r.mean_words, 4.0);
        assert_eq!(r.mean_hallucinated_words, 0.5);
        assert_eq!(r.hallucinated_word_fraction, 0.125);
        assert_eq!(r.per_htype[&HType::Object], 1);
        let e = dataset_stats(&[]);
        assert_eq!((e.count, e.mean_words, e.hallucinated_word_fraction), (0, 0.0, 0.0));
    }

    fn arb_sample() -> impl Strategy<Value = AnnotatedSample> {
        let words = prop::collection::vec("[a-zé]{1,6}[.,!]?", 1..12);
        (words, prop::collection::vec((0usize..12, 1usize..4, 0usize..4, prop::bool::ANY), 0..5), prop::sample::select(Task::ALL.to_vec()))
            .prop_map(|(words, raw, task)| {
                let response = words.join(" ");
                let n = char_len(&response);
                let spans = merge_spans(
                    raw.into_iter()
                        .filter_map(|(s, len, h, _)| {
                            let start = s.min(n.saturating_sub(1));
                            let end = (start + len).min(n);
                            let on_word = response.chars().nth(start).is_some_and(|c| !c.is_whitespace());
                            (start < end && on_word).then_some(Span { start, end, htype: HType::ALL[h], role: Role::Obj })
                        })
                        .collect(),
                );
                AnnotatedSample {
                    id: response.clone(),
                    image_id: "img".into(),
                    task,
                    instruction: "Describe.".into(),
                    is_hallucinated: !spans.is_empty(),
                    spans,
                    response,
                    pattern_tags: vec![Pattern::Decoy],
                }
            })
    }

    proptest! {
        #[test]
        fn tokens_reconstruct_the_text(text in "[ a-zA-Z0-9.,;!?'()é-]{0,40}") {
            let tokens = tokenize(&text);
            let chars: Vec<char> = text.chars().collect();
            let mut rebuilt = String::new();
            let mut at = 0;
            for t in &tokens {
                prop_assert!(t.start >= at && t.start < t.end);
                prop_assert!(chars[at..t.start].iter().all(|c| c.is_whitespace()));
                rebuilt.extend(&chars[at..t.start]);
                prop_assert_eq!(chars[t.start..t.end].iter().collect::<String>(), t.text.clone());
                rebuilt.push_str(&t.text);
                at = t.end;
            }
            prop_assert!(chars[at..].iter().all(|c| c.is_whitespace()));
            rebuilt.extend(&chars[at..]);
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn emit_parse_round_trip(samples in prop::collection::vec(arb_sample(), 0..20), seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let paths = emit_dataset(dir.path(), &samples, &SplitRatios::default(), seed, &Header::new("dataset", Some(seed))).unwrap();
            let mut back = parse_dataset(&paths).unwrap();
            let mut want = samples.clone();
            back.sort_by(|a, b| a.id.cmp(&b.id).then(a.spans.cmp(&b.spans)));
            want.sort_by(|a, b| a.id.cmp(&b.id).then(a.spans.cmp(&b.spans)));
            prop_assert_eq!(back, want);
        }

        #[test]
        fn every_span_covers_a_token(s in arb_sample()) {
            let l = label_tokens(&s);
            for sp in &s.spans {
                prop_assert!(l.tokens.iter().any(|t| t.start < sp.end && sp.start < t.end));
            }
            for v in l.labels.values() {
                prop_assert_eq!(v.len(), l.tokens.len());
            }
        }
    }
}
