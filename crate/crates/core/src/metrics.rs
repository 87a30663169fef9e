//! Token-level detection metrics and baselines.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{label_tokens, tokenize, AnnotatedSample};
use crate::jsonl::{self, Header, JsonlError};
use crate::scene::SceneGraph;
use crate::taxonomy::HType;
use crate::text::canonicalize;

pub const DEFAULT_GRID_STEP: f64 = 0.01;
pub const DEFAULT_LOGP_CAP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("grid step {0} must lie in (0, 0.5]")]
    BadStep(f64),
    #[error("sample {sample_id}, token {index}: log probability {value} is positive")]
    PositiveLogProb { sample_id: String, index: usize, value: f64 },
    #[error("no scene graph for image {0}")]
    MissingGraph(String),
    #[error(transparent)]
    Schema(#[from] JsonlError),
}

/// A prediction channel: one per type plus the any-type label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Object,
    Attribute,
    Relationship,
    Scene,
    Total,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Object,
        Channel::Attribute,
        Channel::Relationship,
        Channel::Scene,
        Channel::Total,
    ];

    pub fn htype(self) -> Option<HType> {
        match self {
            Channel::Object => Some(HType::Object),
            Channel::Attribute => Some(HType::Attribute),
            Channel::Relationship => Some(HType::Relationship),
            Channel::Scene => Some(HType::Scene),
            Channel::Total => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self.htype() {
            Some(h) => h.as_str(),
            None => "total",
        }
    }
}

impl From<HType> for Channel {
    fn from(h: HType) -> Self {
        match h {
            HType::Object => Channel::Object,
            HType::Attribute => Channel::Attribute,
            HType::Relationship => Channel::Relationship,
            HType::Scene => Channel::Scene,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("total") {
            return Ok(Channel::Total);
        }
        s.parse::<HType>().map(Channel::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Detector,
    LogProb,
    Constant,
    /// Rule-based detector such as CHAIR.
    Rule,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub probs: BTreeMap<Channel, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub provenance: Provenance,
    pub samples: BTreeMap<String, BTreeMap<Channel, Vec<f64>>>,
}

impl PredictionSet {
    pub fn from_records(provenance: Provenance, records: Vec<PredictionRecord>) -> Result<Self, MetricsError> {
        let mut samples = BTreeMap::new();
        for r in records {
            if samples.insert(r.sample_id.clone(), r.probs).is_some() {
                return Err(MetricsError::Alignment(format!("duplicate sample id `{}`", r.sample_id)));
            }
        }
        Ok(PredictionSet { provenance, samples })
    }

    pub fn records(&self) -> Vec<PredictionRecord> {
        self.samples
            .iter()
            .map(|(id, probs)| PredictionRecord {
                sample_id: id.clone(),
                probs: probs.clone(),
            })
            .collect()
    }

    /// Channels present in every sample.
    pub fn channels(&self) -> BTreeSet<Channel> {
        let mut it = self.samples.values();
        let Some(first) = it.next() else {
            return BTreeSet::new();
        };
        let mut set: BTreeSet<Channel> = first.keys().copied().collect();
        for p in it {
            set.retain(|c| p.contains_key(c));
        }
        set
    }

    /// Every gold sample predicted, with one probability per token.
    fn check_against(&self, gold: &[AnnotatedSample]) -> Result<Vec<usize>, MetricsError> {
        gold.iter()
            .map(|s| {
                let p = self
                    .samples
                    .get(&s.id)
                    .ok_or_else(|| MetricsError::Alignment(format!("no predictions for sample `{}`", s.id)))?;
                let n = tokenize(&s.response).len();
                for (c, v) in p {
                    if v.len() != n {
                        return Err(MetricsError::Alignment(format!(
                            "sample `{}`: {} {c} probabilities for {n} tokens",
                            s.id,
                            v.len()
                        )));
                    }
                }
                Ok(n)
            })
            .collect()
    }
}

fn check_probs(r: &PredictionRecord) -> Result<(), String> {
    for (c, v) in &r.probs {
        if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(format!("sample {}: {c} probability {x} outside [0, 1]", r.sample_id));
        }
    }
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<PredictionSet, MetricsError> {
    let (header, records) = jsonl::parse_checked(text, check_probs)?;
    let provenance = match header.as_ref().map(|h| h.kind.as_str()) {
        Some("predictions.logprob") => Provenance::LogProb,
        Some("predictions.constant") => Provenance::Constant,
        Some("predictions.rule") => Provenance::Rule,
        _ => Provenance::Detector,
    };
    PredictionSet::from_records(provenance, records)
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions(&text)
}

pub fn write_predictions(path: &Path, header: &Header, preds: &PredictionSet) -> Result<(), MetricsError> {
    let mut h = header.clone();
    h.kind = match preds.provenance {
        Provenance::Detector => "predictions",
        Provenance::LogProb => "predictions.logprob",
        Provenance::Constant => "predictions.constant",
        Provenance::Rule => "predictions.rule",
    }
    .into();
    jsonl::write(path, Some(&h), &preds.records())?;
    Ok(())
}

/// Gold 0/1 labels per channel; `Total` is the OR over the four types.
pub fn gold_labels(sample: &AnnotatedSample) -> BTreeMap<Channel, Vec<u8>> {
    let l = label_tokens(sample);
    let total = l.any();
    let mut out: BTreeMap<Channel, Vec<u8>> = l.labels.into_iter().map(|(h, v)| (h.into(), v)).collect();
    out.insert(Channel::Total, total);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1, tp, fp, fn_ }
    }
}

pub type ThresholdSet = BTreeMap<Channel, f64>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rows: BTreeMap<Channel, Prf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub thresholds: ThresholdSet,
}

impl DetectionReport {
    /// Fixed-width text table with two-decimal values.
    pub fn table(&self, title: &str) -> String {
        let mut s = format!("{title}\n{:<14}{:>8}{:>8}{:>8}{:>10}{:>10}{:>10}\n", "type", "P", "R", "F1", "TP", "FP", "FN");
        for (c, r) in &self.rows {
            let _ = writeln!(
                s,
                "{:<14}{:>8.2}{:>8.2}{:>8.2}{:>10}{:>10}{:>10}",
                c.as_str(),
                r.precision,
                r.recall,
                r.f1,
                r.tp,
                r.fp,
                r.fn_
            );
        }
        s
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn count(pred: impl Iterator<Item = bool>, gold: &[u8]) -> Counts {
    let mut c = Counts::default();
    for (p, &g) in pred.zip(gold) {
        match (p, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

fn threshold(thresholds: &ThresholdSet, c: Channel) -> f64 {
    thresholds.get(&c).copied().unwrap_or(0.5)
}

/// Precision, recall and F1 per predicted channel. A token is positive when
/// its probability is at least the channel threshold (0.5 when unset). When
/// all four types are predicted but `total` is not, the total row uses the
/// OR of the per-type decisions.
pub fn token_prf(
    preds: &PredictionSet,
    gold: &[AnnotatedSample],
    thresholds: &ThresholdSet,
) -> Result<DetectionReport, MetricsError> {
    preds.check_against(gold)?;
    let channels = preds.channels();
    let derive_total = !channels.contains(&Channel::Total) && HType::ALL.iter().all(|h| channels.contains(&(*h).into()));
    let per_sample: Vec<BTreeMap<Channel, Counts>> = gold
        .par_iter()
        .map(|s| {
            let g = gold_labels(s);
            let p = &preds.samples[&s.id];
            let mut out = BTreeMap::new();
            for &c in &channels {
                let t = threshold(thresholds, c);
                out.insert(c, count(p[&c].iter().map(|&x| x >= t), &g[&c]));
            }
            if derive_total {
                let n = g[&Channel::Total].len();
                let any = (0..n).map(|i| {
                    HType::ALL.iter().any(|&h| {
                        let c = Channel::from(h);
                        p[&c][i] >= threshold(thresholds, c)
                    })
                });
                out.insert(Channel::Total, count(any, &g[&Channel::Total]));
            }
            out
        })
        .collect();
    let mut totals: BTreeMap<Channel, Counts> = BTreeMap::new();
    for m in per_sample {
        for (c, k) in m {
            let e = totals.entry(c).or_default();
            *e = *e + k;
        }
    }
    Ok(DetectionReport {
        rows: totals.into_iter().map(|(c, k)| (c, Prf::from_counts(k.tp, k.fp, k.fn_))).collect(),
        thresholds: channels.iter().map(|&c| (c, threshold(thresholds, c))).collect(),
    })
}

/// Threshold grid `{0, step, 2 step, ..., 1}`. When `1 / step` is an
/// integer `n` the points are computed as `k / n`.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>, MetricsError> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(MetricsError::BadStep(step));
    }
    let inv = 1.0 / step;
    let n = inv.round();
    if (inv - n).abs() < 1e-9 {
        let n = n as u32;
        return Ok((0..=n).map(|k| f64::from(k) / f64::from(n)).collect());
    }
    let mut grid: Vec<f64> = (0..=inv.floor() as u32).map(|k| f64::from(k) * step).collect();
    if grid.last().is_some_and(|&t| t < 1.0) {
        grid.push(1.0);
    }
    Ok(grid)
}

/// Per channel, the grid threshold with the highest F1 on `val_gold`; ties
/// go to the smallest threshold.
pub fn tune_thresholds(
    preds: &PredictionSet,
    val_gold: &[AnnotatedSample],
    grid_step: f64,
) -> Result<ThresholdSet, MetricsError> {
    let grid = threshold_grid(grid_step)?;
    preds.check_against(val_gold)?;
    let mut out = ThresholdSet::new();
    for c in preds.channels() {
        let mut pairs: Vec<(f64, bool)> = Vec::new();
        for s in val_gold {
            let g = gold_labels(s);
            pairs.extend(preds.samples[&s.id][&c].iter().zip(&g[&c]).map(|(&p, &y)| (p, y == 1)));
        }
        let f1s: Vec<f64> = grid
            .par_iter()
            .map(|&t| {
                let k = count(pairs.iter().map(|(p, _)| *p >= t), &pairs.iter().map(|(_, y)| u8::from(*y)).collect::<Vec<_>>());
                Prf::from_counts(k.tp, k.fp, k.fn_).f1
            })
            .collect();
        let mut best = 0;
        for (i, f) in f1s.iter().enumerate() {
            if *f > f1s[best] {
                best = i;
            }
        }
        out.insert(c, grid[best]);
    }
    Ok(out)
}

/// A prediction set giving every token of every channel the same probability.
pub fn constant_predictions(gold: &[AnnotatedSample], value: f64) -> PredictionSet {
    let samples = gold
        .iter()
        .map(|s| {
            let n = tokenize(&s.response).len();
            (s.id.clone(), Channel::ALL.iter().map(|&c| (c, vec![value; n])).collect())
        })
        .collect();
    PredictionSet {
        provenance: Provenance::Constant,
        samples,
    }
}

/// The baseline that labels every token as hallucinated.
pub fn always_one(gold: &[AnnotatedSample]) -> DetectionReport {
    let mut pos: BTreeMap<Channel, u64> = Channel::ALL.iter().map(|&c| (c, 0)).collect();
    let mut n = 0u64;
    for s in gold {
        let g = gold_labels(s);
        n += g[&Channel::Total].len() as u64;
        for (c, v) in g {
            *pos.get_mut(&c).expect("channel") += v.iter().filter(|&&x| x == 1).count() as u64;
        }
    }
    DetectionReport {
        rows: pos.into_iter().map(|(c, p)| (c, Prf::from_counts(p, n - p, 0))).collect(),
        thresholds: ThresholdSet::new(),
    }
}

pub const DEFAULT_SYNONYMS: &str = include_str!("../templates/chair_synonyms.txt");

/// Object vocabulary for CHAIR: surface form -> canonical object name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChairVocab {
    words: HashMap<String, String>,
    max_words: usize,
}

fn singular(word: &str) -> Option<String> {
    if let Some(stem) = word.strip_suffix("ies").filter(|s| s.len() > 1) {
        return Some(format!("{stem}y"));
    }
    for suffix in ["ches", "shes", "sses", "xes"] {
        if word.ends_with(suffix) {
            return Some(word[..word.len() - 2].to_string());
        }
    }
    word.strip_suffix('s')
        .filter(|s| s.len() > 1 && !s.ends_with('s'))
        .map(str::to_string)
}

impl ChairVocab {
    /// Vocabulary from object names plus `canonical: syn, syn` lines.
    pub fn new<'a, I: IntoIterator<Item = &'a str>>(names: I, synonyms: &str) -> Self {
        let mut v = ChairVocab::default();
        for n in names {
            let n = canonicalize(n);
            v.add(&n, &n);
        }
        for line in synonyms.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((canon, syns)) = line.split_once(':') else { continue };
            let canon = canonicalize(canon);
            v.add(&canon, &canon);
            for s in syns.split(',') {
                v.add(&canonicalize(s), &canon);
            }
        }
        v
    }

    pub fn from_graphs(graphs: &[SceneGraph], synonyms: &str) -> Self {
        let names: BTreeSet<&str> = graphs.iter().flat_map(|g| g.object_names()).collect();
        Self::new(names, synonyms)
    }

    fn add(&mut self, surface: &str, canon: &str) {
        if surface.is_empty() {
            return;
        }
        self.max_words = self.max_words.max(surface.split(' ').count());
        self.words.entry(surface.to_string()).or_insert_with(|| canon.to_string());
    }

    /// Canonical object name of a phrase, trying the singular of its last word.
    pub fn lookup(&self, phrase: &str) -> Option<&str> {
        if let Some(c) = self.words.get(phrase) {
            return Some(c);
        }
        let (head, last) = match phrase.rsplit_once(' ') {
            Some((h, l)) => (Some(h), l),
            None => (None, phrase),
        };
        let s = singular(last)?;
        let key = head.map_or(s.clone(), |h| format!("{h} {s}"));
        self.words.get(&key).map(String::as_str)
    }

    /// Canonical form of a graph object name.
    pub fn normalize(&self, name: &str) -> String {
        let n = canonicalize(name);
        self.lookup(&n).map_or(n, str::to_string)
    }
}

/// Object-channel CHAIR scores: 1 on tokens of mentioned objects absent from
/// the graph, 0 elsewhere. Longest multi-word match wins.
pub fn chair_detect(sample: &AnnotatedSample, g: &SceneGraph, vocab: &ChairVocab) -> Vec<f64> {
    let tokens = tokenize(&sample.response);
    let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let present: BTreeSet<String> = g.object_names().into_iter().map(|n| vocab.normalize(n)).collect();
    let mut out = vec![0.0; tokens.len()];
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = None;
        for len in (1..=vocab.max_words.max(1)).rev() {
            if i + len > tokens.len() {
                continue;
            }
            let phrase = lower[i..i + len].join(" ");
            if let Some(c) = vocab.lookup(&phrase) {
                matched = Some((len, c));
                break;
            }
        }
        match matched {
            Some((len, canon)) => {
                if !present.contains(canon) {
                    out[i..i + len].fill(1.0);
                }
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

pub fn chair_predictions(
    samples: &[AnnotatedSample],
    graphs: &BTreeMap<String, SceneGraph>,
    vocab: &ChairVocab,
) -> Result<PredictionSet, MetricsError> {
    let mut out = BTreeMap::new();
    for s in samples {
        let g = graphs
            .get(&s.image_id)
            .ok_or_else(|| MetricsError::MissingGraph(s.image_id.clone()))?;
        out.insert(s.id.clone(), BTreeMap::from([(Channel::Object, chair_detect(s, g, vocab))]));
    }
    Ok(PredictionSet {
        provenance: Provenance::Rule,
        samples: out,
    })
}

/// One line of `logprobs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbRecord {
    pub sample_id: String,
    pub logps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogProbMode {
    #[default]
    OneMinusP,
    NegLogNorm,
}

impl FromStr for LogProbMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one-minus-p" => Ok(LogProbMode::OneMinusP),
            "neg-log-norm" => Ok(LogProbMode::NegLogNorm),
            other => Err(format!("unknown log-probability mode `{other}`")),
        }
    }
}

/// Turns token log probabilities into `total` channel scores.
pub fn logprob_to_predictions(
    records: &[LogProbRecord],
    mode: LogProbMode,
    cap: f64,
) -> Result<PredictionSet, MetricsError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut scores = Vec::with_capacity(r.logps.len());
        for (index, &lp) in r.logps.iter().enumerate() {
            if lp.is_nan() {
                return Err(MetricsError::Alignment(format!("sample {}: NaN log probability", r.sample_id)));
            }
            if lp > 0.0 {
                return Err(MetricsError::PositiveLogProb {
                    sample_id: r.sample_id.clone(),
                    index,
                    value: lp,
                });
            }
            scores.push(match mode {
                LogProbMode::OneMinusP => 1.0 - lp.exp(),
                LogProbMode::NegLogNorm => (-lp / cap).min(1.0),
            });
        }
        out.push(PredictionRecord {
            sample_id: r.sample_id.clone(),
            probs: BTreeMap::from([(Channel::Total, scores)]),
        });
    }
    PredictionSet::from_records(Provenance::LogProb, out)
}

pub fn read_logprobs(path: &Path) -> Result<Vec<LogProbRecord>, MetricsError> {
    Ok(jsonl::read(path)?.1)
}
