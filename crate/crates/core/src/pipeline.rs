//! Corpus-level drivers: forge an HQA database from questions, then build
//! VQA, Instruct and Caption samples by injecting its entries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    assemble_sample, vqa_annotation, AnnotateError, AnnotatedSample, InstructionTemplates, SampleSource, Task,
};
use crate::forge::{assemble_entry, craft_answer, decoy_answer, ForgeError, HqaEntry};
use crate::gateway::mock::{MockBackend, MockWorld, RewriteTemplates};
use crate::gateway::{Bindings, Gateway, GatewayError, RetryPolicy, TemplateSet};
use crate::injector::{run_hqa_injection, CoarseAnnotations, InjectError, InjectionLogRecord};
use crate::jsonl::{self, JsonlError};
use crate::miner::{
    cab_candidates, prior_candidates, AttributeCategories, CooccurrenceTable, MinerConfig, MinerError, ProbeQuestion,
    YesNo,
};
use crate::scene::{QaRecord, SceneError, SceneGraph};
use crate::taxonomy::{Components, HType, Pattern, Role};
use crate::text::stable_hash;

/// Upper bound on injections into one caption.
pub const MAX_INJECTIONS: usize = 6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("injection range {0}..={1} must lie within 0..={MAX_INJECTIONS}")]
    BadRange(usize, usize),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// A paragraph to inject into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceText {
    pub id: String,
    pub image_id: String,
    pub text: String,
}

pub fn load_sources(path: &Path) -> Result<Vec<SourceText>, JsonlError> {
    Ok(jsonl::read(path)?.1)
}

/// Mock gateway answering from the given graphs.
pub fn mock_gateway<I>(graphs: I, seed: u64, templates: TemplateSet, max_in_flight: usize) -> Gateway
where
    I: IntoIterator<Item = SceneGraph>,
{
    let backend = MockBackend::new(seed, MockWorld::with_graphs(graphs));
    Gateway::new(Box::new(backend), templates, max_in_flight, RetryPolicy::none())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeConfig {
    /// Prior candidates kept per prior class.
    pub k: usize,
    pub miner: MinerConfig,
    pub types: BTreeSet<HType>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            k: 3,
            miner: MinerConfig::default(),
            types: HType::ALL.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeOutcome {
    Forged,
    Skipped,
}

/// One line of `forge_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeLogRecord {
    pub question_id: String,
    pub outcome: ForgeOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Pattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Whether a per-question failure only skips that question.
fn skippable(e: &ForgeError) -> bool {
    match e {
        ForgeError::Gateway(g) => matches!(g, GatewayError::BadResponse { .. }),
        ForgeError::Jsonl(_) | ForgeError::NoVerifiers => false,
        _ => true,
    }
}

/// Decoy first; otherwise concept-association and prior candidates, crafted
/// into one answer. Entries whose claim the graph supports are dropped.
pub fn forge_question(
    q: &QaRecord,
    g: &SceneGraph,
    table: &CooccurrenceTable,
    categories: &AttributeCategories,
    cfg: &ForgeConfig,
    llm: &Gateway,
) -> Result<HqaEntry, ForgeError> {
    let chosen = match decoy_answer(q) {
        Some(d) => d,
        None => {
            let mut cands = cab_candidates(q, g, categories).map_err(miner_to_forge)?;
            for c in prior_candidates(q, table, g, cfg.k, &cfg.miner).map_err(miner_to_forge)? {
                if !cands.iter().any(|x| x.answer == c.answer) {
                    cands.push(c);
                }
            }
            craft_answer(q, &cands, llm)?
        }
    };
    let entry = assemble_entry(q, g, &chosen, llm)?;
    if g.supports(&entry.components) {
        return Err(ForgeError::AnnotationRejected(format!(
            "`{}` holds in image {}",
            entry.components.surface(),
            g.image_id
        )));
    }
    Ok(entry)
}

fn miner_to_forge(e: MinerError) -> ForgeError {
    match e {
        MinerError::Scene(s) => ForgeError::Scene(s),
        other => ForgeError::AnnotationRejected(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeRun {
    pub entries: Vec<HqaEntry>,
    pub log: Vec<ForgeLogRecord>,
}

/// Forges entries for every question of a selected type, in question order.
pub fn forge_corpus(
    graphs: &[SceneGraph],
    questions: &[QaRecord],
    table: &CooccurrenceTable,
    cfg: &ForgeConfig,
    llm: &Gateway,
) -> Result<ForgeRun, PipelineError> {
    let by_id: HashMap<&str, &SceneGraph> = graphs.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let categories = AttributeCategories::default();
    let results: Vec<Result<(Option<HqaEntry>, ForgeLogRecord), ForgeError>> = questions
        .par_iter()
        .filter(|q| cfg.types.contains(&q.qtype))
        .map(|q| {
            let skipped = |reason: String| ForgeLogRecord {
                question_id: q.id.clone(),
                outcome: ForgeOutcome::Skipped,
                pattern: None,
                reason: Some(reason),
            };
            let Some(g) = by_id.get(q.image_id.as_str()) else {
                return Ok((None, skipped(format!("no scene graph for image {}", q.image_id))));
            };
            match forge_question(q, g, table, &categories, cfg, llm) {
                Ok(e) => {
                    let rec = ForgeLogRecord {
                        question_id: q.id.clone(),
                        outcome: ForgeOutcome::Forged,
                        pattern: Some(e.pattern),
                        reason: None,
                    };
                    Ok((Some(e), rec))
                }
                Err(e) if skippable(&e) => Ok((None, skipped(e.to_string()))),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut run = ForgeRun {
        entries: Vec::new(),
        log: Vec::new(),
    };
    for r in results {
        let (entry, rec) = r?;
        run.entries.extend(entry);
        run.log.push(rec);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleConfig {
    pub tasks: BTreeSet<Task>,
    /// Injections per caption.
    pub n_range: RangeInclusive<usize>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            tasks: Task::ALL.into_iter().collect(),
            n_range: 0..=MAX_INJECTIONS,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let (lo, hi) = (*self.n_range.start(), *self.n_range.end());
        if lo > hi || hi > MAX_INJECTIONS {
            return Err(PipelineError::BadRange(lo, hi));
        }
        Ok(())
    }

    fn rng(&self, task: Task, id: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&[task.as_str(), id]))
    }

    /// Injection count for a sample that can hold at most `cap`.
    fn draw(&self, rng: &mut ChaCha8Rng, cap: usize) -> usize {
        let lo = (*self.n_range.start()).min(cap);
        let hi = (*self.n_range.end()).min(cap);
        rng.random_range(lo..=hi)
    }
}

/// A sample together with the coarse annotations it was aligned from.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltSample {
    pub sample: AnnotatedSample,
    pub annotations: CoarseAnnotations,
}

/// One line of `injection_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphLog {
    pub sample_id: String,
    pub requested: usize,
    pub injected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub entries: Vec<InjectionLogRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleRun {
    pub samples: Vec<BuiltSample>,
    pub log: Vec<ParagraphLog>,
}

/// The truthful claim an entry contradicts, as one sentence.
pub fn claim_sentence(entry: &HqaEntry, rewrites: &RewriteTemplates) -> String {
    let role = entry
        .components
        .parts()
        .into_iter()
        .find(|(s, _)| *s == entry.hallucinated_answer)
        .map_or_else(|| Components::default_answer_role(entry.htype), |(_, r)| r);
    let truth = entry
        .components
        .with(role, &entry.truthful_answer)
        .unwrap_or_else(|| entry.components.clone());
    let mut b = Bindings::new();
    for (s, r) in truth.parts() {
        b.insert(r.as_str().to_string(), s.to_string());
    }
    b.insert("answer".into(), entry.truthful_answer.clone());
    rewrites.fill(entry.htype, &b)
}

#[allow(clippy::too_many_arguments)]
fn injected_sample(
    task: Task,
    id: String,
    image_id: &str,
    question: Option<&str>,
    source: &str,
    requested: usize,
    error: Option<String>,
    entries: &[HqaEntry],
    templates: &InstructionTemplates,
    llm: &Gateway,
) -> Result<(BuiltSample, ParagraphLog), PipelineError> {
    let run = run_hqa_injection(source, requested.min(entries.len()), entries, llm)?;
    let sample = assemble_sample(
        task,
        SampleSource {
            id: &id,
            image_id,
            question,
            response: &run.text,
            annotations: &run.annotations,
        },
        templates,
    )?;
    let log = ParagraphLog {
        sample_id: id,
        requested,
        injected: run.annotations.len(),
        error,
        entries: run.log,
    };
    Ok((
        BuiltSample {
            sample,
            annotations: run.annotations,
        },
        log,
    ))
}

/// VQA samples: the response is the hallucinated answer, or the truthful
/// one when zero injections are drawn.
pub fn vqa_samples(
    entries: &[HqaEntry],
    cfg: &SampleConfig,
    templates: &InstructionTemplates,
) -> Result<Vec<BuiltSample>, PipelineError> {
    entries
        .par_iter()
        .map(|e| {
            let id = format!("vqa-{}", e.id);
            let n = cfg.draw(&mut cfg.rng(Task::Vqa, &id), 1);
            let (response, annotations) = if n == 1 {
                (e.hallucinated_answer.as_str(), vqa_annotation(e))
            } else {
                (e.truthful_answer.as_str(), CoarseAnnotations::default())
            };
            let sample = assemble_sample(
                Task::Vqa,
                SampleSource {
                    id: &id,
                    image_id: &e.image_id,
                    question: Some(&e.question),
                    response,
                    annotations: &annotations,
                },
                templates,
            )?;
            Ok(BuiltSample { sample, annotations })
        })
        .collect()
}

/// Instruct samples: the truthful claim sentence with at most one injection.
pub fn instruct_samples(
    entries: &[HqaEntry],
    cfg: &SampleConfig,
    templates: &InstructionTemplates,
    llm: &Gateway,
) -> Result<SampleRun, PipelineError> {
    let rewrites = RewriteTemplates::default();
    let built: Vec<_> = entries
        .par_iter()
        .map(|e| {
            let id = format!("instruct-{}", e.id);
            let n = cfg.draw(&mut cfg.rng(Task::Instruct, &id), 1);
            let source = claim_sentence(e, &rewrites);
            injected_sample(
                Task::Instruct,
                id,
                &e.image_id,
                Some(&e.question),
                &source,
                n,
                None,
                std::slice::from_ref(e),
                templates,
                llm,
            )
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(collect_run(built))
}

/// Caption samples: each paragraph receives a drawn number of entries of its
/// own image, in shuffled order. A shortfall is logged and the count clipped.
pub fn caption_samples(
    sources: &[SourceText],
    entries: &[HqaEntry],
    cfg: &SampleConfig,
    templates: &InstructionTemplates,
    llm: &Gateway,
) -> Result<SampleRun, PipelineError> {
    let mut by_image: BTreeMap<&str, Vec<HqaEntry>> = BTreeMap::new();
    for e in entries {
        by_image.entry(e.image_id.as_str()).or_default().push(e.clone());
    }
    let built: Vec<_> = sources
        .par_iter()
        .map(|s| {
            let id = format!("caption-{}", s.id);
            let mut rng = cfg.rng(Task::Caption, &id);
            let n = cfg.draw(&mut rng, MAX_INJECTIONS);
            let mut pool = by_image.get(s.image_id.as_str()).cloned().unwrap_or_default();
            pool.shuffle(&mut rng);
            let error = (pool.len() < n).then(|| {
                let e = InjectError::InsufficientEntries {
                    wanted: n,
                    available: pool.len(),
                };
                tracing::debug!(paragraph = %s.id, "{e}");
                e.to_string()
            });
            injected_sample(Task::Caption, id, &s.image_id, None, &s.text, n, error, &pool, templates, llm)
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(collect_run(built))
}

fn collect_run(built: Vec<(BuiltSample, ParagraphLog)>) -> SampleRun {
    let mut run = SampleRun::default();
    for (s, l) in built {
        run.samples.push(s);
        run.log.push(l);
    }
    run
}

/// Samples for every configured task: VQA, then Instruct, then Caption.
pub fn build_samples(
    sources: &[SourceText],
    entries: &[HqaEntry],
    cfg: &SampleConfig,
    templates: &InstructionTemplates,
    llm: &Gateway,
) -> Result<SampleRun, PipelineError> {
    cfg.validate()?;
    let mut run = SampleRun::default();
    for task in &cfg.tasks {
        match task {
            Task::Vqa => run.samples.extend(vqa_samples(entries, cfg, templates)?),
            Task::Instruct => {
                let r = instruct_samples(entries, cfg, templates, llm)?;
                run.samples.extend(r.samples);
                run.log.extend(r.log);
            }
            Task::Caption => {
                let r = caption_samples(sources, entries, cfg, templates, llm)?;
                run.samples.extend(r.samples);
                run.log.extend(r.log);
            }
        }
    }
    Ok(run)
}

/// Bindings of the `probe` template for one question.
pub fn probe_bindings(p: &ProbeQuestion) -> Bindings {
    let mut b = Bindings::new();
    b.insert("image_id".into(), p.image_id.clone());
    b.insert("question".into(), p.text.clone());
    b.insert("kind".into(), p.probe_kind.as_str().into());
    for (s, r) in p.claim.parts() {
        let key = match r {
            Role::Obj1 => "subj",
            Role::Obj2 | Role::Obj => "obj",
            other => other.as_str(),
        };
        b.insert(key.into(), s.to_string());
    }
    b
}

/// Asks every probe through the gateway, in order.
pub fn answer_probes(probes: &[ProbeQuestion], llm: &Gateway) -> Result<Vec<YesNo>, GatewayError> {
    probes
        .par_iter()
        .map(|p| {
            let reply = llm.complete("probe", &probe_bindings(p))?;
            let word = reply.trim().trim_end_matches('.').to_ascii_lowercase();
            word.parse::<YesNo>().map_err(|_| GatewayError::BadResponse {
                template: "probe".into(),
                message: format!("expected yes or no, got `{}`", reply.trim()),
            })
        })
        .collect()
}
