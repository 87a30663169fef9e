use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use halloc_core::annotator::{
    dataset_stats, emit_dataset, parse_dataset, split_path, AnnotatedSample, InstructionTemplates, SplitRatios, Task,
    SPLIT_NAMES,
};
use halloc_core::calibration::{calibrate_with_temperature, grouped_calibration, DEFAULT_BINS};
use halloc_core::forge::{read_hqa, write_hqa};
use halloc_core::gateway::mock::{MockBackend, MockWorld, ProbePolicy};
use halloc_core::gateway::{BackendKind, Gateway, RetryPolicy, TemplateSet};
use halloc_core::jsonl::{self, Header};
use halloc_core::metrics::{
    always_one, chair_predictions, logprob_to_predictions, read_logprobs, read_predictions, token_prf, tune_thresholds,
    ChairVocab, DetectionReport, LogProbMode, PredictionSet, ThresholdSet, DEFAULT_GRID_STEP, DEFAULT_LOGP_CAP,
    DEFAULT_SYNONYMS,
};
use halloc_core::miner::{
    all_strata, build_cooccurrence, generate_probes, score_probes, CooccurrenceTable, MinerConfig, ProbeKind,
    ProbeReport, ProbeTemplates, PriorSource, Stratum,
};
use halloc_core::pipeline::{
    answer_probes, build_samples, forge_corpus, load_sources, ForgeConfig, SampleConfig, MAX_INJECTIONS,
};
use halloc_core::scene::{load_questions, load_scenes, select_questions, SceneGraph};
use halloc_core::synth::{generate, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{config_err, require_dir, require_files, RunConfig};

fn digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Header keyed by input file names, so that output does not depend on
/// where the inputs live.
fn header(kind: &str, cfg: &RunConfig, inputs: &[&Path]) -> anyhow::Result<Header> {
    let mut h = Header::new(kind, Some(cfg.seed));
    for p in inputs {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        h.inputs.insert(name, digest(p)?);
    }
    Ok(h)
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Pretty JSON object with the header under `_header`.
fn write_report(path: &Path, h: &Header, body: Value) -> anyhow::Result<()> {
    let mut obj = match body {
        Value::Object(m) => m,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("report".into(), other);
            m
        }
    };
    obj.insert(jsonl::HEADER_KEY.into(), serde_json::to_value(h)?);
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn templates(cfg: &RunConfig) -> anyhow::Result<TemplateSet> {
    Ok(match &cfg.templates {
        Some(dir) => TemplateSet::with_overrides(dir)?,
        None => TemplateSet::defaults(),
    })
}

fn gateway(cfg: &RunConfig, graphs: &[SceneGraph], policy: ProbePolicy) -> anyhow::Result<Gateway> {
    let t = templates(cfg)?;
    match cfg.gateway.backend {
        BackendKind::Remote => Ok(Gateway::remote(&cfg.gateway, t)?),
        BackendKind::Mock => {
            let mut world = MockWorld::with_graphs(graphs.iter().cloned());
            world.probe_policy = policy;
            Ok(Gateway::new(
                Box::new(MockBackend::new(cfg.seed, world)),
                t,
                cfg.gateway.max_in_flight,
                RetryPolicy::none(),
            ))
        }
    }
}

fn log_gateway(llm: &Gateway) {
    let s = llm.stats();
    tracing::info!(calls = s.calls, retries = s.retries, peak_in_flight = s.peak_in_flight, "gateway");
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(cfg: &RunConfig, a: &SynthArgs) -> anyhow::Result<()> {
    let c = generate(&SynthConfig {
        images: a.images,
        seed: cfg.seed,
        ..Default::default()
    });
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let graphs: Vec<Value> = c
        .graphs
        .iter()
        .map(|g| serde_json::from_str(&g.to_record()))
        .collect::<Result<_, _>>()?;
    jsonl::write(&a.out.join("scenes.jsonl"), Some(&Header::new("scenes", Some(cfg.seed))), &graphs)?;
    jsonl::write(
        &a.out.join("questions.jsonl"),
        Some(&Header::new("questions", Some(cfg.seed))),
        &c.questions,
    )?;
    jsonl::write(
        &a.out.join("captions.jsonl"),
        Some(&Header::new("sources", Some(cfg.seed))),
        &c.sources,
    )?;
    tracing::info!(images = c.graphs.len(), questions = c.questions.len(), "synthetic corpus written");
    Ok(())
}

#[derive(Args)]
pub struct MineArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    #[serde(rename = "_header")]
    header: Header,
    table: CooccurrenceTable,
}

fn read_table(path: &Path) -> anyhow::Result<CooccurrenceTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f: TableFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(f.table)
}

pub fn mine(cfg: &RunConfig, a: &MineArgs) -> anyhow::Result<()> {
    require_files(&[&a.scenes, &a.questions])?;
    let graphs = load_scenes(&a.scenes)?;
    let questions = load_questions(&a.questions)?;
    let table = build_cooccurrence(&graphs, &questions)?;
    let h = header("cooccurrence", cfg, &[&a.scenes, &a.questions])?;
    write_report(&a.out, &h, json!({ "table": table }))?;
    tracing::info!(
        graphs = table.graphs,
        questions = table.questions,
        objects = table.attr_given_obj.0.len(),
        triples = table.rel_triple.len(),
        "co-occurrence table written"
    );
    Ok(())
}

#[derive(Args)]
pub struct ForgeArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prior candidates kept per prior class.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Per-question outcomes (default: forge_log.jsonl next to --out).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn sibling(out: &Path, name: &str) -> PathBuf {
    out.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn forge(cfg: &RunConfig, a: &ForgeArgs) -> anyhow::Result<()> {
    require_files(&[&a.scenes, &a.questions, &a.table])?;
    let graphs = load_scenes(&a.scenes)?;
    let llm = gateway(cfg, &graphs, ProbePolicy::Oracle)?;
    let questions = select_questions(load_questions(&a.questions)?, &cfg.types);
    let table = read_table(&a.table)?;
    let fc = ForgeConfig {
        k: a.k,
        miner: MinerConfig::default(),
        types: cfg.types.clone(),
    };
    let run = forge_corpus(&graphs, &questions, &table, &fc, &llm)?;
    let h = header("hqa", cfg, &[&a.scenes, &a.questions, &a.table])?;
    ensure_parent(&a.out)?;
    write_hqa(&a.out, &h, &run.entries)?;
    let log = a.log.clone().unwrap_or_else(|| sibling(&a.out, "forge_log.jsonl"));
    let mut lh = h.clone();
    lh.kind = "forge_log".into();
    jsonl::write(&log, Some(&lh), &run.log)?;
    log_gateway(&llm);
    tracing::info!(questions = questions.len(), entries = run.entries.len(), "HQA database written");
    Ok(())
}

#[derive(Args)]
pub struct InjectArgs {
    /// Paragraphs as `{id, image_id, text}` records.
    #[arg(long)]
    pub sources: PathBuf,
    #[arg(long)]
    pub hqa: PathBuf,
    /// Scene graphs for the mock backend.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Output directory for `halloc.{train,val,test}.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Tasks to build (vqa, instruct, caption).
    #[arg(long, value_delimiter = ',', default_value = "vqa,instruct,caption")]
    pub task: Vec<Task>,
    /// Injections per caption, inclusive, e.g. `0..6`.
    #[arg(long, default_value = "0..6")]
    pub n_range: String,
    /// Train/val/test ratios.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub split: Vec<f64>,
    /// Instruction template file.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
}

pub fn parse_range(s: &str) -> anyhow::Result<std::ops::RangeInclusive<usize>> {
    let (lo, hi) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .ok_or_else(|| config_err(format!("--n-range `{s}`: expected `lo..hi`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| config_err(format!("--n-range `{s}`: {e}")))
    };
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo > hi || hi > MAX_INJECTIONS {
        return Err(config_err(format!("--n-range `{s}` must lie within 0..{MAX_INJECTIONS}")));
    }
    Ok(lo..=hi)
}

pub fn inject(cfg: &RunConfig, a: &InjectArgs) -> anyhow::Result<()> {
    require_files(&[&a.sources, &a.hqa])?;
    if let Some(s) = &a.scenes {
        require_files(&[s])?;
    }
    if let Some(i) = &a.instructions {
        require_files(&[i])?;
    }
    let n_range = parse_range(&a.n_range)?;
    let [train, val, test] = a.split[..] else {
        return Err(config_err("--split needs three ratios"));
    };
    let ratios = SplitRatios { train, val, test };
    ratios.validate().map_err(|e| config_err(e.to_string()))?;
    let instructions = match &a.instructions {
        Some(p) => InstructionTemplates::load(p)?,
        None => InstructionTemplates::default(),
    };
    let graphs = match &a.scenes {
        Some(p) => load_scenes(p)?,
        None => Vec::new(),
    };
    let llm = gateway(cfg, &graphs, ProbePolicy::Oracle)?;
    let sources = load_sources(&a.sources)?;
    let (_, entries) = read_hqa(&a.hqa)?;
    let entries: Vec<_> = entries.into_iter().filter(|e| cfg.types.contains(&e.htype)).collect();
    let sc = SampleConfig {
        tasks: a.task.iter().copied().collect(),
        n_range,
        seed: cfg.seed,
    };
    let run = build_samples(&sources, &entries, &sc, &instructions, &llm)?;
    let mut inputs: Vec<&Path> = vec![&a.sources, &a.hqa];
    if let Some(s) = &a.scenes {
        inputs.push(s);
    }
    let h = header("dataset", cfg, &inputs)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let samples: Vec<AnnotatedSample> = run.samples.into_iter().map(|b| b.sample).collect();
    emit_dataset(&a.out, &samples, &ratios, cfg.seed, &h)?;
    let mut lh = h.clone();
    lh.kind = "injection_log".into();
    jsonl::write(&a.out.join("injection_log.jsonl"), Some(&lh), &run.log)?;
    let shortfalls = run.log.iter().filter(|l| l.error.is_some()).count();
    log_gateway(&llm);
    tracing::info!(samples = samples.len(), shortfalls, "dataset written");
    Ok(())
}

fn read_split(dir: &Path, split: &str) -> anyhow::Result<Vec<AnnotatedSample>> {
    let p = split_path(dir, split);
    require_files(&[&p])?;
    Ok(parse_dataset(&[p])?)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory holding `halloc.{train,val,test}.jsonl`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Split evaluated.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Split used for threshold tuning, or `none` for 0.5 everywhere.
    #[arg(long, default_value = "val")]
    pub tune_on: String,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    pub grid_step: f64,
    /// Scene graphs; enables the CHAIR baseline.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Per-token log probabilities; enables the log-probability baseline.
    #[arg(long)]
    pub logprobs: Option<PathBuf>,
    #[arg(long, default_value = "one-minus-p")]
    pub logprob_mode: LogProbMode,
    #[arg(long, default_value_t = DEFAULT_LOGP_CAP)]
    pub logprob_cap: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn check_split(name: &str) -> anyhow::Result<()> {
    if SPLIT_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(config_err(format!("unknown split `{name}` (expected train, val or test)")))
    }
}

fn tuned(
    preds: &PredictionSet,
    tune: Option<&[AnnotatedSample]>,
    eval: &[AnnotatedSample],
    step: f64,
) -> anyhow::Result<DetectionReport> {
    let thresholds = match tune {
        Some(v) => tune_thresholds(preds, v, step)?,
        None => ThresholdSet::new(),
    };
    Ok(token_prf(preds, eval, &thresholds)?)
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> anyhow::Result<()> {
    require_dir(&a.dataset)?;
    require_files(&[&a.predictions])?;
    for p in a.scenes.iter().chain(&a.logprobs) {
        require_files(&[p])?;
    }
    check_split(&a.split)?;
    let tune_split = (a.tune_on != "none").then_some(a.tune_on.as_str());
    if let Some(s) = tune_split {
        check_split(s)?;
    }
    let gold = read_split(&a.dataset, &a.split)?;
    let tune_gold = tune_split.map(|s| read_split(&a.dataset, s)).transpose()?;
    let preds = read_predictions(&a.predictions)?;
    let detector = tuned(&preds, tune_gold.as_deref(), &gold, a.grid_step)?;
    eprint!("{}", detector.table("detector"));
    let mut baselines = BTreeMap::new();
    let a1 = always_one(&gold);
    eprint!("{}", a1.table("always-1"));
    baselines.insert("always_one", a1);
    if let Some(p) = &a.scenes {
        let graphs: BTreeMap<String, SceneGraph> =
            load_scenes(p)?.into_iter().map(|g| (g.image_id.clone(), g)).collect();
        let all: Vec<SceneGraph> = graphs.values().cloned().collect();
        let vocab = ChairVocab::from_graphs(&all, DEFAULT_SYNONYMS);
        let r = token_prf(&chair_predictions(&gold, &graphs, &vocab)?, &gold, &ThresholdSet::new())?;
        eprint!("{}", r.table("CHAIR"));
        baselines.insert("chair", r);
    }
    if let Some(p) = &a.logprobs {
        let lp = logprob_to_predictions(&read_logprobs(p)?, a.logprob_mode, a.logprob_cap)?;
        let r = tuned(&lp, tune_gold.as_deref(), &gold, a.grid_step)?;
        eprint!("{}", r.table("log-probability"));
        baselines.insert("logprob", r);
    }
    let mut inputs: Vec<PathBuf> = vec![split_path(&a.dataset, &a.split), a.predictions.clone()];
    if let Some(s) = tune_split {
        inputs.push(split_path(&a.dataset, s));
    }
    inputs.extend(a.scenes.iter().chain(&a.logprobs).cloned());
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let h = header("detection_report", cfg, &refs)?;
    write_report(&a.out, &h, json!({ "split": a.split, "detector": detector, "baselines": baselines }))
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Number of bins.
    #[arg(short = 'M', long = "bins", default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Split the temperature is fitted on, or `none` to skip scaling.
    #[arg(long, default_value = "val")]
    pub fit_on: String,
    /// Temperature search interval.
    #[arg(long, value_delimiter = ',', default_value = "0.05,10")]
    pub interval: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn calibrate(cfg: &RunConfig, a: &CalibrateArgs) -> anyhow::Result<()> {
    require_dir(&a.dataset)?;
    require_files(&[&a.predictions])?;
    check_split(&a.split)?;
    let [lo, hi] = a.interval[..] else {
        return Err(config_err("--interval needs two values"));
    };
    let gold = read_split(&a.dataset, &a.split)?;
    let preds = read_predictions(&a.predictions)?;
    let mut inputs = vec![split_path(&a.dataset, &a.split), a.predictions.clone()];
    let report = if a.fit_on == "none" {
        grouped_calibration(&preds, &gold, a.bins)?
    } else {
        check_split(&a.fit_on)?;
        let fit = read_split(&a.dataset, &a.fit_on)?;
        inputs.push(split_path(&a.dataset, &a.fit_on));
        calibrate_with_temperature(&preds, &fit, &gold, a.bins, (lo, hi))?
    };
    eprint!("{}", report.table());
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let h = header("calibration_report", cfg, &refs)?;
    write_report(&a.out, &h, serde_json::to_value(&report)?)
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Yes-gold and No-gold probes per stratum.
    #[arg(short = 'n', long, default_value_t = 50)]
    pub n: usize,
    /// Strata as `kind:prior`, e.g. `attribute:lang_prior` (default: all six).
    #[arg(long, value_delimiter = ',')]
    pub strata: Vec<String>,
    /// How the mock answers: oracle, always-yes or always-no.
    #[arg(long, default_value = "oracle")]
    pub probe_policy: ProbePolicy,
    #[arg(long)]
    pub probe_templates: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_stratum(s: &str) -> anyhow::Result<Stratum> {
    let (k, p) = s
        .split_once(':')
        .ok_or_else(|| config_err(format!("stratum `{s}`: expected `kind:prior`")))?;
    let kind = ProbeKind::ALL
        .into_iter()
        .find(|x| x.as_str() == k)
        .ok_or_else(|| config_err(format!("unknown probe kind `{k}`")))?;
    let prior = match p {
        "lang_prior" => PriorSource::LangPrior,
        "image_prior" => PriorSource::ImagePrior,
        other => return Err(config_err(format!("unknown prior `{other}`"))),
    };
    Ok((kind, prior))
}

fn stratum_name((k, p): Stratum) -> String {
    let p = match p {
        PriorSource::LangPrior => "lang_prior",
        PriorSource::ImagePrior => "image_prior",
    };
    format!("{}:{p}", k.as_str())
}

pub fn probe(cfg: &RunConfig, a: &ProbeArgs) -> anyhow::Result<()> {
    require_files(&[&a.table, &a.scenes])?;
    let strata = if a.strata.is_empty() {
        all_strata()
    } else {
        a.strata.iter().map(|s| parse_stratum(s)).collect::<anyhow::Result<_>>()?
    };
    let templates = match &a.probe_templates {
        Some(p) => {
            require_files(&[p])?;
            ProbeTemplates::parse(&fs::read_to_string(p)?)?
        }
        None => ProbeTemplates::default(),
    };
    let graphs = load_scenes(&a.scenes)?;
    let table = read_table(&a.table)?;
    let llm = gateway(cfg, &graphs, a.probe_policy)?;
    let probes = generate_probes(&table, &graphs, &strata, a.n, &templates, &MinerConfig::default())?;
    let answers = answer_probes(&probes, &llm)?;
    let overall = score_probes(&answers, &probes)?;
    let mut per: BTreeMap<String, ProbeReport> = BTreeMap::new();
    for &s in &strata {
        let idx: Vec<usize> = (0..probes.len())
            .filter(|&i| (probes[i].probe_kind, probes[i].prior_source) == s)
            .collect();
        let ps: Vec<_> = idx.iter().map(|&i| probes[i].clone()).collect();
        let ans: Vec<_> = idx.iter().map(|&i| answers[i]).collect();
        per.insert(stratum_name(s), score_probes(&ans, &ps)?);
    }
    tracing::info!(
        n = overall.n,
        accuracy = overall.accuracy,
        recall = overall.recall,
        yes_rate = overall.yes_rate,
        "probe scores"
    );
    let h = header("probe_report", cfg, &[&a.table, &a.scenes])?;
    write_report(&a.out, &h, json!({ "overall": overall, "strata": per }))
}

#[derive(Args)]
pub struct StatsArgs {
    /// Dataset files, or a directory holding the three splits.
    #[arg(long, num_args = 1.., required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn stats(cfg: &RunConfig, a: &StatsArgs) -> anyhow::Result<()> {
    let mut files = Vec::new();
    for p in &a.dataset {
        if p.is_dir() {
            files.extend(SPLIT_NAMES.iter().map(|s| split_path(p, s)));
        } else {
            files.push(p.clone());
        }
    }
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    require_files(&refs)?;
    let samples = parse_dataset(&files)?;
    let report = dataset_stats(&samples);
    tracing::info!(
        count = report.count,
        mean_words = report.mean_words,
        mean_hallucinated_words = report.mean_hallucinated_words,
        fraction = report.hallucinated_word_fraction,
        "dataset statistics"
    );
    let h = header("stats", cfg, &refs)?;
    write_report(&a.out, &h, serde_json::to_value(&report)?)
}
