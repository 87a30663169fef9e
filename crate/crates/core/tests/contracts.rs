//! File contracts shared with external detectors: `halloc.*.jsonl` in,
//! `predictions.jsonl` and `logprobs.jsonl` out.

use std::collections::BTreeMap;

use halloc_core::annotator::{
    emit_dataset, parse_dataset, parse_samples, tokenize, AnnotatedSample, InstructionTemplates, SplitRatios, Task,
};
use halloc_core::gateway::TemplateSet;
use halloc_core::jsonl::Header;
use halloc_core::metrics::{
    gold_labels, logprob_to_predictions, parse_predictions, token_prf, Channel, LogProbMode, LogProbRecord,
    MetricsError, Provenance, ThresholdSet,
};
use halloc_core::miner::build_cooccurrence;
use halloc_core::pipeline::{build_samples, forge_corpus, mock_gateway, ForgeConfig, SampleConfig};
use halloc_core::synth::{generate, SynthConfig};
use halloc_core::{HType, Pattern, Role};

// As written by Python's json.dumps with default separators.
const DATASET: &str = r#"{"_header": {"tool": "halloc", "version": "0.1.0", "kind": "dataset.test", "seed": 1, "inputs": {}}}
{"id": "caption-1-cap", "image_id": "1", "task": "caption", "instruction": "Describe the image.", "response": "A brown shelf. The cat is near the door.", "spans": [{"start": 2, "end": 7, "htype": "attribute", "role": "attr"}, {"start": 8, "end": 13, "htype": "attribute", "role": "obj"}, {"start": 19, "end": 22, "htype": "object", "role": "obj"}], "is_hallucinated": true, "pattern_tags": ["cab", "lang_prior"]}
{"id": "vqa-2", "image_id": "2", "task": "vqa", "instruction": "What color is the cup?", "response": "white", "spans": [], "is_hallucinated": false, "pattern_tags": []}
"#;

const PREDICTIONS: &str = r#"{"sample_id": "caption-1-cap", "probs": {"object": [0.1, 0.1, 0.1, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1], "attribute": [0.2, 0.8, 0.7, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], "relationship": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0], "scene": [1e-05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]}}
{"sample_id": "vqa-2", "probs": {"object": [0.3], "attribute": [0.4], "relationship": [0.0], "scene": [0.0]}}
"#;

fn dataset() -> Vec<AnnotatedSample> {
    parse_samples(DATASET).unwrap()
}

#[test]
fn dataset_lines_parse_and_round_trip() {
    let samples = dataset();
    assert_eq!(samples.len(), 2);
    let s = &samples[0];
    assert_eq!(s.task, Task::Caption);
    assert_eq!(s.pattern_tags, vec![Pattern::Cab, Pattern::LangPrior]);
    assert_eq!((s.spans[2].htype, s.spans[2].role), (HType::Object, Role::Obj));
    assert_eq!(tokenize(&s.response).len(), 11);

    let line = serde_json::to_value(s).unwrap();
    let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["id", "image_id", "instruction", "is_hallucinated", "pattern_tags", "response", "spans", "task"]
    );
    assert_eq!(serde_json::from_value::<AnnotatedSample>(line).unwrap(), *s);
}

#[test]
fn dataset_lines_are_validated() {
    let out_of_range = DATASET.replace(r#""start": 19, "end": 22"#, r#""start": 19, "end": 99"#);
    assert!(parse_samples(&out_of_range).is_err());
    let bad_flag = DATASET.replace(r#""spans": [], "is_hallucinated": false"#, r#""spans": [], "is_hallucinated": true"#);
    assert!(parse_samples(&bad_flag).is_err());
    let bad_task = DATASET.replace(r#""task": "vqa""#, r#""task": "chat""#);
    assert!(parse_samples(&bad_task).is_err());
}

#[test]
fn four_channel_predictions_derive_total() {
    let gold = dataset();
    let preds = parse_predictions(PREDICTIONS).unwrap();
    assert_eq!(preds.provenance, Provenance::Detector);
    let r = token_prf(&preds, &gold, &ThresholdSet::new()).unwrap();
    let obj = r.rows[&Channel::Object];
    assert_eq!((obj.tp, obj.fp, obj.fn_), (1, 0, 0));
    let attr = r.rows[&Channel::Attribute];
    assert_eq!((attr.tp, attr.fp, attr.fn_), (2, 0, 0));
    let rel = r.rows[&Channel::Relationship];
    assert_eq!((rel.tp, rel.fp, rel.fn_), (0, 1, 0));
    // Total is the OR of the four heads.
    let total = r.rows[&Channel::Total];
    assert_eq!((total.tp, total.fp, total.fn_), (3, 1, 0));
}

#[test]
fn misaligned_predictions_are_rejected() {
    let gold = dataset();
    let short = PREDICTIONS.replace(r#""object": [0.3]"#, r#""object": [0.3, 0.1]"#);
    let preds = parse_predictions(&short).unwrap();
    assert!(matches!(
        token_prf(&preds, &gold, &ThresholdSet::new()),
        Err(MetricsError::Alignment(_))
    ));
    let missing: String = PREDICTIONS.lines().take(1).map(|l| format!("{l}\n")).collect();
    let preds = parse_predictions(&missing).unwrap();
    assert!(matches!(
        token_prf(&preds, &gold, &ThresholdSet::new()),
        Err(MetricsError::Alignment(_))
    ));
    let duplicated = format!("{PREDICTIONS}{}\n", PREDICTIONS.lines().next().unwrap());
    assert!(parse_predictions(&duplicated).is_err());
    assert!(parse_predictions(&PREDICTIONS.replace("0.9", "1.5")).is_err());
}

#[test]
fn logprob_lines() {
    let text = "{\"sample_id\": \"vqa-2\", \"logps\": [-1.3862943611198906]}\n";
    let (_, records): (_, Vec<LogProbRecord>) = halloc_core::jsonl::parse(text).unwrap();
    let p = logprob_to_predictions(&records, LogProbMode::OneMinusP, 10.0).unwrap();
    let score = p.samples["vqa-2"][&Channel::Total][0];
    assert!((score - 0.75).abs() < 1e-12);
    let p = logprob_to_predictions(&records, LogProbMode::NegLogNorm, 2.0).unwrap();
    assert!((p.samples["vqa-2"][&Channel::Total][0] - std::f64::consts::LN_2).abs() < 1e-12);
    let positive = vec![LogProbRecord {
        sample_id: "x".into(),
        logps: vec![-0.1, 0.2],
    }];
    assert!(matches!(
        logprob_to_predictions(&positive, LogProbMode::OneMinusP, 10.0),
        Err(MetricsError::PositiveLogProb { index: 1, .. })
    ));
}

#[test]
fn detector_files_for_a_generated_dataset_align() {
    let c = generate(&SynthConfig {
        images: 40,
        seed: 12,
        ..Default::default()
    });
    let table = build_cooccurrence(&c.graphs, &c.questions).unwrap();
    let gw = mock_gateway(c.graphs.clone(), 12, TemplateSet::defaults(), 4);
    let forged = forge_corpus(&c.graphs, &c.questions, &table, &ForgeConfig::default(), &gw).unwrap();
    let run = build_samples(
        &c.sources,
        &forged.entries,
        &SampleConfig::default(),
        &InstructionTemplates::default(),
        &gw,
    )
    .unwrap();
    let samples: Vec<AnnotatedSample> = run.samples.into_iter().map(|b| b.sample).take(500).collect();
    assert_eq!(samples.len(), 500);
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_dataset(dir.path(), &samples, &SplitRatios::default(), 1, &Header::new("dataset", Some(1))).unwrap();
    let gold = parse_dataset(&paths).unwrap();
    assert_eq!(gold.len(), 500);

    // A detector that copies the gold labels, one JSON line per sample.
    let mut text = String::new();
    for s in &gold {
        let probs: BTreeMap<Channel, Vec<f64>> = gold_labels(s)
            .into_iter()
            .filter(|(c, _)| *c != Channel::Total)
            .map(|(c, v)| (c, v.into_iter().map(f64::from).collect()))
            .collect();
        text += &serde_json::json!({ "sample_id": s.id, "probs": probs }).to_string();
        text.push('\n');
    }
    let preds = parse_predictions(&text).unwrap();
    let r = token_prf(&preds, &gold, &ThresholdSet::new()).unwrap();
    for (c, row) in &r.rows {
        assert_eq!(row.fp + row.fn_, 0, "{c}");
    }
}
