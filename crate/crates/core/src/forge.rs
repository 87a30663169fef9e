//! Hallucinated-answer crafting and the HQA database.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{bindings, encode_components, Entailment, EntailmentJudge, Gateway, GatewayError};
use crate::jsonl::{self, Header, JsonlError};
use crate::miner::{rank, Candidate};
use crate::scene::{annotate_components, answer_role, QaRecord, SceneError, SceneGraph};
use crate::taxonomy::{Components, HType, Pattern};
use crate::text::canonicalize;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("no candidates to choose from")]
    EmptyCandidates,
    #[error("response `{0}` equals the truthful answer")]
    AlreadyCorrect(String),
    #[error("annotation rejected: {0}")]
    AnnotationRejected(String),
    #[error("at least one entailment judge is required")]
    NoVerifiers,
    #[error("entry {id}: {reason}")]
    InvalidEntry { id: String, reason: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HqaEntry {
    pub id: String,
    pub image_id: String,
    pub question: String,
    pub truthful_answer: String,
    pub hallucinated_answer: String,
    pub htype: HType,
    pub pattern: Pattern,
    pub components: Components,
}

impl HqaEntry {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |reason: &str| {
            Err(ForgeError::InvalidEntry {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.hallucinated_answer.is_empty() {
            return bad("empty hallucinated answer");
        }
        if self.hallucinated_answer == self.truthful_answer {
            return bad("hallucinated answer equals the truthful answer");
        }
        if self.components.htype() != self.htype {
            return bad("component arity does not match the hallucination type");
        }
        let parts = self.components.parts();
        if parts.iter().any(|(s, _)| s.is_empty()) {
            return bad("empty component");
        }
        if !parts.iter().any(|(s, _)| *s == self.hallucinated_answer) {
            return bad("components do not contain the hallucinated answer");
        }
        Ok(())
    }
}

/// One externally produced model answer to a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub question_id: String,
    pub model: String,
    pub response: String,
}

fn candidate_lines(candidates: &[Candidate]) -> String {
    candidates
        .iter()
        .map(|c| format!("- {} (score {:.6})", c.answer, c.score))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Picks one candidate. Attribute and relationship questions ask the model;
/// object and scene questions take the top-ranked candidate.
pub fn craft_answer(q: &QaRecord, candidates: &[Candidate], llm: &Gateway) -> Result<Candidate, ForgeError> {
    match candidates {
        [] => return Err(ForgeError::EmptyCandidates),
        [only] => return Ok(only.clone()),
        _ => {}
    }
    let template = match q.qtype {
        HType::Attribute => "craft-attr",
        HType::Relationship => "craft-rel",
        HType::Object | HType::Scene => {
            let mut ranked = candidates.to_vec();
            rank(&mut ranked);
            return Ok(ranked.swap_remove(0));
        }
    };
    let b = bindings([
        ("question", q.question.clone()),
        ("truth", q.answer.clone()),
        ("candidates", candidate_lines(candidates)),
    ]);
    let reply = canonicalize(&llm.complete(template, &b)?);
    candidates
        .iter()
        .find(|c| c.answer == reply)
        .cloned()
        .ok_or_else(|| {
            ForgeError::Gateway(GatewayError::BadResponse {
                template: template.into(),
                message: format!("`{reply}` is not one of the candidates"),
            })
        })
}

pub fn decoy_answer(q: &QaRecord) -> Option<Candidate> {
    let decoy = canonicalize(q.decoy.as_deref()?);
    if decoy.is_empty() || decoy == canonicalize(&q.answer) {
        return None;
    }
    Some(Candidate {
        answer: decoy,
        pattern: Pattern::Decoy,
        score: 1.0,
    })
}

/// Accepts a wrong model response only when every judge finds it not
/// entailed by the image.
pub fn unanimity_filter(
    image_id: &str,
    response: &str,
    truth: &str,
    claim: &Components,
    verifiers: &[&dyn EntailmentJudge],
) -> Result<bool, ForgeError> {
    if verifiers.is_empty() {
        return Err(ForgeError::NoVerifiers);
    }
    if canonicalize(response) == canonicalize(truth) {
        return Err(ForgeError::AlreadyCorrect(response.to_string()));
    }
    for v in verifiers {
        if v.judge(image_id, response, claim)? == Entailment::Entailed {
            tracing::debug!(judge = v.name(), response, "entailed; rejected");
            return Ok(false);
        }
    }
    Ok(true)
}

/// Substitutes the chosen answer into the question's component tuple and has
/// the model confirm the annotation.
pub fn assemble_entry(
    q: &QaRecord,
    g: &SceneGraph,
    chosen: &Candidate,
    llm: &Gateway,
) -> Result<HqaEntry, ForgeError> {
    let answer = canonicalize(&chosen.answer);
    if answer.is_empty() {
        return Err(ForgeError::AnnotationRejected("empty hallucinated answer".into()));
    }
    let truth = annotate_components(q, g)?;
    let role = answer_role(q, &truth);
    let components = truth
        .with(role, &answer)
        .ok_or_else(|| ForgeError::AnnotationRejected(format!("{} has no {role} slot", q.qtype)))?;
    let b = bindings([
        ("question", q.question.clone()),
        ("answer", answer.clone()),
        ("htype", q.qtype.as_str().to_string()),
        ("components", encode_components(&components)),
    ]);
    let verdict = llm.complete("verify-annotation", &b)?;
    if !verdict.trim().eq_ignore_ascii_case("valid") {
        return Err(ForgeError::AnnotationRejected(verdict.trim().to_string()));
    }
    let entry = HqaEntry {
        id: q.id.clone(),
        image_id: q.image_id.clone(),
        question: q.question.clone(),
        truthful_answer: canonicalize(&q.answer),
        hallucinated_answer: answer,
        htype: q.qtype,
        pattern: chosen.pattern,
        components,
    };
    entry
        .validate()
        .map_err(|e| ForgeError::AnnotationRejected(e.to_string()))?;
    Ok(entry)
}

/// Forges an entry from an ingested model response. Returns `None` when the
/// response is correct or some judge finds it entailed.
pub fn forge_from_response(
    q: &QaRecord,
    g: &SceneGraph,
    resp: &VlmResponse,
    verifiers: &[&dyn EntailmentJudge],
    llm: &Gateway,
) -> Result<Option<HqaEntry>, ForgeError> {
    let answer = canonicalize(&resp.response);
    if answer.is_empty() || answer == canonicalize(&q.answer) {
        return Ok(None);
    }
    let truth = annotate_components(q, g)?;
    let Some(claim) = truth.with(answer_role(q, &truth), &answer) else {
        return Ok(None);
    };
    if !unanimity_filter(&q.image_id, &answer, &q.answer, &claim, verifiers)? {
        return Ok(None);
    }
    let chosen = Candidate {
        answer,
        pattern: Pattern::VlmResponse,
        score: 1.0,
    };
    let mut entry = assemble_entry(q, g, &chosen, llm)?;
    entry.id = format!("{}-{}", q.id, resp.model);
    Ok(Some(entry))
}

pub fn load_vlm_responses(path: &Path) -> Result<Vec<VlmResponse>, ForgeError> {
    Ok(jsonl::read(path)?.1)
}

pub fn read_hqa(path: &Path) -> Result<(Option<Header>, Vec<HqaEntry>), ForgeError> {
    let (h, entries): (_, Vec<HqaEntry>) = jsonl::read(path)?;
    for e in &entries {
        e.validate()?;
    }
    Ok((h, entries))
}

pub fn write_hqa(path: &Path, header: &Header, entries: &[HqaEntry]) -> Result<(), ForgeError> {
    for e in entries {
        e.validate()?;
    }
    jsonl::write(path, Some(header), entries)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{MockBackend, MockWorld, Script};
    use crate::gateway::{RetryPolicy, TemplateSet};
    use crate::scene::{parse_scene_graph, Binding};

    fn mock(world: MockWorld) -> Gateway {
        Gateway::new(
            Box::new(MockBackend::new(7, world)),
            TemplateSet::defaults(),
            4,
            RetryPolicy::none(),
        )
    }

    fn shelf_scene() -> SceneGraph {
        parse_scene_graph(
            r#"{"image_id":"1","objects":[
                {"id":"1","name":"shelf","attributes":["wood"]},
                {"id":"2","name":"window","attributes":["glass"]}],
              "relations":[{"subject":"2","predicate":"above","object":"1"}],
              "scene_labels":["indoors"]}"#,
        )
        .unwrap()
    }

    fn attr_q() -> QaRecord {
        QaRecord {
            id: "q1".into(),
            image_id: "1".into(),
            question: "What material is the shelf?".into(),
            answer: "wood".into(),
            qtype: HType::Attribute,
            referenced: Binding {
                object: Some("1".into()),
                attribute: Some("wood".into()),
                ..Default::default()
            },
            decoy: None,
        }
    }

    fn rel_q() -> QaRecord {
        QaRecord {
            id: "q2".into(),
            image_id: "1".into(),
            question: "Is the window above or below the shelf?".into(),
            answer: "above".into(),
            qtype: HType::Relationship,
            referenced: Binding {
                subject: Some("2".into()),
                predicate: Some("above".into()),
                object: Some("1".into()),
                ..Default::default()
            },
            decoy: None,
        }
    }

    fn cand(a: &str, s: f64) -> Candidate {
        Candidate {
            answer: a.into(),
            pattern: Pattern::Cab,
            score: s,
        }
    }

    #[test]
    fn crafting() {
        let gw = mock(MockWorld::default());
        let q = attr_q();
        assert_eq!(craft_answer(&q, &[cand("glass", 0.1)], &gw).unwrap().answer, "glass");
        assert_eq!(gw.stats().calls, 0);
        let pick = craft_answer(&q, &[cand("purple", 0.9), cand("green", 0.9)], &gw).unwrap();
        assert_eq!(pick.answer, "green");
        assert!(matches!(craft_answer(&q, &[], &gw), Err(ForgeError::EmptyCandidates)));
    }

    #[test]
    fn crafted_reply_must_be_a_candidate() {
        let gw = Gateway::new(
            Box::new(MockBackend::new(0, MockWorld::default()).with_script(Script::new("craft-attr").reply("plaid"))),
            TemplateSet::defaults(),
            1,
            RetryPolicy::none(),
        );
        let err = craft_answer(&attr_q(), &[cand("a", 1.0), cand("b", 1.0)], &gw).unwrap_err();
        assert!(matches!(err, ForgeError::Gateway(GatewayError::BadResponse { .. })));
    }

    #[test]
    fn decoys() {
        let mut q = attr_q();
        q.answer = "red".into();
        q.decoy = Some("blue".into());
        assert_eq!(
            decoy_answer(&q),
            Some(Candidate { answer: "blue".into(), pattern: Pattern::Decoy, score: 1.0 })
        );
        q.decoy = None;
        assert_eq!(decoy_answer(&q), None);
        q.decoy = Some("Red".into());
        assert_eq!(decoy_answer(&q), None);
    }

    #[test]
    fn glass_shelf() {
        let gw = mock(MockWorld::default());
        let e = assemble_entry(&attr_q(), &shelf_scene(), &cand("glass", 0.5), &gw).unwrap();
        assert_eq!(e.components, Components::Attribute { attr: "glass".into(), obj: "shelf".into() });
        assert_eq!(e.pattern, Pattern::Cab);
        assert_eq!(e.truthful_answer, "wood");
    }

    #[test]
    fn relationship_substitution() {
        let gw = mock(MockWorld::default());
        let e = assemble_entry(&rel_q(), &shelf_scene(), &cand("below", 0.5), &gw).unwrap();
        assert_eq!(
            e.components,
            Components::Relationship { obj1: "window".into(), rel: "below".into(), obj2: "shelf".into() }
        );
    }

    #[test]
    fn empty_or_rejected_annotation() {
        let gw = mock(MockWorld::default());
        assert!(matches!(
            assemble_entry(&attr_q(), &shelf_scene(), &cand("", 0.5), &gw),
            Err(ForgeError::AnnotationRejected(_))
        ));
        let gw = Gateway::new(
            Box::new(MockBackend::new(0, MockWorld::default()).with_script(Script::new("verify-annotation").reply("invalid"))),
            TemplateSet::defaults(),
            1,
            RetryPolicy::none(),
        );
        assert!(matches!(
            assemble_entry(&attr_q(), &shelf_scene(), &cand("glass", 0.5), &gw),
            Err(ForgeError::AnnotationRejected(_))
        ));
    }

    struct Fixed(Entailment);

    impl EntailmentJudge for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn judge(&self, _: &str, _: &str, _: &Components) -> Result<Entailment, GatewayError> {
            Ok(self.0)
        }
    }

    #[test]
    fn unanimity_is_a_conjunction() {
        let claim = Components::Scene { sce: "beach".into() };
        for len in 1..=4usize {
            for mask in 0..(1u32 << len) {
                let judges: Vec<Fixed> = (0..len)
                    .map(|i| {
                        Fixed(if mask & (1 << i) != 0 { Entailment::Entailed } else { Entailment::NotEntailed })
                    })
                    .collect();
                let refs: Vec<&dyn EntailmentJudge> = judges.iter().map(|j| j as &dyn EntailmentJudge).collect();
                let expected = judges.iter().all(|j| j.0 == Entailment::NotEntailed);
                assert_eq!(unanimity_filter("1", "beach", "office", &claim, &refs).unwrap(), expected);
            }
        }
        let ne = Fixed(Entailment::NotEntailed);
        assert!(matches!(
            unanimity_filter("1", "Office", "office", &claim, &[&ne]),
            Err(ForgeError::AlreadyCorrect(_))
        ));
        assert!(matches!(unanimity_filter("1", "beach", "office", &claim, &[]), Err(ForgeError::NoVerifiers)));
    }

    #[test]
    fn responses_judged_against_the_scene() {
        let g = shelf_scene();
        let gw = mock(MockWorld::with_graphs([g.clone()]));
        let judges: Vec<crate::gateway::GatewayJudge> = ["a", "b", "c"]
            .iter()
            .map(|m| crate::gateway::GatewayJudge { gateway: &gw, model: m.to_string() })
            .collect();
        let refs: Vec<&dyn EntailmentJudge> = judges.iter().map(|j| j as &dyn EntailmentJudge).collect();
        let resp = |r: &str| VlmResponse { question_id: "q1".into(), model: "llava".into(), response: r.into() };
        let e = forge_from_response(&attr_q(), &g, &resp("metal"), &refs, &gw).unwrap().unwrap();
        assert_eq!(e.pattern, Pattern::VlmResponse);
        assert_eq!(e.id, "q1-llava");
        // the window is glass, but the shelf is not
        assert!(forge_from_response(&attr_q(), &g, &resp("glass"), &refs, &gw).unwrap().is_some());
        assert!(forge_from_response(&attr_q(), &g, &resp("Wood"), &refs, &gw).unwrap().is_none());
        let mut q = attr_q();
        q.answer = "metal".into();
        q.referenced.attribute = Some("metal".into());
        assert!(forge_from_response(&q, &g, &resp("wood"), &refs, &gw).unwrap().is_none());
    }

    #[test]
    fn hqa_file_round_trip_checks_invariants() {
        let gw = mock(MockWorld::default());
        let e = assemble_entry(&attr_q(), &shelf_scene(), &cand("glass", 0.5), &gw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hqa.jsonl");
        write_hqa(&p, &Header::new("hqa", Some(1)), std::slice::from_ref(&e)).unwrap();
        assert_eq!(read_hqa(&p).unwrap().1, vec![e.clone()]);

        let mut bad = e;
        bad.hallucinated_answer = "wood".into();
        assert!(write_hqa(&p, &Header::new("hqa", None), &[bad]).is_err());
    }
}
