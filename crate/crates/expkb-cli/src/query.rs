//! One retrieval request shape shared by the CLI and the service, so both
//! surfaces produce identical results for identical inputs.

use expkb::retrieval::{
    adaptive_retrieve, student_retrieve, teacher_retrieve, KbIndex, QueryBundle, RetrievalConfig,
    RetrievalError, RetrievalMode, RetrievalResult, StudentQuery, TeacherQuery,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Student,
    Teacher,
    Adaptive,
}

/// A single retrieval query. Unused fields for the chosen phase may be
/// omitted; `mode`, `k`, and `domain` override the configured defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub phase: Phase,
    #[serde(default)]
    pub mode: Option<RetrievalMode>,
    /// Result budget; applied to whichever of top-k/top-m the phase uses.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub reason_trace: String,
    #[serde(default)]
    pub problem: String,
    #[serde(default)]
    pub goal: Option<String>,
    /// Teacher phase: summarized trajectory steps.
    #[serde(default)]
    pub summary_steps: Vec<String>,
    /// Adaptive phase: query-side step texts for the fine channel.
    #[serde(default)]
    pub steps: Vec<String>,
    /// Adaptive phase: refinement stage fed to the lambda schedule.
    #[serde(default)]
    pub t: u32,
    #[serde(default)]
    pub domain: Option<String>,
}

pub fn run_retrieve(
    index: &KbIndex,
    base: &RetrievalConfig,
    request: &RetrieveRequest,
) -> Result<RetrievalResult, RetrievalError> {
    let mut config = base.clone();
    if let Some(mode) = request.mode {
        config.mode = mode;
    }
    if let Some(k) = request.k {
        config.top_k = k;
        config.top_m = k;
    }
    if request.domain.is_some() {
        config.domain_filter = request.domain.clone();
    }
    match request.phase {
        Phase::Student => student_retrieve(
            index,
            &StudentQuery {
                reason_trace: request.reason_trace.clone(),
                problem: request.problem.clone(),
                goal: request.goal.clone(),
            },
            &config,
        ),
        Phase::Teacher => teacher_retrieve(
            index,
            &TeacherQuery {
                summary_steps: request.summary_steps.clone(),
            },
            &config,
        ),
        Phase::Adaptive => {
            let bundle = QueryBundle::embed(
                index.provider().as_ref(),
                &request.problem,
                request.goal.as_deref(),
                &request.steps,
            )?;
            adaptive_retrieve(index, &bundle, request.t, &config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use expkb::semantic::HashEmbedder;
    use expkb::store::{Experience, KnowledgeBase};
    use std::sync::Arc;

    fn index() -> KbIndex {
        let mut kb = KnowledgeBase::new();
        kb.insert(Experience::new("", "parse a structure file", &["download", "parse"], 0))
            .unwrap();
        kb.insert(Experience::new("", "convert units", &["multiply"], 0))
            .unwrap();
        KbIndex::build(kb.snapshot(), Arc::new(HashEmbedder::new(16))).unwrap()
    }

    #[test]
    fn overrides_apply_and_phases_dispatch() {
        let index = index();
        let base = RetrievalConfig::default();
        let request = RetrieveRequest {
            phase: Phase::Student,
            mode: Some(RetrievalMode::Text),
            k: Some(1),
            reason_trace: String::new(),
            problem: "parse a structure file".to_string(),
            goal: None,
            summary_steps: vec![],
            steps: vec![],
            t: 0,
            domain: None,
        };
        let result = run_retrieve(&index, &base, &request).unwrap();
        assert_eq!(result.items.len(), 1);
        assert_eq!(result.mode, "text");
        assert_eq!(result.phase, "student");

        let teacher = RetrieveRequest {
            phase: Phase::Teacher,
            summary_steps: vec!["download".to_string()],
            mode: None,
            k: None,
            reason_trace: String::new(),
            problem: String::new(),
            goal: None,
            steps: vec![],
            t: 0,
            domain: None,
        };
        assert_eq!(run_retrieve(&index, &base, &teacher).unwrap().phase, "teacher");

        let adaptive = RetrieveRequest {
            phase: Phase::Adaptive,
            problem: "parse a structure file".to_string(),
            steps: vec!["parse".to_string()],
            t: 2,
            mode: None,
            k: None,
            reason_trace: String::new(),
            goal: None,
            summary_steps: vec![],
            domain: None,
        };
        let result = run_retrieve(&index, &base, &adaptive).unwrap();
        assert_eq!(result.phase, "adaptive");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RetrieveRequest>(
            r#"{"phase": "student", "problem": "p", "unknown_knob": 1}"#,
        );
        assert!(err.is_err());
    }
}
