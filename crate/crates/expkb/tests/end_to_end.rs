//! Full lifecycle: raw execution logs are distilled into a knowledge base,
//! the base is persisted and reloaded, a two-round pipeline runs against the
//! reloaded copy, and evolution bookkeeping prunes what stopped earning its
//! keep.

use std::io::BufReader;
use std::sync::Arc;

use expkb::builder::{build_kb, load_raw_logs, BuildConfig, FewShotExemplar, LogResult};
use expkb::evolution::{apply_prune, record_usage, update_quality, EvolutionConfig};
use expkb::pipeline::script::{ScriptedExecutor, ScriptedReasoner, ScriptedRun};
use expkb::pipeline::{
    run_pipeline, ConflictAction, FeedbackPool, PipelineConfig, PipelineInput, PlanStepSource,
    PromptKind, TrajectoryStep, TrajectoryStepKind,
};
use expkb::retrieval::KbIndex;
use expkb::semantic::{EmbeddingProvider, HashEmbedder};
use expkb::store::KnowledgeBase;

const RAW_LOGS: &str = r#"
{"agent_name": "gpt-4.1", "question": "Parse the PDB file for 5wb7 and compute the distance between the first two atoms.", "prediction": "1.46", "true_answer": "1.456", "intermediate_steps": [{"task": "You have one question to answer about a protein structure.", "step_type": "task"}, {"facts": "The structure file comes from a public archive.", "plan": "Download the file, then measure the distance.", "step_type": "planning"}, {"tool_calls": [{"id": "call_1", "type": "function", "function": {"name": "python_interpreter", "arguments": "from Bio.PDB import PDBParser"}}], "error": {"type": "AgentExecutionError", "message": "Code execution failed: invalid header"}, "step_type": "action"}]}
{"agent_name": "gpt-4.1", "question": "Convert 1.456 angstroms to picometers.", "prediction": "145.6", "true_answer": "145.6", "intermediate_steps": [{"task": "Convert a measurement between units.", "step_type": "task"}, {"plan": "Multiply by 100 and keep the stated precision.", "step_type": "planning"}]}
"#;

fn generation_reply(question: &str, plan: &str, experience: &str) -> String {
    serde_json::json!({
        "question": question,
        "agent_plan": plan,
        "agent_experience": experience,
    })
    .to_string()
}

fn build_reasoner() -> ScriptedReasoner {
    let reasoner = ScriptedReasoner::new();
    reasoner.push_text(
        PromptKind::GenerationGeneral,
        generation_reply(
            "Parse the PDB file for 5wb7 and compute the distance between the first two atoms.",
            "1. Download the structure file\n2. Extract the first two atom records\n3. Compute the euclidean distance",
            "When calculating distance, extract only the first two ATOM coordinates directly without skipping any lines.",
        ),
    );
    reasoner.push_text(
        PromptKind::GenerationGeneral,
        generation_reply(
            "Convert 1.456 angstroms to picometers.",
            "1. Multiply by the conversion factor\n2. Round to the target precision",
            "Keep the original angstrom value unless conversion is explicitly requested.",
        ),
    );
    reasoner
}

fn pipeline_script() -> (ScriptedReasoner, ScriptedExecutor) {
    let reasoner = ScriptedReasoner::new();
    reasoner.push_text(
        PromptKind::Parse,
        r#"{"problem_pattern": "calculate distance between atoms", "goal": "answer in angstroms"}"#,
    );
    reasoner.push_text(
        PromptKind::Reason,
        "This needs structure parsing. {distance calculation; atom records}",
    );
    reasoner.push_text(
        PromptKind::Adapt,
        r#"{"problem_pattern": "calculate distance between the first two atoms", "steps": [{"text": "download the structure file"}, {"text": "take the first two atom records in file order"}, {"text": "compute the euclidean distance"}]}"#,
    );
    reasoner.push_text(
        PromptKind::Adapt,
        r#"{"problem_pattern": "report the distance in angstroms", "steps": [{"text": "keep the value in angstroms"}]}"#,
    );
    reasoner.push_text(
        PromptKind::Plan,
        "1. [exp 1] Download the structure file [tool: fetch]\n2. [exp 1] Take the first two atom records\n3. Compute the euclidean distance",
    );
    reasoner.push_text(
        PromptKind::Summarize,
        r#"{"steps": ["downloaded the file", "picked atom records with an offset bug"], "overall": "run produced 0.9 using the wrong atoms"}"#,
    );
    reasoner.push_text(
        PromptKind::Analyze,
        r#"[{"step_index": 1, "error_type": "selection_error", "cause": "skipped the first atom record"}]"#,
    );
    reasoner.push_text(
        PromptKind::Refine,
        "{1. Take the first two atom records} {2. Verify coordinates against the raw file}",
    );
    reasoner.push_text(
        PromptKind::Merge,
        "Take the first two atom records, never skipping lines",
    );

    let executor = ScriptedExecutor::new();
    executor.push(ScriptedRun {
        steps: vec![
            TrajectoryStep::new(TrajectoryStepKind::Action, "downloaded the structure file"),
            TrajectoryStep::new(TrajectoryStepKind::Action, "selected atom records"),
        ],
        final_answer: Some("0.9".to_string()),
        error: None,
    });
    executor.push(ScriptedRun {
        steps: vec![TrajectoryStep::new(
            TrajectoryStepKind::Action,
            "recomputed with the correct atoms",
        )],
        final_answer: Some("1.456".to_string()),
        error: None,
    });
    (reasoner, executor)
}

#[test]
fn logs_become_knowledge_that_survives_reload_and_guides_the_pipeline() {
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedder::new(96));

    // Distill the raw logs.
    let (logs, line_errors) = load_raw_logs(BufReader::new(RAW_LOGS.as_bytes())).unwrap();
    assert!(line_errors.is_empty());
    assert_eq!(logs.len(), 2);

    let mut kb = KnowledgeBase::new();
    let exemplars = vec![FewShotExemplar {
        question: "Measure the bond length in a crystal structure.".to_string(),
        plan: "1. Load the structure\n2. Select the atoms\n3. Compute the distance".to_string(),
        experience: "Always check which atom records the question means.".to_string(),
    }];
    let reasoner = build_reasoner();
    let report = build_kb(
        &mut kb,
        provider.clone(),
        &reasoner,
        &logs,
        &exemplars,
        &BuildConfig::default(),
        1_000,
    )
    .unwrap();
    assert_eq!(report.accepted, 2);
    assert_eq!(report.rejected, 0);
    for outcome in &report.outcomes {
        assert!(matches!(outcome.result, LogResult::Accepted { .. }));
    }

    // The distilled experience carries the log's failure modes and source.
    let first = kb.snapshot().iter().next().unwrap().clone();
    assert_eq!(
        first.failure_modes,
        vec!["AgentExecutionError: Code execution failed: invalid header"]
    );
    assert_eq!(
        first.metadata.get("source_agent").map(String::as_str),
        Some("gpt-4.1")
    );
    // Plan lines become steps; the distilled lesson is the final step.
    assert_eq!(first.steps.len(), 4);
    assert!(first.steps[3].text.starts_with("When calculating distance"));

    // Persist, reload, and verify the reload is indistinguishable.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.jsonl");
    let mut file = std::fs::File::create(&path).unwrap();
    kb.persist_to(&mut file).unwrap();
    drop(file);
    let (mut loaded, load_report) =
        KnowledgeBase::load_from(std::fs::File::open(&path).unwrap()).unwrap();
    assert!(load_report.line_errors.is_empty());
    assert!(load_report.dangling_relations.is_empty());
    assert_eq!(loaded.len(), kb.len());
    for (a, b) in kb.snapshot().iter().zip(loaded.snapshot().iter()) {
        assert_eq!(a.as_ref(), b.as_ref());
    }

    // Two-round pipeline over the reloaded base.
    let index = KbIndex::build(loaded.snapshot(), provider.clone()).unwrap();
    let (pipeline_reasoner, executor) = pipeline_script();
    let mut pool = FeedbackPool::default();
    let input = PipelineInput {
        query: "What is the distance between the first and second atoms in 5wb7?".to_string(),
        expected_answer: None,
    };
    let report = run_pipeline(
        &index,
        &pipeline_reasoner,
        &executor,
        &PipelineConfig::default(),
        &input,
        &mut pool,
    )
    .unwrap();

    assert_eq!(report.student_retrieval.items.len(), 2);
    assert_eq!(report.round_one.answer.as_deref(), Some("0.9"));
    assert!(report.round_one.plan.steps.iter().any(|s| matches!(
        s.source,
        PlanStepSource::AdaptedFrom(_)
    )));
    assert_eq!(pool.entries.len(), 2, "both adaptations were rewrites");

    let teacher = report.teacher.as_ref().expect("teacher round always runs");
    let kb_ids: Vec<&str> = index
        .snapshot()
        .iter()
        .map(|e| e.id.as_str())
        .collect();
    for cited in &teacher.guidance.cited {
        assert!(kb_ids.contains(&cited.as_str()), "citation outside the knowledge base");
    }
    assert_eq!(teacher.decisions.len(), 2);
    assert!(teacher
        .decisions
        .iter()
        .any(|d| matches!(d.action, ConflictAction::MergedInto { .. })));
    assert_eq!(teacher.outcome.answer.as_deref(), Some("1.456"));
    assert_eq!(pipeline_reasoner.remaining(), 0, "every scripted reply was consumed");

    // Evolution: usage, feedback, prune.
    let ids: Vec<_> = loaded.snapshot().iter().map(|e| e.id.clone()).collect();
    record_usage(&mut loaded, &ids[0], 2_000, 0.25).unwrap();
    let used = loaded.get(&ids[0]).unwrap().clone();
    assert_eq!(used.quality.usage_count, 1);
    assert_eq!(used.quality.usage_log.len(), 1);
    assert_eq!(used.last_used_at, 2_000);

    let evo = EvolutionConfig::default();
    let demoted = update_quality(&mut loaded, &ids[1], 0.0, &evo).unwrap();
    assert!((demoted - 0.9).abs() < 1e-12);

    let prune_config = EvolutionConfig {
        prune_threshold: 0.95,
        ..EvolutionConfig::default()
    };
    let removed = apply_prune(&mut loaded, 2_000, &prune_config);
    assert_eq!(removed.len(), 1);
    assert_eq!(removed[0].id, ids[1]);
    assert_eq!(loaded.len(), 1);
    assert!(loaded.get(&ids[0]).is_some());
}
