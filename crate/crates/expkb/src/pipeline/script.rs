//! Scripted reasoner and executor implementations.
//!
//! These replace live models in tests and offline runs. Replies are queued
//! per prompt kind and consumed in FIFO order, so a pipeline run is
//! reproducible end to end: same script, same report. An exhausted or
//! missing queue surfaces as a reasoner error, which is exactly how the
//! pipeline's degraded paths get exercised.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::prompts::PromptKind;
use super::{
    ExecutionTrajectory, Executor, ExecutorError, FinishReason, Plan, Reasoner, ReasonerError,
    ReasonerRequest, ReasonerResponse, TrajectoryStep,
};

/// Reasoner that replays queued responses, dispatched on the prompt kind
/// recovered from each request's system message.
#[derive(Debug, Default)]
pub struct ScriptedReasoner {
    queues: Mutex<BTreeMap<&'static str, VecDeque<ReasonerResponse>>>,
    calls: Mutex<Vec<&'static str>>,
}

impl ScriptedReasoner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a plain successful reply for one prompt kind.
    pub fn push_text(&self, kind: PromptKind, text: impl Into<String>) {
        self.push(
            kind,
            ReasonerResponse {
                text: text.into(),
                finish: FinishReason::Stop,
            },
        );
    }

    pub fn push(&self, kind: PromptKind, response: ReasonerResponse) {
        self.queues
            .lock()
            .expect("queue lock")
            .entry(kind.name())
            .or_default()
            .push_back(response);
    }

    /// Prompt kinds of every request served or rejected so far, in order.
    pub fn call_log(&self) -> Vec<&'static str> {
        self.calls.lock().expect("call lock").clone()
    }

    /// Queued replies not yet consumed.
    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .expect("queue lock")
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

impl Reasoner for ScriptedReasoner {
    fn complete(&self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        let Some(kind) = request.kind() else {
            return Err(ReasonerError::Contract {
                message: "request system message matches no known prompt".to_string(),
            });
        };
        self.calls.lock().expect("call lock").push(kind.name());
        self.queues
            .lock()
            .expect("queue lock")
            .get_mut(kind.name())
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| ReasonerError::Transport {
                message: format!("script exhausted for prompt kind {}", kind.name()),
            })
    }

    fn identity(&self) -> &str {
        "scripted-reasoner/v1"
    }
}

/// One queued executor outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRun {
    #[serde(default)]
    pub steps: Vec<TrajectoryStep>,
    #[serde(default)]
    pub final_answer: Option<String>,
    /// When set the run fails with this message; any steps above become the
    /// partial trajectory.
    #[serde(default)]
    pub error: Option<String>,
}

/// Executor that replays queued trajectories in FIFO order. Exhaustion is
/// an execution failure with no partial trajectory.
#[derive(Debug, Default)]
pub struct ScriptedExecutor {
    runs: Mutex<VecDeque<ScriptedRun>>,
    plans: Mutex<Vec<Plan>>,
}

impl ScriptedExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, run: ScriptedRun) {
        self.runs.lock().expect("run lock").push_back(run);
    }

    pub fn push_success(&self, steps: Vec<TrajectoryStep>, final_answer: Option<String>) {
        self.push(ScriptedRun {
            steps,
            final_answer,
            error: None,
        });
    }

    /// Plans received so far, in execution order.
    pub fn plans(&self) -> Vec<Plan> {
        self.plans.lock().expect("plan lock").clone()
    }
}

impl Executor for ScriptedExecutor {
    fn execute(&self, plan: &Plan, _query: &str) -> Result<ExecutionTrajectory, ExecutorError> {
        self.plans.lock().expect("plan lock").push(plan.clone());
        let Some(run) = self.runs.lock().expect("run lock").pop_front() else {
            return Err(ExecutorError::Failed {
                partial: None,
                message: "executor script exhausted".to_string(),
            });
        };
        let trajectory = ExecutionTrajectory {
            steps: run.steps,
            final_answer: run.final_answer,
        };
        match run.error {
            None => Ok(trajectory),
            Some(message) => Err(ExecutorError::Failed {
                partial: (!trajectory.steps.is_empty()).then_some(trajectory),
                message,
            }),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("unknown prompt kind {name:?} in script")]
    UnknownKind { name: String },
}

/// On-disk script: reasoner replies keyed by prompt kind name, plus
/// executor runs in the order they will be consumed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineScript {
    #[serde(default)]
    pub reasoner: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub executor: Vec<ScriptedRun>,
}

impl PipelineScript {
    /// Builds the scripted reasoner and executor this script describes.
    pub fn instantiate(&self) -> Result<(ScriptedReasoner, ScriptedExecutor), ScriptError> {
        let reasoner = ScriptedReasoner::new();
        for (name, replies) in &self.reasoner {
            let kind = PromptKind::from_name(name).ok_or_else(|| ScriptError::UnknownKind {
                name: name.clone(),
            })?;
            for reply in replies {
                reasoner.push_text(kind, reply.clone());
            }
        }
        let executor = ScriptedExecutor::new();
        for run in &self.executor {
            executor.push(run.clone());
        }
        Ok((reasoner, executor))
    }
}
