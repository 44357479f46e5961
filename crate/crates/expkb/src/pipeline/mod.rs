//! The two-round reason/retrieve/refine pipeline.
//!
//! Round one (student): parse the query, extract key reasoning terms,
//! retrieve whole experiences, adapt them to the query's domain, fold them
//! into a numbered plan, execute. Round two (teacher): summarize the
//! resulting trajectory step by step, analyze it for faults, retrieve
//! step-level refinement experiences, formulate numbered guidance, integrate
//! the guidance into the plan (merging compatible hints into their matching
//! steps, appending the rest), and execute again.
//!
//! Round two is unsupervised by default: it always runs and never consults
//! the expected answer. The optional supervised gate skips round two when
//! the round-one answer already matches a provided expected answer.
//!
//! Every reasoner call degrades gracefully: parse failures fall back to the
//! raw query, unusable summaries fall back to extractive ones, and so on.
//! Executor failures are recorded in the report rather than raised, and the
//! teacher round still runs over whatever partial trajectory exists.

pub mod prompts;
pub mod script;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::retrieval::{
    student_retrieve, teacher_retrieve, KbIndex, RetrievalConfig, RetrievalError,
    RetrievalResult, StudentQuery, TeacherQuery,
};
use crate::semantic::{dense_cosine, EmbeddingError, EmbeddingProvider};
use crate::store::{Experience, ExperienceId};

pub use prompts::PromptKind;

/// Sampling settings forwarded with every reasoner request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ReasonerSettings {
    fn default() -> Self {
        ReasonerSettings {
            temperature: 1.0,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// What crosses the wire to a reasoner: an ordered message list plus
/// sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ReasonerRequest {
    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    /// The prompt kind this request was built from, recovered from its
    /// system message.
    pub fn kind(&self) -> Option<PromptKind> {
        self.system_text().and_then(PromptKind::from_system_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerResponse {
    pub text: String,
    pub finish: FinishReason,
}

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("reasoner transport failure: {message}")]
    Transport { message: String },
    #[error("reasoner contract violation: {message}")]
    Contract { message: String },
}

/// A text-completion model behind a request/response wire protocol.
pub trait Reasoner: Send + Sync {
    fn complete(&self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError>;
    fn identity(&self) -> &str;
}

impl<R: Reasoner + ?Sized> Reasoner for Arc<R> {
    fn complete(&self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        self.as_ref().complete(request)
    }
    fn identity(&self) -> &str {
        self.as_ref().identity()
    }
}

fn request(kind: PromptKind, user: String, settings: &ReasonerSettings) -> ReasonerRequest {
    ReasonerRequest {
        messages: vec![
            Message {
                role: Role::System,
                content: kind.asset().to_string(),
            },
            Message {
                role: Role::User,
                content: user,
            },
        ],
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
    }
}

/// Completes a request and returns usable text, or None on transport
/// failure, refusal, or empty output.
fn complete_text(
    reasoner: &dyn Reasoner,
    kind: PromptKind,
    user: String,
    settings: &ReasonerSettings,
) -> Option<String> {
    let response = reasoner.complete(&request(kind, user, settings)).ok()?;
    if response.finish == FinishReason::Refusal {
        return None;
    }
    let text = response.text.trim().to_string();
    if text.is_empty() {
        None
    } else {
        Some(text)
    }
}

/// Strips a surrounding markdown code fence, if any, so strict JSON parsing
/// tolerates the most common wrapper reasoners add.
fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    let rest = rest.strip_prefix('\n').unwrap_or(rest);
    rest.strip_suffix("```").map(str::trim).unwrap_or(trimmed)
}

/// Query decomposed into a reusable pattern and a concrete goal. When the
/// reasoner cannot produce one, the pattern falls back to the query itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub problem_pattern: String,
    pub goal: Option<String>,
    pub fallback_used: bool,
}

/// One reasoner call; never fails. An unusable response yields the query as
/// its own problem pattern with no goal.
pub fn parse_query(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    query: &str,
) -> ParsedQuery {
    #[derive(Deserialize)]
    struct ParseResponse {
        problem_pattern: String,
        #[serde(default)]
        goal: Option<String>,
    }
    let fallback = || ParsedQuery {
        problem_pattern: query.to_string(),
        goal: None,
        fallback_used: true,
    };
    let Some(text) = complete_text(reasoner, PromptKind::Parse, query.to_string(), settings)
    else {
        return fallback();
    };
    match serde_json::from_str::<ParseResponse>(strip_code_fence(&text)) {
        Ok(parsed) if !parsed.problem_pattern.trim().is_empty() => ParsedQuery {
            problem_pattern: parsed.problem_pattern.trim().to_string(),
            goal: parsed
                .goal
                .map(|g| g.trim().to_string())
                .filter(|g| !g.is_empty()),
            fallback_used: false,
        },
        _ => fallback(),
    }
}

/// Reasoning surface for retrieval: the full response text plus the key
/// terms it marked in brace groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub text: String,
    pub key_terms: Vec<String>,
}

/// Extracts brace-group terms: each `{...}` group is split on `;`, entries
/// trimmed, empties dropped, duplicates removed in order.
fn brace_terms(text: &str) -> Vec<String> {
    let mut terms: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let Some(close_rel) = rest[open + 1..].find('}') else {
            break;
        };
        let group = &rest[open + 1..open + 1 + close_rel];
        for part in group.split(';') {
            let term = part.trim();
            if !term.is_empty() && !terms.iter().any(|t| t == term) {
                terms.push(term.to_string());
            }
        }
        rest = &rest[open + 1 + close_rel + 1..];
    }
    terms
}

/// One reasoner call; never fails. On an unusable response the trace text is
/// the query itself and no key terms are extracted.
pub fn reason(reasoner: &dyn Reasoner, settings: &ReasonerSettings, query: &str) -> ReasoningTrace {
    match complete_text(reasoner, PromptKind::Reason, query.to_string(), settings) {
        Some(text) => ReasoningTrace {
            key_terms: brace_terms(&text),
            text,
        },
        None => ReasoningTrace {
            text: query.to_string(),
            key_terms: Vec::new(),
        },
    }
}

/// Where a plan step came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStepSource {
    /// Authored by the reasoner for this query.
    Reasoned,
    /// Derived from a retrieved experience.
    AdaptedFrom(ExperienceId),
    /// Introduced or rewritten by teacher guidance.
    Guidance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: usize,
    pub text: String,
    pub tool_hint: Option<String>,
    pub source: PlanStepSource,
}

/// Ordered, non-empty list of plan steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
}

impl Plan {
    fn reindex(&mut self) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            step.index = i;
        }
    }

    pub fn step_texts(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.text.clone()).collect()
    }
}

/// What the adaptation of one retrieved experience produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedExperience {
    pub source_id: ExperienceId,
    pub experience: Experience,
    /// False when the experience transferred verbatim.
    pub changed: bool,
    /// True when the reasoner response was unusable and the source was kept.
    pub flagged: bool,
}

/// The task an experience is adapted toward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTarget {
    pub problem: String,
    pub goal: Option<String>,
    pub domain: Option<String>,
}

/// Record of one successful adaptation, kept as a few-shot exemplar for
/// later adaptation calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub source_domain: Option<String>,
    pub target_domain: Option<String>,
    pub source_problem: String,
    pub adapted_problem: String,
}

/// Grows by one entry per successful adaptation; recent entries serve as
/// exemplars in subsequent adaptation prompts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPool {
    pub entries: Vec<FeedbackEntry>,
}

impl FeedbackPool {
    pub fn record(&mut self, entry: FeedbackEntry) {
        self.entries.push(entry);
    }

    /// The most recent `n` entries, oldest first.
    pub fn exemplars(&self, n: usize) -> &[FeedbackEntry] {
        let start = self.entries.len().saturating_sub(n);
        &self.entries[start..]
    }
}

fn render_experience_reference(e: &Experience) -> String {
    let plan = e
        .steps
        .iter()
        .map(|s| format!("{}. {}", s.index + 1, s.text))
        .collect::<Vec<_>>()
        .join("\n");
    let experience_notes = e.failure_modes.join("; ");
    format!(
        "{{\n\"question\": {},\n\"agent_plan\": {},\n\"agent_experience\": {}\n}}",
        serde_json::to_string(&e.problem_pattern).expect("string serializes"),
        serde_json::to_string(&plan).expect("string serializes"),
        serde_json::to_string(&experience_notes).expect("string serializes"),
    )
}

/// Adapts one experience to a target task with one reasoner call carrying
/// the source, the target, and up to `exemplar_cap` prior adaptations.
///
/// A source whose context domain equals the target domain transfers
/// verbatim without a reasoner call. An unusable reasoner response keeps
/// the source and flags the outcome. A successful adaptation is recorded in
/// the feedback pool.
pub fn adapt_experience(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    source: &Experience,
    target: &AdaptationTarget,
    pool: &mut FeedbackPool,
    exemplar_cap: usize,
) -> AdaptedExperience {
    let source_domain = source.context.as_ref().and_then(|c| c.domain.clone());
    if let (Some(s), Some(t)) = (&source_domain, &target.domain) {
        if s == t {
            return AdaptedExperience {
                source_id: source.id.clone(),
                experience: source.clone(),
                changed: false,
                flagged: false,
            };
        }
    }

    #[derive(Deserialize)]
    struct AdaptStep {
        text: String,
        #[serde(default)]
        tool_hint: Option<String>,
    }
    #[derive(Deserialize)]
    struct AdaptResponse {
        problem_pattern: String,
        #[serde(default)]
        goal: Option<String>,
        steps: Vec<AdaptStep>,
    }

    let mut user = String::new();
    user.push_str("Source experience:\n");
    user.push_str(&render_experience_reference(source));
    if let Some(domain) = &source_domain {
        user.push_str(&format!("\nSource domain: {domain}"));
    }
    user.push_str("\n\nTarget task:\n");
    user.push_str(&target.problem);
    if let Some(goal) = &target.goal {
        user.push_str(&format!("\nGoal: {goal}"));
    }
    if let Some(domain) = &target.domain {
        user.push_str(&format!("\nTarget domain: {domain}"));
    }
    let exemplars = pool.exemplars(exemplar_cap);
    if !exemplars.is_empty() {
        user.push_str("\n\nPrior adaptations:");
        for entry in exemplars {
            user.push_str(&format!(
                "\n- \"{}\" ({}) adapted to \"{}\" ({})",
                entry.source_problem,
                entry.source_domain.as_deref().unwrap_or("unspecified"),
                entry.adapted_problem,
                entry.target_domain.as_deref().unwrap_or("unspecified"),
            ));
        }
    }

    let flagged_source = |source: &Experience| AdaptedExperience {
        source_id: source.id.clone(),
        experience: source.clone(),
        changed: false,
        flagged: true,
    };

    let Some(text) = complete_text(reasoner, PromptKind::Adapt, user, settings) else {
        return flagged_source(source);
    };
    let parsed: AdaptResponse = match serde_json::from_str(strip_code_fence(&text)) {
        Ok(p) => p,
        Err(_) => return flagged_source(source),
    };
    if parsed.problem_pattern.trim().is_empty()
        || parsed.steps.is_empty()
        || parsed.steps.iter().any(|s| s.text.trim().is_empty())
    {
        return flagged_source(source);
    }

    let mut adapted = source.clone();
    adapted.id = ExperienceId::new("");
    adapted.problem_pattern = parsed.problem_pattern.trim().to_string();
    adapted.goal = parsed
        .goal
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty());
    adapted.steps = parsed
        .steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut step = crate::store::SolutionStep::new(i, s.text.trim());
            step.tool_hint = s.tool_hint.filter(|t| !t.trim().is_empty());
            step
        })
        .collect();
    if let Some(domain) = &target.domain {
        let mut ctx = adapted.context.take().unwrap_or_default();
        ctx.domain = Some(domain.clone());
        adapted.context = Some(ctx);
    }
    let link = crate::store::RelationLink {
        kind: crate::store::RelationKind::Adaptation,
        target: source.id.clone(),
    };
    if !adapted.relations.contains(&link) {
        adapted.relations.push(link);
    }

    let changed = adapted.problem_pattern != source.problem_pattern
        || adapted.goal != source.goal
        || adapted.steps.len() != source.steps.len()
        || adapted
            .steps
            .iter()
            .zip(&source.steps)
            .any(|(a, b)| a.text != b.text);
    if changed {
        pool.record(FeedbackEntry {
            source_domain,
            target_domain: target.domain.clone(),
            source_problem: source.problem_pattern.clone(),
            adapted_problem: adapted.problem_pattern.clone(),
        });
    }
    AdaptedExperience {
        source_id: source.id.clone(),
        experience: adapted,
        changed,
        flagged: false,
    }
}

/// Plan construction outcome; `degraded` marks the trace-only fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub plan: Plan,
    pub degraded: bool,
}

fn parse_plan_line(line: &str, adapted: &[AdaptedExperience]) -> Option<PlanStep> {
    let re = crate::text::leading_number_regex();
    let trimmed = line.trim();
    let m = re.find(trimmed)?;
    let mut rest = trimmed[m.end()..].trim_start();
    let mut source = PlanStepSource::Reasoned;
    if let Some(after) = rest.strip_prefix("[exp ") {
        if let Some(close) = after.find(']') {
            if let Ok(n) = after[..close].trim().parse::<usize>() {
                if n >= 1 && n <= adapted.len() {
                    source = PlanStepSource::AdaptedFrom(adapted[n - 1].source_id.clone());
                    rest = after[close + 1..].trim_start();
                }
            }
        }
    }
    let mut tool_hint = None;
    let mut text = rest.trim_end().to_string();
    if let Some(open) = text.rfind("[tool:") {
        if text.ends_with(']') {
            let name = text[open + 6..text.len() - 1].trim().to_string();
            if !name.is_empty() {
                tool_hint = Some(name);
                text = text[..open].trim_end().to_string();
            }
        }
    }
    if text.is_empty() {
        return None;
    }
    Some(PlanStep {
        index: 0,
        text,
        tool_hint,
        source,
    })
}

/// Folds the reasoning trace and the adapted experiences into a numbered
/// plan via one reasoner call. When the response yields no usable steps the
/// plan is built from the trace alone (or the query as a last resort) and
/// marked degraded.
pub fn refine_and_plan(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    query: &str,
    trace: &ReasoningTrace,
    parsed: &ParsedQuery,
    adapted: &[AdaptedExperience],
) -> RefineOutcome {
    let mut user = format!("Task:\n{query}\n");
    user.push_str(&format!("\nProblem pattern: {}\n", parsed.problem_pattern));
    if let Some(goal) = &parsed.goal {
        user.push_str(&format!("Goal: {goal}\n"));
    }
    user.push_str(&format!("\nReasoning trace:\n{}\n", trace.text));
    if !adapted.is_empty() {
        user.push_str("\nReference experiences:\n");
        for (i, a) in adapted.iter().enumerate() {
            user.push_str(&format!(
                "{}. {}\n",
                i + 1,
                render_experience_reference(&a.experience)
            ));
        }
    }

    if let Some(text) = complete_text(reasoner, PromptKind::Plan, user, settings) {
        let steps: Vec<PlanStep> = text
            .lines()
            .filter_map(|line| parse_plan_line(line, adapted))
            .collect();
        if !steps.is_empty() {
            let mut plan = Plan { steps };
            plan.reindex();
            return RefineOutcome {
                plan,
                degraded: false,
            };
        }
    }

    let mut texts = crate::store::split_plan_steps(&trace.text);
    if texts.is_empty() {
        texts.push(query.to_string());
    }
    let mut plan = Plan {
        steps: texts
            .into_iter()
            .map(|text| PlanStep {
                index: 0,
                text,
                tool_hint: None,
                source: PlanStepSource::Reasoned,
            })
            .collect(),
    };
    plan.reindex();
    RefineOutcome {
        plan,
        degraded: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStepKind {
    Task,
    Planning,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub name: String,
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub kind: TrajectoryStepKind,
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolInvocation>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub observation: Option<String>,
}

impl TrajectoryStep {
    pub fn new(kind: TrajectoryStepKind, content: impl Into<String>) -> Self {
        TrajectoryStep {
            kind,
            content: content.into(),
            tool_calls: Vec::new(),
            error: None,
            observation: None,
        }
    }
}

/// What actually happened when a plan ran.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrajectory {
    pub steps: Vec<TrajectoryStep>,
    #[serde(default)]
    pub final_answer: Option<String>,
}

/// Executor failure; a partial trajectory, when one exists, still feeds the
/// teacher round.
#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("execution failed: {message}")]
    Failed {
        partial: Option<ExecutionTrajectory>,
        message: String,
    },
}

/// Runs a plan against the real task environment.
pub trait Executor: Send + Sync {
    fn execute(&self, plan: &Plan, query: &str) -> Result<ExecutionTrajectory, ExecutorError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    /// One line per summarized trajectory step, in step order.
    pub step_summaries: Vec<String>,
    pub overall: String,
}

fn render_trajectory(trajectory: &ExecutionTrajectory) -> String {
    let mut out = String::new();
    for (i, step) in trajectory.steps.iter().enumerate() {
        let kind = match step.kind {
            TrajectoryStepKind::Task => "task",
            TrajectoryStepKind::Planning => "planning",
            TrajectoryStepKind::Action => "action",
        };
        out.push_str(&format!("{}. [{kind}] {}\n", i + 1, step.content));
        for call in &step.tool_calls {
            out.push_str(&format!("   tool {}: {}\n", call.name, call.arguments));
        }
        if let Some(observation) = &step.observation {
            out.push_str(&format!("   observation: {observation}\n"));
        }
        if let Some(error) = &step.error {
            out.push_str(&format!("   error: {error}\n"));
        }
    }
    if let Some(answer) = &trajectory.final_answer {
        out.push_str(&format!("Final answer: {answer}\n"));
    }
    out
}

fn truncate_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((byte, _)) => format!("{}...", &text[..byte]),
        None => text.to_string(),
    }
}

/// Indices of the steps the summary covers: planning and action steps, or
/// every step when the trajectory has no planning/action steps at all.
fn summarized_indices(trajectory: &ExecutionTrajectory) -> Vec<usize> {
    let picked: Vec<usize> = trajectory
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            matches!(
                s.kind,
                TrajectoryStepKind::Planning | TrajectoryStepKind::Action
            )
        })
        .map(|(i, _)| i)
        .collect();
    if picked.is_empty() {
        (0..trajectory.steps.len()).collect()
    } else {
        picked
    }
}

fn extractive_summary(trajectory: &ExecutionTrajectory) -> TrajectorySummary {
    let indices = summarized_indices(trajectory);
    let step_summaries = indices
        .iter()
        .map(|&i| {
            let step = &trajectory.steps[i];
            let mut line = truncate_chars(step.content.trim(), 200);
            if let Some(error) = &step.error {
                line.push_str(&format!(" [error: {}]", truncate_chars(error.trim(), 120)));
            }
            line
        })
        .collect();
    let overall = match &trajectory.final_answer {
        Some(answer) => format!("Run finished with final answer: {answer}"),
        None => "Run finished without producing a final answer".to_string(),
    };
    TrajectorySummary {
        step_summaries,
        overall,
    }
}

/// One reasoner call producing one summary line per planning/action step
/// plus an overall paragraph. A response with the wrong shape falls back to
/// a deterministic extractive summary, so a non-empty trajectory always
/// yields at least one summary step.
pub fn summarize_trajectory(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    trajectory: &ExecutionTrajectory,
) -> TrajectorySummary {
    if trajectory.steps.is_empty() {
        return TrajectorySummary {
            step_summaries: Vec::new(),
            overall: "Nothing was executed".to_string(),
        };
    }
    #[derive(Deserialize)]
    struct SummaryResponse {
        steps: Vec<String>,
        overall: String,
    }
    let expected = summarized_indices(trajectory).len();
    let Some(text) = complete_text(
        reasoner,
        PromptKind::Summarize,
        render_trajectory(trajectory),
        settings,
    ) else {
        return extractive_summary(trajectory);
    };
    match serde_json::from_str::<SummaryResponse>(strip_code_fence(&text)) {
        Ok(parsed)
            if parsed.steps.len() == expected
                && !parsed.steps.iter().any(|s| s.trim().is_empty()) =>
        {
            TrajectorySummary {
                step_summaries: parsed.steps.iter().map(|s| s.trim().to_string()).collect(),
                overall: parsed.overall.trim().to_string(),
            }
        }
        _ => extractive_summary(trajectory),
    }
}

/// One fault localized to a trajectory step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFinding {
    /// 0-based index into the trajectory's steps.
    pub step_index: usize,
    pub error_type: String,
    pub cause: String,
}

/// Faults found in a trajectory and the steps they implicate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAnalysis {
    pub findings: Vec<ErrorFinding>,
    /// Sorted, deduplicated step indices drawn from the findings.
    pub problem_steps: Vec<usize>,
}

fn error_type_of(message: &str) -> String {
    match message.split_once(':') {
        Some((head, _))
            if !head.trim().is_empty() && head.trim().chars().all(|c| !c.is_whitespace()) =>
        {
            head.trim().to_string()
        }
        _ => "recorded_error".to_string(),
    }
}

/// Collects faults: every step with a recorded error is always implicated;
/// one reasoner call may add logical-flaw findings on top. When an expected
/// answer is supplied and the final answer does not match it, at least one
/// finding is guaranteed. Reasoner failure degrades to the recorded errors
/// alone.
pub fn analyze_trajectory(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    trajectory: &ExecutionTrajectory,
    expected_answer: Option<&str>,
) -> TrajectoryAnalysis {
    let mut findings: Vec<ErrorFinding> = trajectory
        .steps
        .iter()
        .enumerate()
        .filter_map(|(i, step)| {
            step.error.as_ref().map(|message| ErrorFinding {
                step_index: i,
                error_type: error_type_of(message),
                cause: message.clone(),
            })
        })
        .collect();

    let mut user = render_trajectory(trajectory);
    if let Some(expected) = expected_answer {
        user.push_str(&format!("Expected answer: {expected}\n"));
    }
    if let Some(text) = complete_text(reasoner, PromptKind::Analyze, user, settings) {
        if let Ok(extra) =
            serde_json::from_str::<Vec<ErrorFinding>>(strip_code_fence(&text))
        {
            for finding in extra {
                let valid = finding.step_index < trajectory.steps.len()
                    && !finding.error_type.trim().is_empty()
                    && !finding.cause.trim().is_empty();
                let duplicate = findings.iter().any(|f| {
                    f.step_index == finding.step_index && f.error_type == finding.error_type
                });
                if valid && !duplicate {
                    findings.push(finding);
                }
            }
        }
    }

    if let Some(expected) = expected_answer {
        let answered = trajectory
            .final_answer
            .as_deref()
            .is_some_and(|a| a.trim() == expected.trim());
        if !answered && findings.is_empty() {
            findings.push(ErrorFinding {
                step_index: trajectory.steps.len().saturating_sub(1),
                error_type: "outcome_mismatch".to_string(),
                cause: format!(
                    "final answer {:?} does not match the expected answer {:?}",
                    trajectory.final_answer.as_deref().unwrap_or(""),
                    expected
                ),
            });
        }
    }

    let mut problem_steps: Vec<usize> = findings.iter().map(|f| f.step_index).collect();
    problem_steps.sort_unstable();
    problem_steps.dedup();
    TrajectoryAnalysis {
        findings,
        problem_steps,
    }
}

/// Teacher guidance: numbered suggestions plus the experiences they cite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub hints: Vec<String>,
    pub cited: Vec<ExperienceId>,
    /// True when the reasoner produced no usable suggestions.
    pub degraded: bool,
}

static HINT_NUMBER: std::sync::LazyLock<regex::Regex> =
    std::sync::LazyLock::new(|| regex::Regex::new(r"^\d+\.\s*").expect("valid regex"));

/// One reasoner call turning the analysis, the log summary, and the
/// step-level retrieved experiences into brace-delimited numbered
/// suggestions. No usable suggestions means empty, degraded guidance.
pub fn formulate_guidance(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    summary: &TrajectorySummary,
    analysis: &TrajectoryAnalysis,
    cited: &[Arc<Experience>],
) -> Guidance {
    let mut user = String::new();
    if !cited.is_empty() {
        user.push_str("You can refer to similar tasks and corresponding experience to provide your suggestions:\n");
        for experience in cited {
            user.push_str(&render_experience_reference(experience));
            user.push('\n');
        }
        user.push('\n');
    }
    user.push_str("Execution logs summary:\n");
    user.push_str(&summary.overall);
    user.push('\n');
    for (i, line) in summary.step_summaries.iter().enumerate() {
        user.push_str(&format!("{}. {line}\n", i + 1));
    }
    if !analysis.findings.is_empty() {
        user.push_str("\nDetected failures:\n");
        for finding in &analysis.findings {
            user.push_str(&format!(
                "- step {}: {} ({})\n",
                finding.step_index + 1,
                finding.error_type,
                finding.cause
            ));
        }
    }

    let cited_ids: Vec<ExperienceId> = cited.iter().map(|e| e.id.clone()).collect();
    let Some(text) = complete_text(reasoner, PromptKind::Refine, user, settings) else {
        return Guidance {
            hints: Vec::new(),
            cited: cited_ids,
            degraded: true,
        };
    };
    let hints: Vec<String> = brace_terms(&text)
        .into_iter()
        .map(|h| HINT_NUMBER.replace(&h, "").trim().to_string())
        .filter(|h| !h.is_empty())
        .collect();
    let degraded = hints.is_empty();
    Guidance {
        hints,
        cited: cited_ids,
        degraded,
    }
}

/// How one guidance hint was integrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictAction {
    /// Hint and step were compatible; the step was rewritten to honor both.
    MergedInto { step_index: usize },
    /// No step was compatible enough; the hint became its own step.
    Appended { step_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictDecision {
    pub hint: String,
    /// Cosine between the hint and its closest plan step at decision time.
    pub compatibility: f64,
    pub action: ConflictAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOutcome {
    pub plan: Plan,
    pub decisions: Vec<ConflictDecision>,
}

/// Folds guidance hints into a plan, one hint at a time against the current
/// plan state. A hint whose best-matching step exceeds the compatibility
/// threshold (strictly, on the semantic channel) is merged into that step
/// via one reasoner rewrite; otherwise it is appended as a new
/// guidance-sourced step. Guidance text wins conflicts inside a merge, and
/// merged or appended steps are matchable by later hints.
pub fn integrate_with_conflict_resolution(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    provider: &dyn EmbeddingProvider,
    plan: &Plan,
    guidance: &Guidance,
    conflict_threshold: f64,
) -> Result<IntegrationOutcome, PipelineError> {
    let mut merged = plan.clone();
    let mut decisions = Vec::with_capacity(guidance.hints.len());
    if guidance.hints.is_empty() {
        return Ok(IntegrationOutcome {
            plan: merged,
            decisions,
        });
    }
    let step_texts: Vec<String> = merged.steps.iter().map(|s| s.text.clone()).collect();
    let mut step_vectors = provider.embed_batch(&step_texts)?;
    crate::semantic::check_batch(provider, step_texts.len(), &step_vectors)?;

    for hint in &guidance.hints {
        let hint_vector = crate::semantic::embed_one(provider, hint)?;
        let mut best_index = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for (i, v) in step_vectors.iter().enumerate() {
            let cos = dense_cosine(v, &hint_vector);
            if cos > best_cos {
                best_cos = cos;
                best_index = i;
            }
        }
        if best_cos > conflict_threshold {
            let step_text = merged.steps[best_index].text.clone();
            let user = format!("Plan step:\n{step_text}\n\nSuggestion:\n{hint}");
            let rewritten = complete_text(reasoner, PromptKind::Merge, user, settings)
                .unwrap_or_else(|| format!("{step_text} ({hint})"));
            merged.steps[best_index].text = rewritten.clone();
            merged.steps[best_index].source = PlanStepSource::Guidance;
            step_vectors[best_index] = crate::semantic::embed_one(provider, &rewritten)?;
            decisions.push(ConflictDecision {
                hint: hint.clone(),
                compatibility: best_cos,
                action: ConflictAction::MergedInto {
                    step_index: best_index,
                },
            });
        } else {
            merged.steps.push(PlanStep {
                index: 0,
                text: hint.clone(),
                tool_hint: None,
                source: PlanStepSource::Guidance,
            });
            step_vectors.push(hint_vector);
            decisions.push(ConflictDecision {
                hint: hint.clone(),
                compatibility: best_cos.max(-1.0),
                action: ConflictAction::Appended {
                    step_index: merged.steps.len() - 1,
                },
            });
        }
    }
    merged.reindex();
    Ok(IntegrationOutcome {
        plan: merged,
        decisions,
    })
}

/// Pipeline tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    pub reasoner: ReasonerSettings,
    /// Strict lower bound on hint/step cosine for merging during guidance
    /// integration.
    pub conflict_threshold: f64,
    /// When true and an expected answer is supplied, a correct round-one
    /// answer skips the teacher round. Off by default: the teacher round
    /// runs unconditionally and never sees the expected answer.
    pub supervised_gate: bool,
    /// Prior adaptations shown as few-shot exemplars per adaptation call.
    pub adaptation_exemplars: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieval: RetrievalConfig::default(),
            reasoner: ReasonerSettings::default(),
            conflict_threshold: 0.75,
            supervised_gate: false,
            adaptation_exemplars: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineInput {
    pub query: String,
    /// Consulted only when the supervised gate is on.
    #[serde(default)]
    pub expected_answer: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline query is empty")]
    EmptyQuery,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// One round's plan, what execution did with it, and how it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub plan: Plan,
    pub degraded_plan: bool,
    pub trajectory: ExecutionTrajectory,
    pub answer: Option<String>,
    pub executor_error: Option<String>,
}

/// Everything the teacher round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRound {
    pub summary: TrajectorySummary,
    pub analysis: TrajectoryAnalysis,
    pub retrieval: RetrievalResult,
    pub guidance: Guidance,
    pub decisions: Vec<ConflictDecision>,
    pub outcome: RoundOutcome,
}

/// Full machine-readable account of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub query: String,
    pub parsed: ParsedQuery,
    pub trace: ReasoningTrace,
    pub student_retrieval: RetrievalResult,
    pub adapted: Vec<AdaptedExperience>,
    pub round_one: RoundOutcome,
    /// Absent only when the supervised gate accepted the round-one answer.
    pub teacher: Option<TeacherRound>,
    pub supervised_skip: bool,
}

fn run_executor(executor: &dyn Executor, plan: &Plan, query: &str) -> RoundOutcome {
    match executor.execute(plan, query) {
        Ok(trajectory) => RoundOutcome {
            plan: plan.clone(),
            degraded_plan: false,
            answer: trajectory.final_answer.clone(),
            trajectory,
            executor_error: None,
        },
        Err(ExecutorError::Failed { partial, message }) => {
            let trajectory = partial.unwrap_or_default();
            RoundOutcome {
                plan: plan.clone(),
                degraded_plan: false,
                answer: trajectory.final_answer.clone(),
                trajectory,
                executor_error: Some(message),
            }
        }
    }
}

/// Runs both rounds end to end over one query.
///
/// The knowledge base is read through the prebuilt index; nothing here
/// writes to the store, reads a clock, or draws randomness, so with
/// deterministic reasoner/executor/provider implementations two runs over
/// the same inputs produce identical reports.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    index: &KbIndex,
    reasoner: &dyn Reasoner,
    executor: &dyn Executor,
    config: &PipelineConfig,
    input: &PipelineInput,
    feedback_pool: &mut FeedbackPool,
) -> Result<PipelineReport, PipelineError> {
    if input.query.trim().is_empty() {
        return Err(PipelineError::EmptyQuery);
    }
    let settings = &config.reasoner;
    let parsed = parse_query(reasoner, settings, &input.query);
    let trace = reason(reasoner, settings, &input.query);

    let student_query = StudentQuery {
        reason_trace: trace.text.clone(),
        problem: parsed.problem_pattern.clone(),
        goal: parsed.goal.clone(),
    };
    let student_retrieval = student_retrieve(index, &student_query, &config.retrieval)?;
    let retrieved: Vec<Arc<Experience>> = student_retrieval
        .items
        .iter()
        .filter_map(|item| index.snapshot().get(&item.id).cloned())
        .collect();

    let target = AdaptationTarget {
        problem: parsed.problem_pattern.clone(),
        goal: parsed.goal.clone(),
        domain: None,
    };
    let adapted: Vec<AdaptedExperience> = retrieved
        .iter()
        .map(|source| {
            adapt_experience(
                reasoner,
                settings,
                source,
                &target,
                feedback_pool,
                config.adaptation_exemplars,
            )
        })
        .collect();

    let refine = refine_and_plan(reasoner, settings, &input.query, &trace, &parsed, &adapted);
    let mut round_one = run_executor(executor, &refine.plan, &input.query);
    round_one.degraded_plan = refine.degraded;

    if config.supervised_gate {
        if let (Some(expected), Some(answer)) = (&input.expected_answer, &round_one.answer) {
            if expected.trim() == answer.trim() {
                return Ok(PipelineReport {
                    query: input.query.clone(),
                    parsed,
                    trace,
                    student_retrieval,
                    adapted,
                    round_one,
                    teacher: None,
                    supervised_skip: true,
                });
            }
        }
    }

    // Unsupervised contract: outside the supervised gate the expected answer
    // is never consulted, neither for the decision to run the teacher round
    // nor inside the analysis.
    let expected_for_analysis = if config.supervised_gate {
        input.expected_answer.as_deref()
    } else {
        None
    };

    let teacher_trajectory = if round_one.trajectory.steps.is_empty() {
        ExecutionTrajectory {
            steps: vec![TrajectoryStep::new(
                TrajectoryStepKind::Task,
                input.query.clone(),
            )],
            final_answer: round_one.answer.clone(),
        }
    } else {
        round_one.trajectory.clone()
    };

    let summary = summarize_trajectory(reasoner, settings, &teacher_trajectory);
    let analysis = analyze_trajectory(
        reasoner,
        settings,
        &teacher_trajectory,
        expected_for_analysis,
    );

    let teacher_query = TeacherQuery {
        summary_steps: summary.step_summaries.clone(),
    };
    let teacher_retrieval = teacher_retrieve(index, &teacher_query, &config.retrieval)?;
    let cited: Vec<Arc<Experience>> = teacher_retrieval
        .items
        .iter()
        .filter_map(|item| index.snapshot().get(&item.id).cloned())
        .collect();

    let guidance = formulate_guidance(reasoner, settings, &summary, &analysis, &cited);
    let integration = integrate_with_conflict_resolution(
        reasoner,
        settings,
        index.provider().as_ref(),
        &round_one.plan,
        &guidance,
        config.conflict_threshold,
    )?;
    let outcome = run_executor(executor, &integration.plan, &input.query);

    Ok(PipelineReport {
        query: input.query.clone(),
        parsed,
        trace,
        student_retrieval,
        adapted,
        round_one,
        teacher: Some(TeacherRound {
            summary,
            analysis,
            retrieval: teacher_retrieval,
            guidance,
            decisions: integration.decisions,
            outcome,
        }),
        supervised_skip: false,
    })
}
