//! Builds knowledge-base entries from raw agent execution logs.
//!
//! The flow per log: normalize the log into workflow text (tool names mapped
//! through an alias table, framework-specific keys dropped), pick few-shot
//! exemplars for the log's question, render a generation prompt, ask the
//! reasoner for a structured record (retrying once on a schema-invalid
//! response), map the record into an experience draft, validate it, and
//! commit it. Everything is deterministic given a deterministic reasoner
//! and embedding provider: running the same logs twice yields identical
//! knowledge-base contents.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::pipeline::{
    FinishReason, Message, PromptKind, Reasoner, ReasonerRequest, ReasonerSettings, Role,
};
use crate::retrieval::{hybrid_score, KbIndex, RetrievalError};
use crate::semantic::{dense_cosine, embed_one, EmbeddingError, EmbeddingProvider};
use crate::store::{
    experience_from_simple_record, Experience, ExperienceId, KnowledgeBase, SimpleRecord,
    StoreError,
};
use crate::text::LexicalModel;

/// One step of a raw execution log. Only the allowlisted fields below
/// contribute to workflow text; anything else a framework adds rides along
/// in `extra` and is dropped during normalization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawStep {
    pub step_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facts: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<RawToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RawError>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawToolCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub call_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<RawFunction>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawFunction {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawError {
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// A complete agent run as logged by the executing framework.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawExecutionLog {
    pub agent_name: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_answer: Option<String>,
    #[serde(default)]
    pub intermediate_steps: Vec<RawStep>,
}

const STEP_TYPES: [&str; 3] = ["task", "planning", "action"];

impl RawExecutionLog {
    pub fn validate(&self) -> Result<(), BuilderError> {
        if self.question.trim().is_empty() {
            return Err(BuilderError::InvalidLog {
                message: "question is empty".to_string(),
            });
        }
        for (i, step) in self.intermediate_steps.iter().enumerate() {
            if !STEP_TYPES.contains(&step.step_type.as_str()) {
                return Err(BuilderError::InvalidLog {
                    message: format!(
                        "step {} has unknown step_type {:?}",
                        i + 1,
                        step.step_type
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLineError {
    pub line: usize,
    pub message: String,
}

/// Reads line-delimited raw logs. Unparseable or invalid lines are
/// collected, not fatal, so one bad line cannot poison a batch.
pub fn load_raw_logs<R: BufRead>(
    reader: R,
) -> Result<(Vec<RawExecutionLog>, Vec<LogLineError>), std::io::Error> {
    let mut logs = Vec::new();
    let mut errors = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawExecutionLog>(&line) {
            Ok(log) => match log.validate() {
                Ok(()) => logs.push(log),
                Err(e) => errors.push(LogLineError {
                    line: index + 1,
                    message: e.to_string(),
                }),
            },
            Err(e) => errors.push(LogLineError {
                line: index + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((logs, errors))
}

/// Maps framework-specific tool names onto canonical ones. Unknown names
/// pass through unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolAliasTable {
    pub aliases: BTreeMap<String, String>,
}

impl ToolAliasTable {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        ToolAliasTable {
            aliases: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }
}

fn render_arguments(arguments: &serde_json::Value) -> String {
    match arguments {
        serde_json::Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

/// Normalizes a raw log into workflow text: step contents concatenated in
/// step order, tool names mapped through the alias table, tool arguments
/// rendered in a canonical compact form, and any non-allowlisted step
/// fields dropped.
pub fn preprocess_log(raw: &RawExecutionLog, aliases: &ToolAliasTable) -> String {
    let mut lines: Vec<String> = Vec::new();
    for step in &raw.intermediate_steps {
        if let Some(task) = step.task.as_deref().map(str::trim) {
            if !task.is_empty() {
                lines.push(task.to_string());
            }
        }
        if let Some(facts) = step.facts.as_deref().map(str::trim) {
            if !facts.is_empty() {
                lines.push(facts.to_string());
            }
        }
        if let Some(plan) = step.plan.as_deref().map(str::trim) {
            if !plan.is_empty() {
                lines.push(plan.to_string());
            }
        }
        for call in &step.tool_calls {
            let Some(function) = &call.function else {
                continue;
            };
            let name = aliases.resolve(&function.name);
            match &function.arguments {
                Some(arguments) => {
                    lines.push(format!("tool {name}: {}", render_arguments(arguments)))
                }
                None => lines.push(format!("tool {name}")),
            }
        }
        if let Some(error) = &step.error {
            let kind = error.kind.as_deref().unwrap_or("error").trim();
            let message = error.message.as_deref().unwrap_or("").trim();
            if message.is_empty() {
                lines.push(format!("error {kind}"));
            } else {
                lines.push(format!("error {kind}: {message}"));
            }
        }
    }
    lines.join("\n")
}

/// Recorded error lines of a log, reusable as failure-mode annotations.
pub fn failure_modes_of(raw: &RawExecutionLog) -> Vec<String> {
    raw.intermediate_steps
        .iter()
        .filter_map(|step| step.error.as_ref())
        .map(|error| {
            let kind = error.kind.as_deref().unwrap_or("error").trim();
            let message = error.message.as_deref().unwrap_or("").trim();
            if message.is_empty() {
                kind.to_string()
            } else {
                format!("{kind}: {message}")
            }
        })
        .collect()
}

/// A previously validated (question, plan, experience) triple shown to the
/// generator as few-shot context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub question: String,
    pub plan: String,
    pub experience: String,
}

impl FewShotExemplar {
    pub fn validate(&self) -> Result<(), BuilderError> {
        for (field, value) in [
            ("question", &self.question),
            ("plan", &self.plan),
            ("experience", &self.experience),
        ] {
            if value.trim().is_empty() {
                return Err(BuilderError::InvalidExemplar {
                    field: field.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Which generation template a prompt renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationTemplate {
    General,
    Gaia,
    Swe,
}

impl GenerationTemplate {
    pub fn prompt_kind(&self) -> PromptKind {
        match self {
            GenerationTemplate::General => PromptKind::GenerationGeneral,
            GenerationTemplate::Gaia => PromptKind::GenerationGaia,
            GenerationTemplate::Swe => PromptKind::GenerationSwe,
        }
    }
}

/// A fully assembled generation prompt: task description, workflow trace,
/// and exactly the configured number of exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub task_description: String,
    pub workflow_trace: String,
    pub exemplars: Vec<FewShotExemplar>,
    pub template: GenerationTemplate,
    /// Deterministic rendering of the user message.
    pub rendered: String,
}

impl GenerationPrompt {
    pub fn request(&self, settings: &ReasonerSettings) -> ReasonerRequest {
        ReasonerRequest {
            messages: vec![
                Message {
                    role: Role::System,
                    content: self.template.prompt_kind().asset().to_string(),
                },
                Message {
                    role: Role::User,
                    content: self.rendered.clone(),
                },
            ],
            temperature: settings.temperature,
            max_tokens: settings.max_tokens,
        }
    }
}

/// Assembles and renders a generation prompt. The exemplar list must have
/// exactly `exemplar_count` entries and every exemplar must be complete.
pub fn build_generation_prompt(
    task_description: &str,
    workflow: &str,
    exemplars: &[FewShotExemplar],
    template: GenerationTemplate,
    exemplar_count: usize,
) -> Result<GenerationPrompt, BuilderError> {
    if exemplars.len() != exemplar_count {
        return Err(BuilderError::ExemplarCount {
            expected: exemplar_count,
            got: exemplars.len(),
        });
    }
    for exemplar in exemplars {
        exemplar.validate()?;
    }
    let mut rendered = format!("Task:\n{}\n", task_description.trim());
    let workflow = workflow.trim();
    if !workflow.is_empty() {
        rendered.push_str(&format!("\nWorkflow trace:\n{workflow}\n"));
    }
    if !exemplars.is_empty() {
        rendered.push_str("\nPreviously validated examples:\n");
        for (i, exemplar) in exemplars.iter().enumerate() {
            #[derive(Serialize)]
            struct Rendered<'a> {
                question: &'a str,
                agent_plan: &'a str,
                agent_experience: &'a str,
            }
            let line = serde_json::to_string(&Rendered {
                question: &exemplar.question,
                agent_plan: &exemplar.plan,
                agent_experience: &exemplar.experience,
            })
            .expect("exemplar serializes");
            rendered.push_str(&format!("{}. {line}\n", i + 1));
        }
    }
    Ok(GenerationPrompt {
        task_description: task_description.to_string(),
        workflow_trace: workflow.to_string(),
        exemplars: exemplars.to_vec(),
        template,
        rendered,
    })
}

/// Picks the `k` pool exemplars most similar to the question under hybrid
/// (lexical + semantic) scoring; ties break toward the earlier pool entry.
/// Returns fewer than `k` only when the pool is smaller than `k`.
pub fn select_exemplars(
    provider: &dyn EmbeddingProvider,
    pool: &[FewShotExemplar],
    question: &str,
    k: usize,
    alpha: f64,
) -> Result<Vec<FewShotExemplar>, BuilderError> {
    if pool.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let questions: Vec<&str> = pool.iter().map(|e| e.question.as_str()).collect();
    let lexical = LexicalModel::fit(&questions);
    let query_vec = embed_one(provider, question)?;
    let texts: Vec<String> = questions.iter().map(|q| q.to_string()).collect();
    let pool_vecs = provider.embed_batch(&texts)?;
    crate::semantic::check_batch(provider, texts.len(), &pool_vecs)?;

    let mut scored: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, exemplar)| {
            let text_sim = lexical.cosine(question, &exemplar.question);
            let sem_sim = dense_cosine(&pool_vecs[i], &query_vec).max(0.0);
            (i, hybrid_score(alpha, text_sim, sem_sim))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, _)| pool[i].clone())
        .collect())
}

#[derive(Debug, thiserror::Error)]
pub enum BuilderError {
    #[error("invalid raw log: {message}")]
    InvalidLog { message: String },
    #[error("exemplar {field} is empty")]
    InvalidExemplar { field: String },
    #[error("expected {expected} exemplars, got {got}")]
    ExemplarCount { expected: usize, got: usize },
    #[error("generation failed after retry: {}", diagnostics.join("; "))]
    Generation { diagnostics: Vec<String> },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn attempt_generation(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    prompt: &GenerationPrompt,
) -> Result<SimpleRecord, String> {
    let response = reasoner
        .complete(&prompt.request(settings))
        .map_err(|e| e.to_string())?;
    if response.finish == FinishReason::Refusal {
        return Err("reasoner refused the request".to_string());
    }
    let text = response.text.trim();
    let text = text
        .strip_prefix("```json")
        .or_else(|| text.strip_prefix("```"))
        .and_then(|t| t.strip_suffix("```"))
        .unwrap_or(text)
        .trim();
    let record: SimpleRecord =
        serde_json::from_str(text).map_err(|e| format!("schema-invalid response: {e}"))?;
    if record.question.trim().is_empty() {
        return Err("schema-invalid response: \"question\" is empty".to_string());
    }
    if record.agent_plan.trim().is_empty() {
        return Err("schema-invalid response: \"agent_plan\" is empty".to_string());
    }
    Ok(record)
}

/// Runs the generator once, retrying a single time on any unusable
/// response. Both failures are reported together. Unknown keys in a valid
/// response are tolerated and flow into experience metadata.
pub fn generate_experience(
    reasoner: &dyn Reasoner,
    settings: &ReasonerSettings,
    prompt: &GenerationPrompt,
    now: i64,
) -> Result<Experience, BuilderError> {
    let mut diagnostics = Vec::new();
    for _ in 0..2 {
        match attempt_generation(reasoner, settings, prompt) {
            Ok(record) => return Ok(experience_from_simple_record(&record, now)),
            Err(message) => diagnostics.push(message),
        }
    }
    Err(BuilderError::Generation { diagnostics })
}

/// Thresholds applied when a draft is validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationRules {
    pub max_steps: usize,
    /// Token count above which an entry draws a size warning.
    pub token_warning: usize,
    /// Strict hybrid-similarity bound above which a draft is a duplicate.
    pub dedupe_threshold: f64,
    /// Text-channel weight of the dedupe similarity.
    pub hybrid_alpha: f64,
}

impl Default for ValidationRules {
    fn default() -> Self {
        ValidationRules {
            max_steps: 50,
            token_warning: 512,
            dedupe_threshold: 0.95,
            hybrid_alpha: 0.5,
        }
    }
}

/// Validation verdict. Warnings accompany acceptance; rejection reasons are
/// exhaustive rather than first-failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept { warnings: Vec<String> },
    Reject { reasons: Vec<String> },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept { .. })
    }
}

/// Checks a draft against structural rules and, when an index is supplied,
/// against the current knowledge base for near-duplicates.
pub fn validate_experience(
    experience: &Experience,
    rules: &ValidationRules,
    index: Option<&KbIndex>,
) -> Result<Verdict, BuilderError> {
    let mut reasons = Vec::new();
    let mut warnings = Vec::new();
    if let Err(violation) = experience.validate() {
        reasons.push(violation.to_string());
    }
    if experience.steps.len() > rules.max_steps {
        reasons.push(format!(
            "too_long: {} steps exceed the maximum of {}",
            experience.steps.len(),
            rules.max_steps
        ));
    }
    let tokens = experience.token_count();
    if tokens > rules.token_warning {
        warnings.push(format!(
            "entry is {tokens} tokens, above the {} token threshold",
            rules.token_warning
        ));
    }
    if let Some(index) = index {
        if let Some((id, similarity)) =
            index.most_similar_document(&experience.indexed_text(), rules.hybrid_alpha)?
        {
            if similarity > rules.dedupe_threshold {
                reasons.push(format!(
                    "duplicate: hybrid similarity {similarity:.4} to {id} exceeds {}",
                    rules.dedupe_threshold
                ));
            }
        }
    }
    Ok(if reasons.is_empty() {
        Verdict::Accept { warnings }
    } else {
        Verdict::Reject { reasons }
    })
}

/// Build-run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub template: GenerationTemplate,
    /// Upper bound on few-shot exemplars per generation prompt.
    pub exemplar_count: usize,
    pub rules: ValidationRules,
    pub reasoner: ReasonerSettings,
    pub aliases: ToolAliasTable,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            template: GenerationTemplate::General,
            exemplar_count: 2,
            rules: ValidationRules::default(),
            reasoner: ReasonerSettings::default(),
            aliases: ToolAliasTable::default(),
        }
    }
}

/// What happened to one raw log during a build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogResult {
    Accepted {
        id: ExperienceId,
        warnings: Vec<String>,
    },
    Rejected {
        reasons: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogOutcome {
    pub log_index: usize,
    pub question: String,
    pub result: LogResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub outcomes: Vec<LogOutcome>,
    pub accepted: usize,
    pub rejected: usize,
}

/// Builds experiences from raw logs into the knowledge base, one log at a
/// time in input order. Per-log failures (invalid log, generation failure,
/// rejected draft) are recorded in the report; only infrastructure faults
/// (store, index, embedding) abort the build.
pub fn build_kb(
    kb: &mut KnowledgeBase,
    provider: Arc<dyn EmbeddingProvider>,
    reasoner: &dyn Reasoner,
    logs: &[RawExecutionLog],
    exemplar_pool: &[FewShotExemplar],
    config: &BuildConfig,
    now: i64,
) -> Result<BuildReport, BuilderError> {
    let mut report = BuildReport::default();
    // The dedupe index tracks the live store; rebuilt only after an insert.
    let mut index = KbIndex::build(kb.snapshot(), provider.clone())?;
    for (log_index, log) in logs.iter().enumerate() {
        let reject = |report: &mut BuildReport, question: &str, reasons: Vec<String>| {
            report.outcomes.push(LogOutcome {
                log_index,
                question: question.to_string(),
                result: LogResult::Rejected { reasons },
            });
            report.rejected += 1;
        };
        if let Err(e) = log.validate() {
            reject(&mut report, &log.question, vec![e.to_string()]);
            continue;
        }
        let workflow = preprocess_log(log, &config.aliases);
        let k = config.exemplar_count.min(exemplar_pool.len());
        let exemplars = select_exemplars(
            provider.as_ref(),
            exemplar_pool,
            &log.question,
            k,
            config.rules.hybrid_alpha,
        )?;
        let mut task_description = log.question.trim().to_string();
        if let Some(answer) = log.true_answer.as_deref().map(str::trim) {
            if !answer.is_empty() {
                task_description.push_str(&format!("\nTrue answer: {answer}"));
            }
        }
        let prompt = build_generation_prompt(
            &task_description,
            &workflow,
            &exemplars,
            config.template,
            k,
        )?;
        let mut draft = match generate_experience(reasoner, &config.reasoner, &prompt, now) {
            Ok(draft) => draft,
            Err(BuilderError::Generation { diagnostics }) => {
                reject(&mut report, &log.question, diagnostics);
                continue;
            }
            Err(other) => return Err(other),
        };
        draft.failure_modes = failure_modes_of(log);
        draft
            .metadata
            .insert("source_agent".to_string(), log.agent_name.clone());
        match validate_experience(&draft, &config.rules, Some(&index))? {
            Verdict::Accept { warnings } => {
                let id = kb.insert(draft)?;
                index = KbIndex::build(kb.snapshot(), provider.clone())?;
                report.outcomes.push(LogOutcome {
                    log_index,
                    question: log.question.clone(),
                    result: LogResult::Accepted { id, warnings },
                });
                report.accepted += 1;
            }
            Verdict::Reject { reasons } => reject(&mut report, &log.question, reasons),
        }
    }
    Ok(report)
}
