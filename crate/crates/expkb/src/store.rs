//! Experience records and the in-memory knowledge base that owns them.
//!
//! The store is the single writer; readers work off [`Snapshot`]s taken at
//! commit points. A snapshot is a cheap clone (shared `Arc` per record) and
//! never observes later mutations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Opaque identifier for a stored experience. Ordered lexicographically;
/// store-assigned ids sort in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperienceId(String);

impl ExperienceId {
    pub fn new(raw: impl Into<String>) -> Self {
        ExperienceId(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExperienceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ExperienceId {
    fn from(raw: &str) -> Self {
        ExperienceId(raw.to_string())
    }
}

/// How one experience relates to another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    /// Target is a generalization of this experience.
    Abstraction,
    /// Target is a sub-procedure composed into this experience.
    Composition,
    /// This experience was adapted from the target.
    Adaptation,
    /// Target solves the same problem a different way.
    Alternative,
}

/// Typed link from one experience to another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationLink {
    pub kind: RelationKind,
    pub target: ExperienceId,
}

/// One step of a solution workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionStep {
    /// Position within the workflow; consecutive from 0.
    pub index: usize,
    /// Marks steps that exist to recover from an earlier failure.
    pub is_failure_recovery: bool,
    /// Non-empty instruction text.
    pub text: String,
    /// Optional name of the tool the step expects to use.
    pub tool_hint: Option<String>,
}

impl SolutionStep {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        SolutionStep {
            index,
            is_failure_recovery: false,
            text: text.into(),
            tool_hint: None,
        }
    }

    pub fn with_tool_hint(mut self, tool: impl Into<String>) -> Self {
        self.tool_hint = Some(tool.into());
        self
    }

    pub fn with_failure_recovery(mut self, flag: bool) -> Self {
        self.is_failure_recovery = flag;
        self
    }
}

/// Where an experience applies: domain label, difficulty band, free tags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextDescriptor {
    /// 1 = easy, 2 = medium, 3 = hard.
    pub difficulty: Option<u8>,
    pub domain: Option<String>,
    pub tags: Vec<String>,
}

impl ContextDescriptor {
    pub fn for_domain(domain: impl Into<String>) -> Self {
        ContextDescriptor {
            difficulty: None,
            domain: Some(domain.into()),
            tags: Vec::new(),
        }
    }
}

/// A usage event: when the experience was applied and the impact credited to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub impact: f64,
    pub timestamp: i64,
}

/// Quality and usage bookkeeping attached to every experience.
///
/// All three scores live in [0, 1]. `usage_count` always equals
/// `usage_log.len()`; the pair is kept in sync by the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub precision: f64,
    pub quality: f64,
    pub success: f64,
    pub usage_count: u64,
    pub usage_log: Vec<UsageEvent>,
}

impl Default for QualityRecord {
    fn default() -> Self {
        QualityRecord {
            precision: 1.0,
            quality: 1.0,
            success: 1.0,
            usage_count: 0,
            usage_log: Vec::new(),
        }
    }
}

/// A reusable problem-solving experience.
///
/// `problem_pattern` and `steps` are mandatory; goal, context, metadata,
/// failure modes and relations are optional enrichments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub id: ExperienceId,
    pub problem_pattern: String,
    pub goal: Option<String>,
    pub steps: Vec<SolutionStep>,
    pub context: Option<ContextDescriptor>,
    pub metadata: BTreeMap<String, String>,
    pub failure_modes: Vec<String>,
    pub relations: Vec<RelationLink>,
    pub quality: QualityRecord,
    /// Unix seconds.
    pub created_at: i64,
    /// Unix seconds; starts equal to `created_at`.
    pub last_used_at: i64,
}

impl Experience {
    /// Builds a minimal valid experience. Step indices are rewritten to be
    /// consecutive from 0.
    pub fn new(
        id: impl Into<ExperienceId>,
        problem_pattern: impl Into<String>,
        step_texts: &[&str],
        created_at: i64,
    ) -> Self {
        let steps = step_texts
            .iter()
            .enumerate()
            .map(|(i, t)| SolutionStep::new(i, *t))
            .collect();
        Experience {
            id: id.into(),
            problem_pattern: problem_pattern.into(),
            goal: None,
            steps,
            context: None,
            metadata: BTreeMap::new(),
            failure_modes: Vec::new(),
            relations: Vec::new(),
            quality: QualityRecord::default(),
            created_at,
            last_used_at: created_at,
        }
    }

    pub fn with_goal(mut self, goal: impl Into<String>) -> Self {
        self.goal = Some(goal.into());
        self
    }

    pub fn with_context(mut self, context: ContextDescriptor) -> Self {
        self.context = Some(context);
        self
    }

    pub fn with_quality(mut self, quality: f64, success: f64, precision: f64) -> Self {
        self.quality.quality = quality;
        self.quality.success = success;
        self.quality.precision = precision;
        self
    }

    /// The text retrieval indexes: problem pattern, goal if present, then
    /// every step text, space-joined.
    pub fn indexed_text(&self) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(self.steps.len() + 2);
        parts.push(self.problem_pattern.as_str());
        if let Some(goal) = &self.goal {
            parts.push(goal.as_str());
        }
        for step in &self.steps {
            parts.push(step.text.as_str());
        }
        parts.join(" ")
    }

    /// Whitespace-delimited token count over the indexed text.
    pub fn token_count(&self) -> usize {
        self.indexed_text().split_whitespace().count()
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.problem_pattern.trim().is_empty() {
            return Err(InvariantViolation::EmptyProblemPattern);
        }
        if self.steps.is_empty() {
            return Err(InvariantViolation::NoSteps);
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i {
                return Err(InvariantViolation::StepIndexGap {
                    position: i,
                    found: step.index,
                });
            }
            if step.text.trim().is_empty() {
                return Err(InvariantViolation::EmptyStepText { position: i });
            }
        }
        if let Some(ctx) = &self.context {
            if let Some(d) = ctx.difficulty {
                if !(1..=3).contains(&d) {
                    return Err(InvariantViolation::DifficultyOutOfRange { found: d });
                }
            }
        }
        for (name, value) in [
            ("quality", self.quality.quality),
            ("success", self.quality.success),
            ("precision", self.quality.precision),
        ] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(InvariantViolation::ScoreOutOfRange {
                    field: name,
                    found: value,
                });
            }
        }
        if self.quality.usage_count as usize != self.quality.usage_log.len() {
            return Err(InvariantViolation::UsageCountMismatch {
                count: self.quality.usage_count,
                log_len: self.quality.usage_log.len(),
            });
        }
        Ok(())
    }
}

/// Structural invariant violations detected by [`Experience::validate`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvariantViolation {
    #[error("problem_pattern must be non-empty")]
    EmptyProblemPattern,
    #[error("an experience must carry at least one step")]
    NoSteps,
    #[error("step at position {position} has index {found}; indices must be consecutive from 0")]
    StepIndexGap { position: usize, found: usize },
    #[error("step at position {position} has empty text")]
    EmptyStepText { position: usize },
    #[error("difficulty {found} outside 1..=3")]
    DifficultyOutOfRange { found: u8 },
    #[error("{field} score {found} outside [0, 1]")]
    ScoreOutOfRange { field: &'static str, found: f64 },
    #[error("usage_count {count} does not match usage_log length {log_len}")]
    UsageCountMismatch { count: u64, log_len: usize },
}

/// Errors raised by store mutations.
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid experience: {0}")]
    Invalid(#[from] InvariantViolation),
    #[error("id {0} already present")]
    DuplicateId(ExperienceId),
    #[error("id {0} was deleted and may not be reused")]
    TombstonedId(ExperienceId),
    #[error("no experience with id {0}")]
    NotFound(ExperienceId),
    #[error("insert expects an unassigned id; got {0}")]
    PreassignedId(ExperienceId),
}

/// Immutable view of the knowledge base at a commit point.
#[derive(Debug, Clone)]
pub struct Snapshot {
    entries: Arc<BTreeMap<ExperienceId, Arc<Experience>>>,
    version: u64,
}

impl Snapshot {
    pub fn get(&self, id: &ExperienceId) -> Option<&Arc<Experience>> {
        self.entries.get(id)
    }

    /// Iterates in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &Arc<Experience>> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Monotone counter distinguishing commit points; an index built from a
    /// snapshot is stale once the store's version moves past this.
    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Raw ingestion record: a question, the plan that solved it, and the distilled
/// experience text. Extra fields (for example search-agent variants) travel as
/// metadata.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimpleRecord {
    pub question: String,
    pub agent_plan: String,
    pub agent_experience: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Splits free-form plan text into step texts.
///
/// Line endings are normalized first. If any trimmed line matches `^\d+\.`
/// the plan is treated as a numbered list: each numbered line starts a step
/// (prefix stripped), continuation lines join the current step, and preamble
/// before the first number is dropped. Otherwise every non-empty line is one
/// step.
pub fn split_plan_steps(plan: &str) -> Vec<String> {
    let normalized = plan.replace("\r\n", "\n");
    let lines: Vec<&str> = normalized.lines().map(str::trim).collect();
    let number_re = crate::text::leading_number_regex();
    let numbered = lines.iter().any(|l| number_re.is_match(l));
    let mut steps: Vec<String> = Vec::new();
    if numbered {
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(m) = number_re.find(line) {
                steps.push(line[m.end()..].trim_start().to_string());
            } else if let Some(current) = steps.last_mut() {
                current.push(' ');
                current.push_str(line);
            }
        }
        steps.retain(|s| !s.is_empty());
    } else {
        steps.extend(lines.iter().filter(|l| !l.is_empty()).map(|l| l.to_string()));
    }
    steps
}

/// The mapping behind [`KnowledgeBase::ingest_simple_record`], exposed so
/// callers can shape and inspect a draft (id unassigned) before committing.
pub fn experience_from_simple_record(record: &SimpleRecord, now: i64) -> Experience {
    let mut step_texts = split_plan_steps(&record.agent_plan);
    let guidance = record.agent_experience.trim();
    if !guidance.is_empty() {
        step_texts.push(guidance.to_string());
    }
    let steps = step_texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| SolutionStep::new(i, text))
        .collect::<Vec<_>>();
    let mut metadata = BTreeMap::new();
    for (key, value) in &record.extra {
        let rendered = match value {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        metadata.insert(key.clone(), rendered);
    }
    Experience {
        id: ExperienceId::new(""),
        problem_pattern: record.question.trim().to_string(),
        goal: None,
        steps,
        context: None,
        metadata,
        failure_modes: Vec::new(),
        relations: Vec::new(),
        quality: QualityRecord::default(),
        created_at: now,
        last_used_at: now,
    }
}

/// Mutable owner of all experiences. Single writer; readers use snapshots.
#[derive(Debug, Default)]
pub struct KnowledgeBase {
    entries: BTreeMap<ExperienceId, Arc<Experience>>,
    tombstones: BTreeSet<ExperienceId>,
    next_seq: u64,
    version: u64,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        KnowledgeBase {
            entries: BTreeMap::new(),
            tombstones: BTreeSet::new(),
            next_seq: 1,
            version: 0,
        }
    }

    fn fresh_id(&mut self) -> ExperienceId {
        loop {
            let candidate = ExperienceId(format!("e-{:06}", self.next_seq));
            self.next_seq += 1;
            if !self.entries.contains_key(&candidate) && !self.tombstones.contains(&candidate) {
                return candidate;
            }
        }
    }

    /// Inserts a new experience, assigning its id. The draft must carry an
    /// empty id and satisfy every structural invariant.
    pub fn insert(&mut self, mut experience: Experience) -> Result<ExperienceId, StoreError> {
        if !experience.id.as_str().is_empty() {
            return Err(StoreError::PreassignedId(experience.id));
        }
        experience.id = self.fresh_id();
        experience.validate()?;
        let id = experience.id.clone();
        self.entries.insert(id.clone(), Arc::new(experience));
        self.version += 1;
        Ok(id)
    }

    /// Restores an experience under its existing id (the load path).
    /// Duplicate and previously deleted ids are rejected.
    pub fn restore(&mut self, experience: Experience) -> Result<ExperienceId, StoreError> {
        if experience.id.as_str().is_empty() {
            return Err(StoreError::Invalid(InvariantViolation::EmptyProblemPattern));
        }
        if self.entries.contains_key(&experience.id) {
            return Err(StoreError::DuplicateId(experience.id));
        }
        if self.tombstones.contains(&experience.id) {
            return Err(StoreError::TombstonedId(experience.id));
        }
        experience.validate()?;
        // Keep store-assigned ids ahead of any numeric suffix seen on restore.
        if let Some(num) = experience
            .id
            .as_str()
            .strip_prefix("e-")
            .and_then(|s| s.parse::<u64>().ok())
        {
            self.next_seq = self.next_seq.max(num + 1);
        }
        let id = experience.id.clone();
        self.entries.insert(id.clone(), Arc::new(experience));
        self.version += 1;
        Ok(id)
    }

    /// Converts a raw `{question, agent_plan, agent_experience}` record into a
    /// stored experience: the question becomes the problem pattern, plan lines
    /// become steps, and the distilled experience text is appended as the
    /// final guidance step. Extra record fields land in metadata.
    pub fn ingest_simple_record(
        &mut self,
        record: &SimpleRecord,
        now: i64,
    ) -> Result<ExperienceId, StoreError> {
        self.insert(experience_from_simple_record(record, now))
    }

    pub fn get(&self, id: &ExperienceId) -> Option<&Arc<Experience>> {
        self.entries.get(id)
    }

    /// Tombstones an experience. Returns false when the id is not live.
    /// The id can never be assigned again.
    pub fn remove(&mut self, id: &ExperienceId) -> bool {
        match self.entries.remove(id) {
            Some(_) => {
                self.tombstones.insert(id.clone());
                self.version += 1;
                true
            }
            None => false,
        }
    }

    /// Appends a usage event and refreshes `last_used_at`.
    pub fn record_usage(
        &mut self,
        id: &ExperienceId,
        timestamp: i64,
        impact: f64,
    ) -> Result<(), StoreError> {
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let exp = Arc::make_mut(entry);
        exp.quality.usage_log.push(UsageEvent { impact, timestamp });
        exp.quality.usage_count = exp.quality.usage_log.len() as u64;
        exp.last_used_at = exp.last_used_at.max(timestamp);
        self.version += 1;
        Ok(())
    }

    /// Overwrites the quality score; the value must stay in [0, 1].
    pub fn set_quality(&mut self, id: &ExperienceId, quality: f64) -> Result<(), StoreError> {
        if !(0.0..=1.0).contains(&quality) || quality.is_nan() {
            return Err(StoreError::Invalid(InvariantViolation::ScoreOutOfRange {
                field: "quality",
                found: quality,
            }));
        }
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        Arc::make_mut(entry).quality.quality = quality;
        self.version += 1;
        Ok(())
    }

    /// Replaces a live experience wholesale (id must match and stay live).
    pub fn replace(&mut self, experience: Experience) -> Result<(), StoreError> {
        experience.validate()?;
        let entry = self
            .entries
            .get_mut(&experience.id)
            .ok_or_else(|| StoreError::NotFound(experience.id.clone()))?;
        *entry = Arc::new(experience);
        self.version += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Experience>> {
        self.entries.values()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn contains(&self, id: &ExperienceId) -> bool {
        self.entries.contains_key(id)
    }

    /// Commit point: freezes the current contents into an immutable snapshot.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            entries: Arc::new(self.entries.clone()),
            version: self.version,
        }
    }
}
