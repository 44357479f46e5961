//! Scoring and ranking over an indexed knowledge base.
//!
//! Two channels feed every score: a sparse TF-IDF channel fitted over the
//! indexed experiences and a dense embedding channel. Hybrid fusion is the
//! convex combination `alpha * text + (1 - alpha) * semantic`; negative dense
//! cosines are clamped to 0 before fusion so every channel value lies in
//! [0, 1].
//!
//! Retrieval comes in two phases. Student retrieval ranks whole experiences
//! against a planning query (reasoning trace plus problem plus goal) and
//! weighs in each experience's success score. Teacher retrieval ranks
//! experiences by how well their individual steps cover the summarized steps
//! of a finished trajectory, weighted by precision. Independently, the
//! coarse/fine pair gates candidates on workflow-vector cosine and refines
//! them with step-level alignment, blended by a stage-dependent weight.
//!
//! Ties are broken by descending quality score, then ascending id, so any
//! two runs over the same snapshot produce the same ranking.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::semantic::{
    dense_cosine, embed_experience, DenseVector, EmbeddingBundle, EmbeddingError,
    EmbeddingProvider,
};
use crate::store::{Experience, ExperienceId, Snapshot};
use crate::text::{sparse_cosine, LexicalModel, SparseVector};

/// Which channels contribute to similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Text,
    Semantic,
    Hybrid,
}

impl RetrievalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RetrievalMode::Text => "text",
            RetrievalMode::Semantic => "semantic",
            RetrievalMode::Hybrid => "hybrid",
        }
    }
}

/// Weight on the coarse channel as a function of the refinement stage `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// Initial planning: the coarse signal alone (lambda = 1 for every t).
    #[default]
    PlanningPureCoarse,
    /// Execution-time refinement: lambda(t) = max(0, 1 - t / t_max), shifting
    /// weight onto step alignment as execution progresses.
    LinearDecay { t_max: u32 },
}

impl LambdaSchedule {
    pub fn lambda(&self, t: u32) -> f64 {
        match self {
            LambdaSchedule::PlanningPureCoarse => 1.0,
            LambdaSchedule::LinearDecay { t_max } => {
                (1.0 - t as f64 / (*t_max).max(1) as f64).max(0.0)
            }
        }
    }
}

/// Tunables for every retrieval entry point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Weight of the text channel in hybrid fusion.
    pub hybrid_alpha: f64,
    pub mode: RetrievalMode,
    /// Result budget for student and adaptive retrieval.
    pub top_k: usize,
    /// Result budget for teacher retrieval.
    pub top_m: usize,
    /// Strict lower bound on workflow-vector cosine for coarse gating.
    pub coarse_threshold: f64,
    pub lambda_schedule: LambdaSchedule,
    /// When set, only experiences whose context carries exactly this domain
    /// are considered.
    pub domain_filter: Option<String>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            hybrid_alpha: 0.5,
            mode: RetrievalMode::Hybrid,
            top_k: 3,
            top_m: 3,
            coarse_threshold: 0.2,
            lambda_schedule: LambdaSchedule::default(),
            domain_filter: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.hybrid_alpha) || self.hybrid_alpha.is_nan() {
            return Err(RetrievalError::InvalidConfig {
                message: format!("hybrid_alpha {} outside [0, 1]", self.hybrid_alpha),
            });
        }
        if let LambdaSchedule::LinearDecay { t_max: 0 } = self.lambda_schedule {
            return Err(RetrievalError::InvalidConfig {
                message: "linear_decay t_max must be at least 1".into(),
            });
        }
        if self.coarse_threshold.is_nan() {
            return Err(RetrievalError::InvalidConfig {
                message: "coarse_threshold must be a number".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid retrieval config: {message}")]
    InvalidConfig { message: String },
    #[error("invalid query: {message}")]
    InvalidQuery { message: String },
}

/// `alpha * text + (1 - alpha) * semantic`. Inputs are expected in [0, 1];
/// the result then stays in [0, 1].
pub fn hybrid_score(alpha: f64, text_sim: f64, semantic_sim: f64) -> f64 {
    alpha * text_sim + (1.0 - alpha) * semantic_sim
}

/// `lambda * coarse + (1 - lambda) * fine_normalized`.
pub fn adaptive_blend(lambda: f64, coarse: f64, fine_normalized: f64) -> f64 {
    lambda * coarse + (1.0 - lambda) * fine_normalized
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Step-alignment score: for each query step, the best cosine against any
/// candidate step, clamped into [0, 1] per term, summed over query steps.
pub fn fine_score(candidate_steps: &[DenseVector], query_steps: &[DenseVector]) -> f64 {
    query_steps
        .iter()
        .map(|q| {
            let best = candidate_steps
                .iter()
                .map(|s| dense_cosine(s, q))
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                clamp_unit(best)
            } else {
                0.0
            }
        })
        .sum()
}

/// One experience with everything retrieval needs precomputed.
#[derive(Debug, Clone)]
pub struct IndexedExperience {
    pub experience: Arc<Experience>,
    /// Problem pattern, goal, step texts, space-joined.
    pub text: String,
    pub tfidf: SparseVector,
    pub bundle: EmbeddingBundle,
    /// Embedding of `text`; the dense counterpart of `tfidf`.
    pub document: DenseVector,
}

/// Immutable retrieval index over one snapshot. Building it fits the lexical
/// model and embeds every experience; afterwards scoring is pure computation
/// plus at most one provider call per query.
pub struct KbIndex {
    snapshot: Snapshot,
    lexical: LexicalModel,
    entries: Vec<IndexedExperience>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl KbIndex {
    pub fn build(
        snapshot: Snapshot,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, RetrievalError> {
        let texts: Vec<String> = snapshot.iter().map(|e| e.indexed_text()).collect();
        let lexical = LexicalModel::fit(&texts);
        let documents = if texts.is_empty() {
            Vec::new()
        } else {
            let vectors = provider.embed_batch(&texts)?;
            crate::semantic::check_batch(provider.as_ref(), texts.len(), &vectors)?;
            vectors
        };
        let mut entries = Vec::with_capacity(snapshot.len());
        for (experience, (text, document)) in snapshot.iter().zip(texts.into_iter().zip(documents))
        {
            let bundle = embed_experience(provider.as_ref(), experience)?;
            entries.push(IndexedExperience {
                experience: Arc::clone(experience),
                tfidf: lexical.tfidf_vector(&text),
                text,
                bundle,
                document,
            });
        }
        Ok(KbIndex {
            snapshot,
            lexical,
            entries,
            provider,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Version of the snapshot this index was built from.
    pub fn version(&self) -> u64 {
        self.snapshot.version()
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn lexical(&self) -> &LexicalModel {
        &self.lexical
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn entries(&self) -> &[IndexedExperience] {
        &self.entries
    }

    pub fn embed_text(&self, text: &str) -> Result<DenseVector, RetrievalError> {
        Ok(crate::semantic::embed_one(self.provider.as_ref(), text)?)
    }

    /// Highest hybrid document similarity between `text` and any indexed
    /// experience; `None` on an empty index. Used for near-duplicate checks.
    pub fn most_similar_document(
        &self,
        text: &str,
        alpha: f64,
    ) -> Result<Option<(ExperienceId, f64)>, RetrievalError> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let query_tfidf = self.lexical.tfidf_vector(text);
        let query_vec = self.embed_text(text)?;
        let mut best: Option<(ExperienceId, f64)> = None;
        for entry in &self.entries {
            let text_sim = sparse_cosine(&entry.tfidf, &query_tfidf);
            let sem_sim = clamp_unit(dense_cosine(&entry.document, &query_vec));
            let sim = hybrid_score(alpha, text_sim, sem_sim);
            let better = match &best {
                None => true,
                Some((best_id, best_sim)) => {
                    sim > *best_sim || (sim == *best_sim && entry.experience.id < *best_id)
                }
            };
            if better {
                best = Some((entry.experience.id.clone(), sim));
            }
        }
        Ok(best)
    }

    fn eligible(&self, entry: &IndexedExperience, config: &RetrievalConfig) -> bool {
        match &config.domain_filter {
            None => true,
            Some(domain) => entry
                .experience
                .context
                .as_ref()
                .and_then(|c| c.domain.as_deref())
                .is_some_and(|d| d == domain),
        }
    }
}

/// Embedded form of a planning query for coarse/fine/adaptive scoring.
#[derive(Debug, Clone)]
pub struct QueryBundle {
    pub problem: DenseVector,
    pub goal: Option<DenseVector>,
    pub steps: Vec<DenseVector>,
}

impl QueryBundle {
    pub fn embed(
        provider: &dyn EmbeddingProvider,
        problem: &str,
        goal: Option<&str>,
        steps: &[String],
    ) -> Result<Self, RetrievalError> {
        let mut texts = vec![problem.to_string()];
        if let Some(g) = goal {
            texts.push(g.to_string());
        }
        texts.extend(steps.iter().cloned());
        let vectors = provider.embed_batch(&texts)?;
        crate::semantic::check_batch(provider, texts.len(), &vectors)?;
        let mut it = vectors.into_iter();
        let problem = it.next().expect("checked length");
        let goal = goal.map(|_| it.next().expect("checked length"));
        Ok(QueryBundle {
            problem,
            goal,
            steps: it.collect(),
        })
    }

    /// Problem plus goal, elementwise; the query-side workflow vector.
    pub fn workflow_vector(&self) -> DenseVector {
        match &self.goal {
            Some(goal) => self.problem.add(goal),
            None => self.problem.clone(),
        }
    }
}

/// Per-channel contributions behind one retrieval score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// Workflow-vector cosine, clamped to [0, 1]; adaptive phase only.
    pub coarse: f64,
    /// Normalized step-alignment score; adaptive phase only.
    pub fine: f64,
    /// Success (student) or precision (teacher) multiplier.
    pub quality_factor: f64,
    pub semantic: f64,
    pub text: f64,
}

/// One ranked experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub breakdown: ScoreBreakdown,
    pub id: ExperienceId,
    /// Quality score at scoring time; the first tie-break key.
    pub quality: f64,
    pub score: f64,
}

/// Ranked retrieval outcome. Serializes with a stable field and item order,
/// so equal results are byte-equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub items: Vec<RetrievedItem>,
    pub mode: String,
    pub phase: String,
    /// The exact query text (or step list rendering) that was scored.
    pub query_echo: String,
}

/// Sorts by score descending, quality descending, id ascending; keeps `k`.
fn rank(mut items: Vec<RetrievedItem>, k: usize) -> Vec<RetrievedItem> {
    items.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| b.quality.partial_cmp(&a.quality).expect("quality is finite"))
            .then_with(|| a.id.cmp(&b.id))
    });
    items.truncate(k);
    items
}

/// Workflow-level query: what the agent is about to attempt.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StudentQuery {
    pub reason_trace: String,
    pub problem: String,
    pub goal: Option<String>,
}

impl StudentQuery {
    /// Reasoning trace, problem, goal, space-joined; empty parts skipped.
    pub fn query_text(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if !self.reason_trace.trim().is_empty() {
            parts.push(self.reason_trace.trim());
        }
        if !self.problem.trim().is_empty() {
            parts.push(self.problem.trim());
        }
        if let Some(goal) = &self.goal {
            if !goal.trim().is_empty() {
                parts.push(goal.trim());
            }
        }
        parts.join(" ")
    }
}

/// Student retrieval with an explicit relevance hook: each experience's
/// similarity is multiplied by `relevance(experience)` (clamped to [0, 1])
/// and its success score. The plain entry point fixes relevance at 1.
pub fn student_retrieve_with_relevance<F>(
    index: &KbIndex,
    query: &StudentQuery,
    config: &RetrievalConfig,
    relevance: F,
) -> Result<RetrievalResult, RetrievalError>
where
    F: Fn(&Experience) -> f64,
{
    config.validate()?;
    let query_text = query.query_text();
    if query_text.is_empty() {
        return Err(RetrievalError::InvalidQuery {
            message: "student query has no text".into(),
        });
    }
    let query_tfidf = index.lexical.tfidf_vector(&query_text);
    let query_vec = match config.mode {
        RetrievalMode::Text => None,
        _ => Some(index.embed_text(&query_text)?),
    };
    let mut items = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        if !index.eligible(entry, config) {
            continue;
        }
        let text_sim = match config.mode {
            RetrievalMode::Semantic => 0.0,
            _ => sparse_cosine(&entry.tfidf, &query_tfidf),
        };
        let semantic_sim = match &query_vec {
            Some(q) => clamp_unit(dense_cosine(&entry.document, q)),
            None => 0.0,
        };
        let similarity = match config.mode {
            RetrievalMode::Text => text_sim,
            RetrievalMode::Semantic => semantic_sim,
            RetrievalMode::Hybrid => hybrid_score(config.hybrid_alpha, text_sim, semantic_sim),
        };
        let success = entry.experience.quality.success;
        let relevance_factor = clamp_unit(relevance(&entry.experience));
        items.push(RetrievedItem {
            breakdown: ScoreBreakdown {
                coarse: 0.0,
                fine: 0.0,
                quality_factor: success,
                semantic: semantic_sim,
                text: text_sim,
            },
            id: entry.experience.id.clone(),
            quality: entry.experience.quality.quality,
            score: similarity * relevance_factor * success,
        });
    }
    Ok(RetrievalResult {
        items: rank(items, config.top_k),
        mode: config.mode.as_str().to_string(),
        phase: "student".to_string(),
        query_echo: query_text,
    })
}

/// Ranks whole experiences for a planning query.
pub fn student_retrieve(
    index: &KbIndex,
    query: &StudentQuery,
    config: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    student_retrieve_with_relevance(index, query, config, |_| 1.0)
}

/// Step-level query: summarized steps of an executed trajectory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TeacherQuery {
    pub summary_steps: Vec<String>,
}

/// Ranks experiences by step coverage of the summary: for each summary step,
/// the best matching stored step under the configured mode; terms are summed
/// and weighted by the experience's precision. Scores live in
/// [0, number of summary steps].
pub fn teacher_retrieve(
    index: &KbIndex,
    query: &TeacherQuery,
    config: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    config.validate()?;
    let steps: Vec<&str> = query
        .summary_steps
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    if steps.is_empty() {
        return Err(RetrievalError::InvalidQuery {
            message: "teacher query has no summary steps".into(),
        });
    }
    let step_tfidf: Vec<SparseVector> = steps
        .iter()
        .map(|s| index.lexical.tfidf_vector(s))
        .collect();
    let step_vecs: Option<Vec<DenseVector>> = match config.mode {
        RetrievalMode::Text => None,
        _ => {
            let texts: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
            let vectors = index.provider.embed_batch(&texts)?;
            crate::semantic::check_batch(index.provider.as_ref(), texts.len(), &vectors)?;
            Some(vectors)
        }
    };
    let mut items = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        if !index.eligible(entry, config) {
            continue;
        }
        let mut blended_total = 0.0;
        let mut text_total = 0.0;
        let mut semantic_total = 0.0;
        for (j, z_tfidf) in step_tfidf.iter().enumerate() {
            let mut best_blend = 0.0f64;
            let mut best_text = 0.0f64;
            let mut best_sem = 0.0f64;
            for (l, step) in entry.experience.steps.iter().enumerate() {
                let text_sim = match config.mode {
                    RetrievalMode::Semantic => 0.0,
                    _ => {
                        let s_tfidf = index.lexical.tfidf_vector(&step.text);
                        sparse_cosine(&s_tfidf, z_tfidf)
                    }
                };
                let sem_sim = match &step_vecs {
                    Some(qs) => clamp_unit(dense_cosine(&entry.bundle.steps[l], &qs[j])),
                    None => 0.0,
                };
                let blend = match config.mode {
                    RetrievalMode::Text => text_sim,
                    RetrievalMode::Semantic => sem_sim,
                    RetrievalMode::Hybrid => {
                        hybrid_score(config.hybrid_alpha, text_sim, sem_sim)
                    }
                };
                best_blend = best_blend.max(blend);
                best_text = best_text.max(text_sim);
                best_sem = best_sem.max(sem_sim);
            }
            blended_total += best_blend;
            text_total += best_text;
            semantic_total += best_sem;
        }
        let precision = entry.experience.quality.precision;
        items.push(RetrievedItem {
            // text and semantic are per-channel coverage diagnostics; the
            // blended total is not in general their convex combination.
            breakdown: ScoreBreakdown {
                coarse: 0.0,
                fine: 0.0,
                quality_factor: precision,
                semantic: semantic_total,
                text: text_total,
            },
            id: entry.experience.id.clone(),
            quality: entry.experience.quality.quality,
            score: blended_total * precision,
        });
    }
    Ok(RetrievalResult {
        items: rank(items, config.top_m),
        mode: config.mode.as_str().to_string(),
        phase: "teacher".to_string(),
        query_echo: steps.join(" | "),
    })
}

/// Experiences whose workflow vector passes the strict coarse gate, with
/// their raw workflow cosine. Order follows the index (ascending id).
pub fn coarse_candidates<'a>(
    index: &'a KbIndex,
    query: &QueryBundle,
    threshold: f64,
) -> Vec<(&'a IndexedExperience, f64)> {
    let query_workflow = query.workflow_vector();
    index
        .entries
        .iter()
        .filter_map(|entry| {
            let cos = dense_cosine(&entry.bundle.workflow_vector(), &query_workflow);
            (cos > threshold).then_some((entry, cos))
        })
        .collect()
}

/// Stage-aware retrieval: coarse-gates candidates, then blends the clamped
/// workflow cosine with the per-query-step-normalized fine score using
/// `lambda(t)` from the configured schedule.
pub fn adaptive_retrieve(
    index: &KbIndex,
    query: &QueryBundle,
    t: u32,
    config: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    config.validate()?;
    let lambda = config.lambda_schedule.lambda(t);
    let candidates = coarse_candidates(index, query, config.coarse_threshold);
    let mut items = Vec::with_capacity(candidates.len());
    for (entry, raw_cos) in candidates {
        if !index.eligible(entry, config) {
            continue;
        }
        let coarse = clamp_unit(raw_cos);
        let fine_norm = if query.steps.is_empty() {
            0.0
        } else {
            fine_score(&entry.bundle.steps, &query.steps) / query.steps.len() as f64
        };
        items.push(RetrievedItem {
            breakdown: ScoreBreakdown {
                coarse,
                fine: fine_norm,
                quality_factor: 1.0,
                semantic: 0.0,
                text: 0.0,
            },
            id: entry.experience.id.clone(),
            quality: entry.experience.quality.quality,
            score: adaptive_blend(lambda, coarse, fine_norm),
        });
    }
    Ok(RetrievalResult {
        items: rank(items, config.top_k),
        mode: config.mode.as_str().to_string(),
        phase: "adaptive".to_string(),
        query_echo: format!("t={t} lambda={lambda}"),
    })
}

/// Hybrid document similarity between two experiences in isolation: a
/// two-document lexical model is fitted over just this pair, and document
/// embeddings supply the dense side. Used by merge and deduplication checks.
pub fn pair_similarity(
    provider: &dyn EmbeddingProvider,
    alpha: f64,
    a: &Experience,
    b: &Experience,
) -> Result<f64, RetrievalError> {
    let ta = a.indexed_text();
    let tb = b.indexed_text();
    let model = LexicalModel::fit(&[ta.as_str(), tb.as_str()]);
    let text_sim = model.cosine(&ta, &tb);
    let va = crate::semantic::embed_one(provider, &ta)?;
    let vb = crate::semantic::embed_one(provider, &tb)?;
    let sem_sim = clamp_unit(dense_cosine(&va, &vb));
    Ok(hybrid_score(alpha, text_sim, sem_sim))
}
