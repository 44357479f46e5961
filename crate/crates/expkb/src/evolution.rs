//! Knowledge-base evolution: usage-decayed utility, pruning, operator-driven
//! merging, and feedback-driven quality updates.
//!
//! Utility of an experience at time `now` is
//! `quality * exp(-decay_rate * (now - last_used_at))` plus the sum of all
//! recorded usage impacts. Pruning keeps exactly the experiences whose
//! utility is strictly above the threshold; removal is a tombstone, so the
//! id is never reassigned.

use serde::{Deserialize, Serialize};

use crate::retrieval::{pair_similarity, RetrievalError};
use crate::semantic::{dense_cosine, embed_one, EmbeddingProvider};
use crate::store::{
    Experience, ExperienceId, KnowledgeBase, QualityRecord, RelationKind, RelationLink,
    Snapshot, SolutionStep, StoreError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    /// Exponential decay rate applied to quality since last use; 0 disables
    /// time decay entirely.
    pub decay_rate: f64,
    /// Strict lower bound on utility for an experience to survive pruning.
    pub prune_threshold: f64,
    /// Learning rate of the quality update `q <- (1-a)*q + a*feedback`.
    pub quality_learning_rate: f64,
    /// Minimum hybrid pair similarity two experiences must reach before they
    /// may be merged.
    pub merge_similarity: f64,
    /// Steps of the second experience whose best cosine against the merged
    /// step list exceeds this are treated as duplicates and dropped.
    pub step_collapse_threshold: f64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            decay_rate: 0.0,
            prune_threshold: 0.0,
            quality_learning_rate: 0.1,
            merge_similarity: 0.95,
            step_collapse_threshold: 0.95,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("feedback {0} outside [0, 1]")]
    InvalidFeedback(f64),
    #[error("experiences are too dissimilar to merge: similarity {similarity:.4} < required {required:.4}")]
    TooDissimilar { similarity: f64, required: f64 },
}

/// Decayed quality plus accumulated usage impact. `now` is expected at or
/// after the experience's `last_used_at`; an earlier `now` is treated as
/// zero elapsed time rather than amplifying quality.
pub fn utility(experience: &Experience, now: i64, config: &EvolutionConfig) -> f64 {
    let elapsed = (now - experience.last_used_at).max(0) as f64;
    let decayed = experience.quality.quality * (-config.decay_rate * elapsed).exp();
    let impact: f64 = experience.quality.usage_log.iter().map(|u| u.impact).sum();
    decayed + impact
}

/// An experience removed by pruning, with the utility that condemned it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunedEntry {
    pub id: ExperienceId,
    pub utility: f64,
}

/// Pure partition of a snapshot by the prune rule (utility strictly above
/// the threshold survives).
pub fn prune_partition(
    snapshot: &Snapshot,
    now: i64,
    config: &EvolutionConfig,
) -> (Vec<ExperienceId>, Vec<PrunedEntry>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for experience in snapshot.iter() {
        let u = utility(experience, now, config);
        if u > config.prune_threshold {
            kept.push(experience.id.clone());
        } else {
            removed.push(PrunedEntry {
                id: experience.id.clone(),
                utility: u,
            });
        }
    }
    (kept, removed)
}

/// Applies the prune rule to the store, tombstoning the losers. Returns what
/// was removed; the surviving set becomes visible at the next snapshot.
pub fn apply_prune(
    kb: &mut KnowledgeBase,
    now: i64,
    config: &EvolutionConfig,
) -> Vec<PrunedEntry> {
    let (_, removed) = prune_partition(&kb.snapshot(), now, config);
    for entry in &removed {
        kb.remove(&entry.id);
    }
    removed
}

/// Moves quality toward `feedback` by the configured learning rate and
/// returns the new value. Feedback must lie in [0, 1].
pub fn update_quality(
    kb: &mut KnowledgeBase,
    id: &ExperienceId,
    feedback: f64,
    config: &EvolutionConfig,
) -> Result<f64, EvolutionError> {
    if !(0.0..=1.0).contains(&feedback) || feedback.is_nan() {
        return Err(EvolutionError::InvalidFeedback(feedback));
    }
    let current = kb
        .get(id)
        .ok_or_else(|| StoreError::NotFound(id.clone()))?
        .quality
        .quality;
    let a = config.quality_learning_rate;
    let updated = (1.0 - a) * current + a * feedback;
    kb.set_quality(id, updated)?;
    Ok(updated)
}

/// Records that an experience was applied at `timestamp` with the given
/// impact; feeds both the decay clock and the accumulated-impact term.
pub fn record_usage(
    kb: &mut KnowledgeBase,
    id: &ExperienceId,
    timestamp: i64,
    impact: f64,
) -> Result<(), EvolutionError> {
    kb.record_usage(id, timestamp, impact)?;
    Ok(())
}

fn merged_text(a: &str, b: &str) -> String {
    if a == b || b.trim().is_empty() {
        a.to_string()
    } else if a.trim().is_empty() {
        b.to_string()
    } else {
        format!("{a} / {b}")
    }
}

/// Fuses two experiences into a new draft (id left unassigned; insert it to
/// adopt it). The pair must reach `merge_similarity` under hybrid document
/// similarity with the given channel weight `alpha`.
///
/// Steps are the order-preserving union: all of `a`'s steps, then each of
/// `b`'s steps whose embedding does not duplicate one already present.
/// Wordings that differ are joined with " / "; quality scores take the
/// elementwise maximum; usage logs are interleaved by timestamp; the draft
/// links back to both parents as adaptations.
pub fn merge_experiences(
    provider: &dyn EmbeddingProvider,
    alpha: f64,
    a: &Experience,
    b: &Experience,
    config: &EvolutionConfig,
) -> Result<Experience, EvolutionError> {
    let similarity = pair_similarity(provider, alpha, a, b)?;
    if similarity < config.merge_similarity {
        return Err(EvolutionError::TooDissimilar {
            similarity,
            required: config.merge_similarity,
        });
    }

    let mut steps: Vec<SolutionStep> = a.steps.clone();
    let mut step_vectors = Vec::with_capacity(steps.len());
    for step in &steps {
        step_vectors.push(embed_one(provider, &step.text).map_err(RetrievalError::from)?);
    }
    for step in &b.steps {
        let v = embed_one(provider, &step.text).map_err(RetrievalError::from)?;
        let duplicate = step_vectors
            .iter()
            .any(|existing| dense_cosine(existing, &v) > config.step_collapse_threshold);
        if !duplicate {
            steps.push(step.clone());
            step_vectors.push(v);
        }
    }
    for (i, step) in steps.iter_mut().enumerate() {
        step.index = i;
    }

    let mut failure_modes = a.failure_modes.clone();
    for mode in &b.failure_modes {
        if !failure_modes.contains(mode) {
            failure_modes.push(mode.clone());
        }
    }

    let mut metadata = a.metadata.clone();
    for (k, v) in &b.metadata {
        metadata.entry(k.clone()).or_insert_with(|| v.clone());
    }

    let context = match (&a.context, &b.context) {
        (None, None) => None,
        (Some(ctx), None) | (None, Some(ctx)) => Some(ctx.clone()),
        (Some(ca), Some(cb)) => {
            let mut merged = ca.clone();
            if merged.domain.is_none() {
                merged.domain = cb.domain.clone();
            }
            if merged.difficulty.is_none() {
                merged.difficulty = cb.difficulty;
            }
            for tag in &cb.tags {
                if !merged.tags.contains(tag) {
                    merged.tags.push(tag.clone());
                }
            }
            Some(merged)
        }
    };

    let mut relations = a.relations.clone();
    for link in &b.relations {
        if !relations.contains(link) {
            relations.push(link.clone());
        }
    }
    for parent in [&a.id, &b.id] {
        let link = RelationLink {
            kind: RelationKind::Adaptation,
            target: parent.clone(),
        };
        if !relations.contains(&link) {
            relations.push(link);
        }
    }

    let mut usage_log = a.quality.usage_log.clone();
    usage_log.extend(b.quality.usage_log.iter().cloned());
    usage_log.sort_by_key(|u| u.timestamp);

    Ok(Experience {
        id: ExperienceId::new(""),
        problem_pattern: merged_text(&a.problem_pattern, &b.problem_pattern),
        goal: match (&a.goal, &b.goal) {
            (None, None) => None,
            (Some(g), None) | (None, Some(g)) => Some(g.clone()),
            (Some(ga), Some(gb)) => Some(merged_text(ga, gb)),
        },
        steps,
        context,
        metadata,
        failure_modes,
        relations,
        quality: QualityRecord {
            precision: a.quality.precision.max(b.quality.precision),
            quality: a.quality.quality.max(b.quality.quality),
            success: a.quality.success.max(b.quality.success),
            usage_count: usage_log.len() as u64,
            usage_log,
        },
        created_at: a.created_at.min(b.created_at),
        last_used_at: a.last_used_at.max(b.last_used_at),
    })
}
