//! Ranking correctness against an independent exhaustive scorer.
//!
//! The oracle below recomputes every retrieval score from first principles
//! with its own tokenizer, tf-idf weighting, cosines, and sorting. It shares
//! nothing with the engine except the embedding provider (an input) and the
//! stored experiences, so agreement on seeded synthetic knowledge bases,
//! including tie-breaks, is strong evidence the engine scores what it says
//! it scores.

use std::sync::Arc;
use std::time::Instant;

use expkb::retrieval::{
    adaptive_retrieve, student_retrieve, teacher_retrieve, KbIndex, LambdaSchedule, QueryBundle,
    RetrievalConfig, RetrievalMode, StudentQuery, TeacherQuery,
};
use expkb::semantic::{EmbeddingProvider, HashEmbedder};
use expkb::store::{Experience, KnowledgeBase, Snapshot};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

mod oracle {
    use std::collections::BTreeMap;

    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub struct Tfidf {
        /// term -> (position in sorted vocabulary, idf)
        terms: BTreeMap<String, (usize, f64)>,
    }

    impl Tfidf {
        pub fn fit(documents: &[String]) -> Self {
            let mut df: BTreeMap<String, usize> = BTreeMap::new();
            for doc in documents {
                let mut tokens = tokenize(doc);
                tokens.sort();
                tokens.dedup();
                for token in tokens {
                    *df.entry(token).or_insert(0) += 1;
                }
            }
            let n = documents.len();
            let terms = df
                .into_iter()
                .enumerate()
                .map(|(pos, (term, df))| {
                    let idf = (((1 + n) as f64) / ((1 + df) as f64)).ln() + 1.0;
                    (term, (pos, idf))
                })
                .collect();
            Tfidf { terms }
        }

        /// L2-normalized tf-idf weights keyed by vocabulary position.
        pub fn weights(&self, text: &str) -> Vec<(usize, f64)> {
            let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
            for token in tokenize(text) {
                if let Some(&(pos, _)) = self.terms.get(&token) {
                    *counts.entry(pos).or_insert(0.0) += 1.0;
                }
            }
            let idf_at: BTreeMap<usize, f64> =
                self.terms.values().map(|&(pos, idf)| (pos, idf)).collect();
            let mut entries: Vec<(usize, f64)> = counts
                .into_iter()
                .map(|(pos, tf)| (pos, tf * idf_at[&pos]))
                .collect();
            let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (_, w) in &mut entries {
                    *w /= norm;
                }
            } else {
                entries.clear();
            }
            entries
        }

        pub fn cosine(&self, a: &str, b: &str) -> f64 {
            sparse_cosine(&self.weights(a), &self.weights(b))
        }
    }

    pub fn sparse_cosine(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    sum += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        sum.min(1.0)
    }

    pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
    }

    /// (score desc, quality desc, id asc), truncated to `k`.
    pub fn rank(mut scored: Vec<(String, f64, f64)>, k: usize) -> Vec<(String, f64)> {
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| b.2.partial_cmp(&a.2).unwrap())
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        scored.into_iter().map(|(id, score, _)| (id, score)).collect()
    }
}

/// Everything the oracle precomputes about one stored experience, derived
/// straight from the experience's fields.
struct OracleEntry {
    id: String,
    doc_text: String,
    doc_vec: Vec<f64>,
    problem_vec: Vec<f64>,
    goal_vec: Option<Vec<f64>>,
    step_texts: Vec<String>,
    step_vecs: Vec<Vec<f64>>,
    quality: f64,
    success: f64,
    precision: f64,
}

struct Oracle {
    entries: Vec<OracleEntry>,
    model: oracle::Tfidf,
}

fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Vec<f64> {
    provider
        .embed_batch(std::slice::from_ref(&text.to_string()))
        .expect("stub provider cannot fail")
        .remove(0)
        .0
}

impl Oracle {
    fn build(snapshot: &Snapshot, provider: &dyn EmbeddingProvider) -> Self {
        let mut entries = Vec::new();
        for e in snapshot.iter() {
            let mut parts = vec![e.problem_pattern.clone()];
            if let Some(goal) = &e.goal {
                parts.push(goal.clone());
            }
            let step_texts: Vec<String> = e.steps.iter().map(|s| s.text.clone()).collect();
            parts.extend(step_texts.iter().cloned());
            let doc_text = parts.join(" ");
            entries.push(OracleEntry {
                id: e.id.as_str().to_string(),
                doc_vec: embed(provider, &doc_text),
                problem_vec: embed(provider, &e.problem_pattern),
                goal_vec: e.goal.as_ref().map(|g| embed(provider, g)),
                step_vecs: step_texts.iter().map(|t| embed(provider, t)).collect(),
                step_texts,
                doc_text,
                quality: e.quality.quality,
                success: e.quality.success,
                precision: e.quality.precision,
            });
        }
        let corpus: Vec<String> = entries.iter().map(|e| e.doc_text.clone()).collect();
        Oracle {
            entries,
            model: oracle::Tfidf::fit(&corpus),
        }
    }

    fn blend(mode: RetrievalMode, alpha: f64, text: f64, sem: f64) -> f64 {
        match mode {
            RetrievalMode::Text => text,
            RetrievalMode::Semantic => sem,
            RetrievalMode::Hybrid => alpha * text + (1.0 - alpha) * sem,
        }
    }

    fn student(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &StudentQuery,
        config: &RetrievalConfig,
    ) -> Vec<(String, f64)> {
        let mut parts = Vec::new();
        for part in [
            query.reason_trace.as_str(),
            query.problem.as_str(),
            query.goal.as_deref().unwrap_or(""),
        ] {
            if !part.trim().is_empty() {
                parts.push(part.trim());
            }
        }
        let query_text = parts.join(" ");
        let query_vec = embed(provider, &query_text);
        let scored = self
            .entries
            .iter()
            .map(|e| {
                let text_sim = match config.mode {
                    RetrievalMode::Semantic => 0.0,
                    _ => self.model.cosine(&e.doc_text, &query_text),
                };
                let sem_sim = match config.mode {
                    RetrievalMode::Text => 0.0,
                    _ => oracle::dense_cosine(&e.doc_vec, &query_vec).clamp(0.0, 1.0),
                };
                let sim = Self::blend(config.mode, config.hybrid_alpha, text_sim, sem_sim);
                (e.id.clone(), sim * e.success, e.quality)
            })
            .collect();
        oracle::rank(scored, config.top_k)
    }

    fn teacher(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &TeacherQuery,
        config: &RetrievalConfig,
    ) -> Vec<(String, f64)> {
        let steps: Vec<&str> = query
            .summary_steps
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect();
        let step_vecs: Vec<Vec<f64>> = steps.iter().map(|s| embed(provider, s)).collect();
        let scored = self
            .entries
            .iter()
            .map(|e| {
                let mut total = 0.0;
                for (j, z) in steps.iter().enumerate() {
                    let mut best = 0.0f64;
                    for (l, step_text) in e.step_texts.iter().enumerate() {
                        let text_sim = match config.mode {
                            RetrievalMode::Semantic => 0.0,
                            _ => self.model.cosine(step_text, z),
                        };
                        let sem_sim = match config.mode {
                            RetrievalMode::Text => 0.0,
                            _ => oracle::dense_cosine(&e.step_vecs[l], &step_vecs[j])
                                .clamp(0.0, 1.0),
                        };
                        best =
                            best.max(Self::blend(config.mode, config.hybrid_alpha, text_sim, sem_sim));
                    }
                    total += best;
                }
                (e.id.clone(), total * e.precision, e.quality)
            })
            .collect();
        oracle::rank(scored, config.top_m)
    }

    fn adaptive(
        &self,
        provider: &dyn EmbeddingProvider,
        problem: &str,
        goal: Option<&str>,
        steps: &[String],
        t: u32,
        config: &RetrievalConfig,
    ) -> Vec<(String, f64)> {
        let lambda = match config.lambda_schedule {
            LambdaSchedule::PlanningPureCoarse => 1.0,
            LambdaSchedule::LinearDecay { t_max } => {
                (1.0 - t as f64 / (t_max.max(1)) as f64).max(0.0)
            }
        };
        let mut query_workflow = embed(provider, problem);
        if let Some(goal) = goal {
            query_workflow = oracle::add(&query_workflow, &embed(provider, goal));
        }
        let query_steps: Vec<Vec<f64>> = steps.iter().map(|s| embed(provider, s)).collect();
        let mut scored = Vec::new();
        for e in &self.entries {
            let workflow = match &e.goal_vec {
                Some(goal_vec) => oracle::add(&e.problem_vec, goal_vec),
                None => e.problem_vec.clone(),
            };
            let raw = oracle::dense_cosine(&workflow, &query_workflow);
            // Strict gate: raw must exceed the threshold to pass.
            if raw <= config.coarse_threshold {
                continue;
            }
            let coarse = raw.clamp(0.0, 1.0);
            let fine_norm = if query_steps.is_empty() {
                0.0
            } else {
                let mut sum = 0.0;
                for q in &query_steps {
                    let best = e
                        .step_vecs
                        .iter()
                        .map(|s| oracle::dense_cosine(s, q))
                        .fold(f64::NEG_INFINITY, f64::max);
                    sum += if best.is_finite() {
                        best.clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                }
                sum / query_steps.len() as f64
            };
            scored.push((
                e.id.clone(),
                lambda * coarse + (1.0 - lambda) * fine_norm,
                e.quality,
            ));
        }
        oracle::rank(scored, config.top_k)
    }
}

const WORDS: [&str; 48] = [
    "atom", "distance", "protein", "structure", "archive", "download", "parse", "filter",
    "record", "compute", "measure", "unit", "convert", "round", "answer", "verify", "search",
    "source", "extract", "table", "column", "dataset", "pipeline", "schedule", "window",
    "buffer", "stream", "cache", "index", "vector", "token", "model", "query", "plan",
    "error", "retry", "format", "report", "summary", "trace", "branch", "commit", "patch",
    "test", "deploy", "monitor", "alert", "backup",
];

fn phrase(rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.random_range(len);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn synthetic_kb(seed: u64, size: usize) -> KnowledgeBase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kb = KnowledgeBase::new();
    let mut previous: Vec<(String, Option<String>, Vec<String>)> = Vec::new();
    for i in 0..size {
        let (problem, goal, steps) = if i > 0 && rng.random_bool(0.1) {
            // Exact textual duplicate of an earlier entry under a fresh id:
            // forces score ties, exercising the quality and id tie-breaks.
            previous[rng.random_range(0..previous.len())].clone()
        } else {
            let problem = phrase(&mut rng, 3..=8);
            let goal = rng.random_bool(0.6).then(|| phrase(&mut rng, 2..=5));
            let steps = (0..rng.random_range(1..=5))
                .map(|_| phrase(&mut rng, 2..=6))
                .collect();
            (problem, goal, steps)
        };
        previous.push((problem.clone(), goal.clone(), steps.clone()));
        let refs: Vec<&str> = steps.iter().map(String::as_str).collect();
        let mut e = Experience::new("", &problem, &refs, 1_000 + i as i64).with_quality(
            rng.random_range(0..=10) as f64 / 10.0,
            rng.random_range(0..=10) as f64 / 10.0,
            rng.random_range(0..=10) as f64 / 10.0,
        );
        e.goal = goal;
        kb.insert(e).unwrap();
    }
    kb
}

fn assert_items_match(
    label: &str,
    engine: &expkb::retrieval::RetrievalResult,
    expected: &[(String, f64)],
) {
    let got: Vec<(String, f64)> = engine
        .items
        .iter()
        .map(|item| (item.id.as_str().to_string(), item.score))
        .collect();
    let got_ids: Vec<&String> = got.iter().map(|(id, _)| id).collect();
    let want_ids: Vec<&String> = expected.iter().map(|(id, _)| id).collect();
    assert_eq!(got_ids, want_ids, "{label}: ranked ids diverge from oracle");
    for ((id, engine_score), (_, oracle_score)) in got.iter().zip(expected) {
        assert!(
            (engine_score - oracle_score).abs() < 1e-12,
            "{label}: score mismatch on {id}: engine {engine_score}, oracle {oracle_score}"
        );
    }
}

fn check_kb(seed: u64, size: usize) {
    let started = Instant::now();
    let kb = synthetic_kb(seed, size);
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedder::new(64));
    let index = KbIndex::build(kb.snapshot(), provider.clone()).unwrap();
    let oracle = Oracle::build(index.snapshot(), provider.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);

    for mode in [
        RetrievalMode::Hybrid,
        RetrievalMode::Text,
        RetrievalMode::Semantic,
    ] {
        for k in [3usize, 7] {
            let config = RetrievalConfig {
                mode,
                top_k: k,
                top_m: k,
                ..RetrievalConfig::default()
            };
            let query = StudentQuery {
                reason_trace: phrase(&mut rng, 4..=10),
                problem: phrase(&mut rng, 3..=6),
                goal: rng.random_bool(0.5).then(|| phrase(&mut rng, 2..=4)),
            };
            let engine = student_retrieve(&index, &query, &config).unwrap();
            let expected = oracle.student(provider.as_ref(), &query, &config);
            assert_items_match(
                &format!("student size={size} mode={mode:?} k={k}"),
                &engine,
                &expected,
            );

            let teacher_query = TeacherQuery {
                summary_steps: (0..rng.random_range(1..=3))
                    .map(|_| phrase(&mut rng, 2..=6))
                    .collect(),
            };
            let engine = teacher_retrieve(&index, &teacher_query, &config).unwrap();
            let expected = oracle.teacher(provider.as_ref(), &teacher_query, &config);
            assert_items_match(
                &format!("teacher size={size} mode={mode:?} m={k}"),
                &engine,
                &expected,
            );
        }
    }

    for (schedule, ts) in [
        (LambdaSchedule::PlanningPureCoarse, vec![0u32]),
        (LambdaSchedule::LinearDecay { t_max: 10 }, vec![0, 5, 10, 15]),
    ] {
        for t in ts {
            let config = RetrievalConfig {
                lambda_schedule: schedule,
                ..RetrievalConfig::default()
            };
            let problem = phrase(&mut rng, 3..=6);
            let goal = rng.random_bool(0.5).then(|| phrase(&mut rng, 2..=4));
            let steps: Vec<String> = (0..rng.random_range(1..=4))
                .map(|_| phrase(&mut rng, 2..=5))
                .collect();
            let bundle =
                QueryBundle::embed(provider.as_ref(), &problem, goal.as_deref(), &steps).unwrap();
            let engine = adaptive_retrieve(&index, &bundle, t, &config).unwrap();
            let expected =
                oracle.adaptive(provider.as_ref(), &problem, goal.as_deref(), &steps, t, &config);
            assert_items_match(
                &format!("adaptive size={size} schedule={schedule:?} t={t}"),
                &engine,
                &expected,
            );
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 2.0,
        "oracle comparison on {size} entries took {elapsed:?}, budget is 2s"
    );
}

#[test]
fn oracle_equivalence_on_small_kb() {
    check_kb(1, 50);
}

#[test]
fn oracle_equivalence_on_medium_kb() {
    check_kb(2, 200);
}

#[test]
fn oracle_equivalence_on_large_kb() {
    check_kb(3, 1000);
}

#[test]
fn scaling_success_uniformly_preserves_student_order() {
    let kb = synthetic_kb(11, 60);
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedder::new(64));
    let config = RetrievalConfig {
        top_k: 60,
        ..RetrievalConfig::default()
    };
    let query = StudentQuery {
        reason_trace: "compute the distance between atom records".to_string(),
        problem: "protein structure measurement".to_string(),
        goal: None,
    };
    let index = KbIndex::build(kb.snapshot(), provider.clone()).unwrap();
    let baseline = student_retrieve(&index, &query, &config).unwrap();

    let mut scaled = KnowledgeBase::new();
    for e in kb.snapshot().iter() {
        let mut copy = e.as_ref().clone();
        copy.quality.success *= 0.5;
        scaled.restore(copy).unwrap();
    }
    let scaled_index = KbIndex::build(scaled.snapshot(), provider).unwrap();
    let rescored = student_retrieve(&scaled_index, &query, &config).unwrap();

    let base_ids: Vec<&str> = baseline.items.iter().map(|i| i.id.as_str()).collect();
    let scaled_ids: Vec<&str> = rescored.items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(base_ids, scaled_ids, "order must survive uniform success scaling");
    for (a, b) in baseline.items.iter().zip(rescored.items.iter()) {
        assert!((b.score - a.score * 0.5).abs() < 1e-12);
    }
}

#[test]
fn teacher_precision_zero_cannot_outrank_positive_scores() {
    let mut kb = KnowledgeBase::new();
    kb.insert(
        Experience::new("", "measure atomic distance", &["extract the atom records"], 0)
            .with_quality(1.0, 1.0, 0.0),
    )
    .unwrap();
    kb.insert(
        Experience::new("", "tabulate survey results", &["collect the answers"], 0)
            .with_quality(0.2, 1.0, 0.4),
    )
    .unwrap();
    let index = KbIndex::build(kb.snapshot(), Arc::new(HashEmbedder::new(64))).unwrap();
    let result = teacher_retrieve(
        &index,
        &TeacherQuery {
            summary_steps: vec!["extract the atom records".to_string()],
        },
        &RetrievalConfig::default(),
    )
    .unwrap();
    // The verbatim-matching entry is muted by precision 0; the weaker match
    // with positive precision must win.
    assert_eq!(result.items[0].id.as_str(), "e-000002");
    assert!(result.items[0].score > 0.0);
    assert_eq!(result.items[1].score, 0.0);
}
