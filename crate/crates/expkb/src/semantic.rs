//! Dense semantic channel: the embedding provider contract, deterministic
//! offline stub, caching and in-flight-bounding wrappers, and per-experience
//! embedding bundles.
//!
//! A provider is typically a remote model served over a request/response wire
//! protocol; the exact encoding is an adapter concern. Everything in the
//! engine depends only on [`EmbeddingProvider`].

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::store::{ContextDescriptor, Experience};

/// Fixed-dimension dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Elementwise sum; dimensions must match.
    pub fn add(&self, other: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.0.len(), other.0.len());
        DenseVector(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

/// Cosine similarity in [-1, 1]; zero-magnitude input on either side gives 0.
/// Rounding that would push the ratio past ±1 is clamped away.
pub fn dense_cosine(a: &DenseVector, b: &DenseVector) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.0.iter().zip(b.0.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Failures crossing the provider boundary.
#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    /// The provider could not be reached or answered with an error.
    #[error("embedding provider transport failure: {message}")]
    Transport { message: String },
    /// The provider answered but violated its contract.
    #[error("embedding provider contract violation: {message}")]
    Contract { message: String },
}

/// Source of dense embeddings. Implementations must be deterministic per
/// `identity()`: the same text under the same identity always maps to the
/// same vector, and every returned vector has exactly `dimension()` entries.
/// `embed_batch` may be called from several threads at once.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier including the model name; part of every cache key.
    fn identity(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError>;
}

/// Checks the batch-shape half of the provider contract.
pub(crate) fn check_batch(
    provider: &dyn EmbeddingProvider,
    requested: usize,
    got: &[DenseVector],
) -> Result<(), EmbeddingError> {
    if got.len() != requested {
        return Err(EmbeddingError::Contract {
            message: format!("asked for {requested} vectors, got {}", got.len()),
        });
    }
    let want = provider.dimension();
    for (i, v) in got.iter().enumerate() {
        if v.dimension() != want {
            return Err(EmbeddingError::Contract {
                message: format!("vector {i} has dimension {}, expected {want}", v.dimension()),
            });
        }
    }
    Ok(())
}

/// Convenience for embedding a single text.
pub fn embed_one(
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<DenseVector, EmbeddingError> {
    let mut out = provider.embed_batch(std::slice::from_ref(&text.to_string()))?;
    check_batch(provider, 1, &out)?;
    Ok(out.remove(0))
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Offline deterministic provider for tests and air-gapped runs.
///
/// Component 0 is a constant bias so any two embeddings have strictly
/// positive cosine; each token is hashed into one of the remaining
/// components and counted. Identical texts map to identical vectors, texts
/// sharing vocabulary land close together, and no network is involved.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    identity: String,
}

impl HashEmbedder {
    /// `dimension` must be at least 2 (one bias slot plus one token slot).
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 2, "hash embedder needs dimension >= 2");
        HashEmbedder {
            dimension,
            identity: format!("hash-embedder/v1/{dimension}d"),
        }
    }

    fn embed_text(&self, text: &str) -> DenseVector {
        let mut v = vec![0.0; self.dimension];
        v[0] = 1.0;
        for token in crate::text::tokenize(text) {
            let slot = 1 + (fnv1a(token.as_bytes()) % (self.dimension as u64 - 1)) as usize;
            v[slot] += 1.0;
        }
        DenseVector(v)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        // Mirrors the dimensionality of common small sentence encoders.
        HashEmbedder::new(384)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Memoizing wrapper. The cache key is (provider identity, exact text); the
/// identity is fixed per instance, so the map is keyed by text alone. Hits
/// never touch the inner provider.
pub struct CachedEmbedder<P: EmbeddingProvider> {
    inner: P,
    cache: Mutex<HashMap<String, DenseVector>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        CachedEmbedder {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn identity(&self) -> &str {
        self.inner.identity()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
        let mut missing: Vec<String> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for t in texts {
                if !cache.contains_key(t) && !missing.contains(t) {
                    missing.push(t.clone());
                }
            }
        }
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            check_batch(&self.inner, missing.len(), &fresh)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (text, vector) in missing.into_iter().zip(fresh) {
                cache.insert(text, vector);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts
            .iter()
            .map(|t| cache.get(t).expect("populated above").clone())
            .collect())
    }
}

/// Caps the number of concurrent `embed_batch` calls reaching the inner
/// provider; extra callers block until a slot frees up.
pub struct BoundedEmbedder<P: EmbeddingProvider> {
    inner: P,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl<P: EmbeddingProvider> BoundedEmbedder<P> {
    pub fn new(inner: P, max_in_flight: usize) -> Self {
        assert!(max_in_flight >= 1);
        BoundedEmbedder {
            inner,
            slots: Mutex::new(max_in_flight),
            freed: Condvar::new(),
        }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for BoundedEmbedder<P> {
    fn identity(&self) -> &str {
        self.inner.identity()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
        let mut slots = self.slots.lock().expect("slot lock");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("slot lock");
        }
        *slots -= 1;
        drop(slots);
        let result = self.inner.embed_batch(texts);
        *self.slots.lock().expect("slot lock") += 1;
        self.freed.notify_one();
        result
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for Arc<P> {
    fn identity(&self) -> &str {
        self.as_ref().identity()
    }

    fn dimension(&self) -> usize {
        self.as_ref().dimension()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
        self.as_ref().embed_batch(texts)
    }
}

/// Per-component embeddings of one experience.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub problem: DenseVector,
    pub goal: Option<DenseVector>,
    /// One vector per solution step, in step order.
    pub steps: Vec<DenseVector>,
    pub context: Option<DenseVector>,
}

impl EmbeddingBundle {
    /// Workflow representative: problem plus goal, elementwise; just the
    /// problem vector when no goal is recorded.
    pub fn workflow_vector(&self) -> DenseVector {
        match &self.goal {
            Some(goal) => self.problem.add(goal),
            None => self.problem.clone(),
        }
    }
}

fn render_context(ctx: &ContextDescriptor) -> Option<String> {
    let mut parts: Vec<String> = Vec::new();
    if let Some(domain) = &ctx.domain {
        parts.push(format!("domain: {domain}"));
    }
    if let Some(difficulty) = ctx.difficulty {
        parts.push(format!("difficulty: {difficulty}"));
    }
    if !ctx.tags.is_empty() {
        parts.push(format!("tags: {}", ctx.tags.join(" ")));
    }
    if parts.is_empty() {
        None
    } else {
        Some(parts.join(" "))
    }
}

/// Embeds every component of an experience in one provider batch:
/// problem, goal (when present), each step, context (when present and
/// non-empty).
pub fn embed_experience(
    provider: &dyn EmbeddingProvider,
    experience: &Experience,
) -> Result<EmbeddingBundle, EmbeddingError> {
    let mut texts: Vec<String> = Vec::with_capacity(experience.steps.len() + 3);
    texts.push(experience.problem_pattern.clone());
    let goal_slot = experience.goal.as_ref().map(|g| {
        texts.push(g.clone());
        texts.len() - 1
    });
    let step_start = texts.len();
    for step in &experience.steps {
        texts.push(step.text.clone());
    }
    let context_slot = experience
        .context
        .as_ref()
        .and_then(render_context)
        .map(|rendered| {
            texts.push(rendered);
            texts.len() - 1
        });
    let vectors = provider.embed_batch(&texts)?;
    check_batch(provider, texts.len(), &vectors)?;
    Ok(EmbeddingBundle {
        problem: vectors[0].clone(),
        goal: goal_slot.map(|i| vectors[i].clone()),
        steps: vectors[step_start..step_start + experience.steps.len()].to_vec(),
        context: context_slot.map(|i| vectors[i].clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn identical_text_embeds_identically() {
        let p = HashEmbedder::new(16);
        let a = embed_one(&p, "filter atom records").unwrap();
        let b = embed_one(&p, "filter atom records").unwrap();
        assert_eq!(a, b);
        assert!((dense_cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn any_two_stub_embeddings_have_positive_cosine() {
        let p = HashEmbedder::new(8);
        let a = embed_one(&p, "completely unrelated words").unwrap();
        let b = embed_one(&p, "zebra quark flux").unwrap();
        assert!(dense_cosine(&a, &b) > 0.0);
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        let z = DenseVector(vec![0.0, 0.0]);
        let v = DenseVector(vec![1.0, 2.0]);
        assert_eq!(dense_cosine(&z, &v), 0.0);
        assert_eq!(dense_cosine(&z, &z), 0.0);
    }

    #[test]
    fn cosine_matches_hand_computation() {
        let a = DenseVector(vec![1.0, 0.0, 1.0]);
        let b = DenseVector(vec![1.0, 1.0, 0.0]);
        assert!((dense_cosine(&a, &b) - 0.5).abs() < 1e-12);
        let c = DenseVector(vec![-1.0, 0.0, 0.0]);
        let d = DenseVector(vec![1.0, 0.0, 0.0]);
        assert!((dense_cosine(&c, &d) + 1.0).abs() < 1e-12);
    }

    struct CountingProvider {
        inner: HashEmbedder,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for CountingProvider {
        fn identity(&self) -> &str {
            self.inner.identity()
        }
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
            self.calls.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    #[test]
    fn cache_never_recomputes_known_text() {
        let counting = CountingProvider {
            inner: HashEmbedder::new(8),
            calls: AtomicUsize::new(0),
        };
        let cached = CachedEmbedder::new(counting);
        let batch = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        let first = cached.embed_batch(&batch).unwrap();
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 2);
        let second = cached.embed_batch(&batch).unwrap();
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 2);
        assert_eq!(first, second);
        assert_eq!(first[0], first[2]);
    }

    struct WrongDimension;

    impl EmbeddingProvider for WrongDimension {
        fn identity(&self) -> &str {
            "wrong/v0"
        }
        fn dimension(&self) -> usize {
            4
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
            Ok(texts.iter().map(|_| DenseVector(vec![1.0, 2.0])).collect())
        }
    }

    #[test]
    fn dimension_violation_is_a_contract_error() {
        let err = embed_one(&WrongDimension, "x").unwrap_err();
        assert!(matches!(err, EmbeddingError::Contract { .. }));
    }

    #[test]
    fn bundle_covers_all_components_and_workflow_vector_sums() {
        use crate::store::{ContextDescriptor, Experience};
        let provider = HashEmbedder::new(16);
        let exp = Experience::new("e-1", "align sequences", &["load fasta", "run aligner"], 0)
            .with_goal("maximum identity")
            .with_context(ContextDescriptor::for_domain("bioinformatics"));
        let bundle = embed_experience(&provider, &exp).unwrap();
        assert_eq!(bundle.steps.len(), 2);
        assert!(bundle.goal.is_some());
        assert!(bundle.context.is_some());
        assert_eq!(bundle.problem, embed_one(&provider, "align sequences").unwrap());
        assert_eq!(
            bundle.workflow_vector(),
            bundle.problem.add(bundle.goal.as_ref().unwrap())
        );

        let no_goal = Experience::new("e-2", "p", &["s"], 0);
        let bundle = embed_experience(&provider, &no_goal).unwrap();
        assert_eq!(bundle.workflow_vector(), bundle.problem);
    }

    #[test]
    fn bounded_embedder_allows_reentrant_sequential_use() {
        let bounded = BoundedEmbedder::new(HashEmbedder::new(8), 1);
        for _ in 0..3 {
            bounded.embed_batch(&["t".to_string()]).unwrap();
        }
    }

    #[test]
    fn bounded_embedder_serializes_concurrent_calls() {
        let bounded = Arc::new(BoundedEmbedder::new(HashEmbedder::new(8), 2));
        let mut handles = Vec::new();
        for i in 0..8 {
            let b = Arc::clone(&bounded);
            handles.push(std::thread::spawn(move || {
                b.embed_batch(&[format!("text {i}")]).unwrap().len()
            }));
        }
        for h in handles {
            assert_eq!(h.join().unwrap(), 1);
        }
    }
}
