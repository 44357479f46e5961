//! Sparse lexical channel: Unicode word tokenization, a TF-IDF model fitted
//! over a document collection, and cosine similarity between L2-normalized
//! sparse vectors.
//!
//! The idf is the smoothed variant `ln((1 + N) / (1 + df)) + 1`, which keeps
//! every weight strictly positive and is defined even for terms appearing in
//! every document. Terms unseen at fit time contribute nothing at query time.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;

static WORD_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+").expect("valid regex"));
static LEADING_NUMBER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d+\.").expect("valid regex"));

/// Matches a numbered-list prefix such as `3.` at the start of a line.
pub(crate) fn leading_number_regex() -> &'static Regex {
    &LEADING_NUMBER_RE
}

/// Lowercased Unicode word tokens, in order of appearance.
pub fn tokenize(text: &str) -> Vec<String> {
    WORD_RE
        .find_iter(&text.to_lowercase())
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Sparse vector over the model's vocabulary: (term index, weight) pairs
/// sorted by term index, zero entries omitted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    fn dot(&self, other: &SparseVector) -> f64 {
        let mut sum = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() && j < other.entries.len() {
            let (ti, wi) = self.entries[i];
            let (tj, wj) = other.entries[j];
            match ti.cmp(&tj) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    sum += wi * wj;
                    i += 1;
                    j += 1;
                }
            }
        }
        sum
    }
}

/// Cosine similarity between two L2-normalized sparse vectors. Either side
/// being the zero vector yields 0.0. Weights are nonnegative, so the result
/// lies in [0, 1]; rounding past 1 is clamped away.
pub fn sparse_cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 0.0;
    }
    a.dot(b).min(1.0)
}

/// TF-IDF vocabulary and document frequencies frozen at fit time.
#[derive(Debug, Clone)]
pub struct LexicalModel {
    term_index: BTreeMap<String, usize>,
    idf: Vec<f64>,
    doc_count: usize,
}

impl LexicalModel {
    /// Fits vocabulary and idf over the given documents. Term indices follow
    /// lexicographic term order, so fitting the same collection always
    /// produces the same model.
    pub fn fit<S: AsRef<str>>(documents: &[S]) -> Self {
        let mut doc_frequency: BTreeMap<String, usize> = BTreeMap::new();
        for doc in documents {
            let mut seen: Vec<String> = tokenize(doc.as_ref());
            seen.sort_unstable();
            seen.dedup();
            for term in seen {
                *doc_frequency.entry(term).or_insert(0) += 1;
            }
        }
        let doc_count = documents.len();
        let mut term_index = BTreeMap::new();
        let mut idf = Vec::with_capacity(doc_frequency.len());
        for (pos, (term, df)) in doc_frequency.into_iter().enumerate() {
            term_index.insert(term, pos);
            idf.push((((1 + doc_count) as f64) / ((1 + df) as f64)).ln() + 1.0);
        }
        LexicalModel {
            term_index,
            idf,
            doc_count,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.term_index.len()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.term_index.get(term).map(|&i| self.idf[i])
    }

    /// L2-normalized tf·idf vector for arbitrary text. Unknown terms are
    /// dropped; text with no known terms maps to the zero vector.
    pub fn tfidf_vector(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for token in tokenize(text) {
            if let Some(&idx) = self.term_index.get(&token) {
                *counts.entry(idx).or_insert(0.0) += 1.0;
            }
        }
        let mut entries: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(idx, tf)| (idx, tf * self.idf[idx]))
            .collect();
        let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut entries {
                *w /= norm;
            }
        } else {
            entries.clear();
        }
        SparseVector { entries }
    }

    /// Convenience: cosine between the tf·idf vectors of two texts.
    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        sparse_cosine(&self.tfidf_vector(a), &self.tfidf_vector(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Pie Menus, Linear-Menus!"),
            vec!["pie", "menus", "linear", "menus"]
        );
    }

    #[test]
    fn tokenize_handles_unicode_words() {
        assert_eq!(
            tokenize("Schrödinger's Überfrage 数値"),
            vec!["schrödinger", "s", "überfrage", "数値"]
        );
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("  \t\n").is_empty());
    }

    #[test]
    fn identical_documents_have_cosine_one() {
        let model = LexicalModel::fit(&["pie menus", "linear menus", "pie crust"]);
        let sim = model.cosine("pie menus", "pie menus");
        assert!((sim - 1.0).abs() < 1e-12, "got {sim}");
    }

    #[test]
    fn oov_query_yields_zero_vector_and_zero_cosine() {
        let model = LexicalModel::fit(&["pie menus", "linear menus"]);
        let v = model.tfidf_vector("zebra quark");
        assert!(v.is_zero());
        assert_eq!(model.cosine("zebra quark", "pie menus"), 0.0);
    }

    #[test]
    fn empty_corpus_model_maps_everything_to_zero() {
        let model = LexicalModel::fit::<&str>(&[]);
        assert_eq!(model.vocab_size(), 0);
        assert!(model.tfidf_vector("anything").is_zero());
    }

    /// Independent arithmetic for the three-document toy corpus.
    ///
    /// With N = 3: df(pie) = 2, df(menus) = 2, df(linear) = 1, df(crust) = 1,
    /// so idf(pie) = idf(menus) = ln(4/3) + 1 and idf(linear) = idf(crust)
    /// = ln(4/2) + 1. "pie menus" and "pie crust" share only "pie".
    #[test]
    fn hand_computed_cosine_on_toy_corpus() {
        let model = LexicalModel::fit(&["pie menus", "linear menus", "pie crust"]);
        let shared = (4.0f64 / 3.0).ln() + 1.0;
        let rare = (4.0f64 / 2.0).ln() + 1.0;
        let norm_a = (shared * shared + shared * shared).sqrt();
        let norm_b = (shared * shared + rare * rare).sqrt();
        let expected = (shared / norm_a) * (shared / norm_b);
        let got = model.cosine("pie menus", "pie crust");
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");

        let menus_sim = model.cosine("pie menus", "linear menus");
        assert!((menus_sim - expected).abs() < 1e-12, "symmetric corpus");
    }

    #[test]
    fn repeated_terms_increase_weight_not_direction_of_single_term() {
        let model = LexicalModel::fit(&["pie pie pie", "menus"]);
        let sim = model.cosine("pie", "pie pie pie");
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded() {
        let docs = ["alpha beta gamma", "beta gamma delta", "delta epsilon"];
        let model = LexicalModel::fit(&docs);
        for a in &docs {
            for b in &docs {
                let ab = model.cosine(a, b);
                let ba = model.cosine(b, a);
                assert!((ab - ba).abs() < 1e-15);
                assert!((0.0..=1.0 + 1e-12).contains(&ab));
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let docs = ["b a", "c b", "a c d"];
        let m1 = LexicalModel::fit(&docs);
        let m2 = LexicalModel::fit(&docs);
        for term in ["a", "b", "c", "d"] {
            assert_eq!(m1.idf(term), m2.idf(term));
        }
        assert_eq!(
            m1.tfidf_vector("a b c").entries(),
            m2.tfidf_vector("a b c").entries()
        );
    }
}
