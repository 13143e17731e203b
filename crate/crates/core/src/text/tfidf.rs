use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::text::vector::SparseVector;

/// Document frequencies for one batch window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabularyStats {
    pub doc_count: u64,
    pub doc_freq: BTreeMap<String, u64>,
    pub window_id: String,
}

impl VocabularyStats {
    pub fn new(window_id: impl Into<String>) -> Self {
        VocabularyStats {
            doc_count: 0,
            doc_freq: BTreeMap::new(),
            window_id: window_id.into(),
        }
    }

    pub fn from_documents<'a, I>(window_id: impl Into<String>, docs: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut stats = VocabularyStats::new(window_id);
        for d in docs {
            stats.add_document(d);
        }
        stats
    }

    pub fn add_document<S: AsRef<str>>(&mut self, tokens: &[S]) {
        self.doc_count += 1;
        let distinct: BTreeSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
        for t in distinct {
            *self.doc_freq.entry(t.to_owned()).or_insert(0) += 1;
        }
    }

    pub fn doc_freq(&self, term: &str) -> u64 {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    /// `ln(1 + N / (1 + df))`; unseen terms have `df = 0`.
    pub fn idf(&self, term: &str) -> f64 {
        idf(self.doc_count, self.doc_freq(term))
    }
}

pub fn idf(doc_count: u64, doc_freq: u64) -> f64 {
    (1.0 + doc_count as f64 / (1.0 + doc_freq as f64)).ln()
}

/// Raw counts per term.
pub fn term_counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_ref()).or_insert(0) += 1;
    }
    counts
}

/// Unnormalised TF-IDF weights: raw term count times smoothed IDF.
pub fn tf_idf_raw<T: Scalar, S: AsRef<str>>(
    tokens: &[S],
    stats: &VocabularyStats,
) -> SparseVector<T> {
    SparseVector::from_weights(
        term_counts(tokens)
            .into_iter()
            .map(|(t, tf)| (t.to_owned(), T::of_f64(tf as f64 * stats.idf(t)))),
    )
}

/// Unit-norm TF-IDF vector (zero for an empty token list).
pub fn tf_idf<T: Scalar, S: AsRef<str>>(tokens: &[S], stats: &VocabularyStats) -> SparseVector<T> {
    tf_idf_raw::<T, S>(tokens, stats).normalized()
}
