//! Tokenisation, TF-IDF term vectors, cosine similarity, corpus-based event
//! classification and keyword peak detection.

pub mod classify;
pub mod peaks;
pub mod tfidf;
pub mod tokenize;
pub mod vector;

pub use classify::{classify, ClassCorpus, DEFAULT_CLASS_THRESHOLD};
pub use peaks::{detect_peaks, peak_ratio, KeywordBaseline, PeakParams};
pub use tfidf::{idf, tf_idf, tf_idf_raw, VocabularyStats};
pub use tokenize::{tokenize, tokenize_with, Stopwords};
pub use vector::{cosine, SparseVector};
