use std::collections::BTreeMap;

use crate::error::CorpusError;
use crate::scalar::Scalar;
use crate::text::vector::SparseVector;

pub const BUILTIN_CORPUS: &str = include_str!("../../data/classes.txt");

/// Cosine score a class must reach before it is assigned.
pub const DEFAULT_CLASS_THRESHOLD: f64 = 0.30;

/// Named event classes, each a seed term vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCorpus<T: Scalar = f64> {
    classes: BTreeMap<String, SparseVector<T>>,
    threshold: T,
}

impl<T: Scalar> ClassCorpus<T> {
    pub fn new(threshold: T) -> Result<Self, CorpusError> {
        if !(threshold > T::zero() && threshold <= T::one()) {
            return Err(CorpusError::Threshold(format!("{threshold:?}")));
        }
        Ok(ClassCorpus {
            classes: BTreeMap::new(),
            threshold,
        })
    }

    /// The nine shipped classes with the default threshold.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CORPUS, T::of_f64(DEFAULT_CLASS_THRESHOLD))
            .expect("bundled corpus parses")
    }

    /// Parses `class: term[ weight], term[ weight], ...` lines. Blank lines and
    /// `#` comments are skipped; a class named twice accumulates its terms.
    pub fn parse(text: &str, threshold: T) -> Result<Self, CorpusError> {
        let mut corpus = Self::new(threshold)?;
        let mut staged: BTreeMap<String, Vec<(String, T)>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (class, terms) = line.split_once(':').ok_or_else(|| CorpusError::Parse {
                line: i + 1,
                msg: "expected `class: terms`".into(),
            })?;
            let class = class.trim().to_lowercase();
            if class.is_empty() {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    msg: "empty class name".into(),
                });
            }
            let entry = staged.entry(class).or_default();
            for item in terms.split(',') {
                let mut parts = item.split_whitespace();
                let Some(term) = parts.next() else { continue };
                let weight = match parts.next() {
                    None => T::one(),
                    Some(w) => {
                        let w: f64 = w.parse().map_err(|_| CorpusError::Parse {
                            line: i + 1,
                            msg: format!("bad weight {w:?}"),
                        })?;
                        if !(w.is_finite() && w > 0.0) {
                            return Err(CorpusError::Parse {
                                line: i + 1,
                                msg: format!("weight must be positive, got {w}"),
                            });
                        }
                        T::of_f64(w)
                    }
                };
                if parts.next().is_some() {
                    return Err(CorpusError::Parse {
                        line: i + 1,
                        msg: format!("unexpected text in {item:?}"),
                    });
                }
                entry.push((term.trim_start_matches('#').to_lowercase(), weight));
            }
        }
        for (class, terms) in staged {
            corpus.insert_class(class, terms)?;
        }
        Ok(corpus)
    }

    pub fn insert_class<I, S>(
        &mut self,
        name: impl Into<String>,
        terms: I,
    ) -> Result<(), CorpusError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
    {
        let name = name.into();
        let v = SparseVector::from_weights(terms);
        if v.is_empty() {
            return Err(CorpusError::EmptyClass(name));
        }
        self.classes.insert(name, v);
        Ok(())
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn seed(&self, class: &str) -> Option<&SparseVector<T>> {
        self.classes.get(class)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Best-scoring class by cosine against the seed vectors, if it reaches the
    /// threshold. Equal scores go to the lexicographically smaller class name.
    pub fn classify(&self, vec: &SparseVector<T>) -> Option<(String, T)> {
        let mut best: Option<(&str, T)> = None;
        for (name, seed) in &self.classes {
            let score = vec.cosine(seed);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((name, score));
            }
        }
        best.filter(|(_, s)| *s >= self.threshold && *s > T::zero())
            .map(|(n, s)| (n.to_owned(), s))
    }
}

pub fn classify<T: Scalar>(vec: &SparseVector<T>, corpus: &ClassCorpus<T>) -> Option<(String, T)> {
    corpus.classify(vec)
}
