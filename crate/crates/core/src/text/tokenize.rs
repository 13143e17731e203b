use std::collections::HashSet;
use std::sync::OnceLock;

const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.txt");

/// Tokens shorter than this (in chars) are dropped.
pub const MIN_TOKEN_CHARS: usize = 2;

#[derive(Debug, Clone, Default)]
pub struct Stopwords {
    words: HashSet<String>,
}

impl Stopwords {
    /// Parse a stopword list: one word per line, `#` starts a comment line.
    pub fn parse(list: &str) -> Self {
        let words = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Stopwords { words }
    }

    pub fn english() -> &'static Stopwords {
        static ENGLISH: OnceLock<Stopwords> = OnceLock::new();
        ENGLISH.get_or_init(|| Stopwords::parse(DEFAULT_STOPWORDS))
    }

    pub fn extend<I, S>(&mut self, words: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.words
            .extend(words.into_iter().map(|w| w.as_ref().to_lowercase()));
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Lowercased, punctuation-split tokens with stopwords and 1-char tokens removed.
/// Hashtags come through without the `#`.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with(text, Stopwords::english())
}

pub fn tokenize_with(text: &str, stopwords: &Stopwords) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= MIN_TOKEN_CHARS)
        .filter(|t| !stopwords.contains(t))
        .map(str::to_owned)
        .collect()
}
