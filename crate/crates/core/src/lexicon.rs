//! Counter-fitted word vectors and substitute-word sets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::cosine;
use crate::types::TextSample;

/// Word vectors keyed by lowercased word.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    malformed: Vec<usize>,
}

impl VectorStore {
    /// Builds a store from `(word, vector)` pairs. Later duplicates (after case
    /// folding) are ignored.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut store = VectorStore::default();
        for (i, (word, vector)) in entries.into_iter().enumerate() {
            if store.words.is_empty() {
                store.dim = vector.len();
            } else if vector.len() != store.dim {
                return Err(Error::InvalidInput(format!(
                    "entry {i} (`{}`) has dimension {}, expected {}",
                    word.as_ref(),
                    vector.len(),
                    store.dim
                )));
            }
            store.insert(word.as_ref(), vector);
        }
        Ok(store)
    }

    fn insert(&mut self, word: &str, vector: Vec<f64>) -> bool {
        let key = word.to_lowercase();
        if self.index.contains_key(&key) {
            return false;
        }
        self.index.insert(key.clone(), self.words.len());
        self.words.push(key);
        self.vectors.push(vector);
        true
    }

    /// Reads the plain-text format: one entry per line, a word followed by
    /// whitespace-separated reals. Lines with unparseable numbers or a
    /// duplicate word are skipped and counted; a line whose dimension differs
    /// from the first entry is an error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store = VectorStore::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let Ok(values) = values else {
                store.malformed.push(line_no);
                continue;
            };
            if values.is_empty() {
                store.malformed.push(line_no);
                continue;
            }
            if store.words.is_empty() {
                store.dim = values.len();
            } else if values.len() != store.dim {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("vector has dimension {}, expected {}", values.len(), store.dim),
                });
            }
            if !store.insert(word, values) {
                store.malformed.push(line_no);
            }
        }
        if !store.malformed.is_empty() {
            log::warn!(
                "{}: skipped {} malformed or duplicate line(s)",
                path.display(),
                store.malformed.len()
            );
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// 1-based line numbers skipped during [`VectorStore::load`].
    pub fn malformed_lines(&self) -> &[usize] {
        &self.malformed
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(&word.to_lowercase())
            .map(|i| self.vectors[*i].as_slice())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.words
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// Every other word whose cosine with `word` is strictly above `tau`,
    /// by descending similarity then lexicographically. `None` when `word`
    /// has no vector.
    pub fn neighbours(&self, word: &str, tau: f64) -> Option<Vec<(String, f64)>> {
        let key = word.to_lowercase();
        let &i = self.index.get(&key)?;
        let query = &self.vectors[i];
        let mut out: Vec<(String, f64)> = self
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .filter_map(|(_, (w, v))| {
                let sim = cosine(v, query);
                (sim > tau).then(|| (w.to_string(), sim))
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Some(out)
    }
}

/// Source of substitutes for words without a vector (the masked-LM path).
pub trait SynonymProvider: Send + Sync {
    /// At most `count` candidates for the word at `position` of `text`.
    fn candidates(&self, text: &TextSample, position: usize, count: usize) -> Vec<String>;
}

/// Provider that never proposes anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFallback;

impl SynonymProvider for NoFallback {
    fn candidates(&self, _: &TextSample, _: usize, _: usize) -> Vec<String> {
        Vec::new()
    }
}

/// Context-free lookup table: lowercased word → ordered candidate list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticSynonymTable {
    table: BTreeMap<String, Vec<String>>,
}

impl StaticSynonymTable {
    pub fn new(table: BTreeMap<String, Vec<String>>) -> Self {
        let table = table
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        Self { table }
    }

    /// Reads a JSON object mapping words to arrays of candidates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self::new(table))
    }

    pub fn table(&self) -> &BTreeMap<String, Vec<String>> {
        &self.table
    }
}

impl SynonymProvider for StaticSynonymTable {
    fn candidates(&self, text: &TextSample, position: usize, count: usize) -> Vec<String> {
        let Some(word) = text.tokens().get(position) else {
            return Vec::new();
        };
        let word = word.to_lowercase();
        let mut out: Vec<String> = Vec::new();
        for c in self.table.get(&word).into_iter().flatten() {
            if out.len() == count {
                break;
            }
            if !c.is_empty() && c.to_lowercase() != word && !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

/// Re-cases `word` after `template`: ALL-CAPS and Title-case are carried over,
/// anything else yields the word unchanged.
pub fn match_case(template: &str, word: &str) -> String {
    let mut chars = template.chars();
    let Some(first) = chars.next() else {
        return word.to_string();
    };
    let letters: Vec<char> = template.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        return word.to_uppercase();
    }
    if first.is_uppercase() {
        let mut w = word.chars();
        return match w.next() {
            Some(f) => f.to_uppercase().chain(w.flat_map(char::to_lowercase)).collect(),
            None => String::new(),
        };
    }
    word.to_string()
}

/// Substitute set for the word at `position` of `text`.
///
/// With a vector for the word: every other vocabulary word with cosine
/// strictly above `tau`. Otherwise: up to `fallback_count` candidates from
/// `fallback`. Substitutes take the original word's capitalization.
pub fn substitute_set(
    store: &VectorStore,
    tau: f64,
    fallback: &dyn SynonymProvider,
    fallback_count: usize,
    text: &TextSample,
    position: usize,
) -> Vec<String> {
    let Some(word) = text.tokens().get(position) else {
        return Vec::new();
    };
    let raw = match store.neighbours(word, tau) {
        Some(n) => n.into_iter().map(|(w, _)| w).collect(),
        None => {
            let mut c = fallback.candidates(text, position, fallback_count);
            c.retain(|w| w.to_lowercase() != word.to_lowercase());
            c.truncate(fallback_count);
            c
        }
    };
    let mut out: Vec<String> = Vec::with_capacity(raw.len());
    for w in raw {
        let w = match_case(word, &w);
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Word vectors plus fallback provider, the full substitute-word source.
pub struct Lexicon {
    pub store: VectorStore,
    pub fallback: Box<dyn SynonymProvider>,
}

impl Lexicon {
    pub fn new(store: VectorStore, fallback: impl SynonymProvider + 'static) -> Self {
        Self {
            store,
            fallback: Box::new(fallback),
        }
    }

    pub fn empty() -> Self {
        Self::new(VectorStore::default(), NoFallback)
    }

    /// Substitutes for one position. `vectors_enabled = false` routes every
    /// word to the fallback provider.
    pub fn substitutes(
        &self,
        text: &TextSample,
        position: usize,
        tau: f64,
        fallback_count: usize,
        vectors_enabled: bool,
    ) -> Vec<String> {
        static EMPTY: std::sync::OnceLock<VectorStore> = std::sync::OnceLock::new();
        let store = if vectors_enabled {
            &self.store
        } else {
            EMPTY.get_or_init(VectorStore::default)
        };
        substitute_set(store, tau, self.fallback.as_ref(), fallback_count, text, position)
    }
}

impl std::fmt::Debug for Lexicon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lexicon")
            .field("words", &self.store.len())
            .field("dim", &self.store.dim())
            .finish_non_exhaustive()
    }
}
