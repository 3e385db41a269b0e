//! Domain types shared by every stage of the attack.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB-ish image with values in `[0, 1]`, stored `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    id: String,
    pixels: Array3<f32>,
    source_path: Option<PathBuf>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty image {h}x{w}x{c}")));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            source_path: None,
        })
    }

    /// Rounds an `f64` buffer to storage precision. Values are clamped to
    /// `[0, 1]` first.
    pub fn from_f64(id: impl Into<String>, pixels: &Array3<f64>) -> Result<Self> {
        Self::new(id, pixels.mapv(|p| p.clamp(0.0, 1.0) as f32))
    }

    pub fn with_source_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = Some(path.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.pixels.mapv(f64::from)
    }

    pub fn source_path(&self) -> Option<&PathBuf> {
        self.source_path.as_ref()
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }
}

/// A caption together with its word segmentation.
///
/// Words are maximal runs of alphanumerics (apostrophes and hyphens are kept
/// inside a word); every other non-whitespace character is a token of its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    id: String,
    raw: String,
    tokens: Vec<String>,
    spans: Vec<Range<usize>>,
}

impl TextSample {
    pub fn new(id: impl Into<String>, raw: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let raw = raw.into();
        let spans = segment(&raw);
        if spans.is_empty() {
            return Err(Error::InvalidInput(format!("text `{id}` has no tokens")));
        }
        let tokens = spans.iter().map(|s| raw[s.clone()].to_string()).collect();
        Ok(Self {
            id,
            raw,
            tokens,
            spans,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Replaces the word at `position`, keeping the rest of the raw string
    /// byte-for-byte. Fails unless `word` segments to exactly one token.
    pub fn with_substitution(&self, position: usize, word: &str) -> Result<TextSample> {
        let span = self.spans.get(position).ok_or_else(|| {
            Error::InvalidInput(format!(
                "position {position} out of range for `{}` ({} tokens)",
                self.id,
                self.tokens.len()
            ))
        })?;
        if segment(word).len() != 1 || segment(word)[0] != (0..word.len()) {
            return Err(Error::InvalidInput(format!(
                "substitute `{word}` is not a single word"
            )));
        }
        let mut raw = String::with_capacity(self.raw.len() + word.len());
        raw.push_str(&self.raw[..span.start]);
        raw.push_str(word);
        raw.push_str(&self.raw[span.end..]);
        let out = TextSample::new(self.id.clone(), raw)?;
        if out.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "substitute `{word}` merges with its neighbours"
            )));
        }
        Ok(out)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-'
}

fn segment(raw: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in raw.char_indices() {
        if is_word_char(c) {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            spans.push(s..i);
        }
        if !c.is_whitespace() {
            spans.push(i..i + c.len_utf8());
        }
    }
    if let Some(s) = start {
        spans.push(s..raw.len());
    }
    spans
}

#[derive(Serialize, Deserialize)]
struct TextSampleRepr {
    id: String,
    raw: String,
    #[serde(default, skip_deserializing)]
    tokens: Vec<String>,
}

impl Serialize for TextSample {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TextSampleRepr {
            id: self.id.clone(),
            raw: self.raw.clone(),
            tokens: self.tokens.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TextSample {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TextSampleRepr::deserialize(d)?;
        TextSample::new(repr.id, repr.raw).map_err(serde::de::Error::custom)
    }
}

/// One image and its matched captions.
#[derive(Debug, Clone)]
pub struct ImageTextGroup {
    pub image: ImageSample,
    pub captions: Vec<TextSample>,
}

/// A batch of images, each with at least one matched caption. Every caption is
/// one image-text pair; its id is the pair id.
#[derive(Debug, Clone)]
pub struct PairBatch {
    groups: Vec<ImageTextGroup>,
}

impl PairBatch {
    pub fn new(groups: Vec<ImageTextGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.captions.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "image `{}` has no captions",
                    g.image.id()
                )));
            }
            let ids = std::iter::once(g.image.id()).chain(g.captions.iter().map(|c| c.id()));
            for id in ids {
                if !seen.insert(id.to_string()) {
                    return Err(Error::InvalidInput(format!("duplicate id `{id}` in batch")));
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[ImageTextGroup] {
        &self.groups
    }

    /// Number of images.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.groups.iter().map(|g| g.captions.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbBudget {
    /// L-inf pixel budget.
    pub epsilon_v: f64,
    /// Maximum number of substituted words.
    pub epsilon_t: usize,
}

impl Default for PerturbBudget {
    fn default() -> Self {
        Self {
            epsilon_v: 2.0 / 255.0,
            epsilon_t: 1,
        }
    }
}

/// Components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Substitutes come only from the fallback provider.
    NoCf,
    /// Layer weights are all ones.
    NoLi,
    /// Skip the layer-loss PGD stage (random start is kept).
    NoIg,
    /// Skip the contrastive PGD stage.
    NoIo,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoCf, Ablation::NoLi, Ablation::NoIg, Ablation::NoIo];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoCf => "no_cf",
            Ablation::NoLi => "no_li",
            Ablation::NoIg => "no_ig",
            Ablation::NoIo => "no_io",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation `{s}`")))
    }
}

/// Every knob of an attack run. Defaults are the reference hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub budget: PerturbBudget,
    /// PGD step size.
    pub alpha: f64,
    /// Steps of the layer-importance stage.
    pub steps_init: usize,
    /// Steps of the contrastive stage.
    pub steps_contrastive: usize,
    /// Synonym cosine threshold (strict).
    pub tau: f64,
    /// Number of fallback synonyms requested per out-of-vocabulary word.
    pub fallback_count: usize,
    /// Weight of the positive-pair terms in the contrastive objective.
    pub lambda: f64,
    /// Images per batch.
    pub batch_size: usize,
    pub scales: Vec<f64>,
    pub top_k: Vec<usize>,
    pub seed: u64,
    pub ablation: BTreeSet<Ablation>,
    /// Captions kept per image.
    pub m_captions: usize,
    pub skip_stopwords: bool,
    pub stopwords: Vec<String>,
    /// Number of (init, refine) rounds; rounds after the first re-randomize
    /// around the current iterate.
    pub image_rounds: usize,
    /// Shuffle images before batching (seeded).
    pub shuffle: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: PerturbBudget::default(),
            alpha: 0.5 / 255.0,
            steps_init: 10,
            steps_contrastive: 10,
            tau: 0.4,
            fallback_count: 10,
            lambda: -10.0,
            batch_size: 16,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            top_k: vec![1, 5, 10],
            seed: 0,
            ablation: BTreeSet::new(),
            m_captions: 5,
            skip_stopwords: false,
            stopwords: ["a", "an", "the", "of", "and", "in", "on", "with", "is", "are", "to"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            image_rounds: 1,
            shuffle: false,
        }
    }
}

impl AttackConfig {
    /// Field names accepted in configuration documents.
    pub const FIELDS: &'static [&'static str] = &[
        "budget",
        "alpha",
        "steps_init",
        "steps_contrastive",
        "tau",
        "fallback_count",
        "lambda",
        "batch_size",
        "scales",
        "top_k",
        "seed",
        "ablation",
        "m_captions",
        "skip_stopwords",
        "stopwords",
        "image_rounds",
        "shuffle",
    ];

    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablation.contains(&ablation)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation.insert(ablation);
        self
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.budget.epsilon_v >= 0.0 && self.budget.epsilon_v.is_finite()) {
            out.push(format!("budget.epsilon_v must be >= 0 (got {})", self.budget.epsilon_v));
        }
        if self.budget.epsilon_t > 1 {
            out.push(format!(
                "budget.epsilon_t must be 0 or 1; only single-word substitution is supported (got {})",
                self.budget.epsilon_t
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("alpha must be > 0 (got {})", self.alpha));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            out.push(format!("tau must lie in [-1, 1] (got {})", self.tau));
        }
        if !self.lambda.is_finite() {
            out.push("lambda must be finite".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.scales.is_empty() {
            out.push("scales must not be empty".into());
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            out.push(format!("scales must all be > 0 (got {:?})", self.scales));
        }
        if self.top_k.is_empty() || self.top_k.contains(&0) {
            out.push(format!("top_k must be nonempty with entries >= 1 (got {:?})", self.top_k));
        }
        if self.m_captions == 0 {
            out.push("m_captions must be >= 1".into());
        }
        if self.image_rounds == 0 {
            out.push("image_rounds must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Word substitution applied to a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub position: usize,
    pub original: String,
    pub substitute: String,
}

/// Output of the attack for one image-text pair.
#[derive(Debug, Clone)]
pub struct AdversarialRecord {
    pub pair_id: String,
    pub image_id: String,
    pub original_text: TextSample,
    pub adversarial_image: ImageSample,
    pub adversarial_text: TextSample,
    pub substitution: Option<Substitution>,
    /// Surrogate similarity of the clean caption and the clean image.
    pub clean_text_similarity: f64,
    /// Surrogate similarity of the adversarial caption and the clean image.
    pub adversarial_text_similarity: f64,
    pub linf_distance: f64,
    pub edit_distance: usize,
    /// Objective values of the layer-importance stage, one per iterate.
    pub init_loss_trace: Vec<f64>,
    /// Objective values of the contrastive stage, one per iterate.
    pub contrastive_loss_trace: Vec<f64>,
}

impl AdversarialRecord {
    pub fn within_budget(&self, budget: &PerturbBudget) -> bool {
        self.linf_distance <= budget.epsilon_v + 1e-6 && self.edit_distance <= budget.epsilon_t
    }
}
