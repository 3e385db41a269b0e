//! Single-word substitution that minimizes image-text similarity on the
//! surrogate.

use crate::backend::Backend;
use crate::error::Result;
use crate::lexicon::Lexicon;
use crate::numeric::cosine;
use crate::types::{Ablation, AttackConfig, ImageSample, Substitution, TextSample};

/// One single-substitution variant of a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateText {
    pub text: TextSample,
    pub position: usize,
    pub substitute: String,
    /// Cosine to the paired image's final feature, once scored.
    pub similarity: Option<f64>,
}

/// Every single-substitution variant of `text`, ordered by position and then
/// by substitute-set order.
pub fn candidate_texts(text: &TextSample, lexicon: &Lexicon, config: &AttackConfig) -> Vec<CandidateText> {
    if config.budget.epsilon_t == 0 {
        return Vec::new();
    }
    let vectors_enabled = !config.has(Ablation::NoCf);
    let mut out = Vec::new();
    for (position, word) in text.tokens().iter().enumerate() {
        if config.skip_stopwords && config.stopwords.iter().any(|s| s.eq_ignore_ascii_case(word)) {
            continue;
        }
        let subs = lexicon.substitutes(text, position, config.tau, config.fallback_count, vectors_enabled);
        for substitute in subs {
            // multi-word substitutes would break the one-word budget
            let Ok(candidate) = text.with_substitution(position, &substitute) else {
                continue;
            };
            out.push(CandidateText {
                text: candidate,
                position,
                substitute,
                similarity: None,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedText {
    pub text: TextSample,
    pub similarity: f64,
    /// Similarity of the unmodified caption.
    pub original_similarity: f64,
    /// `None` when no candidate existed and the original was kept.
    pub substitution: Option<Substitution>,
}

impl SelectedText {
    pub fn substituted(&self) -> bool {
        self.substitution.is_some()
    }
}

/// Picks the candidate with the lowest cosine to `image_feature`. Ties go to
/// the earliest candidate in enumeration order.
pub fn select_against_feature(
    image_feature: &[f64],
    text: &TextSample,
    backend: &dyn Backend,
    lexicon: &Lexicon,
    config: &AttackConfig,
) -> Result<SelectedText> {
    let original_similarity = cosine(backend.encode_text(text)?.final_slice(), image_feature);
    let mut best: Option<CandidateText> = None;
    for mut c in candidate_texts(text, lexicon, config) {
        let sim = cosine(backend.encode_text(&c.text)?.final_slice(), image_feature);
        c.similarity = Some(sim);
        if best.as_ref().is_none_or(|b| sim < b.similarity.unwrap_or(f64::INFINITY)) {
            best = Some(c);
        }
    }
    Ok(match best {
        Some(c) => SelectedText {
            similarity: c.similarity.unwrap_or(original_similarity),
            original_similarity,
            substitution: Some(Substitution {
                position: c.position,
                original: text.tokens()[c.position].clone(),
                substitute: c.substitute,
            }),
            text: c.text,
        },
        None => SelectedText {
            text: text.clone(),
            similarity: original_similarity,
            original_similarity,
            substitution: None,
        },
    })
}

/// Adversarial caption for the clean image `image`.
pub fn select_adversarial_text(
    image: &ImageSample,
    text: &TextSample,
    backend: &dyn Backend,
    lexicon: &Lexicon,
    config: &AttackConfig,
) -> Result<SelectedText> {
    let feature = backend.encode_image(image)?.final_feature;
    select_against_feature(feature.as_slice().expect("contiguous"), text, backend, lexicon, config)
}
