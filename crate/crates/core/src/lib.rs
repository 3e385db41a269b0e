//! Transfer-based adversarial examples against dual-encoder vision-language
//! models.
//!
//! The attack perturbs both modalities of an image-text pair on a fully
//! accessible surrogate encoder:
//!
//! * the caption gets a single synonym substitution, chosen among
//!   counter-fitted word-vector neighbours (or a fallback synonym provider) to
//!   minimize its similarity to the clean image ([`text_attack`]);
//! * the image is first pushed away from itself across layers weighted by
//!   their `[CLS]` agreement with the top layer, then refined with a
//!   multi-scale contrastive objective against the batch's adversarial
//!   captions ([`image_attack`]).
//!
//! The results are scored on a (possibly different) victim encoder by
//! image-to-text and text-to-image retrieval ([`retrieval`]). A deterministic
//! toy transformer ([`backend::ToyBackend`]) with exact gradients makes the
//! whole pipeline runnable without model checkpoints.

pub mod backend;
pub mod blob;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod image_attack;
pub mod lexicon;
pub mod numeric;
pub mod pipeline;
pub mod plot;
pub mod resample;
pub mod retrieval;
pub mod text_attack;
pub mod types;

pub use error::{Error, Result};
pub use numeric::{cosine, linf_distance, word_edit_distance};
pub use types::{
    Ablation, AdversarialRecord, AttackConfig, ImageSample, ImageTextGroup, PairBatch, PerturbBudget,
    Substitution, TextSample,
};
