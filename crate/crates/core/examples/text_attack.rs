//! Picks the single-word substitution that most lowers a caption's similarity
//! to its image on the toy backend.
//!
//! cargo run --example text_attack

use std::collections::BTreeMap;

use vlattack::backend::ToyBackend;
use vlattack::lexicon::{Lexicon, StaticSynonymTable, VectorStore};
use vlattack::text_attack::{candidate_texts, select_adversarial_text};
use vlattack::{AttackConfig, ImageSample, TextSample};

fn main() -> vlattack::Result<()> {
    let store = VectorStore::from_entries(vec![
        ("dog", vec![1.0, 0.1, 0.0]),
        ("puppy", vec![0.9, 0.2, 0.0]),
        ("hound", vec![0.95, 0.0, 0.1]),
        ("park", vec![0.0, 1.0, 0.0]),
        ("garden", vec![0.1, 0.9, 0.0]),
        ("red", vec![0.0, 0.0, 1.0]),
    ])?;
    // "runs" has no vector, so its substitutes come from the table
    let table: BTreeMap<String, Vec<String>> =
        [("runs".into(), vec!["sprints".into(), "dashes".into()])].into_iter().collect();
    let lexicon = Lexicon::new(store, StaticSynonymTable::new(table));

    let backend = ToyBackend::seeded(0);
    let image = ImageSample::from_f64("img", &ndarray::Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
        ((y * 8 + x) * 3 + c) as f64 / 192.0
    }))?;
    let caption = TextSample::new("img#0", "A dog runs in the park.")?;
    let config = AttackConfig::default();

    for c in candidate_texts(&caption, &lexicon, &config) {
        println!("candidate: {}", c.text.raw());
    }
    let chosen = select_adversarial_text(&image, &caption, &backend, &lexicon, &config)?;
    println!(
        "chosen:    {}  (cosine {:.4} -> {:.4})",
        chosen.text.raw(),
        chosen.original_similarity,
        chosen.similarity
    );
    Ok(())
}
