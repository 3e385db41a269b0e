//! Recall@k and attack success rate from pre-computed features.
//!
//! cargo run --example retrieval_eval

use vlattack::retrieval::{evaluate_features, EvalOptions, PairFeatures};

fn main() -> vlattack::Result<()> {
    let unit = |a: f64| vec![a.cos(), a.sin()];
    let mut clean = PairFeatures {
        images: Vec::new(),
        texts: Vec::new(),
    };
    for i in 0..12 {
        let angle = i as f64 * 0.5;
        clean.images.push((format!("img{i}"), unit(angle)));
        clean.texts.push((format!("img{i}#0"), format!("img{i}"), unit(angle + 0.05)));
    }
    // rotate half the images away from their captions
    let mut adversarial = clean.clone();
    for (i, (_, f)) in adversarial.images.iter_mut().enumerate() {
        if i % 2 == 0 {
            *f = unit(i as f64 * 0.5 + 1.2);
        }
    }
    for restrict in [true, false] {
        let options = EvalOptions {
            top_k: vec![1, 3, 5],
            restrict_to_clean_hits: restrict,
            ..EvalOptions::default()
        };
        let report = evaluate_features(&clean, &adversarial, &options)?;
        println!("restrict_to_clean_hits = {restrict}");
        print!("{}", vlattack::cli::summary_table(&report));
    }
    Ok(())
}
