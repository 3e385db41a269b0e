//! Two-stage image attack on one image of a small batch: layer-importance
//! initialization, then multi-scale contrastive refinement.
//!
//! cargo run --example image_attack

use std::collections::BTreeMap;

use vlattack::backend::{Backend, ToyBackend};
use vlattack::image_attack::{attack_image, build_contrast_sets, ContrastiveObjective};
use vlattack::{AttackConfig, ImageSample, ImageTextGroup, PairBatch, TextSample};

fn group(i: usize, caption: &str) -> vlattack::Result<ImageTextGroup> {
    let pixels = ndarray::Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((x * (i + 1) + y + c) % 7) as f64 / 6.0);
    Ok(ImageTextGroup {
        image: ImageSample::from_f64(format!("img{i}"), &pixels)?,
        captions: vec![TextSample::new(format!("img{i}#0"), caption)?],
    })
}

fn main() -> vlattack::Result<()> {
    let batch = PairBatch::new(vec![
        group(0, "a red dog runs in the park .")?,
        group(1, "a blue cat sits on the sofa .")?,
        group(2, "a green bird flies over the lake .")?,
    ])?;
    // the text attack is skipped here: captions stand in for their adversarial versions
    let texts: BTreeMap<String, TextSample> = batch
        .groups()
        .iter()
        .flat_map(|g| g.captions.iter().map(|c| (c.id().to_string(), c.clone())))
        .collect();
    let backend = ToyBackend::seeded(0);
    let config = AttackConfig::default();
    let sets = build_contrast_sets(&batch, &texts, 0, config.m_captions)?;
    let clean = &batch.groups()[0].image;
    let out = attack_image(clean, &sets, &config, &backend, 42)?;

    println!("linf distance: {:.3}/255", out.linf_distance * 255.0);
    println!("layer weights: {:.4?}", out.layer_weights.as_slice());
    println!("stage 1 loss:  {:.4?}", out.init_loss_trace);
    println!("stage 2 loss:  {:.4?}", out.contrastive_loss_trace);
    let objective = ContrastiveObjective::encode(&sets, config.lambda, &backend)?;
    for (name, img) in [("clean", clean), ("adversarial", &out.image)] {
        let f = backend.encode_image(img)?.final_feature.to_vec();
        println!(
            "{name:>11}: mean cos to own captions {:.4}, to other captions {:.4}",
            objective.mean_positive(&f),
            objective.mean_negative(&f)
        );
    }
    Ok(())
}
