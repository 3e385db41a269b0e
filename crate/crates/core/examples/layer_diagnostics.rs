//! Per-layer [CLS] similarity to the top layer, and how much skipping each
//! layer moves the final feature.
//!
//! cargo run --example layer_diagnostics

use vlattack::backend::{layer_diagnostics, ToyBackend, ToyConfig};
use vlattack::image_attack::layer_importance;
use vlattack::ImageSample;

fn main() -> vlattack::Result<()> {
    let backend = ToyBackend::new(ToyConfig {
        layers: 6,
        ..ToyConfig::default()
    })?;
    let image = ImageSample::from_f64(
        "img",
        &ndarray::Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((x + 2 * y + c) % 5) as f64 / 4.0),
    )?;
    println!("layer  cls_vs_top  skip_similarity");
    for row in layer_diagnostics(&backend, &image)? {
        println!("{:>5}  {:>10.4}  {:>15.4}", row.layer, row.cls_similarity, row.skip_similarity);
    }
    println!("importance weights: {:.4?}", layer_importance(&image, &backend)?.as_slice());
    Ok(())
}
