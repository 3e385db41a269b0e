//! Compares the toy backend's analytic pixel gradients with central finite
//! differences.
//!
//! cargo run --example gradient_check

use ndarray::Array3;
use vlattack::backend::{Backend, EmbeddingObjective, ToyBackend};
use vlattack::image_attack::{layer_importance_from, multiscale_value_and_grad, ContrastiveObjective, LayerLossObjective};

fn finite_difference(f: &dyn Fn(&Array3<f64>) -> f64, x: &Array3<f64>, at: (usize, usize, usize)) -> f64 {
    let h = 1e-5;
    let (mut plus, mut minus) = (x.clone(), x.clone());
    plus[at] += h;
    minus[at] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn report(name: &str, grad: &Array3<f64>, f: &dyn Fn(&Array3<f64>) -> f64, x: &Array3<f64>) {
    let mut worst: f64 = 0.0;
    for i in 0..24 {
        let at = ((i * 5) % 8, (i * 3) % 8, i % 3);
        let fd = finite_difference(f, x, at);
        worst = worst.max((grad[at] - fd).abs() / grad[at].abs().max(fd.abs()).max(1e-12));
    }
    println!("{name}: max relative error over 24 pixels {worst:.2e}");
}

fn main() -> vlattack::Result<()> {
    let backend = ToyBackend::seeded(3);
    let clean = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((x * 3 + y * 5 + c) % 11) as f64 / 10.0);
    let adv = clean.mapv(|v| (v + 0.01).min(1.0));

    let clean_out = backend.encode_pixels(&clean)?;
    let layer = LayerLossObjective::new(&clean_out, layer_importance_from(&clean_out));
    let (_, g) = backend.pixel_gradient(&adv, &layer)?;
    let f = |x: &Array3<f64>| layer.evaluate(&backend.encode_pixels(x).unwrap()).value;
    report("layer loss", &g, &f, &adv);

    let contrastive = ContrastiveObjective {
        positives: vec![vec![0.5; 32], (0..32).map(|i| (i as f64).cos()).collect()],
        negatives: vec![(0..32).map(|i| (i as f64 * 0.3).sin()).collect()],
        lambda: -10.0,
    };
    let scales = [0.5, 0.75, 1.0, 1.25, 1.5];
    let (_, g) = multiscale_value_and_grad(&adv, &scales, &contrastive, &backend)?;
    let f = |x: &Array3<f64>| multiscale_value_and_grad(x, &scales, &contrastive, &backend).unwrap().0;
    report("multi-scale contrastive", &g, &f, &adv);
    Ok(())
}
