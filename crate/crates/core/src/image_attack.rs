//! Two-stage image perturbation.
//!
//! Stage one starts from a uniform random point in the L-inf ball and
//! descends a layer-weighted token similarity between the clean and the
//! adversarial image. Stage two ascends a multi-scale contrastive objective
//! that pushes the image away from its own captions (weighted by a negative
//! `lambda`) and towards the other captions of the batch. Both stages use
//! sign-gradient PGD projected onto the same ball around the clean image.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{Backend, EmbeddingObjective, EncoderOutput, ObjectiveEval};
use crate::error::{Error, Result};
use crate::numeric::{cosine, cosine_grad_wrt_second, derive_seed, linf_distance};
use crate::resample::{resize_bilinear, resize_bilinear_adjoint, scaled_dims};
use crate::types::{Ablation, AttackConfig, ImageSample, PairBatch, TextSample};

/// Per-layer weights, index `l - 1` for layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights(pub Vec<f64>);

impl LayerWeights {
    pub fn ones(layers: usize) -> Self {
        Self(vec![1.0; layers])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `w_l = cos([CLS] at layer l, [CLS] at the top layer)`, from the clean image.
pub fn layer_importance(image: &ImageSample, backend: &dyn Backend) -> Result<LayerWeights> {
    let out = backend.encode_image(image)?;
    Ok(layer_importance_from(&out))
}

pub fn layer_importance_from(output: &EncoderOutput) -> LayerWeights {
    let top = output.num_layers() - 1;
    let top_cls = output.cls(top);
    LayerWeights((0..=top).map(|l| cosine(&output.cls(l), &top_cls)).collect())
}

/// `clip(v + δ)` with `δ ~ U(-ε, ε)` per pixel.
pub fn random_init(image: &ImageSample, epsilon: f64, seed: u64) -> Result<ImageSample> {
    if epsilon < 0.0 {
        return Err(Error::InvalidInput(format!("negative epsilon {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed = image
        .pixels()
        .mapv(|p| (f64::from(p) + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0));
    ImageSample::from_f64(image.id(), &perturbed)
}

/// Layer-weighted mean token cosine between a fixed clean encoding and the
/// encoding being optimized.
pub struct LayerLossObjective {
    clean: Array3<f64>,
    weights: LayerWeights,
}

impl LayerLossObjective {
    pub fn new(clean: &EncoderOutput, weights: LayerWeights) -> Self {
        Self {
            clean: clean.layer_tokens.clone(),
            weights,
        }
    }
}

impl EmbeddingObjective for LayerLossObjective {
    fn evaluate(&self, out: &EncoderOutput) -> ObjectiveEval {
        let (layers, tokens, _) = out.layer_tokens.dim();
        let mut grad = Array3::zeros(out.layer_tokens.raw_dim());
        let mut value = 0.0;
        for l in 0..layers {
            let w = self.weights.0[l] / tokens as f64;
            for j in 0..tokens {
                let clean = self.clean.slice(s![l, j, ..]).to_vec();
                let adv = out.layer_tokens.slice(s![l, j, ..]).to_vec();
                let mut g = vec![0.0; adv.len()];
                value += w * cosine_grad_wrt_second(&clean, &adv, w, &mut g);
                grad.slice_mut(s![l, j, ..]).assign(&Array1::from(g));
            }
        }
        ObjectiveEval {
            value,
            d_layer_tokens: Some(grad),
            d_final_feature: None,
        }
    }
}

/// `Σ_l w_l · mean_j cos(E(v)_{l,j}, E(v_adv)_{l,j})`
pub fn weighted_layer_loss(
    image: &ImageSample,
    adversarial: &ImageSample,
    weights: &LayerWeights,
    backend: &dyn Backend,
) -> Result<f64> {
    let clean = backend.encode_image(image)?;
    let adv = backend.encode_image(adversarial)?;
    Ok(LayerLossObjective::new(&clean, weights.clone()).evaluate(&adv).value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

/// Sign-gradient PGD over `{x : ‖x − center‖∞ ≤ ε} ∩ [0, 1]`.
#[derive(Debug, Clone)]
pub struct PgdProblem {
    pub init: Array3<f64>,
    pub center: Array3<f64>,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub image: Array3<f64>,
    /// Objective at every iterate, initialization included (`steps + 1` values).
    pub loss_trace: Vec<f64>,
}

/// Projection onto the L-inf ball around `center`, then onto `[0, 1]`.
pub fn project(x: &mut Array3<f64>, center: &Array3<f64>, epsilon: f64) {
    ndarray::Zip::from(x).and(center).for_each(|x, c| {
        *x = x.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
    });
}

/// Runs `x ← Π(x ± α·sign(∇f(x)))` for `problem.steps` steps. `objective`
/// returns the value and gradient at a point.
pub fn pgd_optimize<F>(problem: &PgdProblem, mut objective: F) -> Result<PgdOutcome>
where
    F: FnMut(&Array3<f64>) -> Result<(f64, Array3<f64>)>,
{
    if problem.init.dim() != problem.center.dim() {
        return Err(Error::Shape(format!(
            "PGD init {:?} vs center {:?}",
            problem.init.dim(),
            problem.center.dim()
        )));
    }
    let sign = match problem.direction {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };
    let mut x = problem.init.clone();
    let mut trace = Vec::with_capacity(problem.steps + 1);
    for step in 0..problem.steps {
        let (value, grad) = objective(&x)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step });
        }
        trace.push(value);
        ndarray::Zip::from(&mut x).and(&grad).for_each(|x, g| {
            let dir = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *x += sign * problem.alpha * dir;
        });
        project(&mut x, &problem.center, problem.epsilon);
    }
    let (value, _) = objective(&x)?;
    trace.push(value);
    Ok(PgdOutcome {
        image: x,
        loss_trace: trace,
    })
}

/// A caption taking part in the contrastive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastText {
    pub pair_id: String,
    pub adversarial: bool,
    pub text: TextSample,
}

/// Positive (own captions, adversarial and original) and negative (other
/// images' adversarial captions) sets for one image of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSets {
    pub positives: Vec<ContrastText>,
    pub negatives: Vec<ContrastText>,
}

/// `adversarial_texts` maps pair (caption) id to its adversarial caption.
pub fn build_contrast_sets(
    batch: &PairBatch,
    adversarial_texts: &BTreeMap<String, TextSample>,
    image_index: usize,
    m_captions: usize,
) -> Result<ContrastSets> {
    let adv = |c: &TextSample| {
        adversarial_texts
            .get(c.id())
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no adversarial text for pair `{}`", c.id())))
    };
    let groups = batch.groups();
    let own = groups.get(image_index).ok_or_else(|| {
        Error::InvalidInput(format!("image index {image_index} outside batch of {}", groups.len()))
    })?;
    let mut positives = Vec::new();
    for c in own.captions.iter().take(m_captions) {
        positives.push(ContrastText {
            pair_id: c.id().to_string(),
            adversarial: true,
            text: adv(c)?,
        });
    }
    for c in own.captions.iter().take(m_captions) {
        positives.push(ContrastText {
            pair_id: c.id().to_string(),
            adversarial: false,
            text: c.clone(),
        });
    }
    let mut negatives = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        if i == image_index {
            continue;
        }
        for c in g.captions.iter().take(m_captions) {
            negatives.push(ContrastText {
                pair_id: c.id().to_string(),
                adversarial: true,
                text: adv(c)?,
            });
        }
    }
    Ok(ContrastSets { positives, negatives })
}

/// Resamples `image` to `ceil(s·H) × ceil(s·W)` for every scale `s`.
pub fn trans_scales(image: &ImageSample, scales: &[f64]) -> Result<Vec<ImageSample>> {
    if scales.is_empty() {
        return Err(Error::InvalidInput("empty scale set".into()));
    }
    let px = image.to_f64();
    let (h, w, _) = image.shape();
    scales
        .iter()
        .map(|&s| {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::InvalidInput(format!("non-positive scale {s}")));
            }
            let (sh, sw) = scaled_dims(h, w, s)?;
            ImageSample::from_f64(image.id(), &resize_bilinear(&px, sh, sw))
        })
        .collect()
}

/// Contrastive objective on the final image feature, with text features
/// frozen: `λ Σ_p cos(t_p, f) + Σ_n cos(t_n, f)`.
#[derive(Debug, Clone)]
pub struct ContrastiveObjective {
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl ContrastiveObjective {
    pub fn encode(sets: &ContrastSets, lambda: f64, backend: &dyn Backend) -> Result<Self> {
        let feats = |xs: &[ContrastText]| -> Result<Vec<Vec<f64>>> {
            xs.iter()
                .map(|t| Ok(backend.encode_text(&t.text)?.final_feature.to_vec()))
                .collect()
        };
        Ok(Self {
            positives: feats(&sets.positives)?,
            negatives: feats(&sets.negatives)?,
            lambda,
        })
    }

    pub fn mean_positive(&self, image_feature: &[f64]) -> f64 {
        mean_cosine(&self.positives, image_feature)
    }

    pub fn mean_negative(&self, image_feature: &[f64]) -> f64 {
        mean_cosine(&self.negatives, image_feature)
    }
}

fn mean_cosine(texts: &[Vec<f64>], image_feature: &[f64]) -> f64 {
    if texts.is_empty() {
        return 0.0;
    }
    texts.iter().map(|t| cosine(t, image_feature)).sum::<f64>() / texts.len() as f64
}

impl EmbeddingObjective for ContrastiveObjective {
    fn evaluate(&self, out: &EncoderOutput) -> ObjectiveEval {
        let f = out.final_slice();
        let mut grad = vec![0.0; f.len()];
        let mut value = 0.0;
        for t in &self.positives {
            value += self.lambda * cosine_grad_wrt_second(t, f, self.lambda, &mut grad);
        }
        for t in &self.negatives {
            value += cosine_grad_wrt_second(t, f, 1.0, &mut grad);
        }
        ObjectiveEval {
            value,
            d_layer_tokens: None,
            d_final_feature: Some(Array1::from(grad)),
        }
    }
}

/// Sums `objective` over the scale transforms of `pixels`, with the gradient
/// carried back through each resampling.
pub fn multiscale_value_and_grad(
    pixels: &Array3<f64>,
    scales: &[f64],
    objective: &dyn EmbeddingObjective,
    backend: &dyn Backend,
) -> Result<(f64, Array3<f64>)> {
    let (h, w, _) = pixels.dim();
    let mut total = 0.0;
    let mut grad = Array3::zeros(pixels.raw_dim());
    for &s in scales {
        let (sh, sw) = scaled_dims(h, w, s)?;
        let scaled = resize_bilinear(pixels, sh, sw);
        let (v, g) = backend.pixel_gradient(&scaled, objective)?;
        total += v;
        grad += &resize_bilinear_adjoint(&g, h, w);
    }
    Ok((total, grad))
}

/// Value of the multi-scale contrastive objective at `adversarial`.
pub fn contrastive_loss(
    adversarial: &ImageSample,
    sets: &ContrastSets,
    scales: &[f64],
    lambda: f64,
    backend: &dyn Backend,
) -> Result<f64> {
    let objective = ContrastiveObjective::encode(sets, lambda, backend)?;
    let px = adversarial.to_f64();
    let (h, w, _) = px.dim();
    let mut total = 0.0;
    for &s in scales {
        let (sh, sw) = scaled_dims(h, w, s)?;
        total += objective.evaluate(&backend.encode_pixels(&resize_bilinear(&px, sh, sw))?).value;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct ImageAttackOutcome {
    pub image: ImageSample,
    pub linf_distance: f64,
    pub layer_weights: LayerWeights,
    pub init_loss_trace: Vec<f64>,
    pub contrastive_loss_trace: Vec<f64>,
}

/// Layer-importance initialization followed by contrastive refinement.
///
/// Ablations: `no_li` uses unit layer weights, `no_ig` skips the stage-one
/// PGD (the random start is kept), `no_io` skips stage two.
pub fn attack_image(
    image: &ImageSample,
    sets: &ContrastSets,
    config: &AttackConfig,
    backend: &dyn Backend,
    seed: u64,
) -> Result<ImageAttackOutcome> {
    let eps = config.budget.epsilon_v;
    let center = image.to_f64();
    let clean = backend.encode_image(image)?;
    let weights = if config.has(Ablation::NoLi) {
        LayerWeights::ones(clean.num_layers())
    } else {
        layer_importance_from(&clean)
    };
    let layer_objective = LayerLossObjective::new(&clean, weights.clone());
    let contrastive = if config.has(Ablation::NoIo) {
        None
    } else {
        Some(ContrastiveObjective::encode(sets, config.lambda, backend)?)
    };

    let mut x = random_init(image, eps, seed)?.to_f64();
    let mut init_trace = Vec::new();
    let mut contrastive_trace = Vec::new();
    for round in 0..config.image_rounds {
        if round > 0 {
            let restart = random_init(&ImageSample::from_f64(image.id(), &x)?, eps, derive_seed(seed, &format!("round{round}")))?;
            x = restart.to_f64();
            project(&mut x, &center, eps);
        }
        if !config.has(Ablation::NoIg) {
            let problem = PgdProblem {
                init: x,
                center: center.clone(),
                epsilon: eps,
                alpha: config.alpha,
                steps: config.steps_init,
                direction: Direction::Descend,
            };
            let out = pgd_optimize(&problem, |p| backend.pixel_gradient(p, &layer_objective))?;
            x = out.image;
            init_trace.extend(out.loss_trace);
        }
        if let Some(obj) = &contrastive {
            let problem = PgdProblem {
                init: x,
                center: center.clone(),
                epsilon: eps,
                alpha: config.alpha,
                steps: config.steps_contrastive,
                direction: Direction::Ascend,
            };
            let out = pgd_optimize(&problem, |p| multiscale_value_and_grad(p, &config.scales, obj, backend))?;
            x = out.image;
            contrastive_trace.extend(out.loss_trace);
        }
    }
    let adversarial = ImageSample::from_f64(image.id(), &x)?;
    let linf = linf_distance(&adversarial, image)?;
    Ok(ImageAttackOutcome {
        image: adversarial,
        linf_distance: linf,
        layer_weights: weights,
        init_loss_trace: init_trace,
        contrastive_loss_trace: contrastive_trace,
    })
}
