//! Surrogate/victim encoder abstraction.
//!
//! A backend maps images and texts into a shared embedding space and exposes
//! the per-layer token embeddings of its image tower. Gradient-capable
//! backends also backpropagate any [`EmbeddingObjective`] to the pixels.

mod toy;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::cosine;
use crate::types::{ImageSample, TextSample};

pub use toy::{word_prototype, BlockWeights, LayerNormParams, Pooling, ToyBackend, ToyConfig, ToyWeights};

/// Token embeddings of every layer plus the pooled feature used for retrieval.
///
/// `layer_tokens` is `L × D × dim`; token 0 of every layer is `[CLS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub layer_tokens: Array3<f64>,
    pub final_feature: Array1<f64>,
}

impl EncoderOutput {
    pub fn num_layers(&self) -> usize {
        self.layer_tokens.dim().0
    }

    pub fn tokens_per_layer(&self) -> usize {
        self.layer_tokens.dim().1
    }

    /// `[CLS]` embedding of `layer` (0-based).
    pub fn cls(&self, layer: usize) -> Vec<f64> {
        self.layer_tokens
            .slice(ndarray::s![layer, 0, ..])
            .to_vec()
    }

    pub fn final_slice(&self) -> &[f64] {
        self.final_feature
            .as_slice()
            .expect("final feature is contiguous")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThreadSafety {
    ConcurrentReadSafe,
    SessionExclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub num_layers: usize,
    pub tokens_per_layer: usize,
    pub embed_dim: usize,
    /// Native `(height, width, channels)`; other sizes are resampled.
    pub input_shape: (usize, usize, usize),
    pub supports_layer_skip: bool,
    pub supports_gradients: bool,
    pub thread_safety: ThreadSafety,
}

/// Result of evaluating an objective on an encoder output: its value and the
/// partial derivatives with respect to the embeddings (`None` means zero).
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub d_layer_tokens: Option<Array3<f64>>,
    pub d_final_feature: Option<Array1<f64>>,
}

/// A scalar function of an image [`EncoderOutput`] with known derivatives.
pub trait EmbeddingObjective {
    fn evaluate(&self, output: &EncoderOutput) -> ObjectiveEval;
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Encodes an `H × W × C` pixel array, resampling to the native size.
    fn encode_pixels(&self, pixels: &Array3<f64>) -> Result<EncoderOutput>;

    fn encode_text(&self, text: &TextSample) -> Result<EncoderOutput>;

    /// Value of `objective` at `pixels` and its gradient with respect to them.
    fn pixel_gradient(
        &self,
        pixels: &Array3<f64>,
        objective: &dyn EmbeddingObjective,
    ) -> Result<(f64, Array3<f64>)> {
        let _ = (pixels, objective);
        Err(Error::capability(&self.descriptor().name, "gradients"))
    }

    /// Forward pass with block `layer` (1-based) replaced by the identity.
    fn encode_pixels_skipping_layer(&self, pixels: &Array3<f64>, layer: usize) -> Result<EncoderOutput> {
        let _ = (pixels, layer);
        Err(Error::capability(&self.descriptor().name, "layer skipping"))
    }

    fn encode_image(&self, image: &ImageSample) -> Result<EncoderOutput> {
        self.encode_pixels(&image.to_f64())
    }

    fn encode_image_skipping_layer(&self, image: &ImageSample, layer: usize) -> Result<EncoderOutput> {
        self.encode_pixels_skipping_layer(&image.to_f64(), layer)
    }
}

/// `∂objective/∂pixels` for an image sample.
pub fn image_gradient(
    backend: &dyn Backend,
    image: &ImageSample,
    objective: &dyn EmbeddingObjective,
) -> Result<Array3<f64>> {
    Ok(backend.pixel_gradient(&image.to_f64(), objective)?.1)
}

/// Fails early when a backend cannot be used as an attack surrogate.
pub fn require_gradients(backend: &dyn Backend) -> Result<()> {
    let d = backend.descriptor();
    if d.supports_gradients {
        Ok(())
    } else {
        Err(Error::capability(&d.name, "gradients"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnosticRow {
    /// 1-based layer index.
    pub layer: usize,
    /// cos([CLS] at this layer, [CLS] at the top layer)
    pub cls_similarity: f64,
    /// cos(final feature, final feature with this layer skipped)
    pub skip_similarity: f64,
}

/// Per-layer `[CLS]` trajectory and layer-skip sensitivity of one image.
pub fn layer_diagnostics(backend: &dyn Backend, image: &ImageSample) -> Result<Vec<LayerDiagnosticRow>> {
    if !backend.descriptor().supports_layer_skip {
        return Err(Error::capability(&backend.descriptor().name, "layer skipping"));
    }
    let pixels = image.to_f64();
    let full = backend.encode_pixels(&pixels)?;
    let top = full.num_layers();
    let top_cls = full.cls(top - 1);
    (1..=top)
        .map(|layer| {
            let skipped = backend.encode_pixels_skipping_layer(&pixels, layer)?;
            Ok(LayerDiagnosticRow {
                layer,
                cls_similarity: cosine(&full.cls(layer - 1), &top_cls),
                skip_similarity: cosine(full.final_slice(), skipped.final_slice()),
            })
        })
        .collect()
}
