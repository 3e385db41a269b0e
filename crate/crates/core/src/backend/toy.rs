//! Deterministic toy dual encoder with exact analytic gradients.
//!
//! Images are cut into `patch × patch` patches, linearly embedded, prefixed
//! with a `[CLS]` token and passed through pre-norm transformer blocks
//! (single-head attention, tanh MLP). The text tower shares the blocks and the
//! patch embedding: each word is embedded as the patch embedding of its
//! *prototype patch*, a pseudo-random patch derived from the hashed word.
//! A caption therefore lands near an image whose patches show the caption's
//! word prototypes, which is what the synthetic fixture renders.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, EmbeddingObjective, EncoderOutput, ObjectiveEval, ThreadSafety};
use crate::blob;
use crate::error::{Error, Result};
use crate::numeric::{fnv1a, splitmix64};
use crate::resample::{resize_bilinear, resize_bilinear_adjoint};
use crate::types::TextSample;

const LN_EPS: f64 = 1e-5;
/// Patch and prototype values are shifted by this before embedding.
pub const INPUT_CENTER: f64 = 0.5;
const WEIGHTS_FORMAT: &str = "vlattack-toy-weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Layer-normed `[CLS]` of the top layer, projected.
    Cls,
    /// Mean of all top-layer tokens, projected (no normalization).
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub layers: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub max_text_len: usize,
    pub hash_buckets: u64,
    pub seed: u64,
    /// Zero the residual branches so every block is the identity map.
    pub identity_layers: bool,
    pub pooling: Pooling,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            channels: 3,
            patch: 2,
            layers: 3,
            dim: 32,
            mlp_hidden: 64,
            embed_dim: 32,
            max_text_len: 32,
            hash_buckets: 1 << 16,
            seed: 0,
            identity_layers: false,
            pooling: Pooling::Cls,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn image_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("layers", self.layers),
            ("dim", self.dim),
            ("mlp_hidden", self.mlp_hidden),
            ("embed_dim", self.embed_dim),
            ("max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                problems.push(format!("toy.{name} must be >= 1"));
            }
        }
        if self.patch > 0 && (!self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch)) {
            problems.push(format!(
                "toy image {}x{} is not divisible into {}x{} patches",
                self.image_height, self.image_width, self.patch, self.patch
            ));
        }
        if self.hash_buckets == 0 {
            problems.push("toy.hash_buckets must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// Weights of one pre-norm block; matrices act on row vectors (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2: LayerNormParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub config: ToyConfig,
    pub patch_embed: Array2<f64>,
    pub patch_bias: Array1<f64>,
    pub cls_image: Array1<f64>,
    pub cls_text: Array1<f64>,
    pub pos_image: Array2<f64>,
    pub pos_text: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub ln_final: LayerNormParams,
    pub proj: Array2<f64>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    // Values are rounded through f32 so the weights blob round-trips exactly.
    fn normal(&mut self, shape: (usize, usize), std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn(shape, || f64::from(dist.sample(&mut self.rng) as f32))
    }

    fn normal1(&mut self, len: usize, mean: f64, std: f64) -> Array1<f64> {
        let dist = Normal::new(mean, std).expect("finite std");
        Array1::from_shape_simple_fn(len, || f64::from(dist.sample(&mut self.rng) as f32))
    }

    fn layer_norm(&mut self, dim: usize) -> LayerNormParams {
        LayerNormParams {
            gain: self.normal1(dim, 1.0, 0.1),
            bias: self.normal1(dim, 0.0, 0.05),
        }
    }
}

impl ToyWeights {
    /// Draws every weight from a generator seeded with `config.seed`.
    pub fn generate(config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.mlp_hidden;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let patch_embed = init.normal((config.patch_len(), d), 2.0 * inv(config.patch_len()));
        let patch_bias = init.normal1(d, 0.0, 0.02);
        let cls_image = init.normal1(d, 0.0, 0.1);
        let cls_text = cls_image.clone();
        let pos_image = init.normal((config.image_tokens(), d), 0.02);
        let pos_text = init.normal((config.max_text_len + 1, d), 0.02);
        let blocks = (0..config.layers)
            .map(|_| {
                let mut b = BlockWeights {
                    ln1: init.layer_norm(d),
                    wq: init.normal((d, d), inv(d)),
                    wk: init.normal((d, d), inv(d)),
                    wv: init.normal((d, d), inv(d)),
                    wo: init.normal((d, d), inv(d)),
                    ln2: init.layer_norm(d),
                    w1: init.normal((d, h), inv(d)),
                    b1: init.normal1(h, 0.0, 0.1),
                    w2: init.normal((h, d), 0.5 * inv(h)),
                    b2: init.normal1(d, 0.0, 0.02),
                };
                if config.identity_layers {
                    b.wo.fill(0.0);
                    b.w2.fill(0.0);
                    b.b2.fill(0.0);
                }
                b
            })
            .collect();
        let ln_final = init.layer_norm(d);
        let proj = init.normal((d, config.embed_dim), inv(d));
        Ok(Self {
            config: config.clone(),
            patch_embed,
            patch_bias,
            cls_image,
            cls_text,
            pos_image,
            pos_text,
            blocks,
            ln_final,
            proj,
        })
    }

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("patch_embed".to_string(), self.patch_embed.view().into_dyn()),
            ("patch_bias".to_string(), self.patch_bias.view().into_dyn()),
            ("cls_image".to_string(), self.cls_image.view().into_dyn()),
            ("cls_text".to_string(), self.cls_text.view().into_dyn()),
            ("pos_image".to_string(), self.pos_image.view().into_dyn()),
            ("pos_text".to_string(), self.pos_text.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1.gain"), b.ln1.gain.view().into_dyn()),
                (p("ln1.bias"), b.ln1.bias.view().into_dyn()),
                (p("wq"), b.wq.view().into_dyn()),
                (p("wk"), b.wk.view().into_dyn()),
                (p("wv"), b.wv.view().into_dyn()),
                (p("wo"), b.wo.view().into_dyn()),
                (p("ln2.gain"), b.ln2.gain.view().into_dyn()),
                (p("ln2.bias"), b.ln2.bias.view().into_dyn()),
                (p("w1"), b.w1.view().into_dyn()),
                (p("b1"), b.b1.view().into_dyn()),
                (p("w2"), b.w2.view().into_dyn()),
                (p("b2"), b.b2.view().into_dyn()),
            ]);
        }
        out.extend([
            ("ln_final.gain".to_string(), self.ln_final.gain.view().into_dyn()),
            ("ln_final.bias".to_string(), self.ln_final.bias.view().into_dyn()),
            ("proj".to_string(), self.proj.view().into_dyn()),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("patch_embed".to_string(), self.patch_embed.view_mut().into_dyn()),
            ("patch_bias".to_string(), self.patch_bias.view_mut().into_dyn()),
            ("cls_image".to_string(), self.cls_image.view_mut().into_dyn()),
            ("cls_text".to_string(), self.cls_text.view_mut().into_dyn()),
            ("pos_image".to_string(), self.pos_image.view_mut().into_dyn()),
            ("pos_text".to_string(), self.pos_text.view_mut().into_dyn()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1.gain"), b.ln1.gain.view_mut().into_dyn()),
                (p("ln1.bias"), b.ln1.bias.view_mut().into_dyn()),
                (p("wq"), b.wq.view_mut().into_dyn()),
                (p("wk"), b.wk.view_mut().into_dyn()),
                (p("wv"), b.wv.view_mut().into_dyn()),
                (p("wo"), b.wo.view_mut().into_dyn()),
                (p("ln2.gain"), b.ln2.gain.view_mut().into_dyn()),
                (p("ln2.bias"), b.ln2.bias.view_mut().into_dyn()),
                (p("w1"), b.w1.view_mut().into_dyn()),
                (p("b1"), b.b1.view_mut().into_dyn()),
                (p("w2"), b.w2.view_mut().into_dyn()),
                (p("b2"), b.b2.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("ln_final.gain".to_string(), self.ln_final.gain.view_mut().into_dyn()),
            ("ln_final.bias".to_string(), self.ln_final.bias.view_mut().into_dyn()),
            ("proj".to_string(), self.proj.view_mut().into_dyn()),
        ]);
        out
    }

    /// Writes the weights as little-endian f32 values behind a JSON header
    /// (format, version, seed, config and the name/shape/offset of each tensor).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            data.extend(t.iter().map(|v| *v as f32));
        }
        let header = WeightsHeader {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            tensors: entries,
        };
        blob::write(path, &header, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data): (WeightsHeader, Vec<f32>) = blob::read(path)?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message,
        };
        if header.format != WEIGHTS_FORMAT || header.version != WEIGHTS_VERSION {
            return Err(bad(format!(
                "unsupported weights format {} v{}",
                header.format, header.version
            )));
        }
        let mut weights = ToyWeights::generate(&header.config)?;
        for (name, mut t) in weights.tensors_mut() {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if entry.shape != t.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            let src = data
                .get(entry.offset..entry.offset + t.len())
                .ok_or_else(|| bad(format!("tensor {name} runs past the end of the data")))?;
            for (dst, v) in t.iter_mut().zip(src) {
                *dst = f64::from(*v);
            }
        }
        Ok(weights)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    format: String,
    version: u32,
    seed: u64,
    config: ToyConfig,
    tensors: Vec<TensorEntry>,
}

/// Pseudo-random patch in `[0, 1]^patch_len` associated with a word. Words are
/// lowercased and hashed into `buckets`; it does not depend on the weights'
/// seed, so every toy backend agrees on how a word looks.
pub fn word_prototype(word: &str, patch_len: usize, buckets: u64) -> Vec<f64> {
    let bucket = fnv1a(word.to_lowercase().as_bytes()) % buckets;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(bucket ^ 0x7072_6f74_6f74_7970));
    (0..patch_len).map(|_| rng.random::<f64>()).collect()
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &Array2<f64>, cache: &LnCache, p: &LayerNormParams) -> Array2<f64> {
    let n = dy.ncols() as f64;
    let dxhat = dy * &p.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / n;
        let mean_gx = g.dot(&xh) / n;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .assign(&((&g - mean_g - &xh * mean_gx) * r));
    }
    dx
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

struct BlockCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    ln2: LnCache,
    z: Array2<f64>,
}

fn block_forward(x: &Array2<f64>, w: &BlockWeights) -> (Array2<f64>, BlockCache) {
    let scale = 1.0 / (x.ncols() as f64).sqrt();
    let (a, ln1) = ln_forward(x, &w.ln1);
    let q = a.dot(&w.wq);
    let k = a.dot(&w.wk);
    let v = a.dot(&w.wv);
    let mut p = q.dot(&k.t()) * scale;
    softmax_rows(&mut p);
    let o = p.dot(&v);
    let h = x + &o.dot(&w.wo);
    let (b, ln2) = ln_forward(&h, &w.ln2);
    let z = (b.dot(&w.w1) + &w.b1).mapv(f64::tanh);
    let y = &h + &(z.dot(&w.w2) + &w.b2);
    (
        y,
        BlockCache {
            ln1,
            q,
            k,
            v,
            p,
            ln2,
            z,
        },
    )
}

fn block_backward(dy: &Array2<f64>, c: &BlockCache, w: &BlockWeights) -> Array2<f64> {
    let scale = 1.0 / (dy.ncols() as f64).sqrt();
    let dz = dy.dot(&w.w2.t());
    let du = dz * &c.z.mapv(|z| 1.0 - z * z);
    let db = du.dot(&w.w1.t());
    let dh = dy + &ln_backward(&db, &c.ln2, &w.ln2);
    let d_o = dh.dot(&w.wo.t());
    let dp = d_o.dot(&c.v.t());
    let dv = c.p.t().dot(&d_o);
    let row_dot = (&dp * &c.p).sum_axis(Axis(1)).insert_axis(Axis(1));
    let ds = &c.p * &(dp - &row_dot) * scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    let da = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    dh + ln_backward(&da, &c.ln1, &w.ln1)
}

struct TowerCache {
    blocks: Vec<Option<BlockCache>>,
    top: Array2<f64>,
    final_ln: Option<LnCache>,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    weights: ToyWeights,
    descriptor: BackendDescriptor,
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        Ok(Self::from_weights(ToyWeights::generate(&config)?))
    }

    /// Toy backend with default architecture and the given seed.
    pub fn seeded(seed: u64) -> Self {
        Self::new(ToyConfig::with_seed(seed)).expect("default toy config is valid")
    }

    pub fn from_weights(weights: ToyWeights) -> Self {
        let c = &weights.config;
        let kind = if c.identity_layers { "toy-identity" } else { "toy" };
        let descriptor = BackendDescriptor {
            name: format!("{kind}-{}", c.seed),
            num_layers: c.layers,
            tokens_per_layer: c.image_tokens(),
            embed_dim: c.embed_dim,
            input_shape: (c.image_height, c.image_width, c.channels),
            supports_layer_skip: true,
            supports_gradients: true,
            thread_safety: ThreadSafety::ConcurrentReadSafe,
        };
        Self { weights, descriptor }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_weights(ToyWeights::load(path)?))
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn config(&self) -> &ToyConfig {
        &self.weights.config
    }

    fn native(&self, pixels: &Array3<f64>) -> Result<Array3<f64>> {
        let c = self.config();
        let (h, w, ch) = pixels.dim();
        if ch != c.channels {
            return Err(Error::Shape(format!(
                "image has {ch} channels, backend expects {}",
                c.channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty image {h}x{w}")));
        }
        Ok(resize_bilinear(pixels, c.image_height, c.image_width))
    }

    /// `num_patches × patch_len`; patches row-major, values ordered (dy, dx, c).
    fn patchify(&self, native: &Array3<f64>) -> Array2<f64> {
        let c = self.config();
        let p = c.patch;
        let cols = c.image_width / p;
        Array2::from_shape_fn((c.num_patches(), c.patch_len()), |(pi, q)| {
            let (py, px) = (pi / cols, pi % cols);
            let (dy, rest) = (q / (p * c.channels), q % (p * c.channels));
            let (dx, ch) = (rest / c.channels, rest % c.channels);
            native[[py * p + dy, px * p + dx, ch]]
        })
    }

    fn unpatchify(&self, d_patches: &Array2<f64>) -> Array3<f64> {
        let c = self.config();
        let p = c.patch;
        let cols = c.image_width / p;
        let mut out = Array3::zeros((c.image_height, c.image_width, c.channels));
        for ((pi, q), g) in d_patches.indexed_iter() {
            let (py, px) = (pi / cols, pi % cols);
            let (dy, rest) = (q / (p * c.channels), q % (p * c.channels));
            let (dx, ch) = (rest / c.channels, rest % c.channels);
            out[[py * p + dy, px * p + dx, ch]] += g;
        }
        out
    }

    fn embed_image(&self, native: &Array3<f64>) -> Array2<f64> {
        let w = &self.weights;
        let patches = (self.patchify(native) - INPUT_CENTER).dot(&w.patch_embed) + &w.patch_bias;
        let cls = w.cls_image.view().insert_axis(Axis(0));
        concatenate(Axis(0), &[cls, patches.view()]).expect("matching widths") + &w.pos_image
    }

    fn embed_text(&self, text: &TextSample) -> Array2<f64> {
        let w = &self.weights;
        let c = self.config();
        let words: Vec<&String> = text.tokens().iter().take(c.max_text_len).collect();
        let mut protos = Array2::zeros((words.len(), c.patch_len()));
        for (mut row, word) in protos.rows_mut().into_iter().zip(&words) {
            row.assign(&Array1::from(word_prototype(word, c.patch_len(), c.hash_buckets)));
        }
        let tokens = (protos - INPUT_CENTER).dot(&w.patch_embed) + &w.patch_bias;
        let cls = w.cls_text.view().insert_axis(Axis(0));
        concatenate(Axis(0), &[cls, tokens.view()]).expect("matching widths")
            + w.pos_text.slice(s![..words.len() + 1, ..])
    }

    fn run_tower(&self, x0: Array2<f64>, skip: Option<usize>) -> (EncoderOutput, TowerCache) {
        let w = &self.weights;
        let (tokens, dim) = x0.dim();
        let mut layer_tokens = Array3::zeros((w.blocks.len(), tokens, dim));
        let mut caches = Vec::with_capacity(w.blocks.len());
        let mut x = x0;
        for (l, block) in w.blocks.iter().enumerate() {
            if skip == Some(l + 1) {
                caches.push(None);
            } else {
                let (y, cache) = block_forward(&x, block);
                x = y;
                caches.push(Some(cache));
            }
            layer_tokens.slice_mut(s![l, .., ..]).assign(&x);
        }
        let (final_feature, final_ln) = match w.config.pooling {
            Pooling::Cls => {
                let cls = x.slice(s![0..1, ..]).to_owned();
                let (normed, cache) = ln_forward(&cls, &w.ln_final);
                (normed.row(0).dot(&w.proj), Some(cache))
            }
            Pooling::Mean => (x.mean_axis(Axis(0)).expect("nonempty").dot(&w.proj), None),
        };
        (
            EncoderOutput {
                layer_tokens,
                final_feature,
            },
            TowerCache {
                blocks: caches,
                top: x,
                final_ln,
            },
        )
    }

    fn tower_backward(&self, cache: &TowerCache, eval: &ObjectiveEval) -> Array2<f64> {
        let w = &self.weights;
        let mut g = Array2::zeros(cache.top.raw_dim());
        if let Some(df) = &eval.d_final_feature {
            let d_pooled = w.proj.dot(df);
            match &cache.final_ln {
                Some(ln) => {
                    let d_cls = ln_backward(&d_pooled.insert_axis(Axis(0)), ln, &w.ln_final);
                    g.row_mut(0).assign(&d_cls.row(0));
                }
                None => {
                    let n = g.nrows() as f64;
                    for mut row in g.rows_mut() {
                        row.assign(&(&d_pooled / n));
                    }
                }
            }
        }
        for (l, block) in w.blocks.iter().enumerate().rev() {
            if let Some(dt) = &eval.d_layer_tokens {
                g += &dt.slice(s![l, .., ..]);
            }
            if let Some(c) = &cache.blocks[l] {
                g = block_backward(&g, c, block);
            }
        }
        g
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config().layers {
            return Err(Error::InvalidInput(format!(
                "layer {layer} outside 1..={}",
                self.config().layers
            )));
        }
        Ok(())
    }
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode_pixels(&self, pixels: &Array3<f64>) -> Result<EncoderOutput> {
        let native = self.native(pixels)?;
        Ok(self.run_tower(self.embed_image(&native), None).0)
    }

    fn encode_text(&self, text: &TextSample) -> Result<EncoderOutput> {
        Ok(self.run_tower(self.embed_text(text), None).0)
    }

    fn pixel_gradient(
        &self,
        pixels: &Array3<f64>,
        objective: &dyn EmbeddingObjective,
    ) -> Result<(f64, Array3<f64>)> {
        let native = self.native(pixels)?;
        let (output, cache) = self.run_tower(self.embed_image(&native), None);
        let eval = objective.evaluate(&output);
        let d_x0 = self.tower_backward(&cache, &eval);
        let d_patches = d_x0.slice(s![1.., ..]).dot(&self.weights.patch_embed.t());
        let d_native = self.unpatchify(&d_patches);
        let (h, w, _) = pixels.dim();
        Ok((eval.value, resize_bilinear_adjoint(&d_native, h, w)))
    }

    fn encode_pixels_skipping_layer(&self, pixels: &Array3<f64>, layer: usize) -> Result<EncoderOutput> {
        self.check_layer(layer)?;
        let native = self.native(pixels)?;
        Ok(self.run_tower(self.embed_image(&native), Some(layer)).0)
    }
}
