//! Synthetic dataset for the toy backend.
//!
//! Each image tiles the word prototypes of its caption's content words, so a
//! toy encoder sees nearly the same patch vectors in both modalities. Word
//! vectors come in synonym clusters, which gives the text attack real
//! candidates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::{word_prototype, ToyConfig};
use crate::dataset::{save_png, ManifestEntry};
use crate::error::{Error, Result};
use crate::numeric::derive_seed;
use crate::types::ImageSample;

const COLORS: [[&str; 3]; 6] = [
    ["red", "crimson", "scarlet"],
    ["blue", "azure", "navy"],
    ["green", "emerald", "olive"],
    ["yellow", "golden", "amber"],
    ["white", "ivory", "snowy"],
    ["black", "dark", "ebony"],
];
const OBJECTS: [[&str; 3]; 6] = [
    ["dog", "puppy", "hound"],
    ["cat", "kitten", "feline"],
    ["car", "automobile", "vehicle"],
    ["bird", "sparrow", "finch"],
    ["boat", "ship", "vessel"],
    ["horse", "pony", "stallion"],
];
const ACTIONS: [[&str; 3]; 4] = [
    ["runs", "sprints", "dashes"],
    ["sits", "rests", "lounges"],
    ["jumps", "leaps", "hops"],
    ["waits", "lingers", "pauses"],
];
const PLACES: [[&str; 3]; 4] = [
    ["park", "garden", "meadow"],
    ["street", "road", "avenue"],
    ["beach", "shore", "coast"],
    ["field", "pasture", "prairie"],
];

/// Dimension of the generated word vectors.
pub const VECTOR_DIM: usize = 24;
const PIXEL_NOISE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub size: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { size: 32, seed: 7 }
    }
}

fn clusters() -> Vec<[&'static str; 3]> {
    COLORS.iter().chain(&OBJECTS).chain(&ACTIONS).chain(&PLACES).copied().collect()
}

/// Every word with a vector, in file order.
pub fn vocabulary() -> Vec<&'static str> {
    clusters().into_iter().flatten().collect()
}

fn max_size() -> usize {
    COLORS.len() * OBJECTS.len() * ACTIONS.len() * PLACES.len()
}

/// Content words `(color, object, action, place)` of each image.
fn scenes(spec: &FixtureSpec) -> Vec<[&'static str; 4]> {
    let mut all = Vec::with_capacity(max_size());
    for c in &COLORS {
        for o in &OBJECTS {
            for a in &ACTIONS {
                for p in &PLACES {
                    all.push([c[0], o[0], a[0], p[0]]);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "scenes"));
    all.shuffle(&mut rng);
    all.truncate(spec.size);
    all
}

fn captions(scene: &[&str; 4]) -> Vec<String> {
    let [c, o, a, p] = scene;
    vec![
        format!("a {c} {o} {a} in the {p} ."),
        format!("in the {p} a {c} {o} {a} ."),
    ]
}

fn render(id: &str, words: &[&str], config: &ToyConfig, seed: u64) -> Result<ImageSample> {
    let (h, w, ch) = (config.image_height, config.image_width, config.channels);
    let p = config.patch;
    let protos: Vec<Vec<f64>> = words
        .iter()
        .map(|word| word_prototype(word, config.patch_len(), config.hash_buckets))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = w / p;
    let mut px = Array3::<f64>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let patch = (y / p) * cols + x / p;
            let proto = &protos[patch % protos.len()];
            for c in 0..ch {
                let k = ((y % p) * p + x % p) * ch + c;
                let noise: f64 = rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE);
                px[[y, x, c]] = ((proto[k] + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    ImageSample::from_f64(id, &px)
}

fn vectors_text(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vectors"));
    let mut out = String::new();
    // one axis per cluster keeps unrelated words near-orthogonal
    for (axis, cluster) in clusters().into_iter().enumerate() {
        for word in cluster {
            let _ = write!(out, "{word}");
            for d in 0..VECTOR_DIM {
                let center = if d == axis { 3.0 } else { 0.0 };
                let v = center + 0.3 * rng.sample::<f64, _>(StandardNormal);
                let _ = write!(out, " {v:.6}");
            }
            out.push('\n');
        }
    }
    out
}

fn fallback_table() -> BTreeMap<String, Vec<String>> {
    let mut table = BTreeMap::new();
    for cluster in clusters() {
        for word in cluster {
            let others = cluster.iter().filter(|w| **w != word).map(|w| w.to_string()).collect();
            table.insert(word.to_string(), others);
        }
    }
    table
}

const CONFIG_TOML: &str = "\
# Toy fixture run. Keys not listed keep their defaults.
dataset = \"manifest.jsonl\"
vectors = \"vectors.txt\"
fallback = \"fallback.json\"
out = \"runs/default\"

[surrogate]
kind = \"toy\"
seed = 0
";

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.jsonl`, `images/*.png`, `vectors.txt`, `fallback.json` and
/// `config.toml` under `dir`. Output is a function of `spec` alone.
pub fn make_fixture(dir: &Path, spec: &FixtureSpec) -> Result<()> {
    if spec.size == 0 || spec.size > max_size() {
        return Err(Error::InvalidInput(format!(
            "fixture size must be in 1..={}, got {}",
            max_size(),
            spec.size
        )));
    }
    let toy = ToyConfig::default();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for (i, scene) in scenes(spec).iter().enumerate() {
        let id = format!("img{i:03}");
        let file = format!("images/{id}.png");
        let captions = captions(scene);
        let words: Vec<&str> = captions[0].split_whitespace().collect();
        let image = render(&id, &words, &toy, derive_seed(spec.seed, &id))?;
        save_png(&image, &dir.join(&file))?;
        let entry = ManifestEntry {
            id,
            image: file.into(),
            captions,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    write(&dir.join("manifest.jsonl"), manifest.as_bytes())?;
    write(&dir.join("vectors.txt"), vectors_text(spec.seed).as_bytes())?;
    write(
        &dir.join("fallback.json"),
        serde_json::to_string_pretty(&fallback_table())?.as_bytes(),
    )?;
    write(&dir.join("config.toml"), CONFIG_TOML.as_bytes())
}
