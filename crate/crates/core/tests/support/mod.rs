//! Test-only oracles, written with plain loops and independent of the
//! library's ndarray code paths.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use vlattack::backend::{word_prototype, BlockWeights, LayerNormParams, ToyWeights};

pub type Tokens = Vec<Vec<f64>>;

fn mat(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matvec_row(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i][j]).sum())
        .collect()
}

fn layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * r * p.gain[i] + p.bias[i])
        .collect()
}

pub fn block(x: &Tokens, w: &BlockWeights) -> Tokens {
    let t = x.len();
    let d = x[0].len();
    let (wq, wk, wv, wo, w1, w2) = (mat(&w.wq), mat(&w.wk), mat(&w.wv), mat(&w.wo), mat(&w.w1), mat(&w.w2));
    let a: Tokens = x.iter().map(|r| layer_norm(r, &w.ln1)).collect();
    let q: Tokens = a.iter().map(|r| matvec_row(r, &wq)).collect();
    let k: Tokens = a.iter().map(|r| matvec_row(r, &wk)).collect();
    let v: Tokens = a.iter().map(|r| matvec_row(r, &wv)).collect();
    let mut h = x.clone();
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut o = vec![0.0; d];
        for j in 0..t {
            for c in 0..d {
                o[c] += e[j] / z * v[j][c];
            }
        }
        let proj = matvec_row(&o, &wo);
        for c in 0..d {
            h[i][c] += proj[c];
        }
    }
    h.iter()
        .map(|row| {
            let b = layer_norm(row, &w.ln2);
            let u: Vec<f64> = matvec_row(&b, &w1)
                .iter()
                .enumerate()
                .map(|(i, v)| (v + w.b1[i]).tanh())
                .collect();
            let m = matvec_row(&u, &w2);
            (0..d).map(|c| row[c] + m[c] + w.b2[c]).collect()
        })
        .collect()
}

fn run(weights: &ToyWeights, x0: Tokens, skip: Option<usize>) -> (Vec<Tokens>, Vec<f64>) {
    let mut layers = Vec::new();
    let mut x = x0;
    for (l, w) in weights.blocks.iter().enumerate() {
        if skip != Some(l + 1) {
            x = block(&x, w);
        }
        layers.push(x.clone());
    }
    let pooled = layer_norm(&x[0], &weights.ln_final);
    let fin = matvec_row(&pooled, &mat(&weights.proj));
    (layers, fin)
}

/// Image forward at native resolution.
pub fn image_forward(weights: &ToyWeights, img: &Array3<f64>, skip: Option<usize>) -> (Vec<Tokens>, Vec<f64>) {
    let c = &weights.config;
    let p = c.patch;
    let pe = mat(&weights.patch_embed);
    let mut x0 = vec![(0..c.dim).map(|i| weights.cls_image[i] + weights.pos_image[[0, i]]).collect::<Vec<_>>()];
    let mut idx = 1;
    for py in 0..c.image_height / p {
        for px in 0..c.image_width / p {
            let mut patch = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c.channels {
                        patch.push(img[[py * p + dy, px * p + dx, ch]] - 0.5);
                    }
                }
            }
            let e = matvec_row(&patch, &pe);
            x0.push((0..c.dim).map(|i| e[i] + weights.patch_bias[i] + weights.pos_image[[idx, i]]).collect());
            idx += 1;
        }
    }
    run(weights, x0, skip)
}

pub fn text_forward(weights: &ToyWeights, words: &[&str]) -> (Vec<Tokens>, Vec<f64>) {
    let c = &weights.config;
    let pe = mat(&weights.patch_embed);
    let mut x0 = vec![(0..c.dim).map(|i| weights.cls_text[i] + weights.pos_text[[0, i]]).collect::<Vec<_>>()];
    for (j, w) in words.iter().enumerate() {
        let proto: Vec<f64> = word_prototype(w, c.patch_len(), c.hash_buckets).iter().map(|v| v - 0.5).collect();
        let e = matvec_row(&proto, &pe);
        x0.push((0..c.dim).map(|i| e[i] + weights.patch_bias[i] + weights.pos_text[[j + 1, i]]).collect());
    }
    run(weights, x0, None)
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Central finite difference of `f` at `x` along one coordinate.
pub fn central_difference(f: &dyn Fn(&Array3<f64>) -> f64, x: &Array3<f64>, at: (usize, usize, usize), h: f64) -> f64 {
    let mut plus = x.clone();
    let mut minus = x.clone();
    plus[at] += h;
    minus[at] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Independent bilinear resampler (half-pixel centers, edge clamp), computed
/// point by point.
pub fn bilinear_reference(img: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let sample = |y: f64, x: f64, ch: usize| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        img[[y0, x0, ch]] * (1.0 - fy) * (1.0 - fx)
            + img[[y0, x1, ch]] * (1.0 - fy) * fx
            + img[[y1, x0, ch]] * fy * (1.0 - fx)
            + img[[y1, x1, ch]] * fy * fx
    };
    Array3::from_shape_fn((oh, ow, c), |(oy, ox, ch)| {
        let y = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let x = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        sample(y, x, ch)
    })
}

pub fn random_image(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || f64::from(rng.random::<f32>()))
}

/// Cosine as `dot / sqrt(|a|² |b|²)`, the form used for threshold checks.
pub fn cos_sq(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Every other (lowercased) entry whose cosine with `word` is above `tau`.
pub fn brute_substitutes(entries: &[(String, Vec<f64>)], word: &str, tau: f64) -> std::collections::BTreeSet<String> {
    let key = word.to_lowercase();
    let Some((_, query)) = entries.iter().find(|(w, _)| w.to_lowercase() == key) else {
        return Default::default();
    };
    entries
        .iter()
        .filter(|(w, _)| w.to_lowercase() != key)
        .filter(|(_, v)| cos_sq(v, query) > tau)
        .map(|(w, _)| w.to_lowercase())
        .collect()
}

/// Resamples to the backend's native size the way the encoder does.
pub fn to_native(weights: &ToyWeights, img: &Array3<f64>) -> Array3<f64> {
    let c = &weights.config;
    bilinear_reference(img, c.image_height, c.image_width)
}

pub fn cls_weights(layers: &[Tokens]) -> Vec<f64> {
    let top = &layers[layers.len() - 1][0];
    layers.iter().map(|l| cos(&l[0], top)).collect()
}

/// `Σ_l w_l / T · Σ_j cos(clean_lj, adv_lj)`, with `w` from the clean image.
pub fn layer_loss(weights: &ToyWeights, clean: &Array3<f64>, adv: &Array3<f64>, unit_weights: bool) -> f64 {
    let (cl, _) = image_forward(weights, &to_native(weights, clean), None);
    let (al, _) = image_forward(weights, &to_native(weights, adv), None);
    let w = if unit_weights { vec![1.0; cl.len()] } else { cls_weights(&cl) };
    let mut total = 0.0;
    for l in 0..cl.len() {
        let t = cl[l].len() as f64;
        for j in 0..cl[l].len() {
            total += w[l] / t * cos(&cl[l][j], &al[l][j]);
        }
    }
    total
}

/// `Σ_s [λ Σ_p cos(t_p, f_s) + Σ_n cos(t_n, f_s)]` with `f_s` the image
/// feature at scale `s`.
pub fn contrastive(
    weights: &ToyWeights,
    adv: &Array3<f64>,
    positives: &[Vec<String>],
    negatives: &[Vec<String>],
    scales: &[f64],
    lambda: f64,
) -> f64 {
    let feat = |words: &Vec<String>| {
        let w: Vec<&str> = words.iter().map(String::as_str).collect();
        text_forward(weights, &w).1
    };
    let pos: Vec<Vec<f64>> = positives.iter().map(feat).collect();
    let neg: Vec<Vec<f64>> = negatives.iter().map(feat).collect();
    let (h, w, _) = adv.dim();
    let mut total = 0.0;
    for &s in scales {
        let sh = (s * h as f64 - 1e-9).ceil() as usize;
        let sw = (s * w as f64 - 1e-9).ceil() as usize;
        let scaled = bilinear_reference(adv, sh, sw);
        let (_, f) = image_forward(weights, &to_native(weights, &scaled), None);
        for t in &pos {
            total += lambda * cos(t, &f);
        }
        for t in &neg {
            total += cos(t, &f);
        }
    }
    total
}

/// Sign-PGD on `f(x) = (x - target)²` in one dimension, minimized.
pub fn quadratic_pgd(x0: f64, center: f64, target: f64, eps: f64, alpha: f64, steps: usize) -> Vec<f64> {
    let mut xs = vec![x0];
    let mut x = x0;
    for _ in 0..steps {
        let g = 2.0 * (x - target);
        let dir = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
        x -= alpha * dir;
        x = x.max(center - eps).min(center + eps).max(0.0).min(1.0);
        xs.push(x);
    }
    xs
}

/// Rank of `gold` among `(id, feature)` items for `query`: one plus the
/// number of items strictly ahead in (cosine desc, id asc) order.
pub fn brute_rank(query: &[f64], items: &[(String, Vec<f64>)], gold: &str) -> usize {
    let g = items.iter().find(|(id, _)| id == gold).expect("gold in gallery");
    let gs = cos_sq(query, &g.1);
    1 + items
        .iter()
        .filter(|(id, f)| {
            let s = cos_sq(query, f);
            s > gs || (s == gs && id.as_str() < gold)
        })
        .count()
}

/// `count` distinct pixel coordinates of an `(h, w, c)` image.
pub fn random_coords(seed: u64, shape: (usize, usize, usize), count: usize) -> Vec<(usize, usize, usize)> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = shape;
    sample(&mut rng, h * w * c, count)
        .into_iter()
        .map(|i| (i / (w * c), (i / c) % w, i % c))
        .collect()
}

/// Clean image and a point inside its 8/255 ball.
pub fn clean_and_perturbed(seed: u64, shape: (usize, usize, usize)) -> (Array3<f64>, Array3<f64>) {
    let clean = random_image(seed, shape);
    let noise = random_image(seed ^ 0x5eed, shape);
    let adv = &clean + &noise.mapv(|n| (n - 0.5) * 16.0 / 255.0);
    (clean, adv)
}

/// Relative errors of the analytic layer-loss gradient against central
/// differences of the loop oracle.
pub fn layer_loss_gradient_errors(backend: &vlattack::backend::ToyBackend, seed: u64, coords: usize, h: f64) -> Vec<f64> {
    use vlattack::backend::Backend;
    use vlattack::image_attack::{layer_importance_from, LayerLossObjective};
    let weights = backend.weights();
    let shape = backend.descriptor().input_shape;
    let (clean, adv) = clean_and_perturbed(seed, shape);
    let clean_out = backend.encode_pixels(&clean).unwrap();
    let objective = LayerLossObjective::new(&clean_out, layer_importance_from(&clean_out));
    let (_, grad) = backend.pixel_gradient(&adv, &objective).unwrap();
    let f = |x: &Array3<f64>| layer_loss(weights, &clean, x, false);
    random_coords(seed + 1, shape, coords)
        .into_iter()
        .map(|at| relative_error(grad[at], central_difference(&f, &adv, at, h)))
        .collect()
}

pub fn sentence(i: usize) -> Vec<String> {
    const WORDS: [&str; 12] = ["a", "red", "dog", "runs", "in", "the", "park", "blue", "cat", "sits", "on", "grass"];
    (0..5).map(|j| WORDS[(i * 7 + j * 5) % WORDS.len()].to_string()).collect()
}

/// Relative errors of the analytic multi-scale contrastive gradient against
/// central differences of the loop oracle.
pub fn contrastive_gradient_errors(
    backend: &vlattack::backend::ToyBackend,
    seed: u64,
    coords: usize,
    h: f64,
    scales: &[f64],
    lambda: f64,
) -> Vec<f64> {
    use vlattack::image_attack::{multiscale_value_and_grad, ContrastiveObjective};
    let weights = backend.weights();
    let shape = backend.config().image_height;
    let shape = (shape, backend.config().image_width, backend.config().channels);
    let (_, adv) = clean_and_perturbed(seed, shape);
    let pos: Vec<Vec<String>> = (0..2).map(sentence).collect();
    let neg: Vec<Vec<String>> = (2..5).map(sentence).collect();
    let feats = |xs: &[Vec<String>]| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|s| text_forward(weights, &s.iter().map(String::as_str).collect::<Vec<_>>()).1)
            .collect()
    };
    let objective = ContrastiveObjective {
        positives: feats(&pos),
        negatives: feats(&neg),
        lambda,
    };
    let (_, grad) = multiscale_value_and_grad(&adv, scales, &objective, backend).unwrap();
    let f = |x: &Array3<f64>| contrastive(weights, x, &pos, &neg, scales, lambda);
    random_coords(seed + 1, shape, coords)
        .into_iter()
        .map(|at| relative_error(grad[at], central_difference(&f, &adv, at, h)))
        .collect()
}

/// Per-query brute-force metrics for one task: `(rank_pre, rank_post)` rows
/// in, [`vlattack::retrieval::TaskMetrics`] out.
pub fn brute_task(ranks: &[(usize, usize)], top_k: &[usize], restrict: bool) -> vlattack::retrieval::TaskMetrics {
    let n = ranks.len();
    let mut m = vlattack::retrieval::TaskMetrics {
        queries: n,
        recall_pre: Default::default(),
        recall_post: Default::default(),
        evaluated: Default::default(),
        asr: Default::default(),
    };
    for &k in top_k {
        let (mut pre, mut post, mut counted, mut success) = (0, 0, 0, 0);
        for &(rp, rq) in ranks {
            if rp <= k {
                pre += 1;
            }
            if rq <= k {
                post += 1;
            }
            if !restrict || rp <= k {
                counted += 1;
                if rq > k {
                    success += 1;
                }
            }
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        m.recall_pre.insert(k, frac(pre, n));
        m.recall_post.insert(k, frac(post, n));
        m.evaluated.insert(k, counted);
        m.asr.insert(k, frac(success, counted));
    }
    m
}

/// Brute-force TR and IR metrics for pre-computed features.
pub fn brute_metrics(
    clean: &vlattack::retrieval::PairFeatures,
    adv: &vlattack::retrieval::PairFeatures,
    top_k: &[usize],
    restrict: bool,
    adversarial_galleries: bool,
) -> (vlattack::retrieval::TaskMetrics, vlattack::retrieval::TaskMetrics) {
    let post = if adversarial_galleries { adv } else { clean };
    let texts = |f: &vlattack::retrieval::PairFeatures| -> Vec<(String, Vec<f64>)> {
        f.texts.iter().map(|(id, _, v)| (id.clone(), v.clone())).collect()
    };
    let (clean_texts, post_texts) = (texts(clean), texts(post));
    let mut tr = Vec::new();
    for (i, (img, q)) in clean.images.iter().enumerate() {
        let golds: Vec<&String> = clean.texts.iter().filter(|t| &t.1 == img).map(|t| &t.0).collect();
        let best = |query: &[f64], items: &[(String, Vec<f64>)]| {
            golds.iter().map(|g| brute_rank(query, items, g)).min().unwrap()
        };
        tr.push((best(q, &clean_texts), best(&adv.images[i].1, &post_texts)));
    }
    let mut ir = Vec::new();
    for (i, (_, img, q)) in clean.texts.iter().enumerate() {
        ir.push((brute_rank(q, &clean.images, img), brute_rank(&adv.texts[i].2, &post.images, img)));
    }
    (brute_task(&tr, top_k, restrict), brute_task(&ir, top_k, restrict))
}

/// Synthetic gallery: `images` images with `per_image` captions each; a
/// caption is its image's feature plus noise. The adversarial side adds
/// `attack` noise to everything.
pub fn synthetic_features(
    seed: u64,
    images: usize,
    per_image: usize,
    dim: usize,
    attack: f64,
) -> (vlattack::retrieval::PairFeatures, vlattack::retrieval::PairFeatures) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |scale: f64, n: usize| -> Vec<f64> {
        (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
    };
    let mut clean = vlattack::retrieval::PairFeatures {
        images: Vec::new(),
        texts: Vec::new(),
    };
    for i in 0..images {
        let f = normal(1.0, dim);
        for c in 0..per_image {
            let t: Vec<f64> = f.iter().zip(normal(0.8, dim)).map(|(a, b)| a + b).collect();
            clean.texts.push((format!("img{i:02}#{c}"), format!("img{i:02}"), t));
        }
        clean.images.push((format!("img{i:02}"), f));
    }
    let mut adv = clean.clone();
    for (_, f) in &mut adv.images {
        for (a, b) in f.iter_mut().zip(normal(attack, dim)) {
            *a += b;
        }
    }
    for (_, _, f) in &mut adv.texts {
        for (a, b) in f.iter_mut().zip(normal(attack, dim)) {
            *a += b;
        }
    }
    (clean, adv)
}

/// Generated fixture in a fresh temporary directory.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: vlattack::config::CliConfig,
    pub groups: Vec<vlattack::ImageTextGroup>,
    pub lexicon: vlattack::lexicon::Lexicon,
}

impl Fixture {
    pub fn new(size: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        vlattack::fixture::make_fixture(dir.path(), &vlattack::fixture::FixtureSpec { size, seed: 7 }).unwrap();
        let config = vlattack::config::CliConfig::load(Some(&dir.path().join("config.toml")), &[]).unwrap();
        let groups =
            vlattack::dataset::load_dataset(config.dataset.as_ref().unwrap(), config.attack.m_captions).unwrap();
        let lexicon = config.lexicon().unwrap();
        Self {
            dir,
            config,
            groups,
            lexicon,
        }
    }

    pub fn manifest(&self) -> std::path::PathBuf {
        self.config.dataset.clone().unwrap()
    }

    pub fn config_path(&self) -> std::path::PathBuf {
        self.dir.path().join("config.toml")
    }
}

pub struct SelectionCase {
    pub entries: Vec<(String, Vec<f64>)>,
    pub table: std::collections::BTreeMap<String, Vec<String>>,
    pub words: Vec<String>,
    pub tau: f64,
    pub fallback_count: usize,
}

impl SelectionCase {
    pub fn random(rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand::seq::{IndexedRandom, SliceRandom};
        use rand::Rng;
        let vocab: Vec<String> = (0..40).map(|i| format!("v{i}")).collect();
        let mut entries = Vec::new();
        let mut table = std::collections::BTreeMap::new();
        for w in &vocab {
            if rng.random_bool(0.7) {
                entries.push((w.clone(), (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()));
            } else {
                let mut others: Vec<String> = vocab.iter().filter(|o| *o != w).cloned().collect();
                let n = rng.random_range(2..7);
                let (picked, _) = others.partial_shuffle(rng, n);
                table.insert(w.clone(), picked.to_vec());
            }
        }
        let len = rng.random_range(3..9);
        let words = (0..len).map(|_| vocab.choose(rng).unwrap().clone()).collect();
        Self {
            entries,
            table,
            words,
            tau: rng.random_range(-0.2..0.9),
            fallback_count: rng.random_range(1..7),
        }
    }

    /// Every single-word variant, enumerated without the library.
    pub fn variants(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for (p, w) in self.words.iter().enumerate() {
            let subs: Vec<String> = if self.entries.iter().any(|(e, _)| e == w) {
                brute_substitutes(&self.entries, w, self.tau).into_iter().collect()
            } else {
                self.table[w].iter().take(self.fallback_count).cloned().collect()
            };
            for s in subs {
                let mut v = self.words.clone();
                v[p] = s;
                out.push(v);
            }
        }
        out
    }

    pub fn lexicon(&self) -> vlattack::lexicon::Lexicon {
        vlattack::lexicon::Lexicon::new(
            vlattack::lexicon::VectorStore::from_entries(self.entries.clone()).unwrap(),
            vlattack::lexicon::StaticSynonymTable::new(self.table.clone()),
        )
    }
}

/// Runs `count` random selection cases (at most 200 candidates each) against
/// exhaustive argmin. Returns (cases, mismatching case numbers, substitutions).
pub fn selection_oracle(seed: u64, count: usize) -> (usize, Vec<usize>, usize) {
    use rand::{Rng, SeedableRng};
    use vlattack::backend::ToyBackend;
    let backend = ToyBackend::seeded(5);
    let weights = backend.weights();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut cases, mut mismatches, mut substituted) = (0, Vec::new(), 0);
    while cases < count {
        let case = SelectionCase::random(&mut rng);
        let variants = case.variants();
        if variants.len() > 200 {
            continue;
        }
        cases += 1;
        let pixels = random_image(rng.random(), (8, 8, 3));
        let (_, image_feature) = image_forward(weights, &pixels, None);
        let expected = variants
            .iter()
            .map(|v| {
                let w: Vec<&str> = v.iter().map(String::as_str).collect();
                (v.join(" "), cos(&text_forward(weights, &w).1, &image_feature))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t)
            .unwrap_or_else(|| case.words.join(" "));
        let config = vlattack::AttackConfig {
            tau: case.tau,
            fallback_count: case.fallback_count,
            ..Default::default()
        };
        let text = vlattack::TextSample::new("t", case.words.join(" ")).unwrap();
        let image = vlattack::ImageSample::from_f64("i", &pixels).unwrap();
        let lexicon = case.lexicon();
        let got = vlattack::text_attack::select_adversarial_text(&image, &text, &backend, &lexicon, &config).unwrap();
        let enumerated = vlattack::text_attack::candidate_texts(&text, &lexicon, &config).len();
        if got.text.raw() != expected || enumerated != variants.len() {
            mismatches.push(cases);
        }
        substituted += usize::from(got.substituted());
    }
    (cases, mismatches, substituted)
}
