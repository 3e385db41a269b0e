//! Image-text retrieval simulation and attack-success metrics.
//!
//! Similarity is cosine over final features. Rankings are a total order:
//! higher cosine first, ties broken by ascending id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::numeric::cosine;
use crate::types::{ImageSample, TextSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone)]
pub struct Gallery {
    modality: Modality,
    ids: Vec<String>,
    features: Vec<Vec<f64>>,
}

impl Gallery {
    pub fn new(modality: Modality, items: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let dim = items.first().map(|(_, f)| f.len());
        for (id, f) in &items {
            if !seen.insert(id.as_str()) {
                return Err(Error::Retrieval(format!("duplicate gallery id `{id}`")));
            }
            if Some(f.len()) != dim {
                return Err(Error::Retrieval(format!(
                    "gallery item `{id}` has dimension {}, expected {}",
                    f.len(),
                    dim.unwrap_or(0)
                )));
            }
        }
        let (ids, features) = items.into_iter().unzip();
        Ok(Self {
            modality,
            ids,
            features,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.features.iter().map(|f| cosine(query, f)).collect()
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Retrieval(format!("id `{id}` not in gallery")))
    }
}

fn before(scores: &[f64], ids: &[String], a: usize, b: usize) -> Ordering {
    scores[b]
        .total_cmp(&scores[a])
        .then_with(|| ids[a].cmp(&ids[b]))
}

/// Ids of the `k` most similar items, best first.
pub fn retrieve_top_k(query: &[f64], gallery: &Gallery, k: usize) -> Result<Vec<String>> {
    if k == 0 || k > gallery.len() {
        return Err(Error::Retrieval(format!(
            "k = {k} outside 1..={} for this gallery",
            gallery.len()
        )));
    }
    let scores = gallery.scores(query);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|a, b| before(&scores, &gallery.ids, *a, *b));
    Ok(order[..k].iter().map(|i| gallery.ids[*i].clone()).collect())
}

/// 1-based rank of `gold_id` for `query`.
pub fn rank_of(query: &[f64], gallery: &Gallery, gold_id: &str) -> Result<usize> {
    let gold = gallery.position(gold_id)?;
    let scores = gallery.scores(query);
    Ok(1 + (0..gallery.len())
        .filter(|&i| before(&scores, &gallery.ids, i, gold) == Ordering::Less)
        .count())
}

/// True when `gold_id` is not among the top `k` results.
pub fn attack_success(query: &[f64], gold_id: &str, gallery: &Gallery, k: usize) -> Result<bool> {
    gallery.position(gold_id)?;
    Ok(!retrieve_top_k(query, gallery, k)?.iter().any(|id| id == gold_id))
}

/// Images and captions to be scored, each caption pointing at its image.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub images: Vec<ImageSample>,
    pub captions: Vec<(TextSample, String)>,
}

/// Final features of a [`PairSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub images: Vec<(String, Vec<f64>)>,
    /// `(caption id, image id, feature)`
    pub texts: Vec<(String, String, Vec<f64>)>,
}

impl PairFeatures {
    pub fn encode(set: &PairSet, backend: &dyn Backend) -> Result<Self> {
        let images = set
            .images
            .iter()
            .map(|i| Ok((i.id().to_string(), backend.encode_image(i)?.final_feature.to_vec())))
            .collect::<Result<_>>()?;
        let texts = set
            .captions
            .iter()
            .map(|(t, img)| Ok((t.id().to_string(), img.clone(), backend.encode_text(t)?.final_feature.to_vec())))
            .collect::<Result<_>>()?;
        Ok(Self { images, texts })
    }

    fn image_gallery(&self) -> Result<Gallery> {
        Gallery::new(Modality::Image, self.images.clone())
    }

    fn text_gallery(&self) -> Result<Gallery> {
        Gallery::new(
            Modality::Text,
            self.texts.iter().map(|(id, _, f)| (id.clone(), f.clone())).collect(),
        )
    }

    fn same_layout(&self, other: &PairFeatures) -> bool {
        self.images.len() == other.images.len()
            && self.texts.len() == other.texts.len()
            && self.images.iter().zip(&other.images).all(|(a, b)| a.0 == b.0)
            && self
                .texts
                .iter()
                .zip(&other.texts)
                .all(|(a, b)| a.0 == b.0 && a.1 == b.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub top_k: Vec<usize>,
    /// Count only queries whose gold item was in the clean top-k.
    pub restrict_to_clean_hits: bool,
    /// Post-attack queries search the adversarial galleries (otherwise the clean ones).
    pub adversarial_galleries: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: vec![1, 5, 10],
            restrict_to_clean_hits: true,
            adversarial_galleries: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Image query, text gallery.
    #[serde(rename = "TR")]
    TextRetrieval,
    /// Text query, image gallery.
    #[serde(rename = "IR")]
    ImageRetrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub task: Task,
    pub query_id: String,
    pub gold_ids: Vec<String>,
    pub rank_pre: usize,
    pub rank_post: usize,
    /// Per k: gold item evicted from the top-k after the attack.
    pub success: BTreeMap<usize, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub queries: usize,
    pub recall_pre: BTreeMap<usize, f64>,
    pub recall_post: BTreeMap<usize, f64>,
    /// Queries counted towards the ASR at each k.
    pub evaluated: BTreeMap<usize, usize>,
    pub asr: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGap {
    pub mean_positive: f64,
    pub mean_negative: f64,
}

impl SimilarityGap {
    pub fn gap(&self) -> f64 {
        self.mean_positive - self.mean_negative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub similarity: String,
    pub restrict_to_clean_hits: bool,
    pub galleries: String,
    pub top_k: Vec<usize>,
    pub tr: TaskMetrics,
    pub ir: TaskMetrics,
    pub clean_gap: Option<SimilarityGap>,
    pub adversarial_gap: Option<SimilarityGap>,
    #[serde(skip)]
    pub rows: Vec<QueryRow>,
}

fn task_metrics(rows: &[&QueryRow], top_k: &[usize], restrict: bool) -> TaskMetrics {
    let n = rows.len();
    let frac = |c: usize, d: usize| if d == 0 { 0.0 } else { c as f64 / d as f64 };
    let mut m = TaskMetrics {
        queries: n,
        recall_pre: BTreeMap::new(),
        recall_post: BTreeMap::new(),
        evaluated: BTreeMap::new(),
        asr: BTreeMap::new(),
    };
    for &k in top_k {
        let hits_pre = rows.iter().filter(|r| r.rank_pre <= k).count();
        let hits_post = rows.iter().filter(|r| r.rank_post <= k).count();
        let counted: Vec<&&QueryRow> = rows.iter().filter(|r| !restrict || r.rank_pre <= k).collect();
        let successes = counted.iter().filter(|r| r.success[&k]).count();
        m.recall_pre.insert(k, frac(hits_pre, n));
        m.recall_post.insert(k, frac(hits_post, n));
        m.evaluated.insert(k, counted.len());
        m.asr.insert(k, frac(successes, counted.len()));
    }
    m
}

fn best_rank(query: &[f64], gallery: &Gallery, golds: &[String]) -> Result<usize> {
    golds
        .iter()
        .map(|g| rank_of(query, gallery, g))
        .try_fold(usize::MAX, |best, r| Ok(best.min(r?)))
}

/// Scores pre-computed features. Text-retrieval queries are images (gold: any
/// of their captions); image-retrieval queries are captions (gold: their image).
pub fn evaluate_features(clean: &PairFeatures, adversarial: &PairFeatures, options: &EvalOptions) -> Result<RetrievalReport> {
    if !clean.same_layout(adversarial) {
        return Err(Error::Retrieval(
            "clean and adversarial pair sets do not correspond one-to-one".into(),
        ));
    }
    let max_k = clean.images.len().min(clean.texts.len());
    if let Some(k) = options.top_k.iter().find(|k| **k == 0 || **k > max_k) {
        return Err(Error::Retrieval(format!("k = {k} outside 1..={max_k}")));
    }
    let post_source = if options.adversarial_galleries { adversarial } else { clean };
    let (clean_texts, post_texts) = (clean.text_gallery()?, post_source.text_gallery()?);
    let (clean_images, post_images) = (clean.image_gallery()?, post_source.image_gallery()?);

    let mut rows = Vec::new();
    let row = |task, query_id: &str, gold_ids: Vec<String>, rank_pre: usize, rank_post: usize| QueryRow {
        task,
        query_id: query_id.to_string(),
        gold_ids,
        rank_pre,
        rank_post,
        success: options.top_k.iter().map(|&k| (k, rank_post > k)).collect(),
    };
    for ((id, pre_q), (_, post_q)) in clean.images.iter().zip(&adversarial.images) {
        let golds: Vec<String> = clean
            .texts
            .iter()
            .filter(|(_, img, _)| img == id)
            .map(|(t, _, _)| t.clone())
            .collect();
        if golds.is_empty() {
            return Err(Error::Retrieval(format!("image `{id}` has no captions")));
        }
        let pre = best_rank(pre_q, &clean_texts, &golds)?;
        let post = best_rank(post_q, &post_texts, &golds)?;
        rows.push(row(Task::TextRetrieval, id, golds, pre, post));
    }
    for ((id, img, pre_q), (_, _, post_q)) in clean.texts.iter().zip(&adversarial.texts) {
        let pre = rank_of(pre_q, &clean_images, img)?;
        let post = rank_of(post_q, &post_images, img)?;
        rows.push(row(Task::ImageRetrieval, id, vec![img.clone()], pre, post));
    }
    let of = |task| rows.iter().filter(|r| r.task == task).collect::<Vec<_>>();
    let tr = task_metrics(&of(Task::TextRetrieval), &options.top_k, options.restrict_to_clean_hits);
    let ir = task_metrics(&of(Task::ImageRetrieval), &options.top_k, options.restrict_to_clean_hits);
    Ok(RetrievalReport {
        similarity: "cosine(final_feature)".into(),
        restrict_to_clean_hits: options.restrict_to_clean_hits,
        galleries: if options.adversarial_galleries { "adversarial" } else { "clean" }.into(),
        top_k: options.top_k.clone(),
        tr,
        ir,
        clean_gap: similarity_gap_features(clean).ok(),
        adversarial_gap: similarity_gap_features(adversarial).ok(),
        rows,
    })
}

/// Encodes both pair sets on `victim` and scores them.
pub fn evaluate(
    clean: &PairSet,
    adversarial: &PairSet,
    victim: &dyn Backend,
    options: &EvalOptions,
) -> Result<RetrievalReport> {
    let c = PairFeatures::encode(clean, victim)?;
    let a = PairFeatures::encode(adversarial, victim)?;
    evaluate_features(&c, &a, options)
}

/// Mean cosine over matched (caption, image) pairs and over all unmatched ones.
pub fn similarity_gap_features(features: &PairFeatures) -> Result<SimilarityGap> {
    if features.images.len() < 2 {
        return Err(Error::Retrieval(
            "need at least two images for a negative-pair mean".into(),
        ));
    }
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (_, img_id, t) in &features.texts {
        for (id, f) in &features.images {
            let c = cosine(t, f);
            if id == img_id {
                pos += c;
                n_pos += 1;
            } else {
                neg += c;
                n_neg += 1;
            }
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Retrieval("no matched or no unmatched pairs".into()));
    }
    Ok(SimilarityGap {
        mean_positive: pos / n_pos as f64,
        mean_negative: neg / n_neg as f64,
    })
}

pub fn similarity_gap(pairs: &PairSet, backend: &dyn Backend) -> Result<SimilarityGap> {
    similarity_gap_features(&PairFeatures::encode(pairs, backend)?)
}
