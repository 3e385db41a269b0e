//! Batched end-to-end attack and run persistence.
//!
//! Per batch: every caption is attacked against its clean image, then every
//! image is attacked with contrast sets built from the batch's adversarial
//! captions. A run directory holds:
//!
//! * `manifest.json`: effective configuration, backends, fingerprint;
//! * `records.jsonl`: one [`RecordRow`] per pair, possibly ending in a
//!   truncation marker;
//! * `tensors/NNNNN.{clean,adv}.f32`: clean and adversarial pixels (see
//!   [`crate::blob`]);
//! * `report.json` and `queries.jsonl`: the retrieval report and its rows;
//! * optionally `png/NNNNN.png` plus `png_audit.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendDescriptor, ThreadSafety};
use crate::blob;
use crate::dataset::{self, load_dataset};
use crate::error::{Error, Result};
use crate::image_attack::{attack_image, build_contrast_sets, ImageAttackOutcome};
use crate::lexicon::Lexicon;
use crate::numeric::{derive_seed, linf_distance, word_edit_distance};
use crate::retrieval::{evaluate, EvalOptions, PairSet, RetrievalReport};
use crate::text_attack::{select_against_feature, SelectedText};
use crate::types::{AdversarialRecord, AttackConfig, ImageSample, ImageTextGroup, PairBatch, Substitution, TextSample};

/// Seed of the image attack for `image_id`.
pub fn image_seed(config: &AttackConfig, image_id: &str) -> u64 {
    derive_seed(config.seed, image_id)
}

fn audit(record: &AdversarialRecord, config: &AttackConfig) -> Result<()> {
    if record.within_budget(&config.budget) {
        return Ok(());
    }
    Err(Error::InvalidInput(format!(
        "budget violated: linf {} (limit {}), edit distance {} (limit {})",
        record.linf_distance, config.budget.epsilon_v, record.edit_distance, config.budget.epsilon_t
    ))
    .in_stage(&record.pair_id, "budget audit"))
}

/// Adversarial captions for every caption of the batch, keyed by pair id.
pub fn attack_batch_texts(
    batch: &PairBatch,
    surrogate: &dyn Backend,
    lexicon: &Lexicon,
    config: &AttackConfig,
) -> Result<BTreeMap<String, SelectedText>> {
    let mut out = BTreeMap::new();
    for g in batch.groups() {
        let feature = surrogate
            .encode_image(&g.image)
            .map_err(|e| e.in_stage(g.image.id(), "image encoding"))?
            .final_feature;
        let feature = feature.as_slice().expect("contiguous");
        for c in &g.captions {
            let s = select_against_feature(feature, c, surrogate, lexicon, config)
                .map_err(|e| e.in_stage(c.id(), "text attack"))?;
            out.insert(c.id().to_string(), s);
        }
    }
    Ok(out)
}

fn attack_batch_images(
    batch: &PairBatch,
    adversarial: &BTreeMap<String, TextSample>,
    surrogate: &dyn Backend,
    config: &AttackConfig,
) -> Result<Vec<ImageAttackOutcome>> {
    let one = |i: usize| -> Result<ImageAttackOutcome> {
        let image = &batch.groups()[i].image;
        let sets = build_contrast_sets(batch, adversarial, i, config.m_captions)
            .map_err(|e| e.in_stage(image.id(), "contrast sets"))?;
        attack_image(image, &sets, config, surrogate, image_seed(config, image.id()))
            .map_err(|e| e.in_stage(image.id(), "image attack"))
    };
    if surrogate.descriptor().thread_safety != ThreadSafety::ConcurrentReadSafe || batch.len() == 1 {
        return (0..batch.len()).map(one).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..batch.len()).map(|i| scope.spawn(move || one(i))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("image attack thread panicked"))
            .collect()
    })
}

/// Attacks one batch and returns one audited record per caption, in batch
/// order.
pub fn attack_batch(
    batch: &PairBatch,
    surrogate: &dyn Backend,
    lexicon: &Lexicon,
    config: &AttackConfig,
) -> Result<Vec<AdversarialRecord>> {
    config.validate()?;
    let texts = attack_batch_texts(batch, surrogate, lexicon, config)?;
    let adversarial: BTreeMap<String, TextSample> = texts.iter().map(|(k, s)| (k.clone(), s.text.clone())).collect();
    let images = attack_batch_images(batch, &adversarial, surrogate, config)?;
    let mut records = Vec::with_capacity(batch.num_pairs());
    for (g, outcome) in batch.groups().iter().zip(images) {
        for c in &g.captions {
            let s = &texts[c.id()];
            let record = AdversarialRecord {
                pair_id: c.id().to_string(),
                image_id: g.image.id().to_string(),
                original_text: c.clone(),
                adversarial_image: outcome.image.clone(),
                adversarial_text: s.text.clone(),
                substitution: s.substitution.clone(),
                clean_text_similarity: s.original_similarity,
                adversarial_text_similarity: s.similarity,
                linf_distance: outcome.linf_distance,
                edit_distance: word_edit_distance(c, &s.text),
                init_loss_trace: outcome.init_loss_trace.clone(),
                contrastive_loss_trace: outcome.contrastive_loss_trace.clone(),
            };
            audit(&record, config)?;
            records.push(record);
        }
    }
    Ok(records)
}

/// Batch membership as indices into `groups`: manifest order (or a seeded
/// shuffle), cut into chunks of `batch_size`. The last batch may be short.
pub fn partition(num_groups: usize, config: &AttackConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_groups).collect();
    if config.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle")));
    }
    order.chunks(config.batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub records: Vec<AdversarialRecord>,
    /// Set when an interrupt stopped the run between batches.
    pub truncated: bool,
}

/// Attacks all groups batch by batch. `on_batch` sees each batch's records
/// as soon as they exist; `interrupt` is polled between batches.
pub fn attack_groups(
    groups: &[ImageTextGroup],
    surrogate: &dyn Backend,
    lexicon: &Lexicon,
    config: &AttackConfig,
    interrupt: Option<&AtomicBool>,
    mut on_batch: impl FnMut(&[AdversarialRecord]) -> Result<()>,
) -> Result<AttackRun> {
    config.validate()?;
    let mut records = Vec::new();
    for (b, members) in partition(groups.len(), config).into_iter().enumerate() {
        if interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
            log::warn!("interrupted before batch {b}; {} records kept", records.len());
            return Ok(AttackRun { records, truncated: true });
        }
        let batch = PairBatch::new(members.iter().map(|&i| groups[i].clone()).collect())?;
        let batch_records = attack_batch(&batch, surrogate, lexicon, config)?;
        log::info!("batch {b}: {} images, {} pairs", batch.len(), batch_records.len());
        on_batch(&batch_records)?;
        records.extend(batch_records);
    }
    Ok(AttackRun {
        records,
        truncated: false,
    })
}

/// Clean and adversarial pair sets in record order. Images appear in order of
/// first mention.
pub fn pair_sets(groups: &[ImageTextGroup], records: &[AdversarialRecord]) -> Result<(PairSet, PairSet)> {
    let by_id: BTreeMap<&str, &ImageTextGroup> = groups.iter().map(|g| (g.image.id(), g)).collect();
    let mut clean = PairSet {
        images: Vec::new(),
        captions: Vec::new(),
    };
    let mut adv = clean.clone();
    for r in records {
        if !adv.images.iter().any(|i| i.id() == r.image_id) {
            let g = by_id
                .get(r.image_id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("record for unknown image `{}`", r.image_id)))?;
            clean.images.push(g.image.clone());
            adv.images.push(r.adversarial_image.clone());
        }
        clean.captions.push((r.original_text.clone(), r.image_id.clone()));
        adv.captions.push((r.adversarial_text.clone(), r.image_id.clone()));
    }
    Ok((clean, adv))
}

/// In-memory run over a manifest: attack on `surrogate`, score on `victim`.
pub fn attack_dataset(
    manifest: &Path,
    surrogate: &dyn Backend,
    victim: &dyn Backend,
    lexicon: &Lexicon,
    config: &AttackConfig,
    eval: &EvalOptions,
) -> Result<(Vec<AdversarialRecord>, RetrievalReport)> {
    let groups = load_dataset(manifest, config.m_captions)?;
    let run = attack_groups(&groups, surrogate, lexicon, config, None, |_| Ok(()))?;
    let (clean, adv) = pair_sets(&groups, &run.records)?;
    let report = evaluate(&clean, &adv, victim, eval)?;
    Ok((run.records, report))
}

/// Evaluation options implied by an attack configuration.
pub fn eval_options(config: &AttackConfig, restrict_to_clean_hits: bool, adversarial_galleries: bool) -> EvalOptions {
    EvalOptions {
        top_k: config.top_k.clone(),
        restrict_to_clean_hits,
        adversarial_galleries,
    }
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub pair_id: String,
    pub image_id: String,
    pub original_text: String,
    pub adversarial_text: String,
    pub substitution: Option<Substitution>,
    pub clean_text_similarity: f64,
    pub adversarial_text_similarity: f64,
    pub linf_distance: f64,
    pub edit_distance: usize,
    pub within_budget: bool,
    /// Tensor files relative to the run directory.
    pub clean_tensor: String,
    pub adversarial_tensor: String,
    pub init_loss_trace: Vec<f64>,
    pub contrastive_loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationMarker {
    pub truncated: bool,
    pub completed_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub image_id: String,
    pub kind: String,
    pub shape: [usize; 3],
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PngAudit {
    pub image_id: String,
    pub png: String,
    pub quantized_linf: f64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// sha256 over version, effective config, backends and dataset bytes.
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub attack: AttackConfig,
    pub surrogate: BackendDescriptor,
    pub victim: BackendDescriptor,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub truncated: bool,
    pub records: usize,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(
        config: serde_json::Value,
        attack: &AttackConfig,
        surrogate: &dyn Backend,
        victim: &dyn Backend,
        dataset: &Path,
        output_dir: &Path,
    ) -> Result<Self> {
        let dataset_sha256 = sha256_file(dataset)?;
        let mut h = Sha256::new();
        for part in [
            env!("CARGO_PKG_VERSION").to_string(),
            serde_json::to_string(&config)?,
            serde_json::to_string(attack)?,
            serde_json::to_string(surrogate.descriptor())?,
            serde_json::to_string(victim.descriptor())?,
            dataset_sha256.clone(),
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            fingerprint: hex(&h.finalize()),
            config,
            attack: attack.clone(),
            surrogate: surrogate.descriptor().clone(),
            victim: victim.descriptor().clone(),
            dataset: dataset.to_path_buf(),
            dataset_sha256,
            output_dir: output_dir.to_path_buf(),
            started_unix: unix_now(),
            finished_unix: None,
            truncated: false,
            records: 0,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn tensor_header(image: &ImageSample, kind: &str) -> TensorHeader {
    let (h, w, c) = image.shape();
    TensorHeader {
        image_id: image.id().to_string(),
        kind: kind.into(),
        shape: [h, w, c],
        dtype: "f32-le".into(),
    }
}

pub fn write_tensor(path: &Path, image: &ImageSample, kind: &str) -> Result<()> {
    let data: Vec<f32> = image.pixels().iter().copied().collect();
    blob::write(path, &tensor_header(image, kind), &data)
}

pub fn read_tensor(path: &Path) -> Result<ImageSample> {
    let (h, data): (TensorHeader, Vec<f32>) = blob::read(path)?;
    let [a, b, c] = h.shape;
    let px = Array3::from_shape_vec((a, b, c), data).map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
    ImageSample::new(h.image_id, px)
}

/// Streams a run to disk.
pub struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
    records: BufWriter<File>,
    tensors: BTreeMap<String, (String, String)>,
    clean_images: BTreeMap<String, ImageSample>,
    export_png: bool,
    png_audit: Vec<PngAudit>,
    epsilon_v: f64,
    count: usize,
}

impl RunWriter {
    /// Creates `dir` and writes the initial manifest. `clean` supplies the clean
    /// image of every record.
    pub fn create(dir: &Path, manifest: RunManifest, clean: &[ImageTextGroup], export_png: bool) -> Result<Self> {
        fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &manifest)?;
        let path = dir.join("records.jsonl");
        let records = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            epsilon_v: manifest.attack.budget.epsilon_v,
            manifest,
            records,
            tensors: BTreeMap::new(),
            clean_images: clean.iter().map(|g| (g.image.id().to_string(), g.image.clone())).collect(),
            export_png,
            png_audit: Vec::new(),
            count: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn tensors_for(&mut self, record: &AdversarialRecord) -> Result<(String, String)> {
        if let Some(t) = self.tensors.get(&record.image_id) {
            return Ok(t.clone());
        }
        let n = self.tensors.len();
        let clean = self
            .clean_images
            .get(&record.image_id)
            .ok_or_else(|| Error::InvalidInput(format!("no clean image `{}`", record.image_id)))?
            .clone();
        let names = (format!("tensors/{n:05}.clean.f32"), format!("tensors/{n:05}.adv.f32"));
        write_tensor(&self.dir.join(&names.0), &clean, "clean")?;
        write_tensor(&self.dir.join(&names.1), &record.adversarial_image, "adversarial")?;
        if self.export_png {
            let png = format!("png/{n:05}.png");
            let q = dataset::quantize(&record.adversarial_image)?;
            dataset::save_png(&q, &self.dir.join(&png))?;
            let quantized_linf = linf_distance(&q, &clean)?;
            self.png_audit.push(PngAudit {
                image_id: record.image_id.clone(),
                png,
                quantized_linf,
                within_budget: quantized_linf <= self.epsilon_v + 1e-6,
            });
        }
        self.tensors.insert(record.image_id.clone(), names.clone());
        Ok(names)
    }

    pub fn append(&mut self, records: &[AdversarialRecord]) -> Result<()> {
        for r in records {
            let (clean_tensor, adversarial_tensor) = self.tensors_for(r)?;
            let row = RecordRow {
                pair_id: r.pair_id.clone(),
                image_id: r.image_id.clone(),
                original_text: r.original_text.raw().to_string(),
                adversarial_text: r.adversarial_text.raw().to_string(),
                substitution: r.substitution.clone(),
                clean_text_similarity: r.clean_text_similarity,
                adversarial_text_similarity: r.adversarial_text_similarity,
                linf_distance: r.linf_distance,
                edit_distance: r.edit_distance,
                within_budget: r.within_budget(&self.manifest.attack.budget),
                clean_tensor,
                adversarial_tensor,
                init_loss_trace: r.init_loss_trace.clone(),
                contrastive_loss_trace: r.contrastive_loss_trace.clone(),
            };
            let line = serde_json::to_string(&row)?;
            writeln!(self.records, "{line}").map_err(|e| Error::io(&self.dir, e))?;
            self.count += 1;
        }
        self.records.flush().map_err(|e| Error::io(&self.dir, e))
    }

    /// Writes the report (if any), the truncation marker (if truncated) and
    /// the final manifest.
    pub fn finish(mut self, report: Option<&RetrievalReport>, truncated: bool) -> Result<RunManifest> {
        if truncated {
            let marker = TruncationMarker {
                truncated: true,
                completed_records: self.count,
            };
            writeln!(self.records, "{}", serde_json::to_string(&marker)?).map_err(|e| Error::io(&self.dir, e))?;
            fs::write(self.dir.join("TRUNCATED"), b"").map_err(|e| Error::io(&self.dir, e))?;
        }
        self.records.flush().map_err(|e| Error::io(&self.dir, e))?;
        if let Some(report) = report {
            write_report(&self.dir, report)?;
        }
        if self.export_png {
            write_jsonl(&self.dir.join("png_audit.jsonl"), &self.png_audit)?;
        }
        self.manifest.finished_unix = Some(unix_now());
        self.manifest.truncated = truncated;
        self.manifest.records = self.count;
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(self.manifest)
    }
}

/// `report.json` plus `queries.jsonl` under `dir`.
pub fn write_report(dir: &Path, report: &RetrievalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_jsonl(&dir.join("queries.jsonl"), &report.rows)
}

/// Rows of `records.jsonl` and whether the run was truncated.
pub fn read_records(path: &Path) -> Result<(Vec<RecordRow>, bool)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut truncated = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let format = |e: serde_json::Error| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(format)?;
        if value.get("truncated").is_some() {
            truncated = true;
            continue;
        }
        rows.push(serde_json::from_value(value).map_err(format)?);
    }
    Ok((rows, truncated))
}

/// Clean and adversarial pair sets stored in a run directory.
pub fn load_run_pairs(dir: &Path) -> Result<(PairSet, PairSet)> {
    let (rows, _) = read_records(&dir.join("records.jsonl"))?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no records", dir.display())));
    }
    let mut clean = PairSet {
        images: Vec::new(),
        captions: Vec::new(),
    };
    let mut adv = clean.clone();
    for r in &rows {
        if !clean.images.iter().any(|i| i.id() == r.image_id) {
            clean.images.push(read_tensor(&dir.join(&r.clean_tensor))?);
            adv.images.push(read_tensor(&dir.join(&r.adversarial_tensor))?);
        }
        clean.captions.push((TextSample::new(&r.pair_id, &r.original_text)?, r.image_id.clone()));
        adv.captions.push((TextSample::new(&r.pair_id, &r.adversarial_text)?, r.image_id.clone()));
    }
    Ok((clean, adv))
}
