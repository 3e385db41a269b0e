//! JSON Lines dataset manifests and 8-bit image I/O.
//!
//! One object per line: `{"id": str, "image": path, "captions": [str, ...]}`.
//! Image paths are resolved against the manifest's directory. Caption `k` of
//! image `id` gets the pair id `id#k`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImageSample, ImageTextGroup, TextSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub captions: Vec<String>,
}

pub fn pair_id(image_id: &str, k: usize) -> String {
    format!("{image_id}#{k}")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.captions.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("image `{}` has no captions", entry.id),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

/// Loads an image as 8-bit RGB scaled to `[0, 1]`.
pub fn load_image(id: &str, path: &Path) -> Result<ImageSample> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))?
        .mapv(|v| v as f32 / 255.0);
    Ok(ImageSample::new(id, pixels)?.with_source_path(path))
}

/// Rounds to 8 bits per channel. Images with one channel are written as
/// grayscale, three as RGB.
pub fn quantize(image: &ImageSample) -> Result<ImageSample> {
    let px = image.pixels().mapv(|v| (v * 255.0).round() / 255.0);
    ImageSample::new(image.id(), px)
}

pub fn save_png(image: &ImageSample, path: &Path) -> Result<()> {
    let (h, w, c) = image.shape();
    let bytes: Vec<u8> = image.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("cannot write {c}-channel image as PNG"))),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

/// Loads every entry, keeping at most `m_captions` captions per image.
pub fn load_dataset(path: &Path, m_captions: usize) -> Result<Vec<ImageTextGroup>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let image = load_image(&e.id, &base.join(&e.image))?;
            let captions = e
                .captions
                .iter()
                .take(m_captions)
                .enumerate()
                .map(|(k, c)| TextSample::new(pair_id(&e.id, k), c.as_str()))
                .collect::<Result<_>>()?;
            Ok(ImageTextGroup { image, captions })
        })
        .collect()
}
