//! COCO-style annotation documents with lossless PNG images alongside.
//!
//! Boxes are stored as normalized `[cx, cy, w, h]`; masks as uncompressed
//! column-major run-length encodings whose first run counts background pixels.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageSample, Instance};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub split: ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: usize,
    pub image_id: usize,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub segmentation: Rle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
}

pub(crate) fn encode_rle(mask: &BinaryMask) -> Rle {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c) as u8;
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

pub(crate) fn decode_rle(rle: &Rle) -> std::result::Result<BinaryMask, String> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(format!("run lengths sum to {total}, expected {}", h * w));
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut pos = 0usize;
    for (k, &run) in rle.counts.iter().enumerate() {
        let fg = k % 2 == 1;
        for p in pos..pos + run as usize {
            if fg {
                mask.set(p % h, p / h, true);
            }
        }
        pos += run as usize;
    }
    Ok(mask)
}

fn image_file_name(id: usize) -> String {
    format!("images/{id:06}.png")
}

/// Write `samples` as an annotation document at `path`; images go to `images/` beside it.
pub fn write_annotations(samples: &[ImageSample], categories: &[Category], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut doc = AnnotationFile {
        images: Vec::with_capacity(samples.len()),
        annotations: Vec::new(),
        categories: categories.to_vec(),
    };
    for s in samples {
        let file = image_file_name(s.id);
        let buf = image::RgbImage::from_raw(s.width as u32, s.height as u32, s.pixels.clone())
            .ok_or_else(|| Error::Shape(format!("image {} pixel buffer has wrong length", s.id)))?;
        buf.save_with_format(dir.join(&file), image::ImageFormat::Png)?;
        doc.images.push(ImageRecord {
            id: s.id,
            height: s.height,
            width: s.width,
            file,
        });
        for inst in &s.instances {
            doc.annotations.push(AnnotationRecord {
                id: doc.annotations.len(),
                image_id: s.id,
                category_id: inst.class_id,
                bbox: inst.bbox.to_array(),
                segmentation: encode_rle(&inst.mask),
            });
        }
    }
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_annotations`].
pub fn read_annotations(path: &Path) -> Result<(Vec<ImageSample>, Vec<Category>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut samples = Vec::with_capacity(doc.images.len());
    let mut index = HashMap::new();
    for (k, rec) in doc.images.iter().enumerate() {
        let img = image::open(dir.join(&rec.file))
            .map_err(|e| Error::Parse {
                context: format!("{} images[{k}] ({})", path.display(), rec.file),
                message: e.to_string(),
            })?
            .into_rgb8();
        if img.width() as usize != rec.width || img.height() as usize != rec.height {
            return Err(Error::Parse {
                context: format!("{} images[{k}]", path.display()),
                message: format!(
                    "raster is {}x{}, record says {}x{}",
                    img.height(),
                    img.width(),
                    rec.height,
                    rec.width
                ),
            });
        }
        if index.insert(rec.id, samples.len()).is_some() {
            return Err(Error::Parse {
                context: format!("{} images[{k}]", path.display()),
                message: format!("duplicate image id {}", rec.id),
            });
        }
        samples.push(ImageSample {
            id: rec.id,
            height: rec.height,
            width: rec.width,
            pixels: img.into_raw(),
            instances: Vec::new(),
        });
    }
    for (k, ann) in doc.annotations.iter().enumerate() {
        let bad = |message: String| Error::Parse {
            context: format!("{} annotations[{k}]", path.display()),
            message,
        };
        let &slot = index
            .get(&ann.image_id)
            .ok_or_else(|| bad(format!("unknown image_id {}", ann.image_id)))?;
        let sample = &mut samples[slot];
        if ann.segmentation.size != [sample.height, sample.width] {
            return Err(bad(format!(
                "segmentation size {:?} does not match image {}x{}",
                ann.segmentation.size, sample.height, sample.width
            )));
        }
        let mask = decode_rle(&ann.segmentation).map_err(bad)?;
        let [cx, cy, w, h] = ann.bbox;
        let bbox = BBox::new(cx, cy, w, h).map_err(|e| bad(e.to_string()))?;
        sample.instances.push(Instance {
            class_id: ann.category_id,
            bbox,
            mask,
        });
    }
    Ok((samples, doc.categories))
}
