//! Synthetic shapes corpus, base/novel splits, and K-shot episode sampling.

mod annotations;
pub mod shapes;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use annotations::{read_annotations, write_annotations, AnnotationFile, Category, ClassSplit};

use crate::error::{Error, Result};
use crate::geometry::{iou, mask_to_box, BBox, BinaryMask};
use shapes::{Shape, PALETTE};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// An RGB image (8 bits per channel, row-major, interleaved) with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl ImageSample {
    /// Channel-first `3 x H x W` values in `[0, 1]`.
    pub fn chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * plane + i] = px[ch] as f32 / 255.0;
            }
        }
        out
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.instances.iter().map(|i| i.class_id)
    }
}

/// Base/novel partition of the class space for one N-way K-shot episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub base_class_ids: Vec<usize>,
    pub novel_class_ids: Vec<usize>,
    pub shots: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    /// Base classes `0..num_base`, novel classes `num_base..num_base + num_novel`.
    pub fn contiguous(num_base: usize, num_novel: usize, shots: usize, seed: u64) -> Self {
        EpisodeSpec {
            base_class_ids: (0..num_base).collect(),
            novel_class_ids: (num_base..num_base + num_novel).collect(),
            shots,
            seed,
        }
    }

    pub fn num_base(&self) -> usize {
        self.base_class_ids.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_class_ids.len()
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel_class_ids.contains(&class_id)
    }

    pub fn is_base(&self, class_id: usize) -> bool {
        self.base_class_ids.contains(&class_id)
    }

    /// The model indexes classes by id, so base ids must be `0..B` and novel ids `B..B+N`.
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        let base: BTreeSet<_> = self.base_class_ids.iter().collect();
        let novel: BTreeSet<_> = self.novel_class_ids.iter().collect();
        if base.len() != self.base_class_ids.len() || novel.len() != self.novel_class_ids.len() {
            return Err(Error::Config("duplicate class ids in episode".into()));
        }
        if !base.is_disjoint(&novel) {
            return Err(Error::Config("base and novel class sets intersect".into()));
        }
        let b = self.num_base();
        let contiguous = self.base_class_ids.iter().copied().eq(0..b)
            && self.novel_class_ids.iter().copied().eq(b..b + self.num_novel());
        if !contiguous {
            return Err(Error::Config(
                "episode class ids must be 0..B for base and B..B+N for novel".into(),
            ));
        }
        Ok(())
    }
}

/// Rendering parameters for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Largest box IoU allowed between two instances.
    pub max_overlap_iou: f64,
    /// Half-extent range as a fraction of the image side.
    pub min_half_size: f64,
    pub max_half_size: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            image_size: 128,
            min_instances: 1,
            max_instances: 6,
            max_overlap_iou: 0.3,
            min_half_size: 0.08,
            max_half_size: 0.18,
        }
    }
}

/// Derive an independent seed for item `index` of a run seeded with `seed`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derived_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, index))
}

/// Corpus with the default rendering parameters.
pub fn generate_corpus(num_images: usize, class_count: usize, seed: u64) -> Result<Vec<ImageSample>> {
    generate_corpus_with(&CorpusConfig::default(), num_images, class_count, seed, 0)
}

/// Generate `num_images` images whose ids start at `first_id`.
pub fn generate_corpus_with(
    cfg: &CorpusConfig,
    num_images: usize,
    class_count: usize,
    seed: u64,
    first_id: usize,
) -> Result<Vec<ImageSample>> {
    if class_count < 2 {
        return Err(Error::Config("class_count must be at least 2".into()));
    }
    if class_count > PALETTE.len() {
        return Err(Error::Config(format!(
            "class_count {class_count} exceeds the shape palette size {}",
            PALETTE.len()
        )));
    }
    if cfg.min_instances == 0 || cfg.min_instances > cfg.max_instances {
        return Err(Error::Config("invalid instance count range".into()));
    }
    if !(0.0 < cfg.min_half_size && cfg.min_half_size <= cfg.max_half_size && cfg.max_half_size < 0.5) {
        return Err(Error::Config("invalid half-size range".into()));
    }
    (0..num_images)
        .map(|i| {
            let id = first_id + i;
            let mut rng = derived_rng(seed, id as u64);
            Ok(render_image(cfg, class_count, id, &mut rng))
        })
        .collect()
}

struct Placed {
    class_id: usize,
    full_count: usize,
    full_box: BBox,
}

fn render_image(cfg: &CorpusConfig, class_count: usize, id: usize, rng: &mut ChaCha8Rng) -> ImageSample {
    let size = cfg.image_size;
    let (height, width) = (size, size);
    let base: i32 = rng.gen_range(10..70);
    let mut pixels: Vec<u8> = (0..height * width * 3)
        .map(|_| (base + rng.gen_range(-8..=8)).clamp(0, 255) as u8)
        .collect();
    // owner[p] = index into `placed` of the instance visible at pixel p
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    let mut placed: Vec<Placed> = Vec::new();

    let target = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut attempts = 0;
    while placed.len() < target && attempts < 40 * target {
        attempts += 1;
        let class_id = rng.gen_range(0..class_count);
        let shape = PALETTE[class_id];
        let half = rng.gen_range(cfg.min_half_size..=cfg.max_half_size) * size as f64;
        let hx = half * rng.gen_range(0.85..1.15);
        let hy = half * rng.gen_range(0.85..1.15);
        let cx = rng.gen_range(hx..(width as f64 - hx));
        let cy = rng.gen_range(hy..(height as f64 - hy));
        let full = shape_mask(shape, cx, cy, hx, hy, height, width);
        let full_count = full.count();
        if full_count < 6 {
            continue;
        }
        let Ok(full_box) = mask_to_box(&full) else { continue };
        if placed.iter().any(|p| iou(&p.full_box, &full_box) > cfg.max_overlap_iou) {
            continue;
        }
        // every earlier instance must keep at least half of its pixels
        let mut lost = vec![0usize; placed.len()];
        for (p, o) in owner.iter().enumerate() {
            if let (Some(j), true) = (o, full.data()[p] != 0) {
                lost[*j] += 1;
            }
        }
        let visible: Vec<usize> = (0..placed.len())
            .map(|j| owner.iter().filter(|o| **o == Some(j)).count())
            .collect();
        if placed
            .iter()
            .enumerate()
            .any(|(j, p)| (visible[j] - lost[j]) * 2 < p.full_count)
        {
            continue;
        }
        let color: [i32; 3] = [rng.gen_range(90..256), rng.gen_range(90..256), rng.gen_range(90..256)];
        let idx = placed.len();
        for (p, &v) in full.data().iter().enumerate() {
            if v != 0 {
                owner[p] = Some(idx);
                for ch in 0..3 {
                    pixels[p * 3 + ch] = (color[ch] + rng.gen_range(-6..=6)).clamp(0, 255) as u8;
                }
            }
        }
        placed.push(Placed {
            class_id,
            full_count,
            full_box,
        });
    }

    let instances = placed
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mask = BinaryMask::from_fn(height, width, |r, c| owner[r * width + c] == Some(j));
            let bbox = mask_to_box(&mask).expect("visible mask retains at least half its pixels");
            Instance {
                class_id: p.class_id,
                bbox,
                mask,
            }
        })
        .collect();
    ImageSample {
        id,
        height,
        width,
        pixels,
        instances,
    }
}

fn shape_mask(shape: Shape, cx: f64, cy: f64, hx: f64, hy: f64, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_fn(height, width, |r, c| {
        let u = (c as f64 + 0.5 - cx) / hx;
        let v = (r as f64 + 0.5 - cy) / hy;
        u.abs() <= 1.0 && v.abs() <= 1.0 && shape.contains(u, v)
    })
}

/// Split a corpus into base-annotated images and a K-shot novel support set.
///
/// Base images keep their pixels but lose every novel annotation. The novel
/// set holds exactly `shots` annotated instances per novel class and no base
/// annotations.
pub fn split_base_novel(
    corpus: &[ImageSample],
    spec: &EpisodeSpec,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("cannot split an empty corpus".into()));
    }
    let base_set = corpus
        .iter()
        .map(|img| ImageSample {
            instances: img
                .instances
                .iter()
                .filter(|i| spec.is_base(i.class_id))
                .cloned()
                .collect(),
            ..img.clone()
        })
        .collect();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut derived_rng(spec.seed, 0x5107));
    let mut taken = vec![0usize; spec.num_novel()];
    let offset = spec.num_base();
    let mut picked: Vec<(usize, ImageSample)> = Vec::new();
    for &idx in &order {
        let img = &corpus[idx];
        let mut instances = Vec::new();
        for inst in &img.instances {
            if spec.is_novel(inst.class_id) && taken[inst.class_id - offset] < spec.shots {
                taken[inst.class_id - offset] += 1;
                instances.push(inst.clone());
            }
        }
        if !instances.is_empty() {
            picked.push((
                idx,
                ImageSample {
                    instances,
                    ..img.clone()
                },
            ));
        }
        if taken.iter().all(|&t| t == spec.shots) {
            break;
        }
    }
    if let Some((k, &available)) = taken.iter().enumerate().find(|(_, &t)| t < spec.shots) {
        return Err(Error::Sampling {
            class_id: offset + k,
            available,
            required: spec.shots,
        });
    }
    picked.sort_by_key(|(idx, _)| *idx);
    Ok((base_set, picked.into_iter().map(|(_, s)| s).collect()))
}
