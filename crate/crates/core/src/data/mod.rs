//! Image/mask ingestion, paired augmentation and batching.

pub mod synthetic;

use std::path::{Path, PathBuf};

use lc3net_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::dataset::images_by_stem;
use crate::model::INPUT_MULTIPLE;

pub use synthetic::{synthetic_disks, write_dataset};

/// An RGB image in `[0, 1]` (`3×H×W`) with its binary mask (`1×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub stem: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor, stem: impl Into<String>) -> Result<Self> {
        let s = Self {
            image,
            mask,
            stem: stem.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    fn validate(&self) -> Result<()> {
        let (is, ms) = (self.image.shape(), self.mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::Dataset(format!(
                "{}: image shape {is:?} and mask shape {ms:?} do not form a pair",
                self.stem
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("{}: mask is not binary", self.stem)));
        }
        Ok(())
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads an image as `3×H×W` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let plane = w * h;
    Ok(Tensor::from_fn(vec![3, h, w], |i| raw[(i % plane) * 3 + i / plane] as f32 / 255.0))
}

/// Reads a mask, binarizing grey levels at 128.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::Image {
            path: mask_path.to_path_buf(),
            msg: format!(
                "mask is {}x{} but image {} is {}x{}",
                mask.shape()[1],
                mask.shape()[2],
                image_path.display(),
                image.shape()[1],
                image.shape()[2]
            ),
        });
    }
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    Sample::new(image, mask, stem)
}

/// Stem-matched `images/` and `masks/` files under a dataset root.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub entries: Vec<(String, PathBuf, PathBuf)>,
}

impl DatasetIndex {
    pub fn open(root: &Path) -> Result<Self> {
        let images = images_by_stem(&root.join("images"))?;
        let masks = images_by_stem(&root.join("masks"))?;
        let mut entries = Vec::with_capacity(images.len());
        for (stem, image) in images {
            let mask = masks
                .get(&stem)
                .ok_or_else(|| Error::Dataset(format!("no mask for image {}", image.display())))?;
            entries.push((stem, image, mask.clone()));
        }
        if let Some(stem) = masks.keys().find(|s| !entries.iter().any(|(e, _, _)| e == *s)) {
            return Err(Error::Dataset(format!("mask {stem} has no image")));
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!("no images under {}", root.join("images").display())));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let (_, image, mask) = &self.entries[index];
        load_pair(image, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Smallest crop side as a fraction of the source side.
    pub crop_min_scale: f64,
    pub scale_set: Vec<f64>,
    pub train_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_min_scale: 0.75,
            scale_set: vec![0.75, 1.0, 1.25],
            train_size: 352,
        }
    }
}

impl AugmentConfig {
    /// Resize only: no flips, no crops, a single scale.
    pub fn disabled(train_size: usize) -> Self {
        Self {
            flip_prob: 0.0,
            crop_min_scale: 1.0,
            scale_set: vec![1.0],
            train_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return Err(Error::Config(format!("crop_min_scale {} outside (0, 1]", self.crop_min_scale)));
        }
        if self.scale_set.is_empty() || self.scale_set.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("scale_set {:?} must be non-empty and positive", self.scale_set)));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        Ok(())
    }

    /// Output side for a scale: `scale × train_size` rounded to a multiple of 32.
    pub fn target_size(&self, scale: f64) -> usize {
        let m = INPUT_MULTIPLE as f64;
        let k = (scale * self.train_size as f64 / m).round().max(1.0);
        k as usize * INPUT_MULTIPLE
    }

    pub fn draw_scale(&self, rng: &mut impl Rng) -> f64 {
        self.scale_set[rng.random_range(0..self.scale_set.len())]
    }
}

/// Geometric parameters of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// Crop rectangle `(top, left, height, width)` in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub target: usize,
}

impl Transform {
    pub fn draw(cfg: &AugmentConfig, (h, w): (usize, usize), target: usize, rng: &mut impl Rng) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let side = if cfg.crop_min_scale < 1.0 {
            let lo = cfg.crop_min_scale * cfg.crop_min_scale;
            rng.random_range(lo..=1.0f64).sqrt()
        } else {
            1.0
        };
        let ch = ((side * h as f64).round() as usize).clamp(1, h);
        let cw = ((side * w as f64).round() as usize).clamp(1, w);
        let top = if ch < h { rng.random_range(0..=h - ch) } else { 0 };
        let left = if cw < w { rng.random_range(0..=w - cw) } else { 0 };
        Self {
            flip,
            crop: (top, left, ch, cw),
            target,
        }
    }

    /// Applies crop, flip and nearest-neighbour resize to a `C×H×W` tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (c, w) = (x.shape()[0], x.shape()[2]);
        let h = x.shape()[1];
        let (top, left, ch, cw) = self.crop;
        let t = self.target;
        let src = x.data();
        let rows: Vec<usize> = (0..t).map(|i| top + nearest(i, t, ch)).collect();
        let cols: Vec<usize> = (0..t)
            .map(|j| {
                let j = if self.flip { t - 1 - j } else { j };
                left + nearest(j, t, cw)
            })
            .collect();
        let mut out = Vec::with_capacity(c * t * t);
        for k in 0..c {
            let plane = &src[k * h * w..(k + 1) * h * w];
            for &r in &rows {
                out.extend(cols.iter().map(|&cc| plane[r * w + cc]));
            }
        }
        Tensor::new(vec![c, t, t], out).expect("sized by construction")
    }
}

/// Source index sampled by output index `i` of `out` when resizing from `src`.
fn nearest(i: usize, out: usize, src: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / out as f64).floor() as usize).min(src - 1)
}

/// Augments `s` at an explicit output size.
pub fn augment_to(s: &Sample, cfg: &AugmentConfig, target: usize, rng: &mut impl Rng) -> Sample {
    let tf = Transform::draw(cfg, s.size(), target, rng);
    Sample {
        image: tf.apply(&s.image),
        mask: tf.apply(&s.mask),
        stem: s.stem.clone(),
    }
}

/// Augments `s`, drawing the output scale from `cfg.scale_set`.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let target = cfg.target_size(cfg.draw_scale(rng));
    augment_to(s, cfg, target, rng)
}

/// Resizes without any random transform (used for inference inputs).
pub fn resize_image(x: &Tensor, size: usize) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    Transform {
        flip: false,
        crop: (0, 0, h, w),
        target: size,
    }
    .apply(x)
}

/// Stacks samples into `N×3×H×W` images and `N×1×H×W` masks.
pub fn make_batch(samples: &[Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    if let Some(s) = samples.iter().find(|s| s.size() != first.size()) {
        return Err(Error::Dataset(format!(
            "batch mixes sizes {:?} ({}) and {:?} ({})",
            first.size(),
            first.stem,
            s.size(),
            s.stem
        )));
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Independent generator for one `(seed, epoch, index, purpose)` tuple.
pub fn derived_rng(seed: u64, epoch: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    for (i, v) in [seed, epoch, index, purpose].into_iter().enumerate() {
        bytes[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let image = Tensor::from_fn(vec![3, h, w], |i| (i % 251) as f32 / 251.0);
        let mask = Tensor::from_fn(vec![1, h, w], |i| ((i / w + i % w) % 2) as f32);
        Sample::new(image, mask, "s").unwrap()
    }

    #[test]
    fn target_sizes() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.target_size(1.0), 352);
        assert_eq!(cfg.target_size(0.75), 256);
        assert_eq!(cfg.target_size(1.25), 448);
        assert_eq!(cfg.target_size(0.01), 32);
    }

    #[test]
    fn min_scale_crop_is_264() {
        let cfg = AugmentConfig {
            crop_min_scale: 0.75,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut smallest = 352;
        for _ in 0..2000 {
            let tf = Transform::draw(&cfg, (352, 352), 352, &mut rng);
            smallest = smallest.min(tf.crop.2);
            assert!(tf.crop.2 >= 264 && tf.crop.0 + tf.crop.2 <= 352);
        }
        assert!(smallest < 270);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(32, 32);
        let tf = Transform {
            flip: true,
            crop: (0, 0, 32, 32),
            target: 32,
        };
        assert_eq!(tf.apply(&tf.apply(&s.image)), s.image);
    }

    #[test]
    fn batching() {
        let (x, y) = make_batch(&[sample(8, 8), sample(8, 8)]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        assert_eq!(make_batch(&[sample(8, 8)]).unwrap().0.shape(), &[1, 3, 8, 8]);
        assert!(make_batch(&[sample(8, 8), sample(4, 4)]).is_err());
        assert!(make_batch(&[]).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived_rng(1, 0, 0, 0).random();
        let b: u64 = derived_rng(1, 0, 1, 0).random();
        let c: u64 = derived_rng(1, 0, 0, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
