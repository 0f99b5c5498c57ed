//! White disks on a noisy background, for hermetic training tests.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use lc3net_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

/// Background noise amplitude around a mid-grey level.
const NOISE: f32 = 0.15;

/// `count` square samples of side `size`, each with one bright disk.
pub fn synthetic_disks(count: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s = size as f32;
            let radius = rng.random_range(0.15..0.3) * s;
            let cx = rng.random_range(radius..s - radius);
            let cy = rng.random_range(radius..s - radius);
            let plane = size * size;
            let mask: Vec<f32> = (0..plane)
                .map(|p| {
                    let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
                    ((x - cx).powi(2) + (y - cy).powi(2) <= radius * radius) as u8 as f32
                })
                .collect();
            let mut image = vec![0.0f32; 3 * plane];
            for (k, v) in image.iter_mut().enumerate() {
                let bg = 0.35 + rng.random_range(-NOISE..NOISE);
                *v = if mask[k % plane] == 1.0 { 1.0 } else { bg };
            }
            // Quantized to 8-bit levels.
            image.iter_mut().for_each(|v| *v = (*v * 255.0).round() / 255.0);
            Sample::new(
                Tensor::new(vec![3, size, size], image).expect("sized"),
                Tensor::new(vec![1, size, size], mask).expect("sized"),
                format!("disk_{i:03}"),
            )
            .expect("valid sample")
        })
        .collect()
}

/// Writes samples as `<root>/images/<stem>.png` and `<root>/masks/<stem>.png`.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let (h, w) = s.size();
        let plane = h * w;
        let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            let d = s.image.data();
            image::Rgb([px(d[p]), px(d[plane + p]), px(d[2 * plane + p])])
        });
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([px(s.mask.data()[y as usize * w + x as usize])])
        });
        let ip = images.join(format!("{}.png", s.stem));
        rgb.save(&ip).map_err(|e| Error::Image {
            path: ip.clone(),
            msg: e.to_string(),
        })?;
        let mp = masks.join(format!("{}.png", s.stem));
        gray.save(&mp).map_err(|e| Error::Image {
            path: mp.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}
