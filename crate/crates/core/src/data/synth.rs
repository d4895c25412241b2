use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Image};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Centre and radius of a generated blob, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobBox {
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
}

impl BlobBox {
    /// Whether the pixel centre `(x, y)` lies in the blob's bounding box.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (x as f32 - self.cx).abs() <= self.r && (y as f32 - self.cy).abs() <= self.r
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Image,
    pub label: usize,
    pub blob: BlobBox,
}

const BLOB_TINT: [f32; 3] = [1.0, 0.72, 0.55];

fn blob_image(label: usize, size: usize, seed: u64, index: usize) -> Result<SynthSample> {
    let mut r = rng::stream(seed, &[purpose::SYNTH, label as u64, index as u64]);
    let s = size as f32;
    let radius = r.random_range(0.15 * s..=0.22 * s);
    let cx = r.random_range(radius..=s - 1.0 - radius);
    let half = s / 2.0;
    let cy = if label == 0 {
        r.random_range(radius..=(half - 1.0 - radius).max(radius))
    } else {
        r.random_range((half + radius).min(s - 1.0 - radius)..=s - 1.0 - radius)
    };
    let background: f32 = r.random_range(15.0..45.0);
    let intensity: f32 = r.random_range(170.0..235.0);
    let noise = Normal::new(0.0f32, 10.0).expect("valid deviation");

    let mut img = Image::filled(size, size, [0.0; 3])?;
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
            let n = noise.sample(&mut r);
            for (c, tint) in BLOB_TINT.iter().enumerate() {
                let v = background + (intensity * tint - background) * cover + n;
                img.set(x, y, c, v.round().clamp(0.0, 255.0));
            }
        }
    }
    Ok(SynthSample {
        image: img,
        label,
        blob: BlobBox { cx, cy, r: radius },
    })
}

/// `n_per_class` images per class: a bright blob on a dark noisy background, in
/// the upper half for label 0 and the lower half for label 1. Pixels are whole
/// numbers in `[0, 255]`, so the images survive 8-bit PNG encoding unchanged.
/// Class 0 samples come first.
pub fn synth_samples(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n_per_class == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image per class".into()));
    }
    if size < 8 {
        return Err(Error::Config(format!("synthetic images must be at least 8 pixels, got {size}")));
    }
    (0..2)
        .flat_map(|label| (0..n_per_class).map(move |i| (label, i)))
        .map(|(label, i)| blob_image(label, size, seed, i))
        .collect()
}

pub fn synth_dataset(n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    Dataset::from_images(synth_samples(n_per_class, size, seed)?.into_iter().map(|s| (s.image, s.label)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let ds = synth_dataset(200, 16, 1).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.counts(), [200, 200]);
        let a = synth_samples(3, 32, 9).unwrap();
        let b = synth_samples(3, 32, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.blob, y.blob);
        }
        assert_ne!(a[0].image, synth_samples(3, 32, 10).unwrap()[0].image);
        assert!(synth_samples(0, 32, 1).is_err());
    }

    #[test]
    fn pixels_are_whole_bytes() {
        let s = synth_samples(2, 32, 4).unwrap();
        for smp in &s {
            assert!(smp.image.pixels().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v)));
            assert_eq!(super::super::Image::from_rgb8(&smp.image.to_rgb8()), smp.image);
        }
    }

    #[test]
    fn blob_sits_in_its_half() {
        for smp in synth_samples(50, 32, 2).unwrap() {
            let in_upper = smp.blob.cy + smp.blob.r <= 16.0;
            let in_lower = smp.blob.cy - smp.blob.r >= 15.0;
            assert!(if smp.label == 0 { in_upper } else { in_lower }, "{:?}", smp.blob);
        }
    }

    fn half_means(img: &Image) -> (f64, f64) {
        let h = img.height() / 2;
        let row_mean = |rows: std::ops::Range<usize>| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for y in rows {
                for x in 0..img.width() {
                    for c in 0..3 {
                        acc += img.get(x, y, c) as f64 / 255.0;
                        n += 1.0;
                    }
                }
            }
            acc / n
        };
        (row_mean(0..h), row_mean(h..img.height()))
    }

    #[test]
    fn class_zero_is_brighter_on_top() {
        let samples = synth_samples(100, 32, 5).unwrap();
        let zeros: Vec<_> = samples.iter().filter(|s| s.label == 0).collect();
        let gap: f64 = zeros
            .iter()
            .map(|s| {
                let (top, bottom) = half_means(&s.image);
                top - bottom
            })
            .sum::<f64>()
            / zeros.len() as f64;
        assert!(gap >= 0.1, "mean gap {gap}");
    }
}
