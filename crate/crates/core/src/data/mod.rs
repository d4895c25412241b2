//! Images, the class-per-directory dataset layout, splitting and batch streaming.

mod augment;
mod batch;
mod synth;

pub use augment::{augment, hflip, rescale, shear, vflip, zoom, AugmentParams};
pub use batch::{collect_batches, for_each_batch, input_tensor, one_hot, worker_count, Batch, BatchConfig, THREADS_ENV};
pub use synth::{synth_dataset, synth_samples, BlobBox, SynthSample};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Class directory names, in label order.
pub const CLASS_NAMES: [&str; 2] = ["benign", "malignant"];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Row-major RGB image with `f32` channel values, `[0, 255]` when decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Decodes a PNG or JPEG file; any alpha channel is dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Rounds and clamps to 8 bits per channel.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size checked at construction")
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: PathBuf::from("<memory>"),
                source,
            })?;
        Ok(out.into_inner())
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Bilinear resize to `size x size` with half-pixel centres and clamped borders.
pub fn resize(img: &Image, size: usize) -> Result<Image> {
    if size == 0 {
        return Err(Error::Config("resize target must be at least 1 pixel".into()));
    }
    if img.width == size && img.height == size {
        return Ok(img.clone());
    }
    let sx = img.width as f32 / size as f32;
    let sy = img.height as f32 / size as f32;
    let mut out = Image::filled(size, size, [0.0; 3])?;
    for y in 0..size {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        for x in 0..size {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            for c in 0..3 {
                out.set(x, y, c, bilinear(img, fx, fy, c));
            }
        }
    }
    Ok(out)
}

/// Samples channel `c` at a real position, replicating edge pixels outside the image.
#[inline]
pub(crate) fn bilinear(img: &Image, fx: f32, fy: f32, c: usize) -> f32 {
    let fx = fx.clamp(0.0, (img.width - 1) as f32);
    let fy = fy.clamp(0.0, (img.height - 1) as f32);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
    let (p00, p10, p01, p11) = (img.get(x0, y0, c), img.get(x1, y0, c), img.get(x0, y1, c), img.get(x1, y1, c));
    let top = p00 * (1.0 - ax) + p10 * ax;
    let bottom = p01 * (1.0 - ax) + p11 * ax;
    // Clamp away rounding overshoot so the result stays inside the corner range.
    let lo = p00.min(p10).min(p01).min(p11);
    let hi = p00.max(p10).max(p01).max(p11);
    (top * (1.0 - ay) + bottom * ay).max(lo).min(hi)
}

#[derive(Debug, Clone)]
pub enum Source {
    File(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: Source,
    pub label: usize,
}

impl Sample {
    pub fn load(&self) -> Result<Image> {
        match &self.source {
            Source::File(p) => Image::open(p),
            Source::Memory(img) => Ok((**img).clone()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Files that looked like images but could not be read.
    pub skipped: usize,
}

impl Dataset {
    pub fn from_images(items: impl IntoIterator<Item = (Image, usize)>) -> Result<Self> {
        let mut samples = Vec::new();
        for (img, label) in items {
            check_label(label)?;
            samples.push(Sample {
                source: Source::Memory(Arc::new(img)),
                label,
            });
        }
        Ok(Self { samples, skipped: 0 })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Samples per class, in label order.
    pub fn counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            skipped: 0,
        }
    }
}

fn check_label(label: usize) -> Result<()> {
    if label >= CLASS_NAMES.len() {
        return Err(Error::Label(format!("label {label} is not 0 or 1")));
    }
    Ok(())
}

/// Uses `root/<split>` when it exists, otherwise `root` itself.
pub fn resolve_split_dir(root: &Path, split: &str) -> PathBuf {
    let nested = root.join(split);
    if nested.join(CLASS_NAMES[0]).is_dir() || nested.join(CLASS_NAMES[1]).is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Reads `root/benign` and `root/malignant`, sorted by path.
///
/// Files whose header cannot be parsed are skipped with a warning and counted in
/// [`Dataset::skipped`]. Pixels are decoded lazily when batches are built.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Layout(format!("missing class directory {}", dir.display())));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        paths.sort();
        for path in paths {
            let readable = image::ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match readable {
                Ok(_) => ds.samples.push(Sample {
                    source: Source::File(path),
                    label,
                }),
                Err(e) => {
                    log::warn!("skipping undecodable image {}: {e}", path.display());
                    ds.skipped += 1;
                }
            }
        }
    }
    let [b, m] = ds.counts();
    log::info!(
        "loaded {} images from {} ({}: {b}, {}: {m}, skipped: {})",
        ds.len(),
        root.display(),
        CLASS_NAMES[0],
        CLASS_NAMES[1],
        ds.skipped
    );
    Ok(ds)
}

/// Stratified split; each class contributes `round(n_c * val_fraction)` validation
/// samples (at least one, leaving at least one for training). Both halves keep
/// dataset order.
pub fn train_val_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must be in (0,1), got {val_fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == label).collect();
        if idx.len() < 2 {
            return Err(Error::Split(format!(
                "class {class} has {} samples; at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[purpose::SPLIT, label as u64]));
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}
