use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bilinear, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rescale: f64,
    /// Maximum shear magnitude in degrees; the angle is uniform in `[-shear_deg, shear_deg]`.
    pub shear_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum relative zoom; the factor is uniform in `[1 - zoom, 1 + zoom]`.
    pub zoom: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rescale: 1.0 / 255.0,
            shear_deg: 0.2,
            hflip: true,
            vflip: true,
            zoom: 0.2,
        }
    }
}

impl AugmentParams {
    /// Rescaling only; used for validation and evaluation.
    pub fn rescale_only() -> Self {
        Self {
            shear_deg: 0.0,
            hflip: false,
            vflip: false,
            zoom: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rescale > 0.0) {
            return Err(Error::Config(format!("rescale must be positive, got {}", self.rescale)));
        }
        if !(self.shear_deg >= 0.0) {
            return Err(Error::Config(format!("shear must be non-negative, got {}", self.shear_deg)));
        }
        if !(0.0..1.0).contains(&self.zoom) {
            return Err(Error::Config(format!("zoom must be in [0,1), got {}", self.zoom)));
        }
        Ok(())
    }
}

/// Rescale, shear, horizontal flip, vertical flip, zoom, in that order.
///
/// Exactly four uniforms are drawn from `rng` per call, in the order
/// shear, hflip, vflip, zoom, whether or not each step is enabled.
pub fn augment<R: Rng + ?Sized>(img: &Image, p: &AugmentParams, rng: &mut R) -> Image {
    let u_shear: f64 = rng.random();
    let u_hflip: f64 = rng.random();
    let u_vflip: f64 = rng.random();
    let u_zoom: f64 = rng.random();

    let mut out = rescale(img, p.rescale);

    let angle = (2.0 * u_shear - 1.0) * p.shear_deg;
    if angle != 0.0 {
        out = shear(&out, angle);
    }
    if p.hflip && u_hflip < 0.5 {
        out = hflip(&out);
    }
    if p.vflip && u_vflip < 0.5 {
        out = vflip(&out);
    }
    let factor = 1.0 + (2.0 * u_zoom - 1.0) * p.zoom;
    if factor != 1.0 {
        out = zoom(&out, factor);
    }
    out
}

/// Multiplies every channel value by `factor`, rounding through f64.
pub fn rescale(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    out.pixels_mut().iter_mut().for_each(|v| *v = (*v as f64 * factor) as f32);
    out
}

/// Horizontal shear by `angle_deg` about the image centre (positive is anticlockwise).
///
/// Row `y` samples source column `x - tan(angle) * (y - cy)`, replicating edges, so a
/// vertical line tilts its top to the left on screen for a positive angle.
pub fn shear(img: &Image, angle_deg: f64) -> Image {
    let t = angle_deg.to_radians().tan() as f32;
    let cy = (img.height() as f32 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        let dx = t * (y as f32 - cy);
        for x in 0..img.width() {
            for c in 0..3 {
                out.set(x, y, c, bilinear(img, x as f32 - dx, y as f32, c));
            }
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w {
            for c in 0..3 {
                out.set(x, y, c, img.get(w - 1 - x, y, c));
            }
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let mut out = img.clone();
    let h = img.height();
    for y in 0..h {
        for x in 0..img.width() {
            for c in 0..3 {
                out.set(x, y, c, img.get(x, h - 1 - y, c));
            }
        }
    }
    out
}

/// Zoom by `factor` about the centre: values above 1 crop in, below 1 shrink with edge replication.
pub fn zoom(img: &Image, factor: f64) -> Image {
    let inv = (1.0 / factor) as f32;
    let cx = (img.width() as f32 - 1.0) / 2.0;
    let cy = (img.height() as f32 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        let sy = cy + (y as f32 - cy) * inv;
        for x in 0..img.width() {
            let sx = cx + (x as f32 - cx) * inv;
            for c in 0..3 {
                out.set(x, y, c, bilinear(img, sx, sy, c));
            }
        }
    }
    out
}
