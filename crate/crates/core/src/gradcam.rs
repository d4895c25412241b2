//! Gradient-weighted class activation maps and heat-map overlays.
//!
//! For target feature maps `A` (channels `k`) and the pre-softmax logit `y_c`:
//! `alpha_k = mean_ij dy_c/dA_kij`, `L = relu(sum_k alpha_k A_k)`, bilinearly
//! upsampled to the input size and divided by its maximum.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::layers::{softmax, Mode};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f32>,
    pub source_layer: String,
}

impl Heatmap {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct GradCam {
    pub heatmap: Heatmap,
    pub class_index: usize,
    pub probabilities: Vec<f32>,
}

/// Names of layers usable as Grad-CAM targets, in model order.
pub fn target_layers<T: Real>(model: &Model<T>) -> Vec<String> {
    model
        .layers()
        .iter()
        .filter(|l| l.spec().is_convolutional())
        .map(|l| l.name().to_string())
        .collect()
}

fn resolve_target<T: Real>(model: &Model<T>, name: Option<&str>) -> Result<usize> {
    let valid = target_layers(model);
    let name = match name {
        Some(n) => n.to_string(),
        None => valid
            .last()
            .cloned()
            .ok_or_else(|| Error::Config("model has no convolutional layer".into()))?,
    };
    match model.layer_index(&name) {
        Some(i) if valid.contains(&name) => Ok(i),
        _ => Err(Error::Config(format!(
            "{name:?} is not a convolutional layer; valid targets: {}",
            valid.join(", ")
        ))),
    }
}

/// Single-channel bilinear resize with half-pixel centres (same convention as image resizing).
fn upsample(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - ax) + src[y0 * w + x1] * ax;
            let bottom = src[y1 * w + x0] * (1.0 - ax) + src[y1 * w + x1] * ax;
            out.push((top * (1.0 - ay) + bottom * ay).max(0.0));
        }
    }
    out
}

/// Heat map of class `class_index` for a single image `x` of shape `[1, C, S, S]`.
///
/// `target` names the feature layer; `None` picks the last convolutional layer.
/// The model is run in evaluation mode and its previous mode is restored.
pub fn grad_cam(model: &mut Model<f32>, x: &Tensor<f32>, class_index: usize, target: Option<&str>) -> Result<GradCam> {
    if x.rank() != 4 || x.shape()[0] != 1 {
        return Err(Error::Shape(format!("grad-cam takes one image [1,C,H,W], got {:?}", x.shape())));
    }
    let classes = model.spec().num_classes;
    if class_index >= classes {
        return Err(Error::Config(format!("class index {class_index} out of range for {classes} classes")));
    }
    let idx = resolve_target(model, target)?;
    let prev = model.mode();
    model.set_mode(Mode::Evaluation);
    let result = (|| {
        let (logits, tapped) = model.forward_with_tap(x, Some(idx))?;
        let a = tapped.expect("tap index is in range");
        let mut seed = vec![0.0f32; classes];
        seed[class_index] = 1.0;
        let da = model.backward_to(&Tensor::from_vec(&[1, classes], seed)?, idx)?;
        Ok::<_, Error>((softmax(&logits)?, a, da))
    })();
    model.set_mode(prev);
    let (probs, a, da) = result?;

    let (_, k, h, w) = a.nchw()?;
    let plane = h * w;
    let mut raw = vec![0.0f32; plane];
    for c in 0..k {
        let grads = &da.data()[c * plane..(c + 1) * plane];
        let alpha = grads.iter().map(|&g| g as f64).sum::<f64>() / plane as f64;
        for (r, &v) in raw.iter_mut().zip(&a.data()[c * plane..(c + 1) * plane]) {
            *r += alpha as f32 * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));

    let (out_h, out_w) = (x.shape()[2], x.shape()[3]);
    let mut values = upsample(&raw, w, h, out_w, out_h);
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(GradCam {
        heatmap: Heatmap {
            width: out_w,
            height: out_h,
            values,
            source_layer: model.layers()[idx].name().to_string(),
        },
        class_index,
        probabilities: probs.data().to_vec(),
    })
}

/// Colour ramp stops from cold (heat 0) to hot (heat 1), RGB in `[0, 255]`.
pub const RAMP: [(f32, [f32; 3]); 5] = [
    (0.0, [72.0, 0.0, 200.0]),
    (0.3, [0.0, 110.0, 255.0]),
    (0.55, [0.0, 210.0, 140.0]),
    (0.8, [255.0, 230.0, 0.0]),
    (1.0, [255.0, 120.0, 0.0]),
];

/// Piecewise-linear lookup in [`RAMP`]; values outside `[0, 1]` are clamped.
pub fn ramp_color(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    for pair in RAMP.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let a = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + (c1[i] - c0[i]) * a);
        }
    }
    RAMP[RAMP.len() - 1].1
}

/// `alpha * ramp(heat) + (1 - alpha) * img`, per pixel.
pub fn overlay(hm: &Heatmap, img: &Image, alpha: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha must be in [0,1], got {alpha}")));
    }
    if img.width() != hm.width || img.height() != hm.height {
        return Err(Error::Shape(format!(
            "heat map is {}x{} but the image is {}x{}",
            hm.width,
            hm.height,
            img.width(),
            img.height()
        )));
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let color = ramp_color(hm.get(x, y));
            for (c, &col) in color.iter().enumerate() {
                out.set(x, y, c, alpha * col + (1.0 - alpha) * img.get(x, y, c));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, Padding};
    use crate::model::ModelSpec;

    /// conv(1x1, one channel, weight 1) -> flatten -> dense with all-ones weights
    /// into class 0 (class 1 gets the negated weights), so `y_0 = sum(A)`.
    fn sum_model(size: usize) -> Model<f32> {
        let spec = ModelSpec {
            input_channels: 1,
            image_size: size,
            num_classes: 2,
            layers: vec![
                LayerSpec::Conv2d {
                    name: "conv".into(),
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: Padding::Valid,
                },
                LayerSpec::Flatten { name: "flat".into() },
                LayerSpec::Dense {
                    name: "fc".into(),
                    in_features: size * size,
                    out_features: 2,
                },
            ],
        };
        let mut m = Model::from_spec(spec, 0).unwrap();
        for (name, p) in m.params_mut() {
            match name.as_str() {
                "conv.weight" => p.value = p.value.map(|_| 1.0),
                "fc.weight" => {
                    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                        *v = if i % 2 == 0 { 1.0 } else { -1.0 };
                    }
                }
                _ => p.value = p.value.map(|_| 0.0),
            }
        }
        m
    }

    fn input(vals: &[f32]) -> Tensor<f32> {
        let s = (vals.len() as f64).sqrt() as usize;
        Tensor::from_vec(&[1, 1, s, s], vals.to_vec()).unwrap()
    }

    #[test]
    fn unit_gradient_reproduces_normalised_activation() {
        let mut m = sum_model(3);
        let a = [0.0, 1.0, 2.0, 4.0, 8.0, 2.0, 1.0, 0.5, 0.0];
        let cam = grad_cam(&mut m, &input(&a), 0, None).unwrap();
        assert_eq!(cam.heatmap.source_layer, "conv");
        for (h, v) in cam.heatmap.values.iter().zip(a) {
            assert!((h - v / 8.0).abs() < 1e-6);
        }
        assert_eq!(cam.heatmap.max(), 1.0);
    }

    #[test]
    fn negative_evidence_gives_zero_map() {
        let mut m = sum_model(3);
        let cam = grad_cam(&mut m, &input(&[1.0; 9]), 1, None).unwrap();
        assert!(cam.heatmap.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_must_be_convolutional() {
        let mut m = sum_model(3);
        let x = input(&[1.0; 9]);
        assert!(matches!(grad_cam(&mut m, &x, 0, Some("fc")), Err(Error::Config(_))));
        let err = grad_cam(&mut m, &x, 0, Some("nope")).unwrap_err().to_string();
        assert!(err.contains("conv"), "{err}");
        assert!(grad_cam(&mut m, &x, 2, None).is_err());
    }

    #[test]
    fn upsampling_constant_is_constant() {
        assert!(upsample(&[0.5; 4], 2, 2, 7, 7).iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn deterministic_and_mode_preserving() {
        let mut m = crate::trainer::build_papernet::<f32>(16, 3).unwrap();
        let x = Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let a = grad_cam(&mut m, &x, 1, None).unwrap();
        let b = grad_cam(&mut m, &x, 1, None).unwrap();
        assert_eq!(a.heatmap, b.heatmap);
        assert_eq!(a.heatmap.source_layer, "sep1");
        assert_eq!(m.mode(), Mode::Training);
        let max = a.heatmap.max();
        assert!(a.heatmap.values.iter().all(|&v| v >= 0.0));
        assert!(max == 0.0 || max == 1.0);
        for t in ["stem", "res1", "dense1"] {
            assert_eq!(grad_cam(&mut m, &x, 0, Some(t)).unwrap().heatmap.values.len(), 256);
        }
    }

    fn heat(width: usize, height: usize, v: f32) -> Heatmap {
        Heatmap {
            width,
            height,
            values: vec![v; width * height],
            source_layer: "x".into(),
        }
    }

    #[test]
    fn overlay_blending() {
        let img = Image::new(2, 1, vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).unwrap();
        assert_eq!(overlay(&heat(2, 1, 0.7), &img, 0.0).unwrap(), img);
        let cold = overlay(&heat(2, 1, 0.0), &img, 1.0).unwrap();
        assert!(cold.pixels().chunks(3).all(|p| p == RAMP[0].1));
        assert_eq!(ramp_color(1.0), RAMP[4].1);
        assert_eq!(ramp_color(0.3), RAMP[1].1);
        assert!(matches!(overlay(&heat(3, 1, 0.0), &img, 0.5), Err(Error::Shape(_))));
        assert!(overlay(&heat(2, 1, 0.0), &img, 1.5).is_err());
    }
}
