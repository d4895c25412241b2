mod common;

use common::{layer_suite, softmax_cce_suite, GRAD_TOL};
use lesionforge::gradcheck::{check_model, random_tensor};
use lesionforge::layers::{LayerSpec, Mode, Padding};
use lesionforge::{Model, ModelSpec};

#[test]
fn every_layer_family_matches_finite_differences() {
    let mut failures = Vec::new();
    for (label, _, report) in layer_suite() {
        if report.max_error() >= GRAD_TOL {
            failures.push(format!("{label}: {:?}", report.worst()));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn fused_softmax_cce_matches_finite_differences() {
    for (label, err) in softmax_cce_suite() {
        assert!(err < GRAD_TOL, "{label}: {err}");
    }
}

#[test]
fn small_model_end_to_end() {
    let spec = ModelSpec {
        input_channels: 2,
        image_size: 6,
        num_classes: 2,
        layers: vec![
            LayerSpec::Conv2d {
                name: "stem".into(),
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::LeakyRelu { name: "act".into(), slope: 0.01 },
            LayerSpec::MaxPool { name: "pool".into(), size: 2, stride: 2 },
            LayerSpec::Residual { name: "res".into(), channels: 3, kernel: 3, slope: 0.01 },
            LayerSpec::Flatten { name: "flat".into() },
            LayerSpec::Dense { name: "fc".into(), in_features: 27, out_features: 4 },
            LayerSpec::BatchNorm { name: "bn".into(), channels: 4, eps: 1e-5, momentum: 0.99 },
            LayerSpec::Dropout { name: "drop".into(), rate: 0.5 },
            LayerSpec::Dense { name: "out".into(), in_features: 4, out_features: 2 },
        ],
    };
    let mut model = Model::<f64>::from_spec(spec, 3).unwrap();
    model.set_mode(Mode::Training);
    let x = random_tensor(&[3, 2, 6, 6], 17).unwrap();
    let report = check_model(&mut model, &x, 5).unwrap();
    assert!(report.max_error() < GRAD_TOL, "{:?}", report.worst());
}
