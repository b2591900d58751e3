//! Interchange models written by an independent exporter (PyTorch), checked
//! against the features PyTorch itself computed. Regenerate the fixture with
//! `tests/fixtures/make_torch_fixture.py`.

use std::path::PathBuf;

use image::{Rgb, RgbImage};
use microfossil::backbone::BackboneHandle;
use microfossil::imaging::SpecimenImage;
use serde::Deserialize;

#[derive(Deserialize)]
struct Reference {
    shape: Vec<usize>,
    sum: f64,
    indices: Vec<usize>,
    values: Vec<f64>,
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// The procedural image the fixture script feeds to PyTorch.
fn pattern() -> SpecimenImage {
    let img = RgbImage::from_fn(224, 224, |x, y| {
        Rgb([0u32, 1, 2].map(|c| ((x * 7 + y * 13 + c * 29) % 256) as u8))
    });
    SpecimenImage::new(img, "pattern", (112.0, 112.0)).unwrap()
}

#[test]
fn torch_export_matches_torch_features() {
    let reference: Reference =
        serde_json::from_slice(&std::fs::read(fixture("torch_conv_stack.json")).unwrap()).unwrap();
    let handle = BackboneHandle::pretrained(&fixture("torch_conv_stack.onnx")).unwrap();
    let features = handle.features(&pattern()).unwrap();
    assert_eq!(features.len(), reference.shape.iter().product::<usize>());
    assert_eq!(features.len(), 25088);
    // PyTorch ran in float32; the weights are float32 either way.
    for (&i, &want) in reference.indices.iter().zip(&reference.values) {
        let got = features[i];
        assert!(
            (got - want).abs() <= 1e-4 * want.abs().max(1.0),
            "feature {i}: {got} vs {want}"
        );
    }
    let sum: f64 = features.iter().sum();
    assert!(
        (sum - reference.sum).abs() <= 1e-5 * reference.sum.abs(),
        "sum {sum} vs {}",
        reference.sum
    );
    assert!(
        reference.values.iter().any(|&v| v > 0.0),
        "reference features are all zero"
    );
}
