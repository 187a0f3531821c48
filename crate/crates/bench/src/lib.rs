//! Benchmark fixtures.

use labelmig::forest::FeatureMatrix;
use labelmig::synth::{generate, SynthConfig, SynthScene};

/// Synthetic scene from the named preset.
pub fn scene(preset: &str, seed: u64) -> SynthScene {
    generate(&SynthConfig::preset(preset, seed).expect("known preset")).expect("preset generates")
}

/// t0 spectra and labels at the scene's reference points.
pub fn training_set(scene: &SynthScene) -> (FeatureMatrix, Vec<u32>) {
    let w = scene.t0.width();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for p in scene.samples.points() {
        let (c, r) = scene
            .t0
            .transform()
            .pixel_of(p.x, p.y, w, scene.t0.height())
            .expect("points lie on the scene");
        rows.push(scene.t0.pixel(r * w + c).into_iter().map(f64::from).collect::<Vec<_>>());
        labels.push(p.label_t0);
    }
    (FeatureMatrix::from_rows(&rows).expect("rectangular"), labels)
}
