//! Fixtures shared by the benchmarks.

use hyptimbre::data::{build_corpus, CorpusConfig, FeatureConfig};
use hyptimbre::lorentz::{exp_map, lift_to_tangent, parallel_transport};
use hyptimbre::model::{DecoderInput, LatentConfig};
use hyptimbre::rng::seeded;
use hyptimbre::{Curvature, Dataset, Geometry, ManifoldPoint, Model, ModelConfig, TangentVector};

/// A point at geodesic distance `spread` from the origin and a tangent vector
/// of norm `spread / 2` at that point.
pub fn point_and_tangent(radius: f64, d: usize, spread: f64) -> (ManifoldPoint, TangentVector) {
    let c = Curvature::from_radius(radius).expect("positive radius");
    let dir: Vec<f64> = (0..d).map(|i| ((i + 1) as f64).sin()).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit: Vec<f64> = dir.iter().map(|x| x / norm).collect();
    let scaled = |s: f64| unit.iter().map(|x| s * x).collect::<Vec<_>>();
    let a = exp_map(&lift_to_tangent(&scaled(spread), c));
    let mut w = scaled(0.5 * spread);
    w.rotate_left(1);
    let v = parallel_transport(&lift_to_tangent(&w, c), &a).expect("same manifold");
    (a, v)
}

/// Twelve instruments at six pitches, one rendering each.
pub fn small_corpus() -> Dataset {
    let mut cfg = CorpusConfig {
        variations: 1,
        ..CorpusConfig::default()
    };
    cfg.pitches.truncate(6);
    build_corpus(&cfg, 0).expect("default corpus is valid")
}

pub fn model_for(ds: &Dataset, geometry: Geometry, hidden: &[usize]) -> Model {
    let cfg = ModelConfig {
        latent: LatentConfig {
            dp: 8,
            dt: 4,
            geometry,
            radius: 100.0,
            n_pitch: ds.n_pitch(),
            n_timbre: ds.n_timbre(),
        },
        n_mel: ds.n_mel,
        n_frames: ds.n_frames,
        hidden: hidden.to_vec(),
        decoder_input: DecoderInput::Ambient,
    };
    Model::new(cfg, &mut seeded(0)).expect("valid model config")
}

pub fn desk_features() -> FeatureConfig {
    FeatureConfig::desk()
}
