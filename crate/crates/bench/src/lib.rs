//! Fixtures shared by the benchmarks.

use mrecg_core::model_io::{generate_calibration, generate_synthetic_model, Distribution, SynthConfig};
use mrecg_core::{CalibrationSet, ModelGraph, ReconConfig};

/// The 8-block bottleneck model and a matching calibration set.
pub fn bottleneck_fixture(channels: usize, hw: usize) -> (ModelGraph, CalibrationSet) {
    let g = generate_synthetic_model(&SynthConfig {
        num_blocks: 8,
        channels,
        bottleneck_at: Some(5),
        input_hw: hw,
        seed: 0,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config");
    let c = generate_calibration(g.input_shape, 32, 16, Distribution::Gaussian, 1).expect("valid calibration shape");
    (g, c)
}

/// A short reconstruction run.
pub fn quick_config(iterations: usize) -> ReconConfig {
    ReconConfig {
        iterations,
        ..ReconConfig::default()
    }
}
