//! Shared inputs for the benchmarks.

use kfs_core::data::{synth_generate, SynthSpec, Tone, Window};
use kfs_core::gradcheck::fixture;
use kfs_core::model::{KfsConfig, KfsModel};
use kfs_core::Result;

/// One noisy channel of `len` samples with three tones.
pub fn noisy_signal(len: usize, seed: u64) -> Result<Vec<f64>> {
    let tone = |bin: f64, amplitude: f64| Tone {
        bin,
        amplitude,
        phases: vec![0.4],
    };
    let spec = SynthSpec {
        length: len,
        channels: 1,
        tones: vec![tone(len as f64 / 24.0, 1.0), tone(len as f64 / 12.0, 0.6), tone(3.0, 0.8)],
        sigma: 0.3,
        seed,
        start: Default::default(),
        step_minutes: 60,
    };
    let (values, _) = synth_generate(&spec)?;
    Ok(values.into_data())
}

/// A default-width model with `batch` random windows.
pub fn model_fixture(lookback: usize, horizon: usize, channels: usize, batch: usize) -> Result<(KfsModel, Vec<Window>)> {
    let cfg = KfsConfig {
        lookback,
        horizon,
        channels,
        ..KfsConfig::default()
    };
    fixture(cfg, 1, batch)
}
