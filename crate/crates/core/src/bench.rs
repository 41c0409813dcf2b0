//! Wall-clock measurement of live forwards.
//!
//! Timings use the minimum over repeats, the most noise-resistant point
//! estimate for a deterministic computation.

use std::time::Instant;

use crate::backbone::{forward, patch_embed, ModelConfig, SelectionConfig, SelectiveVit};
use crate::error::Result;
use crate::io::{synthetic_guidance, synthetic_image};
use crate::select::GuidanceSource;

/// Minimum wall-clock seconds of one forward over `repeats` trials after
/// `warmup` unmeasured runs.
pub fn measure_forward_secs(
    model: &SelectiveVit<f64>,
    seq: &crate::select::TokenSequence<f64>,
    guidance: Option<&crate::tensor::Tensor<f64>>,
    warmup: usize,
    repeats: usize,
) -> Result<f64> {
    for _ in 0..warmup {
        forward(model, seq, guidance)?;
    }
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = forward(model, seq, guidance)?;
        let secs = start.elapsed().as_secs_f64();
        std::hint::black_box(&out);
        best = best.min(secs);
    }
    Ok(best)
}

/// Result of a selection-vs-baseline timing run.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub baseline_secs: f64,
    pub selected_secs: f64,
    /// baseline / selected; above one means selection is faster.
    pub speedup: f64,
    pub warmup: usize,
    pub repeats: usize,
}

/// Times the configured model against the same model with selection
/// disabled, on identical synthetic inputs.
pub fn bench_selection(config: &ModelConfig, warmup: usize, repeats: usize) -> Result<BenchReport> {
    let selected_model = SelectiveVit::<f64>::seeded(config.clone())?;
    let baseline_model = SelectiveVit::<f64>::seeded(ModelConfig {
        selection: SelectionConfig::none(),
        ..config.clone()
    })?;
    let image = synthetic_image(config.image_size, config.seed ^ 0x1);
    let guidance_tensor = synthetic_guidance(config.width, config.seed ^ 0x2);
    let guidance = match config.mode.source {
        GuidanceSource::TextCls if !config.mode.disable_td_att => Some(&guidance_tensor),
        _ => None,
    };

    let seq = patch_embed(&image, &selected_model)?;
    let selected_secs = measure_forward_secs(&selected_model, &seq, guidance, warmup, repeats)?;
    let seq = patch_embed(&image, &baseline_model)?;
    let baseline_secs = measure_forward_secs(&baseline_model, &seq, guidance, warmup, repeats)?;

    Ok(BenchReport {
        baseline_secs,
        selected_secs,
        speedup: baseline_secs / selected_secs,
        warmup,
        repeats,
    })
}
