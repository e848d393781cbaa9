//! Real-time-factor benchmark: wall time per audio second per refinement
//! step, measured on a single thread.

use std::time::Instant;

use align_refine_core::decoder::{refine, ModelParams};
use anyhow::Result;

use crate::corpus::Corpus;

#[derive(Debug, Clone, PartialEq)]
pub struct RtfReport {
    pub utterances: usize,
    pub steps: usize,
    pub audio_seconds: f64,
    pub decode_seconds: f64,
    /// decode_seconds / (audio_seconds * steps)
    pub per_step_rtf: f64,
}

/// Decodes every utterance with `steps` refinement steps on the calling
/// thread and reports wall time per audio second per step. A short warmup
/// pass runs first so allocator and cache effects do not skew the timing.
pub fn rtf_bench(
    params: &ModelParams,
    corpus: &Corpus,
    steps: usize,
    frame_size: f64,
) -> Result<RtfReport> {
    anyhow::ensure!(steps >= 1, "rtf-bench requires steps >= 1");
    anyhow::ensure!(!corpus.is_empty(), "rtf-bench requires a non-empty corpus");

    for cu in corpus.utterances.iter().take(3) {
        let _ = refine(&cu.first_pass, &cu.utt.features, params, steps)
            .map_err(|e| anyhow::anyhow!("{}: {e}", cu.utt.id))?;
    }

    let mut audio_seconds = 0.0;
    let t0 = Instant::now();
    for cu in &corpus.utterances {
        let _ = refine(&cu.first_pass, &cu.utt.features, params, steps)
            .map_err(|e| anyhow::anyhow!("{}: {e}", cu.utt.id))?;
        audio_seconds += cu.utt.features.frames() as f64 * frame_size;
    }
    let decode_seconds = t0.elapsed().as_secs_f64();
    Ok(RtfReport {
        utterances: corpus.len(),
        steps,
        audio_seconds,
        decode_seconds,
        per_step_rtf: decode_seconds / (audio_seconds * steps as f64),
    })
}
