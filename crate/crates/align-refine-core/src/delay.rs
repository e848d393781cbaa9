//! Model delay and receptive-field arithmetic.
//!
//! Per-layer right context `C` accumulates with the effective depth `D` of
//! the attention stack: `D = L` when cross-attention reads raw encoder
//! frames, and `D = L + 1` when a parallel audio self-attention stack (with
//! its bottom layer present) adds one more stage. One refinement step then
//! waits for `D * C` future frames, i.e. `D * C * f` seconds of audio, and
//! inference with `S` steps multiplies that by `S`. Left context never
//! contributes to delay.

/// Delay-relevant decoder configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayConfig {
    /// Number of transformer layers L.
    pub layers: usize,
    /// Per-layer right context C, in frames.
    pub right_per_layer: usize,
    /// Decoder frame size f, in seconds.
    pub frame_size: f64,
    /// Whether the parallel audio self-attention stack is present.
    pub audio_self_attention: bool,
    /// Refinement steps S performed at inference.
    pub steps: usize,
}

impl DelayConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.layers == 0 {
            return Err("layers must be >= 1");
        }
        if !(self.frame_size > 0.0) {
            return Err("frame size must be positive");
        }
        if self.steps == 0 {
            return Err("steps must be >= 1");
        }
        Ok(())
    }
}

/// Number of attention stages whose right contexts accumulate into delay.
pub fn effective_depth(cfg: &DelayConfig) -> usize {
    cfg.layers + usize::from(cfg.audio_self_attention)
}

/// Model delay per refinement step, in seconds: `D * C * f`.
pub fn model_delay(cfg: &DelayConfig) -> f64 {
    effective_depth(cfg) as f64 * cfg.right_per_layer as f64 * cfg.frame_size
}

/// Total inference delay: `steps` times the per-step delay.
pub fn total_delay(cfg: &DelayConfig) -> f64 {
    cfg.steps as f64 * model_delay(cfg)
}

/// Maximum future audio-frame offset (relative to a query's timestamp) that
/// can influence its output within one refinement step: `D * C`.
pub fn receptive_bound(cfg: &DelayConfig) -> usize {
    effective_depth(cfg) * cfg.right_per_layer
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, right: usize, frame: f64, audio_sa: bool, steps: usize) -> DelayConfig {
        DelayConfig { layers, right_per_layer: right, frame_size: frame, audio_self_attention: audio_sa, steps }
    }

    #[test]
    fn per_step_delay_without_audio_sa() {
        for (c, want) in [(1, 0.36), (2, 0.72), (5, 1.80)] {
            let d = model_delay(&cfg(6, c, 0.06, false, 1));
            assert!((d - want).abs() < 1e-9, "C={c}: {d} != {want}");
        }
    }

    #[test]
    fn per_step_delay_with_audio_sa() {
        for (c, want) in [(1, 0.42), (2, 0.84), (5, 2.10)] {
            let d = model_delay(&cfg(6, c, 0.06, true, 1));
            assert!((d - want).abs() < 1e-9, "C={c}: {d} != {want}");
        }
    }

    #[test]
    fn zero_right_context_means_zero_delay() {
        assert_eq!(model_delay(&cfg(11, 0, 0.06, true, 3)), 0.0);
    }

    #[test]
    fn total_delay_scales_with_steps() {
        let d = total_delay(&cfg(6, 5, 0.06, true, 2));
        assert!((d - 4.20).abs() < 1e-9);
    }

    #[test]
    fn receptive_bounds() {
        assert_eq!(receptive_bound(&cfg(6, 2, 0.06, false, 1)), 12);
        assert_eq!(receptive_bound(&cfg(3, 1, 0.06, true, 1)), 4);
        assert_eq!(receptive_bound(&cfg(4, 0, 0.06, true, 1)), 0);
    }

    #[test]
    fn validation() {
        assert!(cfg(0, 1, 0.06, false, 1).validate().is_err());
        assert!(cfg(1, 1, 0.0, false, 1).validate().is_err());
        assert!(cfg(1, 1, 0.06, false, 0).validate().is_err());
        assert!(cfg(1, 0, 0.06, false, 1).validate().is_ok());
    }
}
