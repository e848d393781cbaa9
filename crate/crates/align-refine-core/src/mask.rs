//! Attention masks for the streaming decoder.
//!
//! Three masks drive the architecture: a band over token positions for
//! alignment self-attention, a band over audio frames for audio
//! self-attention, and a timestamp-centered window for the time-aligned
//! cross-attention. All three are contiguous per-query windows, so a mask is
//! stored as one key range per query row; disallowed keys are structurally
//! excluded from attention rather than masked with -inf, which makes the
//! streaming-causality guarantee exact in floating point.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::align::Timestamps;

/// Per-layer attention context: `left` tokens/frames of history (None =
/// unbounded) and `right` tokens/frames of lookahead. `right` is always
/// finite; offline behavior is expressed by setting it to the sequence
/// length, not by a special code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub left: Option<usize>,
    pub right: usize,
}

impl MaskSpec {
    pub fn new(left: Option<usize>, right: usize) -> Self {
        MaskSpec { left, right }
    }

    /// Unbounded history, no lookahead: the standard causal mask.
    pub fn causal() -> Self {
        MaskSpec { left: None, right: 0 }
    }
}

/// Boolean query x key admissibility matrix. Every row is a non-empty
/// contiguous range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    num_keys: usize,
    rows: Vec<Range<usize>>,
}

impl AttentionMask {
    pub fn num_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    /// Key range admissible for query `q`.
    pub fn row_span(&self, q: usize) -> Range<usize> {
        self.rows[q].clone()
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.rows[q].contains(&k)
    }

    /// Mask admitting every key for every query (offline configuration).
    pub fn all_allow(num_queries: usize, num_keys: usize) -> Self {
        assert!(num_keys >= 1, "mask rows must be non-empty");
        AttentionMask { num_keys, rows: (0..num_queries).map(|_| 0..num_keys).collect() }
    }

    /// ASCII grid: one row per query, `#` allowed, `.` disallowed.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * (self.num_keys + 1));
        for row in &self.rows {
            for k in 0..self.num_keys {
                out.push(if row.contains(&k) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    fn from_rows(num_keys: usize, rows: Vec<Range<usize>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.start < r.end && r.end <= num_keys));
        AttentionMask { num_keys, rows }
    }
}

/// Band mask over positions: query `i` attends keys
/// `[max(0, i-left), min(n-1, i+right)]`.
pub fn band_self_mask(n: usize, spec: &MaskSpec) -> AttentionMask {
    assert!(n >= 1);
    let rows = (0..n)
        .map(|i| {
            let start = match spec.left {
                Some(left) => i.saturating_sub(left),
                None => 0,
            };
            let end = i.saturating_add(spec.right).saturating_add(1).min(n);
            start..end
        })
        .collect();
    AttentionMask::from_rows(n, rows)
}

/// Time-aligned cross-attention mask: alignment position `i`, emitted at
/// frame `times[i]`, attends audio frames
/// `[max(0, times[i]-left), min(T-1, times[i]+right)]`.
pub fn time_aligned_cross_mask(
    times: &Timestamps,
    audio_len: usize,
    spec: &MaskSpec,
) -> AttentionMask {
    assert!(audio_len >= 1);
    let rows = times
        .as_slice()
        .iter()
        .map(|&t| {
            assert!(t < audio_len, "timestamp {t} out of range for {audio_len} frames");
            let start = match spec.left {
                Some(left) => t.saturating_sub(left),
                None => 0,
            };
            let end = t.saturating_add(spec.right).saturating_add(1).min(audio_len);
            start..end
        })
        .collect();
    AttentionMask::from_rows(audio_len, rows)
}
