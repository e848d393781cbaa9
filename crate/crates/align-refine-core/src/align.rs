//! Alignment data model: RNN-T topology, blank-count timestamps, CTC collapse.
//!
//! An alignment is a frame-level token sequence over `V ∪ {blank}`. Under the
//! RNN-T topology every blank advances the audio frame index by one and every
//! non-blank token emits a label without advancing, so a first-pass alignment
//! against `T` audio frames carries exactly `T` blanks and has length
//! `T + #labels`. Counting blanks before each position recovers the frame
//! index at which each token is emitted.

use alloc::vec::Vec;
use core::fmt;

/// Reserved blank token id in all serialized artifacts.
pub const BLANK: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignError {
    /// Alignments must contain at least one token.
    EmptyAlignment,
    /// Audio length must be >= 1 frame.
    EmptyAudio,
    /// Emission times must be non-decreasing.
    DecreasingTimes { index: usize },
    /// Emission time outside [0, T-1].
    TimeOutOfRange { index: usize, time: usize, audio_len: usize },
    /// labels and emit_times must have equal length.
    LengthMismatch { labels: usize, times: usize },
    /// A label sequence may not contain the blank id.
    BlankInLabels { index: usize },
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::EmptyAlignment => write!(f, "alignment has no tokens"),
            AlignError::EmptyAudio => write!(f, "audio length must be at least 1 frame"),
            AlignError::DecreasingTimes { index } => {
                write!(f, "emit time at index {index} decreases")
            }
            AlignError::TimeOutOfRange { index, time, audio_len } => {
                write!(f, "emit time {time} at index {index} outside [0, {})", audio_len)
            }
            AlignError::LengthMismatch { labels, times } => {
                write!(f, "{labels} labels but {times} emit times")
            }
            AlignError::BlankInLabels { index } => {
                write!(f, "blank id at label index {index}")
            }
        }
    }
}

impl core::error::Error for AlignError {}

/// Frame-level token sequence together with the audio length it was emitted
/// against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    tokens: Vec<u32>,
    audio_len: usize,
    blank_id: u32,
}

impl Alignment {
    /// Alignment with the conventional blank id 0.
    pub fn new(tokens: Vec<u32>, audio_len: usize) -> Result<Self, AlignError> {
        Self::with_blank(tokens, audio_len, BLANK)
    }

    pub fn with_blank(tokens: Vec<u32>, audio_len: usize, blank_id: u32) -> Result<Self, AlignError> {
        if tokens.is_empty() {
            return Err(AlignError::EmptyAlignment);
        }
        if audio_len == 0 {
            return Err(AlignError::EmptyAudio);
        }
        Ok(Alignment { tokens, audio_len, blank_id })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty token sequences
    }

    pub fn audio_len(&self) -> usize {
        self.audio_len
    }

    pub fn blank_id(&self) -> u32 {
        self.blank_id
    }

    pub fn blank_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.blank_id).count()
    }

    /// True iff the alignment is RNN-T valid: exactly T blanks.
    pub fn is_valid_rnnt(&self) -> bool {
        self.blank_count() == self.audio_len
    }

    /// Audio frame index at which each token is emitted: the number of blanks
    /// before the position, clamped to `T - 1`.
    ///
    /// The clamp only engages when an alignment carries more than `T` blanks,
    /// which refined greedy alignments may; it keeps cross-attention windows
    /// inside the audio sequence.
    pub fn timestamps(&self) -> Timestamps {
        let cap = self.audio_len - 1;
        let mut times = Vec::with_capacity(self.tokens.len());
        let mut blanks = 0usize;
        for &tok in &self.tokens {
            times.push(blanks.min(cap));
            if tok == self.blank_id {
                blanks += 1;
            }
        }
        Timestamps { times }
    }

    /// CTC collapse: merge adjacent repeats, then drop blanks.
    pub fn collapse(&self) -> LabelSequence {
        let mut labels = Vec::new();
        let mut prev: Option<u32> = None;
        for &tok in &self.tokens {
            if prev != Some(tok) && tok != self.blank_id {
                labels.push(tok);
            }
            prev = Some(tok);
        }
        LabelSequence { labels }
    }
}

/// Per-token emission frame indices. Non-decreasing with unit steps,
/// starting at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timestamps {
    times: Vec<usize>,
}

impl Timestamps {
    pub fn from_times(times: Vec<usize>) -> Self {
        Timestamps { times }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.times[i]
    }
}

/// Collapsed label sequence: token ids with no blanks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence {
    labels: Vec<u32>,
}

impl LabelSequence {
    pub fn new(labels: Vec<u32>) -> Result<Self, AlignError> {
        if let Some(index) = labels.iter().position(|&l| l == BLANK) {
            return Err(AlignError::BlankInLabels { index });
        }
        Ok(LabelSequence { labels })
    }

    pub fn empty() -> Self {
        LabelSequence { labels: Vec::new() }
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Inverse of [`Alignment::timestamps`] restricted to non-blank positions:
/// builds the RNN-T-valid alignment that emits `labels[i]` at frame
/// `emit_times[i]`.
///
/// Labels sharing an emission time come out consecutively, so
/// `collapse(make_alignment(y, t, T)) == y` whenever `y` has no adjacent
/// repeats at equal times colliding with the collapse rule; for repeat-free
/// `y` the round trip is exact.
pub fn make_alignment(
    labels: &LabelSequence,
    emit_times: &[usize],
    audio_len: usize,
) -> Result<Alignment, AlignError> {
    if audio_len == 0 {
        return Err(AlignError::EmptyAudio);
    }
    if labels.len() != emit_times.len() {
        return Err(AlignError::LengthMismatch { labels: labels.len(), times: emit_times.len() });
    }
    let mut prev = 0usize;
    for (i, &t) in emit_times.iter().enumerate() {
        if t >= audio_len {
            return Err(AlignError::TimeOutOfRange { index: i, time: t, audio_len });
        }
        if t < prev {
            return Err(AlignError::DecreasingTimes { index: i });
        }
        prev = t;
    }

    let mut tokens = Vec::with_capacity(audio_len + labels.len());
    let mut frame = 0usize;
    for (&label, &t) in labels.as_slice().iter().zip(emit_times) {
        while frame < t {
            tokens.push(BLANK);
            frame += 1;
        }
        tokens.push(label);
    }
    while frame < audio_len {
        tokens.push(BLANK);
        frame += 1;
    }
    Alignment::new(tokens, audio_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    // Vocabulary for the "hello world" example: _hello=1, _wor=2, ld=3.
    fn hello_world() -> Alignment {
        Alignment::new(vec![0, 1, 0, 0, 0, 2, 3, 0], 5).unwrap()
    }

    #[test]
    fn timestamps_hello_world() {
        assert_eq!(hello_world().timestamps().as_slice(), &[0, 1, 1, 2, 3, 4, 4, 4]);
    }

    #[test]
    fn timestamps_all_blank() {
        let a = Alignment::new(vec![0, 0, 0], 3).unwrap();
        assert_eq!(a.timestamps().as_slice(), &[0, 1, 2]);
    }

    #[test]
    fn timestamps_clamped_when_blanks_exceed_audio() {
        // Refined greedy alignments may carry more than T blanks; prefix
        // counts [0,0,1,2,3] clamp at T-1 = 1 from position 3 onward.
        let a = Alignment::new(vec![5, 0, 0, 0, 5], 2).unwrap();
        assert_eq!(a.timestamps().as_slice(), &[0, 0, 1, 1, 1]);
    }

    #[test]
    fn empty_alignment_rejected() {
        assert_eq!(Alignment::new(vec![], 3), Err(AlignError::EmptyAlignment));
        assert_eq!(Alignment::new(vec![1], 0), Err(AlignError::EmptyAudio));
    }

    #[test]
    fn collapse_merges_then_drops_blanks() {
        let a = Alignment::new(vec![7, 7, 0, 8], 1).unwrap();
        assert_eq!(a.collapse().as_slice(), &[7, 8]);
    }

    #[test]
    fn collapse_blank_separates_repeats() {
        let a = Alignment::new(vec![7, 0, 7], 1).unwrap();
        assert_eq!(a.collapse().as_slice(), &[7, 7]);
    }

    #[test]
    fn collapse_all_blank_is_empty() {
        let a = Alignment::new(vec![0, 0], 1).unwrap();
        assert_eq!(a.collapse().as_slice(), &[] as &[u32]);
    }

    #[test]
    fn validate_rnnt_counts_blanks() {
        assert!(hello_world().is_valid_rnnt());
        assert!(!Alignment::new(vec![1], 1).unwrap().is_valid_rnnt());
        assert!(Alignment::new(vec![0, 1], 1).unwrap().is_valid_rnnt());
    }

    #[test]
    fn make_alignment_hello_world() {
        let y = LabelSequence::new(vec![1, 2, 3]).unwrap();
        let a = make_alignment(&y, &[1, 4, 4], 5).unwrap();
        assert_eq!(a, hello_world());
    }

    #[test]
    fn make_alignment_empty_labels() {
        let a = make_alignment(&LabelSequence::empty(), &[], 3).unwrap();
        assert_eq!(a.tokens(), &[0, 0, 0]);
    }

    #[test]
    fn make_alignment_shared_time() {
        let y = LabelSequence::new(vec![4, 5]).unwrap();
        let a = make_alignment(&y, &[0, 0], 1).unwrap();
        assert_eq!(a.tokens(), &[4, 5, 0]);
        assert_eq!(a.timestamps().as_slice(), &[0, 0, 0]);
    }

    #[test]
    fn make_alignment_rejects_bad_times() {
        let y = LabelSequence::new(vec![4, 5]).unwrap();
        assert!(matches!(
            make_alignment(&y, &[1, 0], 3),
            Err(AlignError::DecreasingTimes { .. })
        ));
        assert!(matches!(
            make_alignment(&y, &[0, 3], 3),
            Err(AlignError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            make_alignment(&y, &[0], 3),
            Err(AlignError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn timestamps_depend_only_on_blank_positions() {
        // Relabeling non-blank tokens leaves timestamps unchanged; moving a
        // blank changes them.
        let a = Alignment::new(vec![0, 3, 0, 4, 0], 3).unwrap();
        let relabeled = Alignment::new(vec![0, 9, 0, 1, 0], 3).unwrap();
        assert_eq!(a.timestamps(), relabeled.timestamps());
        let moved_blank = Alignment::new(vec![3, 0, 0, 4, 0], 3).unwrap();
        assert_ne!(a.timestamps(), moved_blank.timestamps());
    }

    #[test]
    fn label_sequence_rejects_blank() {
        assert!(matches!(
            LabelSequence::new(vec![1, 0, 2]),
            Err(AlignError::BlankInLabels { index: 1 })
        ));
    }
}
