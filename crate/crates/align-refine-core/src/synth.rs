//! Synthetic utterance generator and first-pass simulator.
//!
//! Stands in for a production first-pass recognizer: reference labels are
//! drawn from a seeded distribution, each label holds a run of frames whose
//! features are a fixed per-label embedding plus Gaussian noise, and the
//! gold alignment emits each label at the last frame of its run. A separate
//! corruption pass turns gold alignments into "first-pass hypotheses" with
//! controllable substitution/deletion/insertion statistics; blanks are never
//! touched, so corrupted alignments stay RNN-T valid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::align::{make_alignment, Alignment, LabelSequence, BLANK};
use crate::decoder::EncoderOutput;
use crate::mwer::{edit_distance, MwerError};
use crate::rng::{derive_seed, DetRng};
use crate::tensor::Tensor;

/// Seed namespace for the fixed label-embedding table; independent of corpus
/// seeds so every corpus shares the same feature geometry.
const EMBED_NAMESPACE: u64 = 0xE2BE_DD1E_0000_0001;

/// Synthetic task shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    /// Label vocabulary size V (ids 1..=V; 0 is blank).
    pub vocab: usize,
    /// Encoder feature dimension.
    pub audio_dim: usize,
    /// Labels per utterance, inclusive range.
    pub min_labels: usize,
    pub max_labels: usize,
    /// Per-label duration drawn from [1, max_duration] frames.
    pub max_duration: usize,
    /// Stddev of the additive Gaussian feature noise.
    pub noise_sigma: f64,
    /// Label sequential structure: probability that a label is the
    /// designated successor of its predecessor rather than a uniform draw.
    /// Gives the deliberation decoder context to exploit across refinement
    /// steps, standing in for the language structure of real transcripts.
    pub chain_p: f64,
}

impl TaskParams {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.vocab == 0 {
            return Err("vocab must be >= 1");
        }
        if self.audio_dim == 0 {
            return Err("audio_dim must be >= 1");
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return Err("label count range must satisfy 1 <= min <= max");
        }
        if self.max_duration == 0 {
            return Err("max_duration must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return Err("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.chain_p) {
            return Err("chain_p must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: EncoderOutput,
    pub reference: LabelSequence,
    pub gold_alignment: Alignment,
}

/// Per-component scale of the label embeddings; sets the feature SNR
/// together with `noise_sigma`. Sized so audio evidence is strong but not
/// decisive, leaving room for label context to matter.
const EMBED_SCALE: f64 = 0.3;

/// Designated successor in the label chain: the next id, wrapping.
#[inline]
fn chain_successor(label: u32, vocab: usize) -> u32 {
    (label % vocab as u32) + 1
}

/// Deterministic embedding of a label id, independent of any corpus seed.
/// Components are N(0, EMBED_SCALE^2), so distinct labels sit
/// ~EMBED_SCALE*sqrt(2*dim) apart.
pub fn label_embedding(label: u32, audio_dim: usize) -> Vec<f64> {
    let mut rng = DetRng::new(derive_seed(EMBED_NAMESPACE, (label as u64) << 16 | audio_dim as u64));
    (0..audio_dim).map(|_| EMBED_SCALE * rng.normal()).collect()
}

/// Generates `n` utterances. Per-utterance seeds derive from
/// `hash(seed, index)`, so generation is order-independent and any prefix of
/// a corpus is stable under a larger `n`.
pub fn generate(n: usize, task: &TaskParams, seed: u64) -> Vec<Utterance> {
    task.validate().expect("valid task params");
    (0..n).map(|i| generate_one(i, task, derive_seed(seed, i as u64))).collect()
}

fn generate_one(index: usize, task: &TaskParams, seed: u64) -> Utterance {
    let mut rng = DetRng::new(seed);
    let count = rng.range_inclusive(task.min_labels, task.max_labels);
    let mut labels: Vec<u32> = Vec::with_capacity(count);
    for i in 0..count {
        let uniform = rng.range_inclusive(1, task.vocab) as u32;
        let follow = rng.uniform() < task.chain_p;
        labels.push(if i > 0 && follow {
            chain_successor(labels[i - 1], task.vocab)
        } else {
            uniform
        });
    }
    let durations: Vec<usize> =
        (0..count).map(|_| rng.range_inclusive(1, task.max_duration)).collect();
    let audio_len: usize = durations.iter().sum();

    // Each label is emitted at the last frame of its run.
    let mut emit_times = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for &d in &durations {
        cursor += d;
        emit_times.push(cursor - 1);
    }

    let reference = LabelSequence::new(labels.clone()).expect("labels exclude blank");
    let gold_alignment =
        make_alignment(&reference, &emit_times, audio_len).expect("times valid by construction");

    let mut features = Tensor::zeros(audio_len, task.audio_dim);
    let mut frame = 0usize;
    for (li, &d) in durations.iter().enumerate() {
        let emb = label_embedding(labels[li], task.audio_dim);
        for _ in 0..d {
            let row = features.row_mut(frame);
            for (c, e) in row.iter_mut().zip(&emb) {
                *c = e + task.noise_sigma * rng.normal();
            }
            frame += 1;
        }
    }
    // Features are stored as f32 on disk; snapping here makes the in-memory
    // and reloaded pipelines identical.
    features.snap_f32();

    Utterance {
        id: format!("u{index:06}"),
        features: EncoderOutput::new(features),
        reference,
        gold_alignment,
    }
}

/// First-pass error statistics. Rates apply per non-blank token; blanks are
/// never touched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConfig {
    pub substitution: f64,
    pub deletion: f64,
    pub insertion: f64,
    /// Label vocabulary for substituted/inserted tokens.
    pub vocab: usize,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        for r in [self.substitution, self.deletion, self.insertion] {
            if !(0.0..=1.0).contains(&r) {
                return Err("rates must lie in [0, 1]");
            }
        }
        if self.substitution + self.deletion + self.insertion > 1.0 + 1e-12 {
            return Err("rates must sum to at most 1");
        }
        if self.vocab == 0 {
            return Err("vocab must be >= 1");
        }
        Ok(())
    }
}

/// Simulates first-pass hypothesis errors on a gold alignment:
/// substitutions relabel a non-blank token, deletions remove it, insertions
/// add a random label right after a surviving one. The blank skeleton is
/// copied verbatim, so `audio_len` and RNN-T validity are preserved.
pub fn corrupt(a: &Alignment, cfg: &CorruptionConfig) -> Alignment {
    cfg.validate().expect("valid corruption config");
    debug_assert!(a.is_valid_rnnt(), "corrupt expects a first-pass-valid alignment");
    let mut rng = DetRng::new(cfg.seed);
    let mut tokens = Vec::with_capacity(a.len() + 2);
    for &tok in a.tokens() {
        if tok == BLANK {
            tokens.push(tok);
            continue;
        }
        let u = rng.uniform();
        if u < cfg.deletion {
            continue;
        }
        if u < cfg.deletion + cfg.substitution {
            tokens.push(random_other_label(&mut rng, tok, cfg.vocab));
        } else {
            tokens.push(tok);
        }
        if rng.uniform() < cfg.insertion {
            tokens.push(rng.range_inclusive(1, cfg.vocab) as u32);
        }
    }
    if tokens.is_empty() {
        // Possible only for a zero-frame alignment, which Alignment forbids.
        tokens.push(BLANK);
    }
    Alignment::new(tokens, a.audio_len()).expect("non-empty by construction")
}

fn random_other_label(rng: &mut DetRng, original: u32, vocab: usize) -> u32 {
    if vocab == 1 {
        return original;
    }
    // Draw from the vocab minus the original without rejection.
    let pick = rng.range_inclusive(1, vocab - 1) as u32;
    if pick >= original {
        pick + 1
    } else {
        pick
    }
}

/// Corpus word error rate: total edit distance over total reference words.
pub fn corpus_wer(hyps: &[LabelSequence], refs: &[LabelSequence]) -> Result<f64, MwerError> {
    if hyps.len() != refs.len() {
        return Err(MwerError::MismatchedCounts { hyps: hyps.len(), refs: refs.len() });
    }
    let mut errors = 0usize;
    let mut words = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        errors += edit_distance(h.as_slice(), r.as_slice());
        words += r.len();
    }
    if words == 0 {
        return Ok(if errors == 0 { 0.0 } else { f64::INFINITY });
    }
    Ok(errors as f64 / words as f64)
}
