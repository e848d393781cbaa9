//! Core algorithms for streaming alignment-refinement ("Align-Refine")
//! deliberation decoding over RNN-T hypothesis alignments.
//!
//! Everything in this crate is pure computation over owned buffers: alignment
//! topology and timestamps, banded/time-aligned attention masks and their
//! delay arithmetic, CTC full-sum/greedy/beam-search decoding with an
//! enumeration oracle, the refinement transformer decoder with reverse-mode
//! gradients, the MWER objective, a synthetic first-pass simulator, and the
//! optimizer. IO, file formats, and the CLI live in the companion
//! `align-refine` crate.
//!
//! The crate is `no_std` compatible (with `alloc`); transcendentals go
//! through `libm` so results are bit-identical across platforms.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod align;
pub mod ctc;
pub mod decoder;
pub mod delay;
pub mod graph;
pub mod mask;
pub mod math;
pub mod mwer;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use align::{Alignment, LabelSequence, Timestamps, BLANK};
pub use ctc::{FrameLogProbs, Hypothesis};
pub use decoder::{DecoderConfig, EncoderOutput, ModelParams, RefinementTrace};
pub use delay::DelayConfig;
pub use mask::{AttentionMask, MaskSpec};
