//! The streaming refinement transformer decoder.
//!
//! Each refinement step embeds the incoming alignment, recomputes its
//! blank-count timestamps, builds the three attention masks, and runs L
//! pre-norm transformer layers. Per layer, the audio path applies a banded
//! self-attention block to its incoming audio features (producing this
//! layer's audio features), and the text path applies a banded
//! self-attention block followed by time-aligned cross-attention against the
//! same layer's audio output, then a feed-forward block. Passing the audio
//! self-attention output both into this layer's cross-attention and on to
//! the next layer keeps the two stacks synchronized in audio time, so the
//! per-step delay is `(L+1) * C` frames with the audio stack present and
//! `L * C` without it (or with its bottom layer removed).
//!
//! A final projection yields per-frame logits over `V+1` classes; CTC greedy
//! relabeling produces the next step's input alignment. All steps share one
//! set of parameters, and the relabeling between steps is a stop-gradient
//! boundary.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use crate::align::{Alignment, LabelSequence, Timestamps, BLANK};
use crate::ctc::{ctc_greedy, FrameLogProbs};
use crate::delay::{receptive_bound, DelayConfig};
use crate::graph::{Graph, Var};
use crate::mask::{band_self_mask, time_aligned_cross_mask, AttentionMask, MaskSpec};
use crate::math::sqrt;
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub mod reference;

/// Checkpoint format version written next to the tensors.
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderError {
    Config(&'static str),
    /// Alignment longer than the position-embedding capacity.
    AlignmentTooLong { len: usize, max: usize },
    /// Token id outside [0, V].
    TokenOutOfRange { token: u32, classes: usize },
    /// Alignment audio length disagrees with the encoder output.
    AudioLengthMismatch { alignment: usize, encoder: usize },
    /// Alignment blank id must be the reserved 0.
    NonZeroBlank { blank: u32 },
    /// Tensor list does not match the layout (checkpoint loading).
    LayoutMismatch { detail: String },
}

impl fmt::Display for DecoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderError::Config(msg) => write!(f, "invalid decoder config: {msg}"),
            DecoderError::AlignmentTooLong { len, max } => {
                write!(f, "alignment length {len} exceeds position capacity {max}")
            }
            DecoderError::TokenOutOfRange { token, classes } => {
                write!(f, "token {token} outside class range {classes}")
            }
            DecoderError::AudioLengthMismatch { alignment, encoder } => {
                write!(f, "alignment audio_len {alignment} != encoder frames {encoder}")
            }
            DecoderError::NonZeroBlank { blank } => write!(f, "blank id {blank}, expected 0"),
            DecoderError::LayoutMismatch { detail } => write!(f, "layout mismatch: {detail}"),
        }
    }
}

impl core::error::Error for DecoderError {}

/// Decoder hyper-parameters. The per-layer right context `right_context` is
/// shared by all three masks; left contexts are free (they do not affect
/// delay).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Label vocabulary size V; classes = V + 1 with blank at 0.
    pub vocab: usize,
    /// Encoder feature dimension.
    pub audio_dim: usize,
    /// Capacity of the learned text position table.
    pub max_positions: usize,
    pub right_context: usize,
    pub text_left: Option<usize>,
    pub cross_left: Option<usize>,
    pub audio_left: Option<usize>,
    /// Parallel audio self-attention stack on/off.
    pub audio_self_attention: bool,
    /// With the audio stack on, whether its bottom layer is present
    /// (effective depth L+1) or removed (effective depth L).
    pub bottom_audio_self_attention: bool,
    /// Refinement steps S used during MLE training.
    pub steps: usize,
    /// Decoder frame size in seconds.
    pub frame_size: f64,
}

impl DecoderConfig {
    /// Desk-scale defaults: d=64, h=4, L=4, V=16.
    pub fn desk_default() -> Self {
        DecoderConfig {
            layers: 4,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab: 16,
            audio_dim: 16,
            max_positions: 96,
            right_context: 2,
            text_left: None,
            cross_left: Some(2),
            audio_left: None,
            audio_self_attention: true,
            bottom_audio_self_attention: true,
            steps: 3,
            frame_size: 0.06,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.layers == 0 {
            return Err(DecoderError::Config("layers must be >= 1"));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(DecoderError::Config("model_dim must be a positive multiple of heads"));
        }
        if self.ffn_dim == 0 {
            return Err(DecoderError::Config("ffn_dim must be >= 1"));
        }
        if self.vocab == 0 {
            return Err(DecoderError::Config("vocab must be >= 1"));
        }
        if self.audio_dim == 0 {
            return Err(DecoderError::Config("audio_dim must be >= 1"));
        }
        if self.max_positions == 0 {
            return Err(DecoderError::Config("max_positions must be >= 1"));
        }
        if self.steps == 0 {
            return Err(DecoderError::Config("steps must be >= 1"));
        }
        if !(self.frame_size > 0.0) {
            return Err(DecoderError::Config("frame_size must be positive"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    /// Number of audio self-attention blocks in the stack.
    fn audio_blocks(&self) -> usize {
        if !self.audio_self_attention {
            0
        } else if self.bottom_audio_self_attention {
            self.layers
        } else {
            self.layers - 1
        }
    }

    /// Delay view of this config. Removing the bottom audio block makes the
    /// stack contribute nothing to delay, same as having no stack.
    pub fn delay_config(&self) -> DelayConfig {
        DelayConfig {
            layers: self.layers,
            right_per_layer: self.right_context,
            frame_size: self.frame_size,
            audio_self_attention: self.audio_self_attention && self.bottom_audio_self_attention,
            steps: self.steps,
        }
    }

    /// Maximum future audio-frame offset that may influence a position's
    /// logits in one refinement step.
    pub fn receptive_bound(&self) -> usize {
        receptive_bound(&self.delay_config())
    }

    /// Offline variant: right context widened to `seq` so every mask admits
    /// the full sequence. Not a separate code path.
    pub fn offline(&self, seq: usize) -> Self {
        let mut cfg = self.clone();
        cfg.right_context = seq;
        cfg.text_left = None;
        cfg.cross_left = None;
        cfg.audio_left = None;
        cfg
    }
}

/// Causal first-pass encoder output: T x audio_dim features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    features: Tensor,
}

impl EncoderOutput {
    pub fn new(features: Tensor) -> Self {
        assert!(features.rows() >= 1, "encoder output must cover >= 1 frame");
        EncoderOutput { features }
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct TextLayerIdx {
    ln_self: LnIdx,
    self_attn: AttnIdx,
    ln_q: LnIdx,
    ln_kv: LnIdx,
    cross_attn: AttnIdx,
    ln_ffn: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
struct AudioLayerIdx {
    ln_self: LnIdx,
    self_attn: AttnIdx,
    ln_ffn: LnIdx,
    ffn: FfnIdx,
}

/// Canonical tensor order and names for a config; the single source of truth
/// shared by initialization, binding, the optimizer, and checkpoints.
#[derive(Debug, Clone)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    token_embed: usize,
    pos_embed: usize,
    audio_proj_w: usize,
    audio_proj_b: usize,
    text: Vec<TextLayerIdx>,
    audio: Vec<AudioLayerIdx>,
    ln_final: LnIdx,
    out_w: usize,
    out_b: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.add(alloc::format!("{prefix}.gain"), 1, d),
            bias: self.add(alloc::format!("{prefix}.bias"), 1, d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(alloc::format!("{prefix}.wq"), d, d),
            bq: self.add(alloc::format!("{prefix}.bq"), 1, d),
            wk: self.add(alloc::format!("{prefix}.wk"), d, d),
            bk: self.add(alloc::format!("{prefix}.bk"), 1, d),
            wv: self.add(alloc::format!("{prefix}.wv"), d, d),
            bv: self.add(alloc::format!("{prefix}.bv"), 1, d),
            wo: self.add(alloc::format!("{prefix}.wo"), d, d),
            bo: self.add(alloc::format!("{prefix}.bo"), 1, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ffn_dim: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(alloc::format!("{prefix}.w1"), d, ffn_dim),
            b1: self.add(alloc::format!("{prefix}.b1"), 1, ffn_dim),
            w2: self.add(alloc::format!("{prefix}.w2"), ffn_dim, d),
            b2: self.add(alloc::format!("{prefix}.b2"), 1, d),
        }
    }
}

fn build_layout(cfg: &DecoderConfig) -> Layout {
    let d = cfg.model_dim;
    let mut b = LayoutBuilder { names: Vec::new(), shapes: Vec::new() };
    let token_embed = b.add(String::from("embed.token"), cfg.classes(), d);
    let pos_embed = b.add(String::from("embed.pos"), cfg.max_positions, d);
    let audio_proj_w = b.add(String::from("audio_proj.w"), cfg.audio_dim, d);
    let audio_proj_b = b.add(String::from("audio_proj.b"), 1, d);
    let mut text = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = alloc::format!("text.{l}");
        text.push(TextLayerIdx {
            ln_self: b.ln(&alloc::format!("{p}.self.ln"), d),
            self_attn: b.attn(&alloc::format!("{p}.self"), d),
            ln_q: b.ln(&alloc::format!("{p}.cross.ln_q"), d),
            ln_kv: b.ln(&alloc::format!("{p}.cross.ln_kv"), d),
            cross_attn: b.attn(&alloc::format!("{p}.cross"), d),
            ln_ffn: b.ln(&alloc::format!("{p}.ffn.ln"), d),
            ffn: b.ffn(&alloc::format!("{p}.ffn"), d, cfg.ffn_dim),
        });
    }
    let mut audio = Vec::with_capacity(cfg.audio_blocks());
    for l in 0..cfg.audio_blocks() {
        let p = alloc::format!("audio.{l}");
        audio.push(AudioLayerIdx {
            ln_self: b.ln(&alloc::format!("{p}.self.ln"), d),
            self_attn: b.attn(&alloc::format!("{p}.self"), d),
            ln_ffn: b.ln(&alloc::format!("{p}.ffn.ln"), d),
            ffn: b.ffn(&alloc::format!("{p}.ffn"), d, cfg.ffn_dim),
        });
    }
    let ln_final = b.ln("final.ln", d);
    let out_w = b.add(String::from("out.w"), d, cfg.classes());
    let out_b = b.add(String::from("out.b"), 1, cfg.classes());
    Layout {
        names: b.names,
        shapes: b.shapes,
        token_embed,
        pos_embed,
        audio_proj_w,
        audio_proj_b,
        text,
        audio,
        ln_final,
        out_w,
        out_b,
    }
}

/// All trainable tensors of the refinement decoder in canonical order.
///
/// Values live on the f32 grid (see [`Tensor::snap_f32`]) so that the raw-f32
/// checkpoint round trip is the identity.
#[derive(Debug, Clone)]
pub struct ModelParams {
    cfg: DecoderConfig,
    layout: Layout,
    tensors: Vec<Arc<Tensor>>,
}

impl ModelParams {
    /// Deterministic initialization. Matrices draw Xavier-uniform
    /// (`+-sqrt(6/(fan_in+fan_out))`), embedding tables uniform
    /// `+-1/sqrt(d)`, biases zero, layer-norm gains one. A given seed yields
    /// bit-identical parameters on every platform.
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let layout = build_layout(cfg);
        let mut rng = DetRng::new(seed);
        let d = cfg.model_dim;
        let embed_scale = 1.0 / sqrt(d as f64);
        let mut tensors = Vec::with_capacity(layout.names.len());
        for (i, &(rows, cols)) in layout.shapes.iter().enumerate() {
            let name = &layout.names[i];
            let mut t = Tensor::zeros(rows, cols);
            if name.ends_with(".gain") {
                t.data_mut().fill(1.0);
            } else if name.starts_with("embed.") {
                for v in t.data_mut() {
                    *v = rng.uniform_in(-embed_scale, embed_scale);
                }
            } else if rows > 1 {
                let a = sqrt(6.0 / (rows + cols) as f64);
                for v in t.data_mut() {
                    *v = rng.uniform_in(-a, a);
                }
            }
            // biases and ln offsets stay zero
            t.snap_f32();
            tensors.push(Arc::new(t));
        }
        Ok(ModelParams { cfg: cfg.clone(), layout, tensors })
    }

    /// Rebuild from named tensors, e.g. a checkpoint. Names, order, and
    /// shapes must match the config's layout exactly.
    pub fn from_tensors(
        cfg: &DecoderConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let layout = build_layout(cfg);
        if named.len() != layout.names.len() {
            return Err(DecoderError::LayoutMismatch {
                detail: alloc::format!(
                    "expected {} tensors, got {}",
                    layout.names.len(),
                    named.len()
                ),
            });
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != layout.names[i] {
                return Err(DecoderError::LayoutMismatch {
                    detail: alloc::format!("tensor {i}: expected {}, got {name}", layout.names[i]),
                });
            }
            if t.shape() != layout.shapes[i] {
                return Err(DecoderError::LayoutMismatch {
                    detail: alloc::format!(
                        "tensor {name}: expected shape {:?}, got {:?}",
                        layout.shapes[i],
                        t.shape()
                    ),
                });
            }
            tensors.push(Arc::new(t));
        }
        Ok(ModelParams { cfg: cfg.clone(), layout, tensors })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.layout.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Arc<Tensor> {
        &self.tensors[i]
    }

    /// Mutable access for the optimizer. Copy-on-write: if a graph still
    /// holds the tensor, the update lands on a fresh copy owned by self.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.layout.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Model parameters bound into a graph as leaves, in canonical order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ModelParams) -> Self {
        let vars = params.tensors.iter().map(|t| g.leaf(Arc::clone(t))).collect();
        BoundParams { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn validate_step_inputs(
    cfg: &DecoderConfig,
    a: &Alignment,
    enc: &EncoderOutput,
) -> Result<(), DecoderError> {
    if a.blank_id() != BLANK {
        return Err(DecoderError::NonZeroBlank { blank: a.blank_id() });
    }
    if a.len() > cfg.max_positions {
        return Err(DecoderError::AlignmentTooLong { len: a.len(), max: cfg.max_positions });
    }
    for &tok in a.tokens() {
        if tok as usize >= cfg.classes() {
            return Err(DecoderError::TokenOutOfRange { token: tok, classes: cfg.classes() });
        }
    }
    if a.audio_len() != enc.frames() {
        return Err(DecoderError::AudioLengthMismatch {
            alignment: a.audio_len(),
            encoder: enc.frames(),
        });
    }
    if enc.dim() != cfg.audio_dim {
        return Err(DecoderError::Config("encoder feature dim != audio_dim"));
    }
    Ok(())
}

struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

fn attn_vars(bound: &BoundParams, idx: &AttnIdx) -> AttnVars {
    AttnVars {
        wq: bound.var(idx.wq),
        bq: bound.var(idx.bq),
        wk: bound.var(idx.wk),
        bk: bound.var(idx.bk),
        wv: bound.var(idx.wv),
        bv: bound.var(idx.bv),
        wo: bound.var(idx.wo),
        bo: bound.var(idx.bo),
    }
}

/// One pre-norm attention block: `x + Wo * attn(LN(x))` (self) or the
/// cross variant with separately normalized key/value input.
fn attention_block(
    g: &mut Graph,
    x: Var,
    kv: Var,
    ln_q: (Var, Var),
    ln_kv: Option<(Var, Var)>,
    attn: &AttnVars,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Var {
    let hq = g.layer_norm(x, ln_q.0, ln_q.1);
    let hkv = match ln_kv {
        Some((gain, bias)) => g.layer_norm(kv, gain, bias),
        None => hq,
    };
    let q = g.linear(hq, attn.wq, attn.bq);
    let k = g.linear(hkv, attn.wk, attn.bk);
    let v = g.linear(hkv, attn.wv, attn.bv);
    let ctx = g.masked_attention(q, k, v, Arc::clone(mask), heads);
    let out = g.linear(ctx, attn.wo, attn.bo);
    g.add(x, out)
}

fn ffn_block(g: &mut Graph, x: Var, ln: (Var, Var), ffn: &FfnIdx, bound: &BoundParams) -> Var {
    let h = g.layer_norm(x, ln.0, ln.1);
    let mid = g.linear(h, bound.var(ffn.w1), bound.var(ffn.b1));
    let act = g.gelu(mid);
    let out = g.linear(act, bound.var(ffn.w2), bound.var(ffn.b2));
    g.add(x, out)
}

/// Builds one refinement step in `g` and returns the log-probability node
/// (`N x (V+1)`, rows log-normalized).
pub fn build_refine_step(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    a: &Alignment,
    enc_var: Var,
) -> Result<Var, DecoderError> {
    let cfg = &params.cfg;
    let enc_frames = g.value(enc_var).rows();
    let n = a.len();
    let t_frames = enc_frames;

    let times = a.timestamps();
    let text_mask = Arc::new(band_self_mask(
        n,
        &MaskSpec::new(cfg.text_left, cfg.right_context),
    ));
    let cross_mask = Arc::new(time_aligned_cross_mask(
        &times,
        t_frames,
        &MaskSpec::new(cfg.cross_left, cfg.right_context),
    ));
    let audio_mask = if cfg.audio_blocks() > 0 {
        Some(Arc::new(band_self_mask(
            t_frames,
            &MaskSpec::new(cfg.audio_left, cfg.right_context),
        )))
    } else {
        None
    };

    let layout = &params.layout;
    let token_ids: Vec<usize> = a.tokens().iter().map(|&t| t as usize).collect();
    let tok = g.embed(bound.var(layout.token_embed), &token_ids);
    let pos_ids: Vec<usize> = (0..n).collect();
    let pos = g.embed(bound.var(layout.pos_embed), &pos_ids);
    let mut text = g.add(tok, pos);

    let mut audio = g.linear(enc_var, bound.var(layout.audio_proj_w), bound.var(layout.audio_proj_b));

    for l in 0..cfg.layers {
        // Audio path first: this layer's cross-attention consumes its output.
        let audio_block = if !cfg.audio_self_attention {
            None
        } else if cfg.bottom_audio_self_attention {
            Some(l)
        } else {
            l.checked_sub(1)
        };
        if let Some(ai) = audio_block {
            let idx = &layout.audio[ai];
            let attn = attn_vars(bound, &idx.self_attn);
            let mask = audio_mask.as_ref().expect("audio mask built");
            audio = attention_block(
                g,
                audio,
                audio,
                (bound.var(idx.ln_self.gain), bound.var(idx.ln_self.bias)),
                None,
                &attn,
                mask,
                cfg.heads,
            );
            audio = ffn_block(
                g,
                audio,
                (bound.var(idx.ln_ffn.gain), bound.var(idx.ln_ffn.bias)),
                &idx.ffn,
                bound,
            );
        }

        let idx = &layout.text[l];
        let self_attn = attn_vars(bound, &idx.self_attn);
        text = attention_block(
            g,
            text,
            text,
            (bound.var(idx.ln_self.gain), bound.var(idx.ln_self.bias)),
            None,
            &self_attn,
            &text_mask,
            cfg.heads,
        );
        let cross = attn_vars(bound, &idx.cross_attn);
        text = attention_block(
            g,
            text,
            audio,
            (bound.var(idx.ln_q.gain), bound.var(idx.ln_q.bias)),
            Some((bound.var(idx.ln_kv.gain), bound.var(idx.ln_kv.bias))),
            &cross,
            &cross_mask,
            cfg.heads,
        );
        text = ffn_block(
            g,
            text,
            (bound.var(idx.ln_ffn.gain), bound.var(idx.ln_ffn.bias)),
            &idx.ffn,
            bound,
        );
    }

    let hidden = g.layer_norm(
        text,
        bound.var(layout.ln_final.gain),
        bound.var(layout.ln_final.bias),
    );
    let logits = g.linear(hidden, bound.var(layout.out_w), bound.var(layout.out_b));
    Ok(g.log_softmax(logits))
}

/// One inference refinement step: log-probabilities plus the greedy-updated
/// alignment.
pub fn refine_step(
    a: &Alignment,
    enc: &EncoderOutput,
    params: &ModelParams,
) -> Result<(FrameLogProbs, Alignment), DecoderError> {
    validate_step_inputs(&params.cfg, a, enc)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let enc_var = g.constant(enc.features.clone());
    let lp = build_refine_step(&mut g, params, &bound, a, enc_var)?;
    let log_probs = FrameLogProbs::from_tensor_unchecked(g.value(lp).clone());
    let next = ctc_greedy(&log_probs, enc.frames());
    Ok((log_probs, next))
}

/// Record of one refinement step.
#[derive(Debug, Clone)]
pub struct RefineStep {
    pub input: Alignment,
    pub timestamps: Timestamps,
    pub log_probs: FrameLogProbs,
    pub greedy: Alignment,
}

/// Per-step record of an S-step refinement; step i's input equals step
/// i-1's greedy output, and all alignments share the input's length.
#[derive(Debug, Clone)]
pub struct RefinementTrace {
    pub steps: Vec<RefineStep>,
}

impl RefinementTrace {
    /// Collapse of the last greedy alignment: the decoding result.
    pub fn final_labels(&self) -> LabelSequence {
        self.steps.last().expect("at least one step").greedy.collapse()
    }

    pub fn final_alignment(&self) -> &Alignment {
        &self.steps.last().expect("at least one step").greedy
    }
}

/// Chains `steps` refinement steps from `a0`, sharing parameters.
pub fn refine(
    a0: &Alignment,
    enc: &EncoderOutput,
    params: &ModelParams,
    steps: usize,
) -> Result<RefinementTrace, DecoderError> {
    assert!(steps >= 1, "refine requires steps >= 1");
    let mut trace = RefinementTrace { steps: Vec::with_capacity(steps) };
    let mut current = a0.clone();
    for _ in 0..steps {
        let (log_probs, greedy) = refine_step(&current, enc, params)?;
        trace.steps.push(RefineStep {
            input: current.clone(),
            timestamps: current.timestamps(),
            log_probs,
            greedy: greedy.clone(),
        });
        current = greedy;
    }
    Ok(trace)
}

/// The S-step MLE objective built in a graph: mean over steps of the
/// negative CTC full-sum log-probability of `y`, with gradients flowing
/// through every step's logits into the shared parameters. The greedy
/// relabeling between steps is a constant input to the next step.
pub struct MleBuild {
    pub loss: Var,
    pub per_step_logp: Vec<f64>,
    pub trace: RefinementTrace,
}

pub fn build_mle_loss(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    a0: &Alignment,
    enc: &EncoderOutput,
    enc_var: Var,
    y: &LabelSequence,
    steps: usize,
) -> Result<MleBuild, DecoderError> {
    assert!(steps >= 1);
    validate_step_inputs(&params.cfg, a0, enc)?;
    let mut current = a0.clone();
    let mut logp_vars = Vec::with_capacity(steps);
    let mut per_step_logp = Vec::with_capacity(steps);
    let mut trace = RefinementTrace { steps: Vec::with_capacity(steps) };
    for _ in 0..steps {
        let lp = build_refine_step(g, params, bound, &current, enc_var)?;
        let log_probs = FrameLogProbs::from_tensor_unchecked(g.value(lp).clone());
        let ll = g.ctc_log_prob(lp, y);
        per_step_logp.push(g.value(ll).at(0, 0));
        logp_vars.push(ll);
        let greedy = ctc_greedy(&log_probs, enc.frames());
        trace.steps.push(RefineStep {
            input: current.clone(),
            timestamps: current.timestamps(),
            log_probs,
            greedy: greedy.clone(),
        });
        current = greedy;
    }
    let mean = g.mean_scalars(&logp_vars);
    let loss = g.scale(mean, -1.0);
    Ok(MleBuild { loss, per_step_logp, trace })
}

/// Same objective with the per-step input alignments pinned (for gradient
/// checks: the relabeling between steps is defined as a stop-gradient, so
/// finite differences must hold those inputs fixed too).
pub fn build_mle_loss_fixed_inputs(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    inputs: &[Alignment],
    enc: &EncoderOutput,
    enc_var: Var,
    y: &LabelSequence,
) -> Result<Var, DecoderError> {
    assert!(!inputs.is_empty());
    let mut logp_vars = Vec::with_capacity(inputs.len());
    for a in inputs {
        validate_step_inputs(&params.cfg, a, enc)?;
        let lp = build_refine_step(g, params, bound, a, enc_var)?;
        logp_vars.push(g.ctc_log_prob(lp, y));
    }
    let mean = g.mean_scalars(&logp_vars);
    Ok(g.scale(mean, -1.0))
}

/// Convenience wrapper: S-step MLE loss value and trace for (a0, enc, y).
pub fn mle_loss(
    a0: &Alignment,
    enc: &EncoderOutput,
    params: &ModelParams,
    y: &LabelSequence,
    steps: usize,
) -> Result<(f64, MleTrace), DecoderError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let enc_var = g.constant(enc.features.clone());
    let built = build_mle_loss(&mut g, params, &bound, a0, enc, enc_var, y, steps)?;
    Ok((
        g.value(built.loss).at(0, 0),
        MleTrace { per_step_logp: built.per_step_logp, trace: built.trace },
    ))
}

pub struct MleTrace {
    pub per_step_logp: Vec<f64>,
    pub trace: RefinementTrace,
}
