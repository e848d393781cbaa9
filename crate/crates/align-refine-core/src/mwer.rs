//! Minimum word error rate (MWER) objective over beam-search hypotheses.
//!
//! After S' refinement steps, CTC beam search yields K hypotheses. Each
//! hypothesis is scored by the mean of its CTC full-sum log-probabilities
//! under every step's outputs (not by its beam score: beam scores are
//! approximations), the K scores are softmax-normalized into P_k, and the
//! loss is the expected number of word errors `sum_k P_k * NWE_k`. Training
//! minimizes `mwer + gamma * mle` for stability.

use alloc::vec::Vec;
use core::fmt;

use crate::align::{Alignment, LabelSequence};
use crate::ctc::{ctc_beam_search, ctc_greedy, FrameLogProbs, Hypothesis};
use crate::decoder::{
    build_refine_step, BoundParams, DecoderError, EncoderOutput, ModelParams, RefineStep,
    RefinementTrace,
};
use crate::graph::{Graph, Var};
use crate::math::{exp, logsumexp};

/// MWER training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwerConfig {
    /// Beam size K. K = 1 makes the loss constant (P_1 = 1).
    pub k: usize,
    /// Refinement steps S' for the MWER forward.
    pub steps: usize,
    /// Composite-loss weight on the MLE term.
    pub gamma: f64,
}

impl Default for MwerConfig {
    fn default() -> Self {
        MwerConfig { k: 4, steps: 1, gamma: 0.005 }
    }
}

impl MwerConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.k == 0 {
            return Err("beam size K must be >= 1");
        }
        if self.steps == 0 {
            return Err("S' must be >= 1");
        }
        if !(self.gamma >= 0.0) {
            return Err("gamma must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MwerError {
    MismatchedCounts { hyps: usize, refs: usize },
}

impl fmt::Display for MwerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MwerError::MismatchedCounts { hyps, refs } => {
                write!(f, "{hyps} hypotheses vs {refs} references")
            }
        }
    }
}

impl core::error::Error for MwerError {}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Number of word errors between hypothesis and reference; in the synthetic
/// task every label token is one word.
pub fn word_edit_distance(hyp: &LabelSequence, reference: &LabelSequence) -> usize {
    edit_distance(hyp.as_slice(), reference.as_slice())
}

/// Hypothesis log-probability: arithmetic mean of its per-step CTC full-sum
/// log-probabilities.
pub fn hyp_logprob(per_step_logp: &[f64]) -> f64 {
    assert!(!per_step_logp.is_empty());
    per_step_logp.iter().sum::<f64>() / per_step_logp.len() as f64
}

/// MWER loss value: `sum_k softmax(logps)_k * nwe_k`.
pub fn mwer_loss_value(logps: &[f64], nwe: &[f64]) -> f64 {
    assert_eq!(logps.len(), nwe.len());
    assert!(!logps.is_empty());
    let hi = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logps.iter().map(|&v| exp(v - hi)).collect();
    let z: f64 = weights.iter().sum();
    weights.iter().zip(nwe).map(|(w, c)| w / z * c).sum()
}

/// Composite objective: `mwer + gamma * mle`.
pub fn composite_loss(mwer: f64, mle: f64, gamma: f64) -> f64 {
    mwer + gamma * mle
}

/// Everything the MWER forward produced: loss nodes for backward, plus
/// values for logging.
pub struct MwerBuild {
    /// `mwer + gamma * mle`
    pub composite: Var,
    /// Expected-NWE term (the MWER loss proper).
    pub mwer_value: f64,
    /// S'-step MLE loss value.
    pub mle_value: f64,
    /// Hypotheses with `per_step_logp` filled and rescored (`score` is the
    /// mean CTC log-probability).
    pub hypotheses: Vec<Hypothesis>,
    pub trace: RefinementTrace,
}

/// Builds the composite MWER objective for one utterance: S' refinement
/// steps, beam search on the last step's outputs, CTC rescoring of each
/// hypothesis under every step, softmax-weighted NWE, plus `gamma` times the
/// S'-step MLE loss.
pub fn build_mwer_composite(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    a0: &Alignment,
    enc: &EncoderOutput,
    enc_var: Var,
    y: &LabelSequence,
    cfg: &MwerConfig,
) -> Result<MwerBuild, DecoderError> {
    // S' refinement steps, keeping each step's log-prob node.
    let mut current = a0.clone();
    let mut step_vars = Vec::with_capacity(cfg.steps);
    let mut trace = RefinementTrace { steps: Vec::with_capacity(cfg.steps) };
    for _ in 0..cfg.steps {
        let lp = build_refine_step(g, params, bound, &current, enc_var)?;
        let log_probs = FrameLogProbs::from_tensor_unchecked(g.value(lp).clone());
        let greedy = ctc_greedy(&log_probs, enc.frames());
        trace.steps.push(RefineStep {
            input: current.clone(),
            timestamps: current.timestamps(),
            log_probs: log_probs.clone(),
            greedy: greedy.clone(),
        });
        step_vars.push(lp);
        current = greedy;
    }

    // Hypothesis generation is beam search, not greedy; selection is a
    // constant with respect to the parameters.
    let last = &trace.steps.last().expect("steps >= 1").log_probs;
    let hyps = ctc_beam_search(last, cfg.k);

    build_mwer_with_hypotheses(g, y, cfg, &step_vars, hyps, trace)
}

/// The differentiable tail of the objective given an already-selected
/// hypothesis set; also the function finite-difference checks evaluate.
pub fn build_mwer_with_hypotheses(
    g: &mut Graph,
    y: &LabelSequence,
    cfg: &MwerConfig,
    step_vars: &[Var],
    hyps: Vec<Hypothesis>,
    trace: RefinementTrace,
) -> Result<MwerBuild, DecoderError> {
    assert!(!hyps.is_empty());
    let mut hyp_lp_vars = Vec::with_capacity(hyps.len());
    let mut nwe = Vec::with_capacity(hyps.len());
    let mut rescored = Vec::with_capacity(hyps.len());
    for h in hyps {
        let per_step: Vec<Var> =
            step_vars.iter().map(|&lp| g.ctc_log_prob(lp, &h.labels)).collect();
        let per_step_vals: Vec<f64> = per_step.iter().map(|v| g.value(*v).at(0, 0)).collect();
        let mean = g.mean_scalars(&per_step);
        hyp_lp_vars.push(mean);
        nwe.push(word_edit_distance(&h.labels, y) as f64);
        rescored.push(Hypothesis {
            labels: h.labels,
            score: hyp_logprob(&per_step_vals),
            per_step_logp: per_step_vals,
        });
    }

    let mwer = g.softmax_weighted(&hyp_lp_vars, &nwe);
    let mwer_value = g.value(mwer).at(0, 0);

    let mle_terms: Vec<Var> = step_vars.iter().map(|&lp| g.ctc_log_prob(lp, y)).collect();
    let mle_mean = g.mean_scalars(&mle_terms);
    let mle = g.scale(mle_mean, -1.0);
    let mle_value = g.value(mle).at(0, 0);

    let composite = g.add_scaled(mwer, mle, cfg.gamma);
    Ok(MwerBuild { composite, mwer_value, mle_value, hypotheses: rescored, trace })
}

/// Merge duplicate label sequences by log-summing their scores. Beam search
/// cannot emit duplicates, so this only matters for externally supplied
/// hypothesis lists.
pub fn merge_duplicate_hypotheses(hyps: Vec<Hypothesis>) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = Vec::with_capacity(hyps.len());
    for h in hyps {
        match out.iter_mut().find(|o| o.labels == h.labels) {
            Some(o) => o.score = logsumexp(&[o.score, h.score]),
            None => out.push(h),
        }
    }
    out
}
