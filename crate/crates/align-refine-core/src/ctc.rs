//! CTC over frame-level log-probabilities: full-sum log-likelihood, greedy
//! alignment extraction, prefix beam search, and an exponential-time
//! enumeration oracle for all of the above.
//!
//! Class 0 is the blank. All arithmetic is in log space with f64
//! accumulation; infeasible (label sequence longer than the lattice allows)
//! yields the documented `-inf` sentinel, never a panic.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::align::{Alignment, LabelSequence, BLANK};
use crate::math::{logsumexp2, logsumexp, exp, ln, NEG_INF};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcError {
    /// Rows of a FrameLogProbs matrix must be log-normalized.
    NotNormalized { row: usize },
    /// The enumeration oracle refuses instances beyond its size guard.
    OracleTooLarge { frames: usize, classes: usize },
    /// Label id outside the matrix's class range.
    LabelOutOfRange { label: u32, classes: usize },
}

impl fmt::Display for CtcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CtcError::NotNormalized { row } => write!(f, "row {row} is not log-normalized"),
            CtcError::OracleTooLarge { frames, classes } => {
                write!(f, "oracle guard exceeded: {frames} frames x {classes} classes")
            }
            CtcError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside class range {classes}")
            }
        }
    }
}

impl core::error::Error for CtcError {}

/// N x (V+1) matrix of per-frame log-probabilities, each row log-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogProbs {
    values: Tensor,
}

impl FrameLogProbs {
    /// Validates that every row log-sums to 0 within 1e-6.
    pub fn new(values: Tensor) -> Result<Self, CtcError> {
        for r in 0..values.rows() {
            let lse = logsumexp(values.row(r));
            if !(lse.abs() < 1e-6) {
                return Err(CtcError::NotNormalized { row: r });
            }
        }
        Ok(FrameLogProbs { values })
    }

    /// Skips the normalization check; for callers that produced the rows via
    /// log-softmax already.
    pub fn from_tensor_unchecked(values: Tensor) -> Self {
        FrameLogProbs { values }
    }

    /// Uniform distribution over all classes at every frame.
    pub fn uniform(frames: usize, classes: usize) -> Self {
        let lp = -ln(classes as f64);
        FrameLogProbs { values: Tensor::from_vec(frames, classes, vec![lp; frames * classes]) }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn at(&self, frame: usize, class: usize) -> f64 {
        self.values.at(frame, class)
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        self.values.row(frame)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Collapsed hypothesis with its score (log-probability, nats). After MWER
/// rescoring, `per_step_logp` carries the CTC full-sum log-probability of the
/// labels under each refinement step's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: LabelSequence,
    pub score: f64,
    pub per_step_logp: Vec<f64>,
}

/// Extended CTC state label: blank at even states, y[s/2] at odd states.
#[inline]
fn ext_label(y: &[u32], s: usize) -> u32 {
    if s % 2 == 0 {
        BLANK
    } else {
        y[s / 2]
    }
}

fn check_labels(p: &FrameLogProbs, y: &LabelSequence) -> Result<(), CtcError> {
    for &l in y.as_slice() {
        if l as usize >= p.classes() {
            return Err(CtcError::LabelOutOfRange { label: l, classes: p.classes() });
        }
    }
    Ok(())
}

/// True iff `y` fits in `frames` CTC frames: the lattice needs one frame per
/// label plus one separating blank between each adjacent repeat.
pub fn ctc_feasible(frames: usize, y: &LabelSequence) -> bool {
    let repeats = y.as_slice().windows(2).filter(|w| w[0] == w[1]).count();
    frames >= y.len() + repeats
}

/// Full-sum conditional log-probability `log P_ctc(y | p)`: the forward DP
/// over the 2|y|+1-state lattice, marginalizing every alignment that
/// collapses to `y`. Returns `-inf` when `y` does not fit in the available
/// frames.
pub fn ctc_log_prob(p: &FrameLogProbs, y: &LabelSequence) -> f64 {
    check_labels(p, y).expect("labels within class range");
    let (alpha_last, _) = forward_lattice(p, y.as_slice());
    let s_count = 2 * y.len() + 1;
    if y.is_empty() {
        alpha_last[0]
    } else {
        logsumexp2(alpha_last[s_count - 1], alpha_last[s_count - 2])
    }
}

/// Runs the forward DP, returning the last row and, optionally, the full
/// alpha table (rows only kept when `keep` requests them).
fn forward_lattice(p: &FrameLogProbs, y: &[u32]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = p.frames();
    let s_count = 2 * y.len() + 1;
    let mut table = Vec::with_capacity(n);
    let mut prev = vec![NEG_INF; s_count];
    prev[0] = p.at(0, BLANK as usize);
    if !y.is_empty() {
        prev[1] = p.at(0, y[0] as usize);
    }
    table.push(prev.clone());
    for t in 1..n {
        let mut cur = vec![NEG_INF; s_count];
        for s in 0..s_count {
            let mut acc = prev[s];
            if s >= 1 {
                acc = logsumexp2(acc, prev[s - 1]);
            }
            if s >= 2 && s % 2 == 1 && y[s / 2] != ext_label(y, s - 2) {
                acc = logsumexp2(acc, prev[s - 2]);
            }
            if acc != NEG_INF {
                cur[s] = acc + p.at(t, ext_label(y, s) as usize);
            }
        }
        table.push(cur.clone());
        prev = cur;
    }
    (prev, table)
}

/// Backward (suffix) DP, mirror of the forward pass. `beta[t][s]` includes
/// the emission at frame t.
fn backward_lattice(p: &FrameLogProbs, y: &[u32]) -> Vec<Vec<f64>> {
    let n = p.frames();
    let s_count = 2 * y.len() + 1;
    let mut table = vec![vec![NEG_INF; s_count]; n];
    table[n - 1][s_count - 1] = p.at(n - 1, BLANK as usize);
    if !y.is_empty() {
        table[n - 1][s_count - 2] = p.at(n - 1, y[y.len() - 1] as usize);
    }
    for t in (0..n - 1).rev() {
        for s in 0..s_count {
            let mut acc = table[t + 1][s];
            if s + 1 < s_count {
                acc = logsumexp2(acc, table[t + 1][s + 1]);
            }
            if s + 2 < s_count && s % 2 == 1 && y[s / 2] != ext_label(y, s + 2) {
                acc = logsumexp2(acc, table[t + 1][s + 2]);
            }
            if acc != NEG_INF {
                table[t][s] = acc + p.at(t, ext_label(y, s) as usize);
            }
        }
    }
    table
}

/// `ctc_log_prob` plus its gradient with respect to every entry of `p`:
/// `d logP / d p[t][c]` is the posterior occupancy of class `c` at frame `t`
/// among the alignments of `y`. For infeasible `y` the gradient is zero.
pub fn ctc_log_prob_with_grad(p: &FrameLogProbs, y: &LabelSequence) -> (f64, Tensor) {
    check_labels(p, y).expect("labels within class range");
    let labels = y.as_slice();
    let (_, alpha) = forward_lattice(p, labels);
    let s_count = 2 * labels.len() + 1;
    let n = p.frames();
    let logp = if labels.is_empty() {
        alpha[n - 1][0]
    } else {
        logsumexp2(alpha[n - 1][s_count - 1], alpha[n - 1][s_count - 2])
    };
    let mut grad = Tensor::zeros(n, p.classes());
    if logp == NEG_INF {
        return (logp, grad);
    }
    let beta = backward_lattice(p, labels);
    for t in 0..n {
        for s in 0..s_count {
            let a = alpha[t][s];
            let b = beta[t][s];
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            let c = ext_label(labels, s) as usize;
            // alpha and beta both include the frame-t emission; divide once.
            let occ = exp(a + b - p.at(t, c) - logp);
            grad.set(t, c, grad.at(t, c) + occ);
        }
    }
    (logp, grad)
}

/// Greedy alignment: per-frame argmax with ties broken toward the smallest
/// class id (so blank wins ties). `audio_len` is the frame count the
/// alignment is emitted against (the encoder length of the utterance).
pub fn ctc_greedy(p: &FrameLogProbs, audio_len: usize) -> Alignment {
    let mut tokens = Vec::with_capacity(p.frames());
    for t in 0..p.frames() {
        let row = p.row(t);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        tokens.push(best as u32);
    }
    Alignment::new(tokens, audio_len).expect("frames >= 1")
}

#[derive(Clone, Copy)]
struct BeamMass {
    /// log mass of alignments ending in blank
    pb: f64,
    /// log mass of alignments ending in the prefix's last label
    pnb: f64,
}

impl BeamMass {
    fn empty() -> Self {
        BeamMass { pb: NEG_INF, pnb: NEG_INF }
    }

    fn total(&self) -> f64 {
        logsumexp2(self.pb, self.pnb)
    }
}

/// Prefix beam search over collapsed label sequences, merging every
/// alignment that maps to the same prefix. Beam width `k`, no score
/// thresholds. Output is sorted by score descending (ties: shorter, then
/// lexicographically smaller prefix) and has at most `k` entries.
///
/// With `k` at least the number of reachable prefixes no pruning occurs and
/// the scores are the exact label-sequence posteriors.
pub fn ctc_beam_search(p: &FrameLogProbs, k: usize) -> Vec<Hypothesis> {
    assert!(k >= 1, "beam width must be >= 1");
    let classes = p.classes();
    let mut beams: BTreeMap<Vec<u32>, BeamMass> = BTreeMap::new();
    beams.insert(Vec::new(), BeamMass { pb: 0.0, pnb: NEG_INF });

    for t in 0..p.frames() {
        let row = p.row(t);
        let mut next: BTreeMap<Vec<u32>, BeamMass> = BTreeMap::new();
        for (prefix, mass) in &beams {
            let total = mass.total();
            // Blank keeps the prefix and closes any open emission.
            if total != NEG_INF {
                let e = next.entry(prefix.clone()).or_insert_with(BeamMass::empty);
                e.pb = logsumexp2(e.pb, total + row[BLANK as usize]);
            }
            for c in 1..classes as u32 {
                let lp = row[c as usize];
                if prefix.last() == Some(&c) {
                    // Same label again: merges into the open emission...
                    if mass.pnb != NEG_INF {
                        let e = next.entry(prefix.clone()).or_insert_with(BeamMass::empty);
                        e.pnb = logsumexp2(e.pnb, mass.pnb + lp);
                    }
                    // ...unless a blank closed it, which starts a new one.
                    if mass.pb != NEG_INF {
                        let mut ext = prefix.clone();
                        ext.push(c);
                        let e = next.entry(ext).or_insert_with(BeamMass::empty);
                        e.pnb = logsumexp2(e.pnb, mass.pb + lp);
                    }
                } else if total != NEG_INF {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert_with(BeamMass::empty);
                    e.pnb = logsumexp2(e.pnb, total + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<u32>, BeamMass)> = next.into_iter().collect();
        ranked.retain(|(_, m)| m.total() != NEG_INF);
        ranked.sort_by(|(pa, ma), (pb, mb)| {
            mb.total()
                .total_cmp(&ma.total())
                .then_with(|| pa.len().cmp(&pb.len()))
                .then_with(|| pa.cmp(pb))
        });
        ranked.truncate(k);
        beams = ranked.into_iter().collect();
    }

    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(prefix, mass)| Hypothesis {
            labels: LabelSequence::new(prefix).expect("beam prefixes contain no blank"),
            score: mass.total(),
            per_step_logp: Vec::new(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.labels.len().cmp(&b.labels.len()))
            .then_with(|| a.labels.as_slice().cmp(b.labels.as_slice()))
    });
    out
}

/// Size guard for the enumeration oracle: (classes)^frames alignments.
fn oracle_guard(p: &FrameLogProbs) -> Result<(), CtcError> {
    if p.frames() > 8 || p.classes() > 5 {
        return Err(CtcError::OracleTooLarge { frames: p.frames(), classes: p.classes() });
    }
    Ok(())
}

/// Enumeration oracle: explicit sum over all `classes^frames` alignments,
/// grouped by collapsed label sequence. Returns (labels, log-probability)
/// sorted by probability descending with the same tie-break as beam search.
pub fn enumerate_posteriors(p: &FrameLogProbs) -> Result<Vec<(LabelSequence, f64)>, CtcError> {
    oracle_guard(p)?;
    let n = p.frames();
    let classes = p.classes();
    let mut acc: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    let total = (classes as u64).pow(n as u32);
    let mut tokens = vec![0u32; n];
    for idx in 0..total {
        let mut rest = idx;
        let mut logp = 0.0;
        for t in 0..n {
            let c = (rest % classes as u64) as usize;
            rest /= classes as u64;
            tokens[t] = c as u32;
            logp += p.at(t, c);
        }
        let labels = Alignment::new(tokens.clone(), 1).unwrap().collapse();
        let e = acc.entry(labels.as_slice().to_vec()).or_insert(NEG_INF);
        *e = logsumexp2(*e, logp);
    }
    let mut out: Vec<(LabelSequence, f64)> =
        acc.into_iter().map(|(l, lp)| (LabelSequence::new(l).unwrap(), lp)).collect();
    out.sort_by(|(la, sa), (lb, sb)| {
        sb.total_cmp(sa)
            .then_with(|| la.len().cmp(&lb.len()))
            .then_with(|| la.as_slice().cmp(lb.as_slice()))
    });
    Ok(out)
}

/// Brute-force `log P_ctc(y | p)` by explicit enumeration of all alignments
/// whose collapse equals `y`. Independent of the forward DP; refuses
/// instances beyond the size guard.
pub fn ctc_brute_force(p: &FrameLogProbs, y: &LabelSequence) -> Result<f64, CtcError> {
    oracle_guard(p)?;
    check_labels(p, y)?;
    let n = p.frames();
    let classes = p.classes();
    let total = (classes as u64).pow(n as u32);
    let mut acc = NEG_INF;
    let mut tokens = vec![0u32; n];
    for idx in 0..total {
        let mut rest = idx;
        let mut logp = 0.0;
        for t in 0..n {
            let c = (rest % classes as u64) as usize;
            rest /= classes as u64;
            tokens[t] = c as u32;
            logp += p.at(t, c);
        }
        if Alignment::new(tokens.clone(), 1).unwrap().collapse().as_slice() == y.as_slice() {
            acc = logsumexp2(acc, logp);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_logprobs(frames: usize, classes: usize, seed: u64) -> FrameLogProbs {
        let mut r = DetRng::new(seed);
        let mut t = Tensor::zeros(frames, classes);
        for i in 0..frames {
            let row: Vec<f64> = (0..classes).map(|_| r.uniform_in(-3.0, 3.0)).collect();
            let lse = logsumexp(&row);
            for (c, v) in row.iter().enumerate() {
                t.set(i, c, v - lse);
            }
        }
        FrameLogProbs::new(t).unwrap()
    }

    #[test]
    fn uniform_two_frames_single_label() {
        // Alignments of [a] in 2 frames: {aa, a-, -a}, each 1/4.
        let p = FrameLogProbs::uniform(2, 2);
        let y = LabelSequence::new(vec![1]).unwrap();
        let got = ctc_log_prob(&p, &y);
        assert!((got - ln(0.75)).abs() < 1e-12);
        assert!((ctc_brute_force(&p, &y).unwrap() - ln(0.75)).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_is_all_blank_mass() {
        let p = random_logprobs(4, 3, 5);
        let want: f64 = (0..4).map(|t| p.at(t, 0)).sum();
        assert!((ctc_log_prob(&p, &LabelSequence::empty()) - want).abs() < 1e-12);
    }

    #[test]
    fn feasibility_counts_repeat_separators() {
        let y = |ids: &[u32]| LabelSequence::new(ids.to_vec()).unwrap();
        assert!(ctc_feasible(2, &y(&[1, 2])));
        assert!(!ctc_feasible(2, &y(&[1, 1])));
        assert!(ctc_feasible(3, &y(&[1, 1])));
        assert!(ctc_feasible(0, &LabelSequence::empty()));
    }

    #[test]
    fn infeasible_label_sequence_is_neg_inf() {
        let p = random_logprobs(2, 3, 6);
        let y = LabelSequence::new(vec![1, 1]).unwrap(); // needs 3 frames
        assert!(!ctc_feasible(p.frames(), &y));
        assert_eq!(ctc_log_prob(&p, &y), NEG_INF);
        let (lp, grad) = ctc_log_prob_with_grad(&p, &y);
        assert_eq!(lp, NEG_INF);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forward_matches_bruteforce_on_random_instances() {
        for seed in 0..40 {
            let mut r = DetRng::new(1000 + seed);
            let n = r.range_inclusive(1, 6);
            let v = r.range_inclusive(1, 3);
            let p = random_logprobs(n, v + 1, 2000 + seed);
            let ylen = r.range_inclusive(0, 3.min(n));
            let y = LabelSequence::new(
                (0..ylen).map(|_| (r.range_inclusive(1, v)) as u32).collect(),
            )
            .unwrap();
            let dp = ctc_log_prob(&p, &y);
            let bf = ctc_brute_force(&p, &y).unwrap();
            if bf == NEG_INF {
                assert_eq!(dp, NEG_INF);
            } else {
                assert!((dp - bf).abs() <= 1e-6, "seed {seed}: dp={dp} bf={bf}");
            }
        }
    }

    #[test]
    fn posterior_completeness_small() {
        // Sum of P(y) over all label sequences equals 1 for N <= 4.
        for seed in [1, 2, 3] {
            let p = random_logprobs(4, 4, 300 + seed);
            let post = enumerate_posteriors(&p).unwrap();
            let total: f64 = post.iter().map(|(_, lp)| exp(*lp)).sum();
            assert!((total - 1.0).abs() < 1e-6);
            // And the DP agrees per sequence.
            for (y, lp) in &post {
                let dp = ctc_log_prob(&p, y);
                assert!((dp - lp).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_logprobs(5, 4, 77);
        let y = LabelSequence::new(vec![2, 1]).unwrap();
        let (_, grad) = ctc_log_prob_with_grad(&p, &y);
        let step = 1e-5;
        for t in 0..5 {
            for c in 0..4 {
                let mut hi = p.clone();
                hi.values.set(t, c, p.at(t, c) + step);
                let mut lo = p.clone();
                lo.values.set(t, c, p.at(t, c) - step);
                let fd = (ctc_log_prob(&hi, &y) - ctc_log_prob(&lo, &y)) / (2.0 * step);
                assert!(
                    crate::math::rel_err(grad.at(t, c), fd) <= 1e-4,
                    "({t},{c}): analytic {} vs fd {fd}",
                    grad.at(t, c)
                );
            }
        }
    }

    #[test]
    fn greedy_takes_argmax_with_blank_tiebreak() {
        let mut t = Tensor::zeros(3, 3);
        // Frame 0 peaks on class 1, frame 1 on blank, frame 2 ties blank/1.
        for (row, vals) in [(0, [-2.0, -0.2, -3.0]), (1, [-0.1, -2.5, -3.0]), (2, [-0.7, -0.7, -3.0])] {
            for (c, v) in vals.iter().enumerate() {
                t.set(row, c, *v);
            }
        }
        let a = ctc_greedy(&FrameLogProbs::from_tensor_unchecked(t), 3);
        assert_eq!(a.tokens(), &[1, 0, 0]);
        assert_eq!(a.collapse().as_slice(), &[1]);
    }

    #[test]
    fn greedy_all_blank() {
        let mut t = Tensor::zeros(2, 2);
        t.set(0, 1, -5.0);
        t.set(1, 1, -5.0);
        let a = ctc_greedy(&FrameLogProbs::from_tensor_unchecked(t), 2);
        assert_eq!(a.tokens(), &[0, 0]);
    }

    #[test]
    fn beam_search_exact_against_enumeration() {
        for seed in 0..10 {
            let p = random_logprobs(3, 3, 500 + seed);
            let oracle = enumerate_posteriors(&p).unwrap();
            let hyps = ctc_beam_search(&p, 64);
            assert_eq!(hyps.len(), oracle.len());
            for (h, (y, lp)) in hyps.iter().zip(&oracle) {
                assert_eq!(h.labels, *y, "seed {seed}");
                assert!((h.score - lp).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn beam_scores_non_increasing_and_k_respected() {
        let p = random_logprobs(4, 4, 900);
        let hyps = ctc_beam_search(&p, 3);
        assert!(hyps.len() <= 3);
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn beam_k1_agrees_with_greedy_on_peaked_input() {
        let mut t = Tensor::zeros(3, 3);
        for (row, peak) in [(0usize, 1usize), (1, 0), (2, 2)] {
            for c in 0..3 {
                t.set(row, c, if c == peak { -0.01 } else { -8.0 });
            }
        }
        let p = FrameLogProbs::from_tensor_unchecked(t);
        let greedy_labels = ctc_greedy(&p, 3).collapse();
        let hyps = ctc_beam_search(&p, 1);
        assert_eq!(hyps[0].labels, greedy_labels);
    }

    #[test]
    fn oracle_guard_refuses_large_instances() {
        let p = FrameLogProbs::uniform(9, 2);
        assert!(matches!(
            ctc_brute_force(&p, &LabelSequence::empty()),
            Err(CtcError::OracleTooLarge { .. })
        ));
    }
}
