//! Randomized oracle equivalence for the CTC stack.

use align_refine_core::align::LabelSequence;
use align_refine_core::ctc::{
    ctc_beam_search, ctc_brute_force, ctc_log_prob, enumerate_posteriors, FrameLogProbs,
};
use align_refine_core::math::logsumexp;
use align_refine_core::tensor::Tensor;
use proptest::prelude::*;

fn arb_logprobs(max_frames: usize, max_vocab: usize) -> impl Strategy<Value = FrameLogProbs> {
    (1..=max_frames, 1..=max_vocab).prop_flat_map(|(n, v)| {
        proptest::collection::vec(-4.0f64..4.0, n * (v + 1)).prop_map(move |raw| {
            let mut t = Tensor::from_vec(n, v + 1, raw);
            for r in 0..n {
                let lse = logsumexp(t.row(r));
                for c in 0..v + 1 {
                    t.set(r, c, t.at(r, c) - lse);
                }
            }
            FrameLogProbs::new(t).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_dp_matches_enumeration(
        p in arb_logprobs(6, 3),
        label_raw in proptest::collection::vec(1u32..4, 0..4),
    ) {
        let labels: Vec<u32> = label_raw
            .into_iter()
            .map(|l| 1 + (l - 1) % (p.classes() as u32 - 1))
            .collect();
        let y = LabelSequence::new(labels).unwrap();
        let dp = ctc_log_prob(&p, &y);
        let bf = ctc_brute_force(&p, &y).unwrap();
        if bf.is_finite() {
            prop_assert!((dp - bf).abs() <= 1e-6, "dp {dp} vs bf {bf}");
        } else {
            prop_assert_eq!(dp, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn unpruned_beam_reproduces_exact_ranking(p in arb_logprobs(3, 2)) {
        let oracle = enumerate_posteriors(&p).unwrap();
        let hyps = ctc_beam_search(&p, oracle.len() + 8);
        prop_assert_eq!(hyps.len(), oracle.len());
        for (h, (y, lp)) in hyps.iter().zip(&oracle) {
            prop_assert_eq!(&h.labels, y);
            prop_assert!((h.score - lp).abs() < 1e-9);
        }
    }

    /// Duplicating a frame never makes the (exact, unpruned) beam disagree
    /// with enumeration: the rank-violation count stays at zero.
    #[test]
    fn frame_duplication_keeps_beam_exact(p in arb_logprobs(3, 2), frame_frac in 0.0f64..1.0) {
        let violations = |p: &FrameLogProbs| {
            let oracle = enumerate_posteriors(p).unwrap();
            let hyps = ctc_beam_search(p, oracle.len() + 8);
            hyps.iter()
                .zip(&oracle)
                .filter(|(h, (y, _))| &h.labels != y)
                .count()
        };
        let before = violations(&p);

        let dup = (p.frames() as f64 * frame_frac) as usize;
        let dup = dup.min(p.frames() - 1);
        let mut rows = Vec::new();
        for t in 0..p.frames() {
            rows.extend_from_slice(p.row(t));
            if t == dup {
                rows.extend_from_slice(p.row(t));
            }
        }
        let p2 = FrameLogProbs::new(Tensor::from_vec(p.frames() + 1, p.classes(), rows)).unwrap();
        let after = violations(&p2);
        prop_assert!(after <= before);
        prop_assert_eq!(after, 0);
    }

    #[test]
    fn posteriors_sum_to_one(p in arb_logprobs(4, 3)) {
        let total: f64 = enumerate_posteriors(&p)
            .unwrap()
            .iter()
            .map(|(_, lp)| lp.exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }
}
