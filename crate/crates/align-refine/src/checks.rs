//! Oracle and invariant check suites.
//!
//! Each check returns `Err(description)` on the first violated assertion.
//! The `selftest` CLI command and the acceptance test suite both run these
//! with pinned sizes, tolerances, and seeds.

use align_refine_core::align::{Alignment, LabelSequence, Timestamps};
use align_refine_core::ctc::{
    ctc_beam_search, ctc_brute_force, ctc_log_prob, enumerate_posteriors, FrameLogProbs,
};
use align_refine_core::decoder::{
    build_mle_loss_fixed_inputs, build_refine_step, mle_loss, refine_step, reference::reference_forward,
    BoundParams, DecoderConfig, EncoderOutput, ModelParams, RefinementTrace,
};
use align_refine_core::delay::{model_delay, receptive_bound, total_delay, DelayConfig};
use align_refine_core::graph::Graph;
use align_refine_core::mask::{time_aligned_cross_mask, MaskSpec};
use align_refine_core::math::logsumexp;
use align_refine_core::mwer::{build_mwer_with_hypotheses, MwerConfig};
use align_refine_core::rng::{derive_seed, DetRng};
use align_refine_core::tensor::Tensor;

type Check = Result<(), String>;

fn fail(msg: impl Into<String>) -> Check {
    Err(msg.into())
}

/// Delay arithmetic against the published per-step and total values
/// (L=6, f=60 ms): {0.36, 0.72, 1.80} without audio self-attention,
/// {0.42, 0.84, 2.10} with it, and totals 0.84/1.68/4.20 over steps.
pub fn check_delay_table() -> Check {
    let cases = [
        (1usize, false, 0.36),
        (2, false, 0.72),
        (5, false, 1.80),
        (1, true, 0.42),
        (2, true, 0.84),
        (5, true, 2.10),
    ];
    for (c, audio_sa, want) in cases {
        let cfg = DelayConfig {
            layers: 6,
            right_per_layer: c,
            frame_size: 0.06,
            audio_self_attention: audio_sa,
            steps: 1,
        };
        let got = model_delay(&cfg);
        if (got - want).abs() > 1e-9 {
            return fail(format!("per-step delay C={c} audio_sa={audio_sa}: {got} != {want}"));
        }
    }
    let totals = [(2usize, true, 1usize, 0.84), (2, true, 2, 1.68), (5, true, 2, 4.20)];
    for (c, audio_sa, steps, want) in totals {
        let cfg = DelayConfig {
            layers: 6,
            right_per_layer: c,
            frame_size: 0.06,
            audio_self_attention: audio_sa,
            steps,
        };
        let got = total_delay(&cfg);
        if (got - want).abs() > 1e-9 {
            return fail(format!("total delay C={c} steps={steps}: {got} != {want}"));
        }
    }
    let zero = DelayConfig {
        layers: 6,
        right_per_layer: 0,
        frame_size: 0.06,
        audio_self_attention: true,
        steps: 3,
    };
    if model_delay(&zero) != 0.0 || total_delay(&zero) != 0.0 {
        return fail("zero right context must give zero delay");
    }
    Ok(())
}

/// The worked alignment example: 3 labels against 5 frames maps to frame
/// indices [0,1,1,2,3,4,4,4].
pub fn check_timestamp_example() -> Check {
    let a = Alignment::new(vec![0, 1, 0, 0, 0, 2, 3, 0], 5).map_err(|e| e.to_string())?;
    let got = a.timestamps();
    let want = [0usize, 1, 1, 2, 3, 4, 4, 4];
    if got.as_slice() != want {
        return fail(format!("timestamps {:?} != {:?}", got.as_slice(), want));
    }
    Ok(())
}

/// The 8x7 cross-attention mask illustration: row 4 with timestamp 3, left
/// context 2, right context 1 admits audio frames {1,2,3,4}.
pub fn check_cross_mask_example() -> Check {
    let times = Timestamps::from_times(vec![0, 1, 1, 2, 3, 4, 5, 6]);
    let m = time_aligned_cross_mask(&times, 7, &MaskSpec::new(Some(2), 1));
    if m.row_span(4) != (1..5) {
        return fail(format!("row 4 span {:?} != 1..5", m.row_span(4)));
    }
    for q in 0..m.num_queries() {
        if m.row_span(q).is_empty() {
            return fail(format!("row {q} empty"));
        }
    }
    Ok(())
}

fn random_logprobs(rng: &mut DetRng, frames: usize, classes: usize) -> FrameLogProbs {
    let mut t = Tensor::zeros(frames, classes);
    for r in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let lse = logsumexp(&row);
        for (c, v) in row.iter().enumerate() {
            t.set(r, c, v - lse);
        }
    }
    FrameLogProbs::new(t).expect("normalized rows")
}

/// CTC forward DP vs the enumeration oracle on random instances
/// (N <= 6, |y| <= 3, |V| <= 3), |difference| <= 1e-6; plus posterior
/// completeness sum over all label sequences = 1 +- 1e-6 for N <= 4.
pub fn check_ctc_oracle(instances: usize, seed: u64) -> Check {
    let mut rng = DetRng::new(seed);
    for i in 0..instances {
        let frames = rng.range_inclusive(1, 6);
        let vocab = rng.range_inclusive(1, 3);
        let p = random_logprobs(&mut rng, frames, vocab + 1);
        let ylen = rng.range_inclusive(0, 3);
        let y = LabelSequence::new(
            (0..ylen).map(|_| rng.range_inclusive(1, vocab) as u32).collect(),
        )
        .expect("no blanks");
        let dp = ctc_log_prob(&p, &y);
        let bf = ctc_brute_force(&p, &y).map_err(|e| e.to_string())?;
        if bf.is_finite() {
            if (dp - bf).abs() > 1e-6 {
                return fail(format!("instance {i}: forward {dp} vs enumeration {bf}"));
            }
        } else if dp != f64::NEG_INFINITY {
            return fail(format!("instance {i}: infeasible y must give -inf, got {dp}"));
        }
    }
    // Completeness on N <= 4.
    for i in 0..20 {
        let frames = rng.range_inclusive(1, 4);
        let vocab = rng.range_inclusive(1, 3);
        let p = random_logprobs(&mut rng, frames, vocab + 1);
        let total: f64 =
            enumerate_posteriors(&p).map_err(|e| e.to_string())?.iter().map(|(_, lp)| lp.exp()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return fail(format!("completeness instance {i}: sum {total}"));
        }
    }
    Ok(())
}

/// Prefix beam search with K >= #sequences reproduces the exact enumeration
/// ranking on instances with N <= 3, |V| <= 2.
pub fn check_beam_oracle(instances: usize, seed: u64) -> Check {
    let mut rng = DetRng::new(seed);
    for i in 0..instances {
        let frames = rng.range_inclusive(1, 3);
        let vocab = rng.range_inclusive(1, 2);
        let p = random_logprobs(&mut rng, frames, vocab + 1);
        let oracle = enumerate_posteriors(&p).map_err(|e| e.to_string())?;
        let hyps = ctc_beam_search(&p, oracle.len() + 4);
        if hyps.len() != oracle.len() {
            return fail(format!("instance {i}: {} hyps vs {} sequences", hyps.len(), oracle.len()));
        }
        for (rank, (h, (y, lp))) in hyps.iter().zip(&oracle).enumerate() {
            if h.labels != *y {
                return fail(format!("instance {i} rank {rank}: {:?} != {:?}", h.labels, y));
            }
            if (h.score - lp).abs() > 1e-9 {
                return fail(format!("instance {i} rank {rank}: score {} vs {}", h.score, lp));
            }
        }
    }
    Ok(())
}

/// Tiny model for the gradient checks: d=8, L=2, alignment length <= 6.
fn tiny_grad_cfg() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        vocab: 3,
        audio_dim: 3,
        max_positions: 6,
        right_context: 1,
        text_left: None,
        cross_left: Some(1),
        audio_left: None,
        audio_self_attention: true,
        bottom_audio_self_attention: true,
        steps: 2,
        frame_size: 0.06,
    }
}

fn tiny_instance(seed: u64) -> (Alignment, EncoderOutput, LabelSequence) {
    let mut rng = DetRng::new(seed);
    // 4 frames, 2 labels: alignment length 6.
    let a = Alignment::new(vec![0, 1, 0, 2, 0, 0], 4).expect("valid");
    let enc = EncoderOutput::new(Tensor::from_vec(
        4,
        3,
        (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    ));
    let y = LabelSequence::new(vec![1, 2]).expect("no blank");
    (a, enc, y)
}

/// Per-group comparison of analytic vs central-difference gradients:
/// ||a - n|| / max(||a||, ||n||, 1e-8) <= 1e-4 for every parameter tensor,
/// finite differences with step 1e-5 over every element.
fn compare_group_grads<F>(params: &ModelParams, analytic: &[Tensor], loss_fn: F) -> Check
where
    F: Fn(&ModelParams) -> f64,
{
    const STEP: f64 = 1e-5;
    for i in 0..params.num_tensors() {
        let base = (**params.tensor(i)).clone();
        let mut fd = Tensor::zeros(base.rows(), base.cols());
        for e in 0..base.len() {
            let mut hi = params.clone();
            hi.tensor_mut(i).data_mut()[e] = base.data()[e] + STEP;
            let mut lo = params.clone();
            lo.tensor_mut(i).data_mut()[e] = base.data()[e] - STEP;
            fd.data_mut()[e] = (loss_fn(&hi) - loss_fn(&lo)) / (2.0 * STEP);
        }
        let a = &analytic[i];
        let diff: f64 = a
            .data()
            .iter()
            .zip(fd.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a.sq_norm().sqrt().max(fd.sq_norm().sqrt());
        // Below the central-difference noise floor both estimates are zero;
        // e.g. key-projection biases shift every score in a softmax row
        // equally and have exactly zero gradient.
        if scale < 1e-7 {
            if diff > 1e-7 {
                return fail(format!(
                    "parameter group {}: near-zero gradients disagree by {diff:.3e}",
                    params.name(i)
                ));
            }
            continue;
        }
        let rel = diff / scale;
        if rel > 1e-4 {
            return fail(format!(
                "parameter group {}: relative gradient error {rel:.3e}",
                params.name(i)
            ));
        }
    }
    Ok(())
}

/// Finite-difference check of the S-step MLE objective on the tiny model.
/// The greedy relabeling between steps is a stop-gradient, so both sides
/// hold the recorded per-step input alignments fixed.
pub fn check_mle_gradients(seed: u64) -> Check {
    let cfg = tiny_grad_cfg();
    let params = ModelParams::init(&cfg, seed).map_err(|e| e.to_string())?;
    let (a0, enc, y) = tiny_instance(derive_seed(seed, 1));

    let (_, trace) = mle_loss(&a0, &enc, &params, &y, cfg.steps).map_err(|e| e.to_string())?;
    let inputs: Vec<Alignment> = trace.trace.steps.iter().map(|s| s.input.clone()).collect();

    let eval_loss = |p: &ModelParams| -> f64 {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, p);
        let enc_var = g.constant(enc.features().clone());
        let loss = build_mle_loss_fixed_inputs(&mut g, p, &bound, &inputs, &enc, enc_var, &y)
            .expect("valid build");
        g.value(loss).at(0, 0)
    };

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &params);
    let enc_var = g.constant(enc.features().clone());
    let loss = build_mle_loss_fixed_inputs(&mut g, &params, &bound, &inputs, &enc, enc_var, &y)
        .map_err(|e| e.to_string())?;
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = (0..params.num_tensors())
        .map(|i| match grads.get(bound.var(i)) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            }
        })
        .collect();

    compare_group_grads(&params, &analytic, eval_loss)
}

/// Finite-difference check of the composite MWER objective (K=4, S'=1,
/// gamma=0.005) with the hypothesis set held fixed, matching the objective's
/// definition (hypothesis selection is not differentiated).
pub fn check_mwer_gradients(seed: u64) -> Check {
    let cfg = tiny_grad_cfg();
    let mwer_cfg = MwerConfig { k: 4, steps: 1, gamma: 0.005 };
    let params = ModelParams::init(&cfg, seed).map_err(|e| e.to_string())?;
    let (a0, enc, y) = tiny_instance(derive_seed(seed, 2));

    // Fix the hypothesis set at the base parameters.
    let (log_probs, _) = refine_step(&a0, &enc, &params).map_err(|e| e.to_string())?;
    let hyps = ctc_beam_search(&log_probs, mwer_cfg.k);

    let eval_loss = |p: &ModelParams| -> f64 {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, p);
        let enc_var = g.constant(enc.features().clone());
        let lp = build_refine_step(&mut g, p, &bound, &a0, enc_var).expect("valid build");
        let built = build_mwer_with_hypotheses(
            &mut g,
            &y,
            &mwer_cfg,
            &[lp],
            hyps.clone(),
            RefinementTrace { steps: Vec::new() },
        )
        .expect("valid build");
        g.value(built.composite).at(0, 0)
    };

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &params);
    let enc_var = g.constant(enc.features().clone());
    let lp = build_refine_step(&mut g, &params, &bound, &a0, enc_var).map_err(|e| e.to_string())?;
    let built = build_mwer_with_hypotheses(
        &mut g,
        &y,
        &mwer_cfg,
        &[lp],
        hyps.clone(),
        RefinementTrace { steps: Vec::new() },
    )
    .map_err(|e| e.to_string())?;
    let grads = g.backward(built.composite);
    let analytic: Vec<Tensor> = (0..params.num_tensors())
        .map(|i| match grads.get(bound.var(i)) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            }
        })
        .collect();

    compare_group_grads(&params, &analytic, eval_loss)
}

/// Streaming causality over random configs (L in {2,3,4}, C in {0,1,2},
/// audio self-attention on/off):
///   - perturbing encoder frames beyond `t + D*C` changes no logit at
///     positions with timestamp <= t by more than 1e-12;
///   - perturbing frame `t + D*C` itself changes some such logit
///     (bound tightness).
pub fn check_causality(configs: usize, seed: u64) -> Check {
    let mut rng = DetRng::new(seed);
    for ci in 0..configs {
        let layers = [2, 3, 4][rng.below(3)];
        let c = [0, 1, 2][rng.below(3)];
        let audio_sa = rng.below(2) == 1;
        let cfg = DecoderConfig {
            layers,
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            vocab: 4,
            audio_dim: 5,
            max_positions: 64,
            right_context: c,
            text_left: None,
            cross_left: Some(2),
            audio_left: None,
            audio_self_attention: audio_sa,
            bottom_audio_self_attention: true,
            steps: 1,
            frame_size: 0.06,
        };
        let depth = layers + usize::from(audio_sa);
        let bound = depth * c;
        if bound != cfg.receptive_bound()
            || bound
                != receptive_bound(&DelayConfig {
                    layers,
                    right_per_layer: c,
                    frame_size: 0.06,
                    audio_self_attention: audio_sa,
                    steps: 1,
                })
        {
            return fail(format!("config {ci}: receptive bound disagreement"));
        }

        let t = rng.range_inclusive(1, 2);
        let frames = t + bound + 3;
        // One label at position 0, then all blanks: positions 0..=t+1 carry
        // timestamps <= t and times advance one frame per position after it.
        let mut tokens = vec![rng.range_inclusive(1, 4) as u32];
        tokens.extend(std::iter::repeat(0u32).take(frames));
        let a = Alignment::new(tokens, frames).map_err(|e| e.to_string())?;
        let times = a.timestamps();
        let params = ModelParams::init(&cfg, derive_seed(seed, 1000 + ci as u64))
            .map_err(|e| e.to_string())?;
        let enc_base = {
            let mut rr = DetRng::new(derive_seed(seed, 2000 + ci as u64));
            Tensor::from_vec(
                frames,
                cfg.audio_dim,
                (0..frames * cfg.audio_dim).map(|_| rr.uniform_in(-1.0, 1.0)).collect(),
            )
        };
        let base = refine_step(&a, &EncoderOutput::new(enc_base.clone()), &params)
            .map_err(|e| e.to_string())?
            .0;

        let protected: Vec<usize> =
            (0..a.len()).filter(|&i| times.get(i) <= t).collect();

        // Beyond the bound: no protected logit moves.
        if t + bound + 1 < frames {
            let mut enc2 = enc_base.clone();
            for f in (t + bound + 1)..frames {
                for v in enc2.row_mut(f) {
                    *v += 1.0;
                }
            }
            let out = refine_step(&a, &EncoderOutput::new(enc2), &params)
                .map_err(|e| e.to_string())?
                .0;
            for &i in &protected {
                for cl in 0..cfg.classes() {
                    let d = (base.at(i, cl) - out.at(i, cl)).abs();
                    if d > 1e-12 {
                        return fail(format!(
                            "config {ci} (L={layers} C={c} audio_sa={audio_sa}): leak {d:.3e} at position {i} class {cl}"
                        ));
                    }
                }
            }
        } else {
            return fail(format!("config {ci}: no frames beyond the bound to perturb"));
        }

        // The boundary frame itself must reach some protected logit.
        let mut enc3 = enc_base.clone();
        for v in enc3.row_mut(t + bound) {
            *v += 1.0;
        }
        let out = refine_step(&a, &EncoderOutput::new(enc3), &params)
            .map_err(|e| e.to_string())?
            .0;
        let mut max_delta = 0.0f64;
        for &i in &protected {
            for cl in 0..cfg.classes() {
                max_delta = max_delta.max((base.at(i, cl) - out.at(i, cl)).abs());
            }
        }
        if max_delta <= 1e-12 {
            return fail(format!(
                "config {ci} (L={layers} C={c} audio_sa={audio_sa}): bound not tight, frame {} unreachable",
                t + bound
            ));
        }
    }
    Ok(())
}

/// Streaming decoder with all-allow masks vs the mask-free reference
/// forward, within 1e-10.
pub fn check_offline_equivalence(instances: usize, seed: u64) -> Check {
    let mut rng = DetRng::new(seed);
    for i in 0..instances {
        let layers = rng.range_inclusive(1, 3);
        let audio_sa = rng.below(2) == 1;
        let bottom = rng.below(2) == 1;
        let base = DecoderConfig {
            layers,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 3,
            audio_dim: 4,
            max_positions: 32,
            right_context: 1,
            text_left: Some(2),
            cross_left: Some(1),
            audio_left: Some(3),
            audio_self_attention: audio_sa,
            bottom_audio_self_attention: bottom,
            steps: 1,
            frame_size: 0.06,
        };
        let frames = rng.range_inclusive(3, 8);
        let labels = rng.range_inclusive(0, 3);
        let mut tokens = vec![0u32; frames];
        for _ in 0..labels {
            let pos = rng.below(tokens.len() + 1);
            tokens.insert(pos, rng.range_inclusive(1, 3) as u32);
        }
        let a = Alignment::new(tokens, frames).map_err(|e| e.to_string())?;
        let seq = a.len().max(frames);
        let cfg = base.offline(seq);
        let params =
            ModelParams::init(&cfg, derive_seed(seed, 3000 + i as u64)).map_err(|e| e.to_string())?;
        let enc = EncoderOutput::new({
            let mut rr = DetRng::new(derive_seed(seed, 4000 + i as u64));
            Tensor::from_vec(
                frames,
                cfg.audio_dim,
                (0..frames * cfg.audio_dim).map(|_| rr.uniform_in(-1.0, 1.0)).collect(),
            )
        });
        let streaming = refine_step(&a, &enc, &params).map_err(|e| e.to_string())?.0;
        let reference = reference_forward(&a, &enc, &params).map_err(|e| e.to_string())?;
        for r in 0..a.len() {
            for cl in 0..cfg.classes() {
                let d = (streaming.at(r, cl) - reference.at(r, cl)).abs();
                if d > 1e-10 {
                    return fail(format!("instance {i}: divergence {d:.3e} at ({r},{cl})"));
                }
            }
        }
    }
    Ok(())
}
