//! Training loops: S-step MLE, MWER finetuning, and evaluation over
//! refinement steps.
//!
//! Determinism contract: given (seed, config, corpus), every metric is
//! bit-identical across runs and independent of `train.threads`. Batch
//! members come from a per-step derived RNG (no mutable RNG state across
//! steps, so resuming from a checkpoint replays the schedule exactly), and
//! per-utterance gradients are accumulated in utterance order regardless of
//! which worker produced them.

use std::time::Instant;

use align_refine_core::align::LabelSequence;
use align_refine_core::ctc::ctc_feasible;
use align_refine_core::decoder::{
    build_mle_loss, refine, BoundParams, ModelParams,
};
use align_refine_core::graph::Graph;
use align_refine_core::mwer::build_mwer_composite;
use align_refine_core::optim::{clip_global_norm, Adam};
use align_refine_core::rng::{derive_seed, DetRng};
use align_refine_core::synth::corpus_wer;
use align_refine_core::tensor::Tensor;
use anyhow::{bail, Result};

use crate::config::Config;
use crate::corpus::{Corpus, CorpusUtterance};
use crate::metrics::MetricsLog;
use crate::NumericFailure;

const BATCH_NAMESPACE: u64 = 0xBA7C_0000_0000_0001;

/// Model + optimizer + step counter; everything a resume needs.
pub struct TrainState {
    pub params: ModelParams,
    pub opt: Adam,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub first_pass_wer: f64,
    /// WER after refinement step 1, 2, ..., steps.
    pub step_wer: Vec<f64>,
}

/// Deterministic order-preserving parallel map: worker `k` handles indices
/// `k, k+threads, ...`; results come back in index order.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for k in 0..threads {
            let f = &f;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = k;
                while i < n {
                    out.push((i, f(i)));
                    i += threads;
                }
                out
            }));
        }
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

/// Per-utterance MLE gradients; `None` when the reference cannot fit the
/// first-pass alignment length (skipped and counted by the caller).
fn mle_grads(
    params: &ModelParams,
    cu: &CorpusUtterance,
    steps: usize,
) -> Result<Option<(Vec<Tensor>, f64)>> {
    if !ctc_feasible(cu.first_pass.len(), &cu.utt.reference) {
        return Ok(None);
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let enc_var = g.constant(cu.utt.features.features().clone());
    let built = build_mle_loss(
        &mut g,
        params,
        &bound,
        &cu.first_pass,
        &cu.utt.features,
        enc_var,
        &cu.utt.reference,
        steps,
    )
    .map_err(|e| anyhow::anyhow!("{}: {e}", cu.utt.id))?;
    let loss = g.value(built.loss).at(0, 0);
    let grads = g.backward(built.loss);
    let out = collect_param_grads(params, &bound, &grads);
    Ok(Some((out, loss)))
}

fn collect_param_grads(
    params: &ModelParams,
    bound: &BoundParams,
    grads: &align_refine_core::graph::Grads,
) -> Vec<Tensor> {
    (0..params.num_tensors())
        .map(|i| match grads.get(bound.var(i)) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            }
        })
        .collect()
}

fn batch_indices(seed: u64, step: usize, corpus_len: usize, batch: usize) -> Vec<usize> {
    let mut rng = DetRng::new(derive_seed(seed ^ BATCH_NAMESPACE, step as u64));
    (0..batch).map(|_| rng.below(corpus_len)).collect()
}

fn accumulate(sum: &mut [Tensor], part: &[Tensor]) {
    for (a, b) in sum.iter_mut().zip(part) {
        a.add_assign(b);
    }
}

fn eval_fields(report: &EvalReport) -> String {
    let mut s = format!("first_pass_wer={}", report.first_pass_wer);
    for (i, w) in report.step_wer.iter().enumerate() {
        s.push_str(&format!(" wer{}={}", i + 1, w));
    }
    s
}

/// Decodes the corpus with `steps` refinement steps and reports WER after
/// each step plus the first-pass WER. `steps = 0` reports the first pass
/// only.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    steps: usize,
    threads: usize,
) -> Result<EvalReport> {
    let refs = corpus.references();
    let first = corpus.first_pass_labels();
    let first_pass_wer = corpus_wer(&first, &refs).expect("counts equal");
    if steps == 0 {
        return Ok(EvalReport { first_pass_wer, step_wer: Vec::new() });
    }
    let decoded: Vec<Result<Vec<LabelSequence>>> = parallel_map(corpus.len(), threads, |i| {
        let cu = &corpus.utterances[i];
        let trace = refine(&cu.first_pass, &cu.utt.features, params, steps)
            .map_err(|e| anyhow::anyhow!("{}: {e}", cu.utt.id))?;
        Ok(trace.steps.iter().map(|s| s.greedy.collapse()).collect())
    });
    let mut per_step: Vec<Vec<LabelSequence>> = vec![Vec::with_capacity(corpus.len()); steps];
    for r in decoded {
        let labels = r?;
        for (s, l) in labels.into_iter().enumerate() {
            per_step[s].push(l);
        }
    }
    let step_wer = per_step
        .iter()
        .map(|hyps| corpus_wer(hyps, &refs).expect("counts equal"))
        .collect();
    Ok(EvalReport { first_pass_wer, step_wer })
}

/// MLE training. Optimizes the S-step objective with Adam under the
/// warmup-then-inverse-sqrt schedule, gradients clipped at
/// `train.clip_norm`. Emits `train` records every `log_every` steps and
/// `eval` records every `eval_every` steps.
pub fn train_mle(
    corpus: &Corpus,
    eval_corpus: &Corpus,
    cfg: &Config,
    log: &mut MetricsLog,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    if corpus.is_empty() {
        bail!("training corpus is empty");
    }
    let dec_cfg = cfg.decoder_config();
    dec_cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let schedule = cfg.schedule();
    let (mut params, mut opt, start_step) = match resume {
        Some(state) => (state.params, state.opt, state.step),
        None => (
            ModelParams::init(&dec_cfg, cfg.train_seed).map_err(|e| anyhow::anyhow!("{e}"))?,
            Adam::new(&ModelParams::init(&dec_cfg, cfg.train_seed).map_err(|e| anyhow::anyhow!("{e}"))?),
            0,
        ),
    };
    log.record(format!(
        "begin mode=mle start_step={start_step} max_steps={} seed={} corpus={} eval={}",
        cfg.max_steps,
        cfg.train_seed,
        corpus.len(),
        eval_corpus.len()
    ));

    let mut total_skipped = 0usize;
    for step in (start_step + 1)..=cfg.max_steps {
        let t0 = Instant::now();
        let indices = batch_indices(cfg.train_seed, step, corpus.len(), cfg.batch_size);
        let results = parallel_map(indices.len(), cfg.threads, |slot| {
            mle_grads(&params, &corpus.utterances[indices[slot]], cfg.steps)
        });

        let mut sum: Vec<Tensor> = (0..params.num_tensors())
            .map(|i| {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for r in results {
            match r? {
                Some((grads, loss)) => {
                    accumulate(&mut sum, &grads);
                    loss_sum += loss;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        total_skipped += skipped;
        if used == 0 {
            log.record(format!("train step={step} loss=nan used=0 skipped={skipped}"));
            continue;
        }
        let scale = 1.0 / used as f64;
        for t in sum.iter_mut() {
            t.scale_in_place(scale);
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(NumericFailure(format!("MLE loss diverged at step {step}: {loss}")).into());
        }
        let grad_norm = clip_global_norm(&mut sum, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(NumericFailure(format!("gradient norm diverged at step {step}")).into());
        }
        let lr = schedule.lr_at(step);
        opt.step(&mut params, &sum, lr);

        if step % cfg.log_every == 0 || step == cfg.max_steps {
            log.record(format!(
                "train step={step} loss={loss} lr={lr} grad_norm={grad_norm} used={used} skipped={skipped} wall_ms={}",
                t0.elapsed().as_millis()
            ));
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let te = Instant::now();
            let report = evaluate(&params, eval_corpus, cfg.steps, cfg.threads)?;
            log.record(format!(
                "eval step={step} {} wall_ms={}",
                eval_fields(&report),
                te.elapsed().as_millis()
            ));
        }
    }
    log.record(format!("end mode=mle steps={} skipped_total={total_skipped}", cfg.max_steps));
    Ok(TrainState { params, opt, step: cfg.max_steps })
}

/// Per-utterance composite MWER gradients plus (composite, expected-NWE,
/// MLE) values.
fn mwer_grads(
    params: &ModelParams,
    cu: &CorpusUtterance,
    cfg: &Config,
) -> Result<Option<(Vec<Tensor>, f64, f64, f64)>> {
    if !ctc_feasible(cu.first_pass.len(), &cu.utt.reference) {
        return Ok(None);
    }
    let mwer_cfg = cfg.mwer_config();
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let enc_var = g.constant(cu.utt.features.features().clone());
    let built = build_mwer_composite(
        &mut g,
        params,
        &bound,
        &cu.first_pass,
        &cu.utt.features,
        enc_var,
        &cu.utt.reference,
        &mwer_cfg,
    )
    .map_err(|e| anyhow::anyhow!("{}: {e}", cu.utt.id))?;
    let composite = g.value(built.composite).at(0, 0);
    let grads = g.backward(built.composite);
    let out = collect_param_grads(params, &bound, &grads);
    Ok(Some((out, composite, built.mwer_value, built.mle_value)))
}

/// Mean expected-NWE term of the MWER objective over a fixed corpus prefix;
/// the before/after measurement for discriminative training.
pub fn mean_expected_nwe(
    params: &ModelParams,
    corpus: &Corpus,
    cfg: &Config,
    sample: usize,
) -> Result<f64> {
    let n = corpus.len().min(sample);
    let mwer_cfg = cfg.mwer_config();
    let vals: Vec<Result<Option<f64>>> = parallel_map(n, cfg.threads, |i| {
        let cu = &corpus.utterances[i];
        if !ctc_feasible(cu.first_pass.len(), &cu.utt.reference) {
            return Ok(None);
        }
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params);
        let enc_var = g.constant(cu.utt.features.features().clone());
        let built = build_mwer_composite(
            &mut g,
            params,
            &bound,
            &cu.first_pass,
            &cu.utt.features,
            enc_var,
            &cu.utt.reference,
            &mwer_cfg,
        )
        .map_err(|e| anyhow::anyhow!("{}: {e}", cu.utt.id))?;
        Ok(Some(built.mwer_value))
    });
    let mut sum = 0.0;
    let mut used = 0usize;
    for v in vals {
        if let Some(x) = v? {
            sum += x;
            used += 1;
        }
    }
    if used == 0 {
        bail!("no feasible utterances for expected-NWE measurement");
    }
    Ok(sum / used as f64)
}

/// Outcome of MWER finetuning, including the before/after expected-NWE term.
pub struct MwerOutcome {
    pub state: TrainState,
    pub expected_nwe_start: f64,
    pub expected_nwe_end: f64,
}

/// Discriminative finetuning with the composite loss. Final inference stays
/// greedy; beam search only generates training hypotheses.
pub fn finetune_mwer(
    corpus: &Corpus,
    eval_corpus: &Corpus,
    cfg: &Config,
    params: ModelParams,
    log: &mut MetricsLog,
) -> Result<MwerOutcome> {
    if corpus.is_empty() {
        bail!("finetuning corpus is empty");
    }
    cfg.mwer_config().validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let schedule = cfg.mwer_schedule();
    let nwe_sample = 500;
    let expected_nwe_start = mean_expected_nwe(&params, corpus, cfg, nwe_sample)?;
    log.record(format!(
        "begin mode=mwer max_steps={} k={} sprime={} gamma={} expected_nwe_start={expected_nwe_start}",
        cfg.mwer_max_steps, cfg.mwer_beam, cfg.mwer_steps, cfg.mwer_gamma
    ));

    let mut params = params;
    let mut opt = Adam::new(&params);
    for step in 1..=cfg.mwer_max_steps {
        let t0 = Instant::now();
        let indices =
            batch_indices(cfg.train_seed ^ 0x33EE_0000, step, corpus.len(), cfg.batch_size);
        let results = parallel_map(indices.len(), cfg.threads, |slot| {
            mwer_grads(&params, &corpus.utterances[indices[slot]], cfg)
        });
        let mut sum: Vec<Tensor> = (0..params.num_tensors())
            .map(|i| {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        let (mut composite_sum, mut nwe_sum, mut mle_sum) = (0.0, 0.0, 0.0);
        let mut used = 0usize;
        let mut skipped = 0usize;
        for r in results {
            match r? {
                Some((grads, composite, nwe, mle)) => {
                    accumulate(&mut sum, &grads);
                    composite_sum += composite;
                    nwe_sum += nwe;
                    mle_sum += mle;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        if used == 0 {
            log.record(format!("mwer step={step} used=0 skipped={skipped}"));
            continue;
        }
        let scale = 1.0 / used as f64;
        for t in sum.iter_mut() {
            t.scale_in_place(scale);
        }
        let composite = composite_sum * scale;
        if !composite.is_finite() {
            return Err(
                NumericFailure(format!("MWER loss diverged at step {step}: {composite}")).into()
            );
        }
        let grad_norm = clip_global_norm(&mut sum, cfg.clip_norm);
        let lr = schedule.lr_at(step);
        opt.step(&mut params, &sum, lr);

        if step % cfg.log_every == 0 || step == cfg.mwer_max_steps {
            log.record(format!(
                "mwer step={step} composite={composite} expected_nwe={} mle={} lr={lr} grad_norm={grad_norm} used={used} skipped={skipped} wall_ms={}",
                nwe_sum * scale,
                mle_sum * scale,
                t0.elapsed().as_millis()
            ));
        }
        if step % cfg.eval_every == 0 || step == cfg.mwer_max_steps {
            let te = Instant::now();
            let report = evaluate(&params, eval_corpus, cfg.steps, cfg.threads)?;
            log.record(format!(
                "eval step={step} {} wall_ms={}",
                eval_fields(&report),
                te.elapsed().as_millis()
            ));
        }
    }

    let expected_nwe_end = mean_expected_nwe(&params, corpus, cfg, nwe_sample)?;
    log.record(format!(
        "end mode=mwer expected_nwe_start={expected_nwe_start} expected_nwe_end={expected_nwe_end}"
    ));
    Ok(MwerOutcome {
        state: TrainState { params, opt, step: cfg.mwer_max_steps },
        expected_nwe_start,
        expected_nwe_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.layers = 2;
        cfg.dim = 16;
        cfg.heads = 2;
        cfg.ffn_dim = 32;
        cfg.vocab = 6;
        cfg.audio_dim = 6;
        cfg.max_positions = 48;
        cfg.min_labels = 2;
        cfg.max_labels = 4;
        cfg.max_duration = 2;
        cfg.steps = 2;
        cfg.batch_size = 4;
        cfg.max_steps = 8;
        cfg.eval_every = 4;
        cfg.log_every = 2;
        cfg.warmup_steps = 4;
        cfg
    }

    #[test]
    fn parallel_map_matches_serial_and_thread_counts() {
        let serial = parallel_map(13, 1, |i| i * i);
        let par2 = parallel_map(13, 2, |i| i * i);
        let par4 = parallel_map(13, 4, |i| i * i);
        assert_eq!(serial, par2);
        assert_eq!(serial, par4);
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let cfg = tiny_config();
        let corpus = build_corpus(&cfg, 12, cfg.data_seed);
        let eval = build_corpus(&cfg, 6, cfg.data_seed + 1);
        let run = |threads: usize| {
            let mut c = cfg.clone();
            c.threads = threads;
            let mut log = MetricsLog::in_memory();
            let state = train_mle(&corpus, &eval, &c, &mut log, None).unwrap();
            (state, log.into_records())
        };
        let (s1, log1) = run(1);
        let (s2, log2) = run(2);
        assert!(crate::metrics::logs_match(&log1, &log2));
        for i in 0..s1.params.num_tensors() {
            assert_eq!(s1.params.tensor(i).data(), s2.params.tensor(i).data());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = tiny_config();
        let corpus = build_corpus(&cfg, 12, cfg.data_seed);
        let eval = build_corpus(&cfg, 6, cfg.data_seed + 1);

        let mut full_log = MetricsLog::in_memory();
        let full = train_mle(&corpus, &eval, &cfg, &mut full_log, None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.max_steps = 4;
        let mut half_log = MetricsLog::in_memory();
        let half = train_mle(&corpus, &eval, &half_cfg, &mut half_log, None).unwrap();

        let mut rest_log = MetricsLog::in_memory();
        let resumed = train_mle(&corpus, &eval, &cfg, &mut rest_log, Some(half)).unwrap();

        for i in 0..full.params.num_tensors() {
            assert_eq!(
                full.params.tensor(i).data(),
                resumed.params.tensor(i).data(),
                "tensor {} differs after resume",
                full.params.name(i)
            );
        }
        // The resumed log's train/eval records equal the tail of the full log.
        let step_of = |l: &str| -> usize {
            l.split_whitespace()
                .find_map(|f| f.strip_prefix("step="))
                .and_then(|v| v.parse().ok())
                .unwrap_or(0)
        };
        let tail: Vec<String> = full_log
            .records()
            .iter()
            .filter(|l| !l.starts_with("begin") && !l.starts_with("end") && step_of(l) > 4)
            .cloned()
            .collect();
        let resumed_records: Vec<String> = rest_log
            .records()
            .iter()
            .filter(|l| !l.starts_with("begin") && !l.starts_with("end"))
            .cloned()
            .collect();
        assert!(!tail.is_empty());
        assert!(crate::metrics::logs_match(&tail, &resumed_records));
    }

    #[test]
    fn infeasible_utterances_are_skipped_and_counted() {
        use align_refine_core::align::{Alignment, LabelSequence};
        use align_refine_core::decoder::EncoderOutput;
        use align_refine_core::synth::Utterance;
        use align_refine_core::tensor::Tensor;

        let mut cfg = tiny_config();
        cfg.batch_size = 2;
        cfg.max_steps = 1;
        cfg.eval_every = 1;
        cfg.log_every = 1;
        // Reference [1,1] needs 3 frames; an all-blank 2-frame first pass
        // cannot fit it.
        let make = |first_pass_tokens: Vec<u32>| CorpusUtterance {
            utt: Utterance {
                id: "bad".into(),
                features: EncoderOutput::new(Tensor::zeros(2, cfg.audio_dim)),
                reference: LabelSequence::new(vec![1, 1]).unwrap(),
                gold_alignment: Alignment::new(vec![1, 0, 1, 0], 2).unwrap(),
            },
            first_pass: Alignment::new(first_pass_tokens, 2).unwrap(),
        };
        let corpus = Corpus {
            vocab: cfg.vocab,
            audio_dim: cfg.audio_dim,
            utterances: vec![make(vec![0, 0]), make(vec![0, 0])],
        };
        let mut log = MetricsLog::in_memory();
        let _ = train_mle(&corpus, &corpus, &cfg, &mut log, None).unwrap();
        let train_line = log.records().iter().find(|l| l.starts_with("train ")).unwrap();
        assert!(train_line.contains("used=0"), "{train_line}");
        assert!(train_line.contains("skipped=2"), "{train_line}");
    }

    #[test]
    fn evaluate_steps_zero_is_first_pass_only() {
        let cfg = tiny_config();
        let corpus = build_corpus(&cfg, 8, 3);
        let params = ModelParams::init(&cfg.decoder_config(), 1).unwrap();
        let report = evaluate(&params, &corpus, 0, 2).unwrap();
        assert!(report.step_wer.is_empty());
        assert!((report.first_pass_wer - corpus.first_pass_wer()).abs() < 1e-15);
    }

    #[test]
    fn zero_step_config_rejected() {
        let mut cfg = tiny_config();
        cfg.steps = 0;
        let corpus = build_corpus(&tiny_config(), 4, 1);
        let mut log = MetricsLog::in_memory();
        assert!(train_mle(&corpus, &corpus, &cfg, &mut log, None).is_err());
    }
}
