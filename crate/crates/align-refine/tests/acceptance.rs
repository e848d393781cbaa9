//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its runtime. Criteria 8-10 share one standard pipeline run (MLE at C=2,
//! MLE at C=0, MWER finetuning); criterion 10 executes the entire pipeline a
//! second time and compares metrics logs bit for bit (wall-clock fields
//! excluded).
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use align_refine::checks;
use align_refine::config::Config;
use align_refine::corpus::{build_corpus, Corpus};
use align_refine::metrics::{logs_match, MetricsLog};
use align_refine::trainer::{evaluate, finetune_mwer, train_mle, EvalReport};
use align_refine_core::decoder::ModelParams;

/// Criteria run serially so the reported runtimes mean something on a small
/// machine.
fn lock() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(())).lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(name: &str, t0: Instant, detail: &str) {
    println!("PASS {name} ({:.2}s) {detail}", t0.elapsed().as_secs_f64());
}

// ---------------------------------------------------------------------------
// Standard end-to-end pipeline shared by criteria 8-10
// ---------------------------------------------------------------------------

/// The default synthetic task; only the training-duration knobs are set
/// explicitly so the acceptance run fits a small CPU budget.
fn standard_config() -> Config {
    let mut cfg = Config::default();
    cfg.override_seed(2024);
    cfg
}

struct PipelineRun {
    eval_before: EvalReport,
    eval_c2: EvalReport,
    eval_c0: EvalReport,
    eval_after_mwer: EvalReport,
    expected_nwe_start: f64,
    expected_nwe_end: f64,
    mle_c2_log: Vec<String>,
    mle_c0_log: Vec<String>,
    mwer_log: Vec<String>,
}

fn run_pipeline() -> PipelineRun {
    let cfg = standard_config();
    let train = build_corpus(&cfg, cfg.train_utterances, cfg.data_seed);
    let eval: Corpus = build_corpus(&cfg, cfg.eval_utterances, cfg.data_seed.wrapping_add(1));
    assert!(eval.len() >= 500, "criterion 8 requires >= 500 eval utterances");

    // MLE at the default right context C=2.
    let mut c2_log = MetricsLog::in_memory();
    let c2 = train_mle(&train, &eval, &cfg, &mut c2_log, None).expect("C=2 training");
    let eval_c2 = evaluate(&c2.params, &eval, 2, cfg.threads).expect("eval C=2");

    // Same budget with zero right context.
    let mut cfg_c0 = cfg.clone();
    cfg_c0.right_context = 0;
    let mut c0_log = MetricsLog::in_memory();
    let c0 = train_mle(&train, &eval, &cfg_c0, &mut c0_log, None).expect("C=0 training");
    let eval_c0 = evaluate(&c0.params, &eval, 2, cfg.threads).expect("eval C=0");

    // MWER finetuning from the C=2 model.
    let eval_before = eval_c2.clone();
    let mut mwer_log = MetricsLog::in_memory();
    let outcome =
        finetune_mwer(&train, &eval, &cfg, c2.params, &mut mwer_log).expect("MWER finetuning");
    let eval_after_mwer =
        evaluate(&outcome.state.params, &eval, 2, cfg.threads).expect("eval after MWER");

    PipelineRun {
        eval_before,
        eval_c2,
        eval_c0,
        eval_after_mwer,
        expected_nwe_start: outcome.expected_nwe_start,
        expected_nwe_end: outcome.expected_nwe_end,
        mle_c2_log: c2_log.into_records(),
        mle_c0_log: c0_log.into_records(),
        mwer_log: mwer_log.into_records(),
    }
}

fn standard_run() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(run_pipeline)
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_delay_arithmetic() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_delay_table().expect("delay table");
    assert!(t0.elapsed().as_secs_f64() < 1.0, "criterion 1 runtime");
    pass("criterion-1 delay-arithmetic", t0, "per-step {0.36,0.72,1.80}/{0.42,0.84,2.10}, totals up to 4.20");
}

#[test]
fn criterion_02_timestamp_example() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_timestamp_example().expect("timestamp example");
    assert!(t0.elapsed().as_secs_f64() < 1.0, "criterion 2 runtime");
    pass("criterion-2 timestamp-example", t0, "[0,1,1,2,3,4,4,4]");
}

#[test]
fn criterion_03_ctc_oracle_equivalence() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_ctc_oracle(200, 17).expect("ctc oracle");
    assert!(t0.elapsed().as_secs_f64() < 60.0, "criterion 3 runtime");
    pass("criterion-3 ctc-oracle", t0, "200 instances <= 1e-6, completeness <= 1e-6");
}

#[test]
fn criterion_04_beam_search_oracle() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_beam_oracle(200, 18).expect("beam oracle");
    assert!(t0.elapsed().as_secs_f64() < 60.0, "criterion 4 runtime");
    pass("criterion-4 beam-oracle", t0, "exact enumeration ranking reproduced");
}

#[test]
fn criterion_05_gradient_checks() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_mle_gradients(19).expect("MLE gradients");
    checks::check_mwer_gradients(20).expect("MWER gradients");
    assert!(t0.elapsed().as_secs_f64() < 120.0, "criterion 5 runtime");
    pass("criterion-5 gradient-checks", t0, "MLE and composite MWER vs central differences <= 1e-4");
}

#[test]
fn criterion_06_streaming_causality() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_causality(50, 21).expect("causality");
    assert!(t0.elapsed().as_secs_f64() < 120.0, "criterion 6 runtime");
    pass("criterion-6 streaming-causality", t0, "50 configs, leak <= 1e-12, bound tight");
}

#[test]
fn criterion_07_offline_equivalence() {
    let _g = lock();
    let t0 = Instant::now();
    checks::check_offline_equivalence(12, 22).expect("offline equivalence");
    pass("criterion-7 offline-equivalence", t0, "all-allow masks vs reference <= 1e-10");
}

#[test]
fn criterion_08_end_to_end_mle() {
    let _g = lock();
    let t0 = Instant::now();
    let run = standard_run();

    let fp = run.eval_c2.first_pass_wer;
    assert!(
        (fp - 0.20).abs() < 0.03,
        "first-pass WER {fp:.4} should sit near the 20% target"
    );
    let wer1 = run.eval_c2.step_wer[0];
    let wer2 = run.eval_c2.step_wer[1];
    assert!(
        fp - wer1 >= 0.01,
        "step-1 WER {wer1:.4} must beat first pass {fp:.4} by >= 1 point"
    );
    assert!(
        wer1 - wer2 >= 0.01,
        "step-2 WER {wer2:.4} must beat step-1 {wer1:.4} by >= 1 point"
    );
    let c0_wer1 = run.eval_c0.step_wer[0];
    assert!(
        wer1 < c0_wer1,
        "C=2 step-1 WER {wer1:.4} must be strictly below C=0 {c0_wer1:.4}"
    );
    assert!(t0.elapsed().as_secs_f64() < 1800.0, "criterion 8 runtime");
    pass(
        "criterion-8 end-to-end-mle",
        t0,
        &format!("first-pass {fp:.4}, step1 {wer1:.4}, step2 {wer2:.4}, C=0 step1 {c0_wer1:.4}"),
    );
}

#[test]
fn criterion_09_mwer_effect() {
    let _g = lock();
    let t0 = Instant::now();
    let run = standard_run();

    for (i, (before, after)) in
        run.eval_before.step_wer.iter().zip(&run.eval_after_mwer.step_wer).enumerate()
    {
        assert!(
            after <= before,
            "MWER finetuning degraded step-{} WER: {before:.4} -> {after:.4}",
            i + 1
        );
    }
    let drop = (run.expected_nwe_start - run.expected_nwe_end) / run.expected_nwe_start;
    assert!(
        drop >= 0.10,
        "expected-NWE term must drop >= 10% relative (got {:.2}%: {:.6} -> {:.6})",
        100.0 * drop,
        run.expected_nwe_start,
        run.expected_nwe_end
    );
    assert!(t0.elapsed().as_secs_f64() < 600.0, "criterion 9 runtime");
    pass(
        "criterion-9 mwer-effect",
        t0,
        &format!(
            "expected NWE {:.4} -> {:.4} ({:.1}% drop), WER not degraded",
            run.expected_nwe_start,
            run.expected_nwe_end,
            100.0 * drop
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let _g = lock();
    let t0 = Instant::now();
    let first = standard_run();
    let second = run_pipeline();
    assert!(logs_match(&first.mle_c2_log, &second.mle_c2_log), "C=2 MLE logs differ");
    assert!(logs_match(&first.mle_c0_log, &second.mle_c0_log), "C=0 MLE logs differ");
    assert!(logs_match(&first.mwer_log, &second.mwer_log), "MWER logs differ");
    pass(
        "criterion-10 determinism",
        t0,
        &format!(
            "{} + {} + {} records identical across reruns",
            first.mle_c2_log.len(),
            first.mle_c0_log.len(),
            first.mwer_log.len()
        ),
    );
}

/// Untrained parameters must not beat the first pass (sanity guard from the
/// trainer contract, cheap to keep here).
#[test]
fn untrained_model_does_not_beat_first_pass() {
    let _g = lock();
    let mut cfg = standard_config();
    cfg.eval_utterances = 120;
    let eval = build_corpus(&cfg, cfg.eval_utterances, cfg.data_seed.wrapping_add(1));
    let params = ModelParams::init(&cfg.decoder_config(), 7).expect("init");
    let report = evaluate(&params, &eval, 1, cfg.threads).expect("eval");
    assert!(report.step_wer[0] >= report.first_pass_wer);
}
