//! Command-line entry points for the streaming alignment-refinement
//! decoder: data generation, training, evaluation, delay reporting, mask
//! dumps, the RTF benchmark, and the self-test suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use align_refine_core::align::Alignment;
use align_refine_core::decoder::ModelParams;
use align_refine_core::delay::{self, DelayConfig};
use align_refine_core::mask::{band_self_mask, time_aligned_cross_mask, MaskSpec};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use align_refine::checkpoint;
use align_refine::checks;
use align_refine::config::Config;
use align_refine::corpus::{build_corpus, load_corpus, read_alignments, save_corpus, Corpus};
use align_refine::metrics::MetricsLog;
use align_refine::rtf::rtf_bench;
use align_refine::trainer::{self, TrainState};
use align_refine::{exit_code_for, NumericFailure};

#[derive(Parser)]
#[command(
    name = "align-refine",
    about = "Streaming non-autoregressive deliberation over RNN-T hypothesis alignments",
    after_help = config_help(),
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn config_help() -> &'static str {
    // Leaked once at startup; clap wants a 'static str.
    Box::leak(Config::keys_help().into_boxed_str())
}

/// Shared config-loading flags: defaults < --config file < --set overrides;
/// --seed overrides both corpus and training seeds.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// Config file with key=value lines ('#' comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set model.layers=6 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override data.seed and train.seed together.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/ and eval/ corpus splits under --out.
    GenData {
        #[command(flatten)]
        config: ConfigFlags,
        /// Output directory (creates train/ and eval/ inside).
        #[arg(long)]
        out: PathBuf,
    },
    /// MLE-train the refinement decoder on a generated corpus.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        /// Corpus directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a training checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics log file (append-only key=value records).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Discriminative (MWER) finetuning from an MLE checkpoint.
    FinetuneMwer {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        data: PathBuf,
        /// Starting parameters (checkpoint directory).
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Report WER after each refinement step on the eval split.
    Eval {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Refinement steps (0 = first pass only). Defaults to model.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the beam-search hypotheses of the final step, one
        /// `score<TAB>label ids` line per hypothesis, grouped by utterance.
        #[arg(long = "dump-hyps")]
        dump_hyps: Option<PathBuf>,
    },
    /// Print per-step and total model delay for a configuration.
    DelayReport {
        /// Transformer layers L.
        #[arg(long)]
        layers: usize,
        /// Per-layer right context C in frames.
        #[arg(long)]
        right: usize,
        /// Decoder frame size in milliseconds.
        #[arg(long = "frame-ms")]
        frame_ms: f64,
        /// Include the parallel audio self-attention stack (depth L+1).
        #[arg(long = "audio-sa")]
        audio_sa: bool,
        /// Inference refinement steps S.
        #[arg(long)]
        steps: usize,
    },
    /// Write an attention mask as an ASCII grid (rows=queries, '#'=allowed).
    MasksDump {
        /// Mask kind: self | cross | audio.
        #[arg(long)]
        kind: String,
        /// Query count for self masks.
        #[arg(long)]
        queries: Option<usize>,
        /// Audio frame count for audio masks.
        #[arg(long)]
        frames: Option<usize>,
        /// Left context: integer or 'unbounded'. Defaults: self/audio
        /// unbounded, cross 2.
        #[arg(long)]
        left: Option<String>,
        /// Right context C.
        #[arg(long)]
        right: usize,
        /// Alignment file (text format); required for cross masks, first
        /// alignment is used.
        #[arg(long)]
        alignment: Option<PathBuf>,
        /// Output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure wall time per audio second per refinement step, single
    /// threaded.
    RtfBench {
        #[command(flatten)]
        config: ConfigFlags,
        /// Corpus directory; generated on the fly from the config if
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Parameters to benchmark; deterministic fresh init if omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Refinement steps to time. Defaults to model.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Utterance count when generating on the fly.
        #[arg(long, default_value_t = 64)]
        utterances: usize,
    },
    /// Run the oracle and invariant suites.
    Selftest {
        /// Also run the slower suites (more instances, training smoke).
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => gen_data(&config.resolve()?, &out),
        Cmd::Train { config, data, out, resume, metrics } => {
            train(&config.resolve()?, &data, &out, resume.as_deref(), metrics.as_deref())
        }
        Cmd::FinetuneMwer { config, data, params, out, metrics } => {
            finetune(&config.resolve()?, &data, &params, &out, metrics.as_deref())
        }
        Cmd::Eval { config, data, params, steps, dump_hyps } => {
            eval(&config.resolve()?, &data, &params, steps, dump_hyps.as_deref())
        }
        Cmd::DelayReport { layers, right, frame_ms, audio_sa, steps } => {
            delay_report(layers, right, frame_ms, audio_sa, steps)
        }
        Cmd::MasksDump { kind, queries, frames, left, right, alignment, out } => {
            masks_dump(&kind, queries, frames, left.as_deref(), right, alignment.as_deref(), out.as_deref())
        }
        Cmd::RtfBench { config, data, params, steps, utterances } => {
            rtf(&config.resolve()?, data.as_deref(), params.as_deref(), steps, utterances)
        }
        Cmd::Selftest { full } => selftest(full),
    }
}

fn load_split(dir: &Path, split: &str) -> Result<Corpus> {
    load_corpus(&dir.join(split)).with_context(|| format!("load {split} split from {}", dir.display()))
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let train = build_corpus(cfg, cfg.train_utterances, cfg.data_seed);
    let eval = build_corpus(cfg, cfg.eval_utterances, cfg.data_seed.wrapping_add(1));
    save_corpus(&out.join("train"), &train)?;
    save_corpus(&out.join("eval"), &eval)?;
    println!("wrote {} train / {} eval utterances to {}", train.len(), eval.len(), out.display());
    println!("train first-pass WER: {:.4}", train.first_pass_wer());
    println!("eval first-pass WER: {:.4}", eval.first_pass_wer());
    Ok(())
}

fn train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<()> {
    let corpus = load_split(data, "train")?;
    let eval_corpus = load_split(data, "eval")?;
    let mut log = match metrics {
        Some(path) => MetricsLog::with_file(path)?,
        None => MetricsLog::in_memory(),
    };
    let resume_state = match resume {
        Some(dir) => {
            let (params, opt, step) = checkpoint::load_train_state(dir, &cfg.decoder_config())?;
            Some(TrainState { params, opt, step })
        }
        None => None,
    };
    let state = trainer::train_mle(&corpus, &eval_corpus, cfg, &mut log, resume_state)?;
    checkpoint::save_train_state(out, &state.params, &state.opt, &[])?;
    let report = trainer::evaluate(&state.params, &eval_corpus, cfg.steps, cfg.threads)?;
    print_eval(&report);
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn finetune(
    cfg: &Config,
    data: &Path,
    params_dir: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let corpus = load_split(data, "train")?;
    let eval_corpus = load_split(data, "eval")?;
    let (params, _) = checkpoint::load_params(params_dir, &cfg.decoder_config())?;
    let mut log = match metrics {
        Some(path) => MetricsLog::with_file(path)?,
        None => MetricsLog::in_memory(),
    };
    let outcome = trainer::finetune_mwer(&corpus, &eval_corpus, cfg, params, &mut log)?;
    checkpoint::save_train_state(out, &outcome.state.params, &outcome.state.opt, &[])?;
    println!(
        "expected NWE: {:.6} -> {:.6} ({:+.2}% relative)",
        outcome.expected_nwe_start,
        outcome.expected_nwe_end,
        100.0 * (outcome.expected_nwe_end - outcome.expected_nwe_start)
            / outcome.expected_nwe_start.max(1e-12)
    );
    let report = trainer::evaluate(&outcome.state.params, &eval_corpus, cfg.steps, cfg.threads)?;
    print_eval(&report);
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn print_eval(report: &trainer::EvalReport) {
    println!("first-pass WER: {:.4}", report.first_pass_wer);
    for (i, w) in report.step_wer.iter().enumerate() {
        println!("step {} WER: {:.4}", i + 1, w);
    }
}

fn eval(
    cfg: &Config,
    data: &Path,
    params_dir: &Path,
    steps: Option<usize>,
    dump_hyps: Option<&Path>,
) -> Result<()> {
    let eval_corpus = load_split(data, "eval")?;
    let (params, _) = checkpoint::load_params(params_dir, &cfg.decoder_config())?;
    let steps = steps.unwrap_or(cfg.steps);
    let report = trainer::evaluate(&params, &eval_corpus, steps, cfg.threads)?;
    print_eval(&report);
    if let Some(path) = dump_hyps {
        use std::io::Write;
        anyhow::ensure!(steps >= 1, "--dump-hyps requires steps >= 1");
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for cu in &eval_corpus.utterances {
            let trace =
                align_refine_core::decoder::refine(&cu.first_pass, &cu.utt.features, &params, steps)
                    .map_err(|e| anyhow!("{}: {e}", cu.utt.id))?;
            let hyps = align_refine_core::ctc::ctc_beam_search(
                &trace.steps.last().expect("steps >= 1").log_probs,
                cfg.mwer_beam,
            );
            writeln!(out, "utt {}", cu.utt.id)?;
            for h in &hyps {
                writeln!(out, "{}", align_refine::corpus::format_hypothesis(h))?;
            }
        }
        println!("hypotheses written to {}", path.display());
    }
    Ok(())
}

fn delay_report(layers: usize, right: usize, frame_ms: f64, audio_sa: bool, steps: usize) -> Result<()> {
    let cfg = DelayConfig {
        layers,
        right_per_layer: right,
        frame_size: frame_ms / 1000.0,
        audio_self_attention: audio_sa,
        steps,
    };
    cfg.validate().map_err(|e| align_refine::config::ConfigError(e.to_string()))?;
    println!("effective depth: {}", delay::effective_depth(&cfg));
    println!("receptive bound: {} frames", delay::receptive_bound(&cfg));
    println!("per-step delay: {:.3} s", delay::model_delay(&cfg));
    println!("total delay ({} steps): {:.3} s", steps, delay::total_delay(&cfg));
    Ok(())
}

fn parse_left_flag(left: Option<&str>, default: Option<usize>) -> Result<Option<usize>> {
    match left {
        None => Ok(default),
        Some("unbounded") => Ok(None),
        Some(v) => Ok(Some(v.parse::<usize>().map_err(|_| {
            align_refine::config::ConfigError(format!("--left: expected integer or 'unbounded', got '{v}'"))
        })?)),
    }
}

fn masks_dump(
    kind: &str,
    queries: Option<usize>,
    frames: Option<usize>,
    left: Option<&str>,
    right: usize,
    alignment: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let grid = match kind {
        "self" => {
            let n = queries.ok_or_else(|| anyhow!("--queries required for kind=self"))?;
            let spec = MaskSpec::new(parse_left_flag(left, None)?, right);
            band_self_mask(n, &spec).to_ascii()
        }
        "audio" => {
            let t = frames.ok_or_else(|| anyhow!("--frames required for kind=audio"))?;
            let spec = MaskSpec::new(parse_left_flag(left, None)?, right);
            band_self_mask(t, &spec).to_ascii()
        }
        "cross" => {
            let path = alignment.ok_or_else(|| anyhow!("--alignment required for kind=cross"))?;
            let alignments = read_alignments(path)?;
            let a: &Alignment =
                alignments.first().ok_or_else(|| anyhow!("{}: no alignments", path.display()))?;
            let spec = MaskSpec::new(parse_left_flag(left, Some(2))?, right);
            time_aligned_cross_mask(&a.timestamps(), a.audio_len(), &spec).to_ascii()
        }
        other => bail!("unknown mask kind '{other}' (want self|cross|audio)"),
    };
    match out {
        Some(path) => std::fs::write(path, grid)?,
        None => print!("{grid}"),
    }
    Ok(())
}

fn rtf(
    cfg: &Config,
    data: Option<&Path>,
    params_dir: Option<&Path>,
    steps: Option<usize>,
    utterances: usize,
) -> Result<()> {
    let corpus = match data {
        Some(dir) => load_split(dir, "eval")?,
        None => build_corpus(cfg, utterances, cfg.data_seed),
    };
    let params = match params_dir {
        Some(dir) => checkpoint::load_params(dir, &cfg.decoder_config())?.0,
        None => ModelParams::init(&cfg.decoder_config(), cfg.train_seed).map_err(|e| anyhow!("{e}"))?,
    };
    let steps = steps.unwrap_or(cfg.steps);
    let report = rtf_bench(&params, &corpus, steps, cfg.frame_ms / 1000.0)?;
    println!("utterances: {}", report.utterances);
    println!("audio: {:.3} s", report.audio_seconds);
    println!("decode ({} steps): {:.3} s", report.steps, report.decode_seconds);
    println!("per-step RTF: {:.5}", report.per_step_rtf);
    Ok(())
}

fn selftest(full: bool) -> Result<()> {
    let suites: Vec<(&str, Box<dyn Fn() -> Result<(), String>>)> = vec![
        ("delay-table", Box::new(checks::check_delay_table)),
        ("timestamp-example", Box::new(checks::check_timestamp_example)),
        ("cross-mask-example", Box::new(checks::check_cross_mask_example)),
        (
            "ctc-oracle",
            Box::new(move || checks::check_ctc_oracle(if full { 200 } else { 60 }, 17)),
        ),
        (
            "beam-oracle",
            Box::new(move || checks::check_beam_oracle(if full { 200 } else { 60 }, 18)),
        ),
        ("mle-gradients", Box::new(|| checks::check_mle_gradients(19))),
        ("mwer-gradients", Box::new(|| checks::check_mwer_gradients(20))),
        (
            "streaming-causality",
            Box::new(move || checks::check_causality(if full { 50 } else { 12 }, 21)),
        ),
        (
            "offline-equivalence",
            Box::new(move || checks::check_offline_equivalence(if full { 12 } else { 5 }, 22)),
        ),
    ];
    let mut failures = 0usize;
    for (name, check) in suites {
        let t0 = std::time::Instant::now();
        match check() {
            Ok(()) => println!("PASS {name} ({:.2}s)", t0.elapsed().as_secs_f64()),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failures > 0 {
        return Err(NumericFailure(format!("{failures} selftest suite(s) failed")).into());
    }
    println!("selftest: all suites passed");
    Ok(())
}
