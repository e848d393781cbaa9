//! End-to-end CLI tests: output formats, config handling, exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_align-refine")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn CLI")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn delay_report_prints_table_values() {
    let out = run(&[
        "delay-report", "--layers", "6", "--right", "5", "--frame-ms", "60", "--audio-sa",
        "--steps", "2",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("per-step delay: 2.100 s"), "{text}");
    assert!(text.contains("total delay (2 steps): 4.200 s"), "{text}");
    assert!(text.contains("effective depth: 7"), "{text}");
    assert!(text.contains("receptive bound: 35 frames"), "{text}");
}

#[test]
fn delay_report_without_audio_sa() {
    let out = run(&["delay-report", "--layers", "6", "--right", "2", "--frame-ms", "60", "--steps", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("per-step delay: 0.720 s"), "{text}");
    assert!(text.contains("receptive bound: 12 frames"), "{text}");
}

#[test]
fn masks_dump_self_causal_golden() {
    let out = run(&["masks-dump", "--kind", "self", "--queries", "4", "--right", "0"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "#...\n##..\n###.\n####\n");
}

#[test]
fn masks_dump_self_band_golden() {
    let out = run(&[
        "masks-dump", "--kind", "self", "--queries", "5", "--left", "1", "--right", "1",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "##...\n###..\n.###.\n..###\n...##\n");
}

#[test]
fn masks_dump_cross_follows_alignment_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let aln = dir.path().join("a.aln");
    // The worked example: 8 tokens against 7 frames, times [0,1,2,3,3,4,5,6].
    std::fs::write(&aln, "T=7 V=9\n0 0 0 9 9 0 0 0 0 0 9\n").unwrap();
    let out = run(&[
        "masks-dump", "--kind", "cross", "--alignment", aln.to_str().unwrap(), "--left", "2",
        "--right", "1",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    // Row 4 (timestamp 3, left 2, right 1) admits frames 1..=4.
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[4], ".####..");
}

#[test]
fn masks_dump_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    let out = run(&[
        "masks-dump", "--kind", "audio", "--frames", "3", "--left", "1", "--right", "1", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "##.\n###\n.##\n");
}

#[test]
fn unknown_config_key_exits_2() {
    let out = run(&["gen-data", "--out", "/tmp/nonexistent-ar-test", "--set", "model.bogus=3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_value_exits_2() {
    let out = run(&["gen-data", "--out", "/tmp/nonexistent-ar-test", "--set", "model.layers=zero"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_loaded_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# test config\ndata.train_utterances=5\ndata.eval_utterances=2\n").unwrap();
    let out_dir = dir.path().join("corpus");
    let out = run(&[
        "gen-data", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
        "--set", "data.eval_utterances=3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("wrote 5 train / 3 eval"));
    assert!(out_dir.join("train/manifest.txt").exists());
    assert!(out_dir.join("eval/first_pass.aln").exists());
}

#[test]
fn missing_data_dir_exits_3() {
    let out = run(&["eval", "--data", "/tmp/definitely-not-here-ar", "--params", "/also/nope"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_honors_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out_dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = run(&[
            "gen-data", "--out", out_dir.to_str().unwrap(), "--seed", seed, "--set",
            "data.train_utterances=4", "--set", "data.eval_utterances=2",
        ]);
        assert!(out.status.success());
    }
    let read = |p: &Path| std::fs::read(p.join("train/features.f32le")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn version_mismatched_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // A checkpoint with a bad version line.
    std::fs::write(dir.path().join("manifest.txt"), "version 99\ndtype f32le\n").unwrap();
    std::fs::write(dir.path().join("weights.f32le"), b"").unwrap();
    let data = dir.path().join("data");
    let gen = run(&[
        "gen-data", "--out", data.to_str().unwrap(), "--set", "data.train_utterances=2",
        "--set", "data.eval_utterances=2",
    ]);
    assert!(gen.status.success());
    let out = run(&[
        "eval", "--data", data.to_str().unwrap(), "--params", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_documents_every_config_key() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for (key, _, _) in align_refine::config::KEY_DOCS {
        assert!(text.contains(key), "--help missing {key}");
    }
}

/// Micro end-to-end pipeline through the CLI: gen-data, train, resume,
/// eval (steps 0 and 2, hypothesis dump), finetune-mwer.
#[test]
fn micro_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let tiny: &[&str] = &[
        "--set", "model.layers=1", "--set", "model.dim=16", "--set", "model.heads=2",
        "--set", "model.ffn_dim=16", "--set", "model.vocab=5", "--set", "model.audio_dim=5",
        "--set", "model.steps=2", "--set", "data.train_utterances=12",
        "--set", "data.eval_utterances=6", "--set", "data.min_labels=2",
        "--set", "data.max_labels=3", "--set", "train.batch_size=2",
        "--set", "train.eval_every=2", "--set", "train.log_every=1",
        "--set", "train.warmup_steps=2", "--set", "mwer.max_steps=2",
    ];
    let with_tiny = |extra: &[&str]| {
        let mut v: Vec<&str> = extra.to_vec();
        v.extend_from_slice(tiny);
        v
    };

    let out = run(&with_tiny(&["gen-data", "--out", data.to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Train 2 steps, then resume to 4; compare with an uninterrupted run.
    let ckpt_half = dir.path().join("ckpt_half");
    let ckpt_resumed = dir.path().join("ckpt_resumed");
    let ckpt_full = dir.path().join("ckpt_full");
    let mut args = with_tiny(&[
        "train", "--data", data.to_str().unwrap(), "--out", ckpt_half.to_str().unwrap(),
    ]);
    args.extend_from_slice(&["--set", "train.max_steps=2"]);
    assert!(run(&args).status.success());

    let mut args = with_tiny(&[
        "train", "--data", data.to_str().unwrap(), "--out", ckpt_resumed.to_str().unwrap(),
        "--resume", ckpt_half.to_str().unwrap(),
    ]);
    args.extend_from_slice(&["--set", "train.max_steps=4"]);
    assert!(run(&args).status.success());

    let mut args = with_tiny(&[
        "train", "--data", data.to_str().unwrap(), "--out", ckpt_full.to_str().unwrap(),
    ]);
    args.extend_from_slice(&["--set", "train.max_steps=4"]);
    assert!(run(&args).status.success());

    let weights = |p: &Path| std::fs::read(p.join("weights.f32le")).unwrap();
    assert_eq!(weights(&ckpt_resumed), weights(&ckpt_full), "resume must replay bit-for-bit");

    // eval --steps 0 prints the first pass only.
    let out = run(&with_tiny(&[
        "eval", "--data", data.to_str().unwrap(), "--params", ckpt_full.to_str().unwrap(),
        "--steps", "0",
    ]));
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("first-pass WER:"), "{text}");
    assert!(!text.contains("step 1 WER"), "{text}");

    // eval with hypothesis dump.
    let hyps = dir.path().join("hyps.txt");
    let out = run(&with_tiny(&[
        "eval", "--data", data.to_str().unwrap(), "--params", ckpt_full.to_str().unwrap(),
        "--steps", "2", "--dump-hyps", hyps.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = std::fs::read_to_string(&hyps).unwrap();
    assert!(dump.lines().any(|l| l.starts_with("utt ")), "{dump}");
    assert!(dump.lines().any(|l| l.contains('\t')), "{dump}");

    // MWER finetuning from the trained checkpoint.
    let ckpt_mwer = dir.path().join("ckpt_mwer");
    let out = run(&with_tiny(&[
        "finetune-mwer", "--data", data.to_str().unwrap(), "--params",
        ckpt_full.to_str().unwrap(), "--out", ckpt_mwer.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("expected NWE"));
    assert!(ckpt_mwer.join("manifest.txt").exists());
}

#[test]
fn rtf_bench_runs_on_generated_corpus() {
    let out = run(&[
        "rtf-bench", "--utterances", "3", "--steps", "1", "--set", "model.layers=1",
        "--set", "model.dim=16", "--set", "model.heads=2", "--set", "model.ffn_dim=16",
        "--set", "data.max_labels=3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("per-step RTF:"));
}
