//! Corpus construction and on-disk formats.
//!
//! A split directory holds:
//!   - `manifest.txt`   version, counts, dims, and one `utt` line per
//!     utterance (id, frames, feature byte offset, reference labels)
//!   - `gold.aln`       gold alignments in the alignment text format
//!   - `first_pass.aln` corrupted first-pass alignments, same format
//!   - `features.f32le` concatenated row-major little-endian f32 features
//!
//! The alignment text format is `T=<int> V=<int>` header lines followed by
//! one utterance per line (space-separated token ids); a header applies to
//! the lines after it until the next header, so files can mix audio lengths.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use align_refine_core::align::{Alignment, LabelSequence};
use align_refine_core::ctc::Hypothesis;
use align_refine_core::decoder::EncoderOutput;
use align_refine_core::synth::{self, Utterance};
use align_refine_core::tensor::Tensor;
use anyhow::{anyhow, bail, Context, Result};

use crate::config::Config;

pub const CORPUS_VERSION: u32 = 1;

/// One utterance plus its simulated first-pass hypothesis alignment.
#[derive(Debug, Clone)]
pub struct CorpusUtterance {
    pub utt: Utterance,
    pub first_pass: Alignment,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: usize,
    pub audio_dim: usize,
    pub utterances: Vec<CorpusUtterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn references(&self) -> Vec<LabelSequence> {
        self.utterances.iter().map(|u| u.utt.reference.clone()).collect()
    }

    pub fn first_pass_labels(&self) -> Vec<LabelSequence> {
        self.utterances.iter().map(|u| u.first_pass.collapse()).collect()
    }

    /// Corpus WER of the first-pass hypotheses against the references.
    pub fn first_pass_wer(&self) -> f64 {
        synth::corpus_wer(&self.first_pass_labels(), &self.references())
            .expect("equal counts by construction")
    }
}

/// Generates a split in memory: synthetic utterances plus corrupted
/// first-pass alignments, fully determined by (config, seed).
pub fn build_corpus(cfg: &Config, count: usize, seed: u64) -> Corpus {
    let task = cfg.task_params();
    let utterances = synth::generate(count, &task, seed)
        .into_iter()
        .enumerate()
        .map(|(i, utt)| {
            let first_pass = synth::corrupt(&utt.gold_alignment, &cfg.corruption_for(i));
            CorpusUtterance { utt, first_pass }
        })
        .collect();
    Corpus { vocab: cfg.vocab, audio_dim: cfg.audio_dim, utterances }
}

// ---------------------------------------------------------------------------
// Alignment text format
// ---------------------------------------------------------------------------

pub fn write_alignments(path: &Path, alignments: &[&Alignment], vocab: usize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for a in alignments {
        writeln!(w, "T={} V={}", a.audio_len(), vocab)?;
        let line: Vec<String> = a.tokens().iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_alignments(path: &Path) -> Result<Vec<Alignment>> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    parse_alignments(&text).with_context(|| format!("parse {}", path.display()))
}

pub fn parse_alignments(text: &str) -> Result<Vec<Alignment>> {
    let mut out = Vec::new();
    let mut header: Option<(usize, usize)> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("T=") {
            let mut t = None;
            let mut v = None;
            for part in line.split_whitespace() {
                if let Some(x) = part.strip_prefix("T=") {
                    t = Some(x.parse::<usize>().map_err(|_| anyhow!("line {}: bad T", lineno + 1))?);
                } else if let Some(x) = part.strip_prefix("V=") {
                    v = Some(x.parse::<usize>().map_err(|_| anyhow!("line {}: bad V", lineno + 1))?);
                } else {
                    bail!("line {}: unexpected header field '{part}'", lineno + 1);
                }
            }
            header = Some((
                t.ok_or_else(|| anyhow!("line {}: header missing T", lineno + 1))?,
                v.ok_or_else(|| anyhow!("line {}: header missing V", lineno + 1))?,
            ));
            continue;
        }
        let (t, v) = header.ok_or_else(|| anyhow!("line {}: alignment before header", lineno + 1))?;
        let tokens: Vec<u32> = line
            .split_whitespace()
            .map(|s| s.parse::<u32>().map_err(|_| anyhow!("line {}: bad token '{s}'", lineno + 1)))
            .collect::<Result<_>>()?;
        for &tok in &tokens {
            if tok as usize > v {
                bail!("line {}: token {tok} exceeds V={v}", lineno + 1);
            }
        }
        out.push(Alignment::new(tokens, t).map_err(|e| anyhow!("line {}: {e}", lineno + 1))?);
    }
    Ok(out)
}

/// Text form of a hypothesis: `score<TAB>space-separated label ids`.
pub fn format_hypothesis(h: &Hypothesis) -> String {
    let ids: Vec<String> = h.labels.as_slice().iter().map(|l| l.to_string()).collect();
    format!("{}\t{}", h.score, ids.join(" "))
}

// ---------------------------------------------------------------------------
// Split directories
// ---------------------------------------------------------------------------

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let golds: Vec<&Alignment> = corpus.utterances.iter().map(|u| &u.utt.gold_alignment).collect();
    write_alignments(&dir.join("gold.aln"), &golds, corpus.vocab)?;
    let fps: Vec<&Alignment> = corpus.utterances.iter().map(|u| &u.first_pass).collect();
    write_alignments(&dir.join("first_pass.aln"), &fps, corpus.vocab)?;

    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    writeln!(manifest, "version {CORPUS_VERSION}")?;
    writeln!(manifest, "count {}", corpus.len())?;
    writeln!(manifest, "vocab {}", corpus.vocab)?;
    writeln!(manifest, "audio_dim {}", corpus.audio_dim)?;

    let mut features = BufWriter::new(fs::File::create(dir.join("features.f32le"))?);
    let mut offset = 0u64;
    for (i, cu) in corpus.utterances.iter().enumerate() {
        let feats = cu.utt.features.features();
        let refs: Vec<String> = cu.utt.reference.as_slice().iter().map(|l| l.to_string()).collect();
        writeln!(
            manifest,
            "utt {i} id={} frames={} feat_offset={offset} ref={}",
            cu.utt.id,
            feats.rows(),
            refs.join(" ")
        )?;
        for &v in feats.data() {
            features.write_all(&(v as f32).to_le_bytes())?;
        }
        offset += (feats.len() * 4) as u64;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("read {}", dir.join("manifest.txt").display()))?;
    let mut version = None;
    let mut count = None;
    let mut vocab = None;
    let mut audio_dim = None;
    struct UttMeta {
        id: String,
        frames: usize,
        feat_offset: u64,
        reference: Vec<u32>,
    }
    let mut metas: Vec<UttMeta> = Vec::new();
    for (lineno, raw) in manifest.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("version") => version = Some(parts.next().unwrap_or("").parse::<u32>()?),
            Some("count") => count = Some(parts.next().unwrap_or("").parse::<usize>()?),
            Some("vocab") => vocab = Some(parts.next().unwrap_or("").parse::<usize>()?),
            Some("audio_dim") => audio_dim = Some(parts.next().unwrap_or("").parse::<usize>()?),
            Some("utt") => {
                let _index: usize = parts.next().unwrap_or("").parse()?;
                let mut id = None;
                let mut frames = None;
                let mut feat_offset = None;
                let mut reference = None;
                let rest: Vec<&str> = parts.collect();
                let mut i = 0;
                while i < rest.len() {
                    let field = rest[i];
                    if let Some(v) = field.strip_prefix("id=") {
                        id = Some(v.to_string());
                    } else if let Some(v) = field.strip_prefix("frames=") {
                        frames = Some(v.parse::<usize>()?);
                    } else if let Some(v) = field.strip_prefix("feat_offset=") {
                        feat_offset = Some(v.parse::<u64>()?);
                    } else if let Some(v) = field.strip_prefix("ref=") {
                        // The reference extends to the end of the line.
                        let mut ids: Vec<u32> = Vec::new();
                        if !v.is_empty() {
                            ids.push(v.parse()?);
                        }
                        for r in &rest[i + 1..] {
                            ids.push(r.parse()?);
                        }
                        reference = Some(ids);
                        i = rest.len();
                        continue;
                    } else {
                        bail!("manifest line {}: unknown field '{field}'", lineno + 1);
                    }
                    i += 1;
                }
                metas.push(UttMeta {
                    id: id.ok_or_else(|| anyhow!("manifest line {}: missing id", lineno + 1))?,
                    frames: frames
                        .ok_or_else(|| anyhow!("manifest line {}: missing frames", lineno + 1))?,
                    feat_offset: feat_offset
                        .ok_or_else(|| anyhow!("manifest line {}: missing feat_offset", lineno + 1))?,
                    reference: reference
                        .ok_or_else(|| anyhow!("manifest line {}: missing ref", lineno + 1))?,
                });
            }
            Some(other) => bail!("manifest line {}: unknown record '{other}'", lineno + 1),
            None => {}
        }
    }
    let version = version.ok_or_else(|| anyhow!("manifest missing version"))?;
    if version != CORPUS_VERSION {
        bail!("corpus version {version} unsupported (want {CORPUS_VERSION})");
    }
    let count = count.ok_or_else(|| anyhow!("manifest missing count"))?;
    let vocab = vocab.ok_or_else(|| anyhow!("manifest missing vocab"))?;
    let audio_dim = audio_dim.ok_or_else(|| anyhow!("manifest missing audio_dim"))?;
    if metas.len() != count {
        bail!("manifest count {count} but {} utt lines", metas.len());
    }

    let golds = read_alignments(&dir.join("gold.aln"))?;
    let first_pass = read_alignments(&dir.join("first_pass.aln"))?;
    if golds.len() != count || first_pass.len() != count {
        bail!("alignment files disagree with manifest count");
    }
    let blob = fs::read(dir.join("features.f32le"))?;

    let mut utterances = Vec::with_capacity(count);
    for (i, meta) in metas.into_iter().enumerate() {
        let need = meta.frames * audio_dim * 4;
        let start = meta.feat_offset as usize;
        if start + need > blob.len() {
            bail!("feature file too short for utterance {i}");
        }
        let mut data = Vec::with_capacity(meta.frames * audio_dim);
        for chunk in blob[start..start + need].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let features = EncoderOutput::new(Tensor::from_vec(meta.frames, audio_dim, data));
        let reference = LabelSequence::new(meta.reference)
            .map_err(|e| anyhow!("utterance {i}: bad reference: {e}"))?;
        let gold = golds[i].clone();
        if gold.audio_len() != meta.frames {
            bail!("utterance {i}: gold alignment frames disagree with manifest");
        }
        utterances.push(CorpusUtterance {
            utt: Utterance { id: meta.id, features, reference, gold_alignment: gold },
            first_pass: first_pass[i].clone(),
        });
    }
    Ok(Corpus { vocab, audio_dim, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.train_utterances = 6;
        cfg.eval_utterances = 3;
        cfg
    }

    #[test]
    fn corpus_round_trip_is_exact() {
        let cfg = small_config();
        let corpus = build_corpus(&cfg, 6, 42);
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), corpus.len());
        assert_eq!(loaded.vocab, corpus.vocab);
        for (a, b) in corpus.utterances.iter().zip(&loaded.utterances) {
            assert_eq!(a.utt.id, b.utt.id);
            assert_eq!(a.utt.reference, b.utt.reference);
            assert_eq!(a.utt.gold_alignment, b.utt.gold_alignment);
            assert_eq!(a.first_pass, b.first_pass);
            // Bit-exact: features were f32-snapped at generation.
            assert_eq!(a.utt.features.features().data(), b.utt.features.features().data());
        }
    }

    #[test]
    fn alignment_format_round_trips_mixed_lengths() {
        let a = Alignment::new(vec![0, 3, 0], 2).unwrap();
        let b = Alignment::new(vec![0, 0, 0, 0, 1, 2], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.aln");
        write_alignments(&path, &[&a, &b], 5).unwrap();
        let got = read_alignments(&path).unwrap();
        assert_eq!(got, vec![a, b]);
    }

    #[test]
    fn alignment_parser_rejects_bad_input() {
        assert!(parse_alignments("1 2 3\n").is_err()); // no header
        assert!(parse_alignments("T=2 V=3\n9 0\n").is_err()); // token > V
        assert!(parse_alignments("T=2\n1 0\n").is_err()); // missing V
        // Shared header for several lines is fine.
        let got = parse_alignments("T=2 V=3\n0 1 0\n0 0\n").unwrap();
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn hypothesis_text_form() {
        let h = Hypothesis {
            labels: LabelSequence::new(vec![3, 1, 4]).unwrap(),
            score: -1.5,
            per_step_logp: vec![],
        };
        assert_eq!(format_hypothesis(&h), "-1.5\t3 1 4");
        let empty = Hypothesis {
            labels: LabelSequence::empty(),
            score: -0.25,
            per_step_logp: vec![],
        };
        assert_eq!(format_hypothesis(&empty), "-0.25\t");
    }

    #[test]
    fn corrupted_first_pass_wer_is_near_target() {
        let cfg = Config::default();
        let corpus = build_corpus(&cfg, 1000, 7);
        let wer = corpus.first_pass_wer();
        assert!((wer - 0.20).abs() < 0.03, "first-pass WER {wer}");
    }

    #[test]
    fn build_corpus_is_deterministic() {
        let cfg = small_config();
        let a = build_corpus(&cfg, 5, 9);
        let b = build_corpus(&cfg, 5, 9);
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.first_pass, y.first_pass);
        }
    }
}
