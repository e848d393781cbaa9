//! Mask-free reference forward pass.
//!
//! A deliberately plain re-implementation of one refinement step with full
//! attention context everywhere: straight nested loops, no graph, no mask
//! objects. The streaming decoder configured with all-allow masks must match
//! this within 1e-10; the two paths share only the parameter tensors.

use alloc::vec;

use crate::align::Alignment;
use crate::math::{erf, exp, ln, sqrt};
use crate::tensor::Tensor;

use super::{DecoderError, EncoderOutput, ModelParams};

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din) = x.shape();
    let dout = w.cols();
    assert_eq!(w.rows(), din);
    let mut y = Tensor::zeros(n, dout);
    for i in 0..n {
        for j in 0..dout {
            let mut acc = b.at(0, j);
            for p in 0..din {
                acc += x.at(i, p) * w.at(p, j);
            }
            y.set(i, j, acc);
        }
    }
    y
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    const EPS: f64 = 1e-6;
    let (n, d) = x.shape();
    let mut y = Tensor::zeros(n, d);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / sqrt(var + EPS);
        for c in 0..d {
            y.set(i, c, gain.at(0, c) * (row[c] - mean) * istd + bias.at(0, c));
        }
    }
    y
}

fn gelu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = 0.5 * *v * (1.0 + erf(*v * core::f64::consts::FRAC_1_SQRT_2));
    }
    y
}

/// Full-context multi-head attention: every query sees every key.
fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (nq, d) = q.shape();
    let nk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let mut out = Tensor::zeros(nq, d);
    let mut scores = vec![0.0; nk];
    for i in 0..nq {
        for h in 0..heads {
            let qh = &q.row(i)[h * dh..(h + 1) * dh];
            let mut hi = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &k.row(j)[h * dh..(h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                if *s > hi {
                    hi = *s;
                }
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = exp(*s - hi);
                z += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let a = s / z;
                let vh = &v.row(j)[h * dh..(h + 1) * dh];
                for (o, &x) in out.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                    *o += a * x;
                }
            }
        }
    }
    out
}

struct AttnTensors<'a> {
    wq: &'a Tensor,
    bq: &'a Tensor,
    wk: &'a Tensor,
    bk: &'a Tensor,
    wv: &'a Tensor,
    bv: &'a Tensor,
    wo: &'a Tensor,
    bo: &'a Tensor,
}

fn attn_block(
    x: &Tensor,
    kv: &Tensor,
    ln_q: (&Tensor, &Tensor),
    ln_kv: Option<(&Tensor, &Tensor)>,
    a: &AttnTensors<'_>,
    heads: usize,
) -> Tensor {
    let hq = layer_norm(x, ln_q.0, ln_q.1);
    let hkv = match ln_kv {
        Some((g, b)) => layer_norm(kv, g, b),
        None => hq.clone(),
    };
    let q = linear(&hq, a.wq, a.bq);
    let k = linear(&hkv, a.wk, a.bk);
    let v = linear(&hkv, a.wv, a.bv);
    let ctx = full_attention(&q, &k, &v, heads);
    let out = linear(&ctx, a.wo, a.bo);
    let mut y = x.clone();
    y.add_assign(&out);
    y
}

fn log_softmax(x: &Tensor) -> Tensor {
    let (n, d) = x.shape();
    let mut y = Tensor::zeros(n, d);
    for i in 0..n {
        let row = x.row(i);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| exp(v - hi)).sum();
        let lse = hi + ln(z);
        for c in 0..d {
            y.set(i, c, row[c] - lse);
        }
    }
    y
}

/// One refinement step with full attention context; returns the N x (V+1)
/// log-probability matrix.
pub fn reference_forward(
    a: &Alignment,
    enc: &EncoderOutput,
    params: &ModelParams,
) -> Result<Tensor, DecoderError> {
    super::validate_step_inputs(&params.cfg, a, enc)?;
    let cfg = &params.cfg;
    let layout = &params.layout;
    let t = |i: usize| -> &Tensor { &params.tensors[i] };
    let n = a.len();

    let mut text = Tensor::zeros(n, cfg.model_dim);
    for (r, &tok) in a.tokens().iter().enumerate() {
        let te = t(layout.token_embed).row(tok as usize);
        let pe = t(layout.pos_embed).row(r);
        for (c, o) in text.row_mut(r).iter_mut().enumerate() {
            *o = te[c] + pe[c];
        }
    }

    let mut audio = linear(enc.features(), t(layout.audio_proj_w), t(layout.audio_proj_b));

    for l in 0..cfg.layers {
        let audio_block = if !cfg.audio_self_attention {
            None
        } else if cfg.bottom_audio_self_attention {
            Some(l)
        } else {
            l.checked_sub(1)
        };
        if let Some(ai) = audio_block {
            let idx = &layout.audio[ai];
            let at = AttnTensors {
                wq: t(idx.self_attn.wq),
                bq: t(idx.self_attn.bq),
                wk: t(idx.self_attn.wk),
                bk: t(idx.self_attn.bk),
                wv: t(idx.self_attn.wv),
                bv: t(idx.self_attn.bv),
                wo: t(idx.self_attn.wo),
                bo: t(idx.self_attn.bo),
            };
            audio = attn_block(
                &audio,
                &audio,
                (t(idx.ln_self.gain), t(idx.ln_self.bias)),
                None,
                &at,
                cfg.heads,
            );
            let h = layer_norm(&audio, t(idx.ln_ffn.gain), t(idx.ln_ffn.bias));
            let mid = gelu(&linear(&h, t(idx.ffn.w1), t(idx.ffn.b1)));
            let out = linear(&mid, t(idx.ffn.w2), t(idx.ffn.b2));
            audio.add_assign(&out);
        }

        let idx = &layout.text[l];
        let self_at = AttnTensors {
            wq: t(idx.self_attn.wq),
            bq: t(idx.self_attn.bq),
            wk: t(idx.self_attn.wk),
            bk: t(idx.self_attn.bk),
            wv: t(idx.self_attn.wv),
            bv: t(idx.self_attn.bv),
            wo: t(idx.self_attn.wo),
            bo: t(idx.self_attn.bo),
        };
        text = attn_block(
            &text,
            &text,
            (t(idx.ln_self.gain), t(idx.ln_self.bias)),
            None,
            &self_at,
            cfg.heads,
        );
        let cross_at = AttnTensors {
            wq: t(idx.cross_attn.wq),
            bq: t(idx.cross_attn.bq),
            wk: t(idx.cross_attn.wk),
            bk: t(idx.cross_attn.bk),
            wv: t(idx.cross_attn.wv),
            bv: t(idx.cross_attn.bv),
            wo: t(idx.cross_attn.wo),
            bo: t(idx.cross_attn.bo),
        };
        text = attn_block(
            &text,
            &audio,
            (t(idx.ln_q.gain), t(idx.ln_q.bias)),
            Some((t(idx.ln_kv.gain), t(idx.ln_kv.bias))),
            &cross_at,
            cfg.heads,
        );
        let h = layer_norm(&text, t(idx.ln_ffn.gain), t(idx.ln_ffn.bias));
        let mid = gelu(&linear(&h, t(idx.ffn.w1), t(idx.ffn.b1)));
        let out = linear(&mid, t(idx.ffn.w2), t(idx.ffn.b2));
        text.add_assign(&out);
    }

    let hidden = layer_norm(&text, t(layout.ln_final.gain), t(layout.ln_final.bias));
    let logits = linear(&hidden, t(layout.out_w), t(layout.out_b));
    Ok(log_softmax(&logits))
}
