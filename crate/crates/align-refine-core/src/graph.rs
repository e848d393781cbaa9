//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns one forward computation: every op eagerly computes its
//! value and pushes a node whose backward closure knows how to turn the
//! output gradient into parent gradients. Node ids grow monotonically, so a
//! reverse sweep over ids is a topological backward pass. Graphs are built
//! per utterance and dropped after the gradients are read; parameters enter
//! as leaves holding `Arc<Tensor>` clones of the model state.
//!
//! The op set is exactly what the refinement decoder needs: linear layers,
//! layer norm, GELU, embedding gathers, banded multi-head attention,
//! log-softmax, the CTC full-sum node, and a few scalar reductions. Masked
//! attention walks each query's admissible key range only, so keys outside
//! the mask contribute exactly zero — not epsilon — to both values and
//! gradients.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::align::LabelSequence;
use crate::ctc::{ctc_log_prob_with_grad, FrameLogProbs};
use crate::mask::AttentionMask;
use crate::math::{erf, exp, ln, sqrt};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Arc<Tensor>,
    backward: Option<BackwardFn>,
}

/// Gradient accumulator indexed by node id.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    fn add(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }
}

/// Gradients of a scalar loss with respect to graph leaves.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zero-shaped `None` when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), backward });
        Var(self.nodes.len() - 1)
    }

    /// Leaf sharing an existing tensor (model parameters, encoder features).
    pub fn leaf(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf owning a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = (*self.nodes[a.0].value).clone();
        out.add_assign(&self.nodes[b.0].value);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = (*self.nodes[a.0].value).clone();
        out.scale_in_place(c);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut d = g.clone();
                d.scale_in_place(c);
                sink.add(a, d);
            })),
        )
    }

    /// `a + c * b`, shapes equal.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let mut out = (*self.nodes[a.0].value).clone();
        out.add_scaled(&self.nodes[b.0].value, c);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let mut d = g.clone();
                d.scale_in_place(c);
                sink.add(b, d);
            })),
        )
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = Arc::clone(&self.nodes[x.0].value);
        let wv = Arc::clone(&self.nodes[w.0].value);
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.rows(), 1);
        assert_eq!(bv.cols(), wv.cols());
        let mut out = matmul(&xv, &wv);
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, add) in row.iter_mut().zip(bv.row(0)) {
                *o += add;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(x, matmul_nt(g, &wv));
                sink.add(w, matmul_tn(&xv, g));
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                sink.add(b, gb);
            })),
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-6;
        let xv = Arc::clone(&self.nodes[x.0].value);
        let gv = Arc::clone(&self.nodes[gain.0].value);
        let bv = &self.nodes[bias.0].value;
        let (n, d) = xv.shape();
        let mut out = Tensor::zeros(n, d);
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / sqrt(var + EPS);
            inv_std[r] = istd;
            for c in 0..d {
                let xh = (row[c] - mean) * istd;
                xhat.set(r, c, xh);
                out.set(r, c, gv.at(0, c) * xh + bv.at(0, c));
            }
        }
        let xhat = Arc::new(xhat);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (n, d) = g.shape();
                let mut gx = Tensor::zeros(n, d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                for r in 0..n {
                    let grow = g.row(r);
                    let xrow = xhat.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..d {
                        let dxhat = grow[c] * gv.at(0, c);
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xrow[c];
                        ggain.set(0, c, ggain.at(0, c) + grow[c] * xrow[c]);
                        gbias.set(0, c, gbias.at(0, c) + grow[c]);
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for c in 0..d {
                        let dxhat = grow[c] * gv.at(0, c);
                        gx.set(r, c, inv_std[r] * (dxhat - mean_dxhat - xrow[c] * mean_dxhat_xhat));
                    }
                }
                sink.add(x, gx);
                sink.add(gain, ggain);
                sink.add(bias, gbias);
            })),
        )
    }

    /// GELU via the exact erf form; smooth, so finite differences behave.
    pub fn gelu(&mut self, x: Var) -> Var {
        const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
        const INV_SQRT_2PI: f64 = 0.3989422804014327;
        let xv = Arc::clone(&self.nodes[x.0].value);
        let mut out = (*xv).clone();
        for v in out.data_mut() {
            *v = 0.5 * *v * (1.0 + erf(*v * INV_SQRT2));
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gx = g.clone();
                for (gv_, &x_) in gx.data_mut().iter_mut().zip(xv.data()) {
                    let cdf = 0.5 * (1.0 + erf(x_ * INV_SQRT2));
                    let pdf = INV_SQRT_2PI * exp(-0.5 * x_ * x_);
                    *gv_ *= cdf + x_ * pdf;
                }
                sink.add(x, gx);
            })),
        )
    }

    /// Gather rows of `table` at `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = Arc::clone(&self.nodes[table.0].value);
        let d = tv.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ids: Vec<usize> = ids.to_vec();
        let (rows, cols) = tv.shape();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gt = Tensor::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                sink.add(table, gt);
            })),
        )
    }

    /// Multi-head scaled dot-product attention restricted to each query's
    /// admissible key range. `q`, `k`, `v` are already projected; head `h`
    /// owns the `h`-th block of `d / heads` columns.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        heads: usize,
    ) -> Var {
        let qv = Arc::clone(&self.nodes[q.0].value);
        let kv = Arc::clone(&self.nodes[k.0].value);
        let vv = Arc::clone(&self.nodes[v.0].value);
        let (nq, d) = qv.shape();
        let nk = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), (nk, d));
        assert_eq!(mask.num_queries(), nq, "mask/query length mismatch");
        assert_eq!(mask.num_keys(), nk, "mask/key length mismatch");
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let inv_scale = 1.0 / sqrt(dh as f64);

        let mut out = Tensor::zeros(nq, d);
        // Softmax weights per query, laid out head-major within the row span.
        let mut weights: Vec<Vec<f64>> = Vec::with_capacity(nq);
        let mut scores = Vec::new();
        for i in 0..nq {
            let span = mask.row_span(i);
            let w = span.len();
            let mut wrow = vec![0.0; heads * w];
            let qrow = qv.row(i);
            let orow = out.row_mut(i);
            for h in 0..heads {
                let qh = &qrow[h * dh..(h + 1) * dh];
                scores.clear();
                let mut hi = f64::NEG_INFINITY;
                for j in span.clone() {
                    let kh = &kv.row(j)[h * dh..(h + 1) * dh];
                    let mut s = 0.0;
                    for (a, b) in qh.iter().zip(kh) {
                        s += a * b;
                    }
                    s *= inv_scale;
                    if s > hi {
                        hi = s;
                    }
                    scores.push(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = exp(*s - hi);
                    z += *s;
                }
                let inv_z = 1.0 / z;
                for (jj, j) in span.clone().enumerate() {
                    let a = scores[jj] * inv_z;
                    wrow[h * w + jj] = a;
                    let vh = &vv.row(j)[h * dh..(h + 1) * dh];
                    for (o, &x) in orow[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                        *o += a * x;
                    }
                }
            }
            weights.push(wrow);
        }

        let weights = Arc::new(weights);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gq = Tensor::zeros(nq, d);
                let mut gk = Tensor::zeros(nk, d);
                let mut gv = Tensor::zeros(nk, d);
                let mut da = Vec::new();
                for i in 0..nq {
                    let span = mask.row_span(i);
                    let w = span.len();
                    let wrow = &weights[i];
                    let grow = g.row(i);
                    let qrow = qv.row(i);
                    for h in 0..heads {
                        let gctx = &grow[h * dh..(h + 1) * dh];
                        let aw = &wrow[h * w..(h + 1) * w];
                        da.clear();
                        let mut dot_av = 0.0;
                        for (jj, j) in span.clone().enumerate() {
                            let vh = &vv.row(j)[h * dh..(h + 1) * dh];
                            let mut s = 0.0;
                            for (a, b) in gctx.iter().zip(vh) {
                                s += a * b;
                            }
                            da.push(s);
                            dot_av += aw[jj] * s;
                        }
                        let qh = &qrow[h * dh..(h + 1) * dh];
                        for (jj, j) in span.clone().enumerate() {
                            let ds = aw[jj] * (da[jj] - dot_av) * inv_scale;
                            let a = aw[jj];
                            let krow = kv.row(j);
                            let kh = &krow[h * dh..(h + 1) * dh];
                            let gq_h = &mut gq.row_mut(i)[h * dh..(h + 1) * dh];
                            for (gq_, &k_) in gq_h.iter_mut().zip(kh) {
                                *gq_ += ds * k_;
                            }
                            let gk_h = &mut gk.row_mut(j)[h * dh..(h + 1) * dh];
                            for (gk_, &q_) in gk_h.iter_mut().zip(qh) {
                                *gk_ += ds * q_;
                            }
                            let gv_h = &mut gv.row_mut(j)[h * dh..(h + 1) * dh];
                            for (gv_, &gc) in gv_h.iter_mut().zip(gctx) {
                                *gv_ += a * gc;
                            }
                        }
                    }
                }
                sink.add(q, gq);
                sink.add(k, gk);
                sink.add(v, gv);
            })),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.shape();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mut hi = f64::NEG_INFINITY;
            for &v in row {
                if v > hi {
                    hi = v;
                }
            }
            let mut z = 0.0;
            for &v in row {
                z += exp(v - hi);
            }
            let lse = hi + ln(z);
            for c in 0..d {
                let y = row[c] - lse;
                out.set(r, c, y);
                probs.set(r, c, exp(y));
            }
        }
        let probs = Arc::new(probs);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (n, d) = g.shape();
                let mut gx = g.clone();
                for r in 0..n {
                    let gsum: f64 = g.row(r).iter().sum();
                    let prow = probs.row(r);
                    let grow = gx.row_mut(r);
                    for c in 0..d {
                        grow[c] -= prow[c] * gsum;
                    }
                }
                sink.add(x, gx);
            })),
        )
    }

    /// CTC full-sum log-probability of `y` under log-prob rows `p` as a
    /// scalar node. Backward routes the posterior occupancies into `p`.
    pub fn ctc_log_prob(&mut self, p: Var, y: &LabelSequence) -> Var {
        let pv = FrameLogProbs::from_tensor_unchecked((*self.nodes[p.0].value).clone());
        let (logp, grad) = ctc_log_prob_with_grad(&pv, y);
        self.push(
            Tensor::from_vec(1, 1, vec![logp]),
            Some(Box::new(move |g, sink| {
                let mut d = grad.clone();
                d.scale_in_place(g.at(0, 0));
                sink.add(p, d);
            })),
        )
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let n = vars.len() as f64;
        let sum: f64 = vars.iter().map(|v| self.nodes[v.0].value.at(0, 0)).sum();
        let vars: Vec<Var> = vars.to_vec();
        self.push(
            Tensor::from_vec(1, 1, vec![sum / n]),
            Some(Box::new(move |g, sink| {
                let share = g.at(0, 0) / n;
                for &v in &vars {
                    sink.add(v, Tensor::from_vec(1, 1, vec![share]));
                }
            })),
        )
    }

    /// `sum_k softmax(scalars)_k * weights_k`: the expected-cost reduction
    /// used by the MWER objective.
    pub fn softmax_weighted(&mut self, scalars: &[Var], weights: &[f64]) -> Var {
        assert_eq!(scalars.len(), weights.len());
        assert!(!scalars.is_empty());
        let vals: Vec<f64> = scalars.iter().map(|v| self.nodes[v.0].value.at(0, 0)).collect();
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = vals.iter().map(|&v| exp(v - hi)).collect();
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        let value: f64 = probs.iter().zip(weights).map(|(p, w)| p * w).sum();
        let scalars: Vec<Var> = scalars.to_vec();
        let weights: Vec<f64> = weights.to_vec();
        self.push(
            Tensor::from_vec(1, 1, vec![value]),
            Some(Box::new(move |g, sink| {
                let gs = g.at(0, 0);
                for ((&v, &p), &w) in scalars.iter().zip(&probs).zip(&weights) {
                    sink.add(v, Tensor::from_vec(1, 1, vec![gs * p * (w - value)]));
                }
            })),
        )
    }

    /// `sum(x .* coefs)` as a scalar; handy for reducing a matrix output to
    /// a differentiable scalar in checks.
    pub fn weighted_sum_elems(&mut self, x: Var, coefs: Tensor) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape(), coefs.shape());
        let value: f64 = xv.data().iter().zip(coefs.data()).map(|(a, b)| a * b).sum();
        self.push(
            Tensor::from_vec(1, 1, vec![value]),
            Some(Box::new(move |g, sink| {
                let mut d = coefs.clone();
                d.scale_in_place(g.at(0, 0));
                sink.add(x, d);
            })),
        )
    }

    /// Reverse sweep from a scalar loss. Returns gradients for leaves;
    /// interior gradients are freed as the sweep passes them.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.shape(), (1, 1), "loss must be scalar");
        let mut sink = GradSink { grads: vec![None; self.nodes.len()] };
        sink.grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            match &node.backward {
                Some(back) => {
                    if let Some(g) = sink.grads[i].take() {
                        back(&g, &mut sink);
                    }
                }
                None => {} // leaf: keep its gradient for the caller
            }
        }
        Grads { grads: sink.grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{band_self_mask, MaskSpec};
    use crate::rng::DetRng;

    fn arb(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = DetRng::new(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.uniform_in(-0.8, 0.8)).collect())
    }

    /// Central-difference check of d(loss)/d(leaf) for a scalar-valued build.
    fn check_grad<F>(leaves: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let run = |tensors: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
            let loss = build(&mut g, &vars);
            g.value(loss).at(0, 0)
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);

        let step = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]);
            for idx in 0..leaf.len() {
                let mut hi = leaves.to_vec();
                hi[li].data_mut()[idx] += step;
                let mut lo = leaves.to_vec();
                lo[li].data_mut()[idx] -= step;
                let fd = (run(&hi) - run(&lo)) / (2.0 * step);
                let a = analytic.map(|t| t.data()[idx]).unwrap_or(0.0);
                assert!(
                    crate::math::rel_err(a, fd) < 1e-5 || (a.abs() < 1e-10 && fd.abs() < 1e-6),
                    "leaf {li} idx {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn linear_grads() {
        let x = arb(3, 4, 1);
        let w = arb(4, 2, 2);
        let b = arb(1, 2, 3);
        let coefs = arb(3, 2, 4);
        check_grad(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            g.weighted_sum_elems(y, coefs.clone())
        });
    }

    #[test]
    fn layer_norm_grads() {
        let x = arb(3, 5, 10);
        let gain = arb(1, 5, 11);
        let bias = arb(1, 5, 12);
        let coefs = arb(3, 5, 13);
        check_grad(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            g.weighted_sum_elems(y, coefs.clone())
        });
    }

    #[test]
    fn gelu_grads() {
        let x = arb(2, 6, 20);
        let coefs = arb(2, 6, 21);
        check_grad(&[x], |g, v| {
            let y = g.gelu(v[0]);
            g.weighted_sum_elems(y, coefs.clone())
        });
    }

    #[test]
    fn embed_grads() {
        let table = arb(5, 3, 30);
        let coefs = arb(4, 3, 31);
        check_grad(&[table], |g, v| {
            let y = g.embed(v[0], &[0, 2, 2, 4]);
            g.weighted_sum_elems(y, coefs.clone())
        });
    }

    #[test]
    fn masked_attention_grads() {
        let q = arb(4, 6, 40);
        let k = arb(5, 6, 41);
        let v = arb(5, 6, 42);
        let coefs = arb(4, 6, 43);
        let mask = Arc::new({
            // Irregular spans via a band mask over 4 queries x 5 keys: build
            // from timestamps to vary the window widths.
            use crate::align::Timestamps;
            crate::mask::time_aligned_cross_mask(
                &Timestamps::from_times(vec![0, 1, 3, 4]),
                5,
                &MaskSpec::new(Some(1), 1),
            )
        });
        check_grad(&[q, k, v], |g, vars| {
            let y = g.masked_attention(vars[0], vars[1], vars[2], Arc::clone(&mask), 2);
            g.weighted_sum_elems(y, coefs.clone())
        });
    }

    #[test]
    fn log_softmax_grads() {
        let x = arb(3, 4, 50);
        let coefs = arb(3, 4, 51);
        check_grad(&[x], |g, v| {
            let y = g.log_softmax(v[0]);
            g.weighted_sum_elems(y, coefs.clone())
        });
    }

    #[test]
    fn ctc_node_grads() {
        // Raw scores -> log_softmax -> ctc, checking the composition.
        let x = arb(4, 3, 60);
        let y = LabelSequence::new(vec![1, 2]).unwrap();
        check_grad(&[x], |g, v| {
            let lp = g.log_softmax(v[0]);
            let ll = g.ctc_log_prob(lp, &y);
            g.scale(ll, -1.0)
        });
    }

    #[test]
    fn softmax_weighted_grads() {
        let s0 = Tensor::from_vec(1, 1, vec![-0.3]);
        let s1 = Tensor::from_vec(1, 1, vec![-1.1]);
        let s2 = Tensor::from_vec(1, 1, vec![0.4]);
        check_grad(&[s0, s1, s2], |g, v| g.softmax_weighted(v, &[1.0, 0.0, 2.0]));
    }

    #[test]
    fn mean_and_residual_grads() {
        let a = arb(2, 3, 70);
        let b = arb(2, 3, 71);
        let coefs = arb(2, 3, 72);
        check_grad(&[a, b], |g, v| {
            let s = g.add_scaled(v[0], v[1], 0.37);
            let e = g.weighted_sum_elems(s, coefs.clone());
            let e2 = g.scale(e, 2.0);
            g.mean_scalars(&[e, e2])
        });
    }

    #[test]
    fn attention_ignores_masked_keys_exactly() {
        let q = arb(3, 4, 80);
        let k = arb(6, 4, 81);
        let v = arb(6, 4, 82);
        let mask = Arc::new(band_self_mask(3, &MaskSpec::new(Some(0), 0)));
        // Keys 3..6 are outside every row span for a 3-query causal band.
        let run = |kt: &Tensor, vt: &Tensor| {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let kv = g.constant(kt.clone());
            let vv = g.constant(vt.clone());
            // band mask over 3 queries expects 3 keys; mismatch is an error,
            // so slice the first 3 rows.
            let k3 = Tensor::from_vec(3, 4, kt.data()[..12].to_vec());
            let v3 = Tensor::from_vec(3, 4, vt.data()[..12].to_vec());
            let kv3 = g.constant(k3);
            let vv3 = g.constant(v3);
            let _ = (kv, vv);
            let y = g.masked_attention(qv, kv3, vv3, Arc::clone(&mask), 2);
            g.value(y).clone()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        // Perturb rows >= 3 only; sliced inputs are identical, so outputs
        // must be bit-identical.
        for idx in 12..24 {
            k2.data_mut()[idx] += 100.0;
            v2.data_mut()[idx] -= 50.0;
        }
        let perturbed = run(&k2, &v2);
        assert_eq!(base.data(), perturbed.data());
    }
}
