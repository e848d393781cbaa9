//! First-order optimizer: Adam with warmup-then-inverse-sqrt decay and
//! global-norm gradient clipping.
//!
//! Parameters and moments are snapped to the f32 grid after every update, so
//! the full training state is exactly representable in the raw-f32
//! checkpoint format and a resumed run replays bit-for-bit.

use alloc::vec::Vec;

use crate::decoder::ModelParams;
use crate::math::sqrt;
use crate::tensor::Tensor;

/// Learning-rate schedule: linear warmup to `base_lr` over `warmup_steps`,
/// then inverse-sqrt decay. `step` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        assert!(step >= 1, "schedule steps are 1-based");
        let s = step as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.base_lr * (s / w).min(sqrt(w / s))
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = sqrt(grads.iter().map(|g| g.sq_norm()).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

/// Adam state over a model's canonical tensor order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let m = (0..params.num_tensors())
            .map(|i| {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update with learning rate `lr`. `grads` must follow the model's
    /// canonical tensor order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.num_tensors());
        self.step += 1;
        let bc1 = 1.0 - crate::math::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - crate::math::powi(self.beta2, self.step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mv, vv), &gv) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            m.snap_f32();
            v.snap_f32();
            let p = params.tensor_mut(i);
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (sqrt(vhat) + self.eps);
            }
            p.snap_f32();
        }
    }

    /// Moment tensors in canonical order, for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restore from checkpointed state.
    pub fn from_state(m: Vec<Tensor>, v: Vec<Tensor>, step: usize) -> Self {
        assert_eq!(m.len(), v.len());
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, step }
    }
}
