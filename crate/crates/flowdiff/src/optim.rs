//! Decoupled-weight-decay adaptive gradient descent plus the one-cycle
//! learning-rate schedule used by every training phase.

use crate::autograd::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &Params, cfg: AdamWConfig) -> Self {
        let m = params
            .iter_ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        let v = params
            .iter_ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        AdamW {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Frozen parameters are skipped entirely (no state drift).
    pub fn step(&mut self, params: &mut Params, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter_ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.0;
            let b1 = self.cfg.beta1;
            let b2 = self.cfg.beta2;
            {
                let g = params.grad(id).clone();
                for (m, &gv) in self.m[i].data_mut().iter_mut().zip(g.data()) {
                    *m = b1 * *m + (1.0 - b1) * gv;
                }
                for (v, &gv) in self.v[i].data_mut().iter_mut().zip(g.data()) {
                    *v = b2 * *v + (1.0 - b2) * gv * gv;
                }
            }
            let wd = self.cfg.weight_decay;
            let eps = self.cfg.eps;
            let m = &self.m[i];
            let v = &self.v[i];
            let value = params.value_mut(id);
            for ((p, &mv), &vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
        params.zero_grads();
    }

    pub fn state_tensors(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// One-cycle schedule: cosine warmup from `peak / div_factor` up to `peak`,
/// then cosine annealing down to `end`. The last step lands on `end`
/// exactly.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub peak: f32,
    pub end: f32,
    pub total_steps: usize,
    pub pct_start: f32,
    pub div_factor: f32,
}

impl OneCycle {
    pub fn new(peak: f32, end: f32, total_steps: usize) -> Self {
        OneCycle {
            peak,
            end,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        assert!(self.total_steps > 0);
        if self.total_steps == 1 {
            return self.end;
        }
        let step = step.min(self.total_steps - 1);
        let warmup = ((self.total_steps as f32 * self.pct_start).round() as usize)
            .min(self.total_steps - 1);
        let start = self.peak / self.div_factor;
        if step < warmup {
            let p = step as f32 / warmup as f32;
            cosine_interp(start, self.peak, p)
        } else {
            let span = (self.total_steps - 1 - warmup) as f32;
            let p = if span == 0.0 {
                1.0
            } else {
                (step - warmup) as f32 / span
            };
            cosine_interp(self.peak, self.end, p)
        }
    }
}

fn cosine_interp(from: f32, to: f32, p: f32) -> f32 {
    let w = 0.5 * (1.0 + (std::f32::consts::PI * p).cos());
    to + (from - to) * w
}
