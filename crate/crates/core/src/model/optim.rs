use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::{c, Gradients, Scalar};
use super::ParamStore;

/// Linear warmup to `peak_lr`, then cosine decay reaching `min_lr` at the
/// final step `total_steps - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 1.5e-4,
            min_lr: 1e-5,
            warmup: 50,
            total_steps: 1000,
        }
    }
}

impl Schedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - self.warmup) as f64 / span as f64).min(1.0)
        };
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub adamw: AdamW,
    pub schedule: Schedule,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    /// Per-parameter update counts, for bias correction.
    pub t: Vec<u64>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, adamw: AdamW, schedule: Schedule) -> Self {
        Self {
            adamw,
            schedule,
            m: params.tensors.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.tensors.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: vec![0; params.len()],
            step: 0,
        }
    }

    /// Grow moment buffers after a head was attached.
    pub fn sync(&mut self, params: &ParamStore<T>) {
        for p in &params.tensors[self.m.len()..] {
            self.m.push(Array2::zeros(p.dim()));
            self.v.push(Array2::zeros(p.dim()));
            self.t.push(0);
        }
    }

    /// One AdamW update at the current step's learning rate. Parameters
    /// without a gradient are left untouched. Returns the rate used.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        self.sync(params);
        let lr = self.schedule.lr(self.step);
        let a = self.adamw;
        let (b1, b2): (T, T) = (c(a.beta1), c(a.beta2));
        let (one_b1, one_b2): (T, T) = (c(1.0 - a.beta1), c(1.0 - a.beta2));
        let (eps, lr_t, wd): (T, T, T) = (c(a.eps), c(lr), c(a.weight_decay));
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1: T = c(1.0 - a.beta1.powi(t));
            let bc2: T = c(1.0 - a.beta2.powi(t));
            let decay = params.decay[i];
            let p = &mut params.tensors[i];
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    if decay {
                        *p = *p - lr_t * wd * *p;
                    }
                    *p -= lr_t * update;
                });
        }
        self.step += 1;
        lr
    }
}
