//! Adam with decoupled weight decay.

use crate::array::RealArray;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, param_sizes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advance the step counter; call once before the per-parameter updates
    /// of one optimization step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter slot. `idx` must match the construction order.
    /// Weight decay is decoupled: it scales the parameter directly rather
    /// than entering the moment estimates.
    pub fn update(&mut self, idx: usize, p: &mut RealArray, g: &RealArray) {
        assert!(self.step > 0, "begin_step before update");
        assert_eq!(p.len(), g.len(), "parameter/gradient size mismatch");
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
        }
    }

    /// Whole-model step over parallel parameter/gradient slices.
    pub fn step(&mut self, params: &mut [&mut RealArray], grads: &[RealArray]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.begin_step();
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(idx, p, g);
        }
    }
}
