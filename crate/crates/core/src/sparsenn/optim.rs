use super::conv::Param;
use super::graph::Network;

pub const BASE_LR: f64 = 15e-5;
pub const LR_STEP: usize = 2;
pub const LR_GAMMA: f64 = 0.95;

/// Step decay: `base · gamma^⌊epoch / step⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLr {
    pub base: f64,
    pub step: usize,
    pub gamma: f64,
}

impl Default for StepLr {
    fn default() -> Self {
        StepLr {
            base: BASE_LR,
            step: LR_STEP,
            gamma: LR_GAMMA,
        }
    }
}

impl StepLr {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base * self.gamma.powi((epoch / self.step.max(1)) as i32)
    }
}

pub fn lr_schedule(epoch: usize) -> f64 {
    StepLr::default().lr(epoch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamState {
    /// One Adam update over `params`, which must be presented in the same
    /// order on every call.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.into_iter().enumerate() {
            if self.m.len() <= idx {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Adam step on a network followed by re-zeroing its masked taps.
pub fn adam_step(net: &mut Network, state: &mut AdamState, lr: f64) {
    state.step(net.params_mut(), lr);
    net.apply_masks();
}
