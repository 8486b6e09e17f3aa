//! Adam optimizer over flat parameter vectors.

use crate::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update step. `grads[i]` must match `params[i]` in length; an empty
    /// gradient slot leaves that parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<Real>]) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (pi, p) in params.iter_mut().enumerate() {
            let g = &grads[pi];
            if g.is_empty() {
                continue;
            }
            debug_assert_eq!(g.len(), p.len());
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (i, val) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *val -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Tensor::vector(vec![5.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[1]);
        for _ in 0..200 {
            let g = vec![2.0 * p.values()[0]];
            adam.step(&mut [&mut p], &[g]);
        }
        assert!(p.values()[0].abs() < 0.1);
    }
}
