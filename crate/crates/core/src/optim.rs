//! Adam over groups of named parameters sharing one step counter.

use crate::error::{Error, Result};
use crate::networks::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<ParamStore>,
    pub v: Vec<ParamStore>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, groups: &[&ParamStore]) -> Self {
        Self {
            cfg,
            t: 0,
            m: groups.iter().map(|g| g.zeros_like()).collect(),
            v: groups.iter().map(|g| g.zeros_like()).collect(),
        }
    }

    /// One bias-corrected update of every group from its gradient.
    pub fn step(&mut self, params: &mut [&mut ParamStore], grads: &[&ParamStore]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer has {} groups, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_layout(g) || !p.same_layout(&self.m[i]) {
                return Err(Error::ShapeMismatch(format!("group {i} layout differs from optimizer state")));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr_t = (c.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let groups = p
                .iter_mut()
                .zip(self.m[i].iter_mut())
                .zip(self.v[i].iter_mut())
                .zip(grads[i].iter());
            for ((((_, w), (_, m)), (_, v)), (_, g)) in groups {
                let it = w
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data());
                for (((w, m), v), &g) in it {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr_t * *m / ((*v * inv_bc2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut p = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &[&p]);
        // independent f64 recurrence
        let (mut m, mut v, mut w) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -2.0]);
        for t in 1..=5 {
            let gv = [0.5 * t as f32, -1.5];
            let g = store(&gv);
            opt.step(&mut [&mut p], &[&g]).unwrap();
            for i in 0..2 {
                let gi = gv[i] as f64;
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((p.get("w").unwrap().data()[i] as f64 - w[i]).abs() < 1e-5);
        }
        assert_eq!(opt.t, 5);
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut p = store(&[0.3, 0.7]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &[&p]);
        opt.step(&mut [&mut p], &[&store(&[1.0, 1.0])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut p = store(&[0.3, 0.7]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(&mut [&mut p], &[&store(&[1.0])]).is_err());
    }
}
