use serde::{Deserialize, Serialize};

use super::{Grads, ParamSet};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
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
    pub fn new(ps: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros = ps.zero_grads().data;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = ps.get_mut(id).data_mut();
            for j in 0..p.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                p[j] -= self.lr * self.weight_decay * p[j];
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = AdamW::new(&ps, 0.1, 0.0);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&ps);
                let v = g.param(x);
                let sq = g.mul(v, v);
                let l = g.sum(sq);
                g.backward(l).params
            };
            opt.step(&mut ps, &grads);
        }
        assert!(ps.get(x).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(&ps, 0.1, 0.5);
        let zero = ps.zero_grads();
        opt.step(&mut ps, &zero);
        assert!((ps.get(x).data()[0] - 0.95).abs() < 1e-12);
    }
}
