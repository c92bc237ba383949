use super::params::{Grads, ParamStore};
use super::tensor::Scalar;

/// AdamW with decoupled weight decay; frozen tensors carry no state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<S: Scalar>(store: &ParamStore<S>, weight_decay: f64) -> Self {
        let zeros = |p: &super::params::Param<S>| if p.trainable { vec![0.0; p.data.len()] } else { Vec::new() };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &Grads<S>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = &grads.g[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data.iter_mut().enumerate() {
                let gk = g[k].f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = w.f64();
                x -= lr * self.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *w = S::c(x);
            }
        }
    }
}
