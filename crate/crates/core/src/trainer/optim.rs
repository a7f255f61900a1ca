//! Adam with decoupled weight decay, linear warmup then linear decay, and
//! global gradient-norm clipping.

use crate::numerics::{Gradients, ParamStore, Tensor};

use super::config::OptimConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: OptimConfig,
    total_steps: usize,
    warmup_steps: usize,
    pub(crate) step: u64,
    pub(crate) m: Vec<Tensor<f32>>,
    pub(crate) v: Vec<Tensor<f32>>,
    /// Updates applied per parameter; drives bias correction.
    pub(crate) counts: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore<f32>, total_steps: usize) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            warmup_steps: ((cfg.warmup_fraction * total_steps as f64).ceil() as usize).max(1),
            cfg,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            counts: vec![0; store.len()],
        }
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        let w = self.warmup_steps as f64;
        let total = self.total_steps.max(self.warmup_steps + 1) as f64;
        if s <= w {
            self.cfg.lr * s / w
        } else {
            self.cfg.lr * ((total - s) / (total - w)).max(0.0)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the parameters that received a gradient. Returns the
    /// pre-clip global gradient norm.
    pub fn apply(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) -> f64 {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let live: Vec<_> = grads.params().filter(|(id, _)| !store.is_frozen(*id)).collect();
        let norm = live
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.cfg.clip_norm && norm > 0.0 { self.cfg.clip_norm / norm } else { 1.0 };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (id, g) in live {
            let i = id.index();
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let p = store.get_mut(id);
            // vectors (biases, norms) are not decayed
            let wd = if p.shape().len() > 1 { self.cfg.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k] as f64 * clip;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let upd = (mk / c1) / ((vk / c2).sqrt() + self.cfg.eps) + wd * *x as f64;
                *x = (*x as f64 - lr * upd) as f32;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn setup() -> (ParamStore<f32>, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let (store, _) = setup();
        let a = Adam::new(OptimConfig::default(), &store, 100);
        assert!((a.lr_at(5) - 2.5e-4).abs() < 1e-12);
        assert!((a.lr_at(10) - 5e-4).abs() < 1e-12);
        assert!((a.lr_at(55) - 2.5e-4).abs() < 1e-12);
        assert_eq!(a.lr_at(100), 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let (mut store, id) = setup();
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut adam = Adam::new(cfg, &store, 500);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id).unwrap();
            let sq = tape.mul(w, w).unwrap();
            let l = tape.sum(sq).unwrap();
            let g = tape.backward(l).unwrap();
            adam.apply(&mut store, &g);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn untouched_params_stay_put() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(OptimConfig::default(), &store, 10);
        let mut tape = Tape::new();
        let va = tape.param(&store, a).unwrap();
        let _vb = tape.param(&store, b).unwrap();
        let l = tape.sum(va).unwrap();
        let g = tape.backward(l).unwrap();
        adam.apply(&mut store, &g);
        assert_ne!(store.get(a).data(), &[1.0, 1.0]);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}
