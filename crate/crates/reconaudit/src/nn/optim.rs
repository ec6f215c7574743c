//! Adam optimizer and gradient clipping over a [`ParamStore`].

use super::ParamStore;
use ndarray::ArrayD;

/// Optimizer moment buffers: (step count, first moments, second moments).
pub type AdamState = (usize, Vec<Option<ArrayD<f64>>>, Vec<Option<ArrayD<f64>>>);

/// Adam with bias correction. Moment buffers align with store entry indices;
/// non-trainable entries keep empty slots.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| ArrayD::zeros(e.array.raw_dim())))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update. `grads` aligns with store entries; `None` slots
    /// (unused or non-trainable parameters) are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(grads.len(), store.len(), "grad slots must align with store");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, grad) in grads.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (grad, self.m[i].as_mut(), self.v[i].as_mut())
            else {
                continue;
            };
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let mut arr = store.entries()[i].array.clone();
            ndarray::Zip::from(&mut arr).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
            store.set_by_index(i, arr);
        }
    }

    /// Serialize moment state for checkpoint resume.
    pub fn state(&self) -> AdamState {
        (self.step, self.m.clone(), self.v.clone())
    }

    pub fn restore(&mut self, step: usize, m: Vec<Option<ArrayD<f64>>>, v: Vec<Option<ArrayD<f64>>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<ArrayD<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use crate::tensor::Tape;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", uniform_init(&[4], 2.0, &mut rng), true);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..200 {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let loss = bound.get(w).square().sum_all();
            let grads = tape.backward(loss, &[bound.get(w)]);
            let slots = vec![grads[0].map(|g| g.array())];
            opt.step(&mut store, &slots);
        }
        assert!(store.get(w).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut grads = vec![Some(ArrayD::from_elem(IxDyn(&[4]), 3.0)), None];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 6.0).abs() < 1e-12);
        let new_sq: f64 = grads[0].as_ref().unwrap().iter().map(|v| v * v).sum();
        assert!((new_sq.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut store = ParamStore::new();
            let w = store.add("w", uniform_init(&[3, 3], 1.0, &mut rng), true);
            let mut opt = Adam::new(&store, 0.01);
            for _ in 0..20 {
                let tape = Tape::new();
                let bound = store.bind(&tape);
                let loss = bound.get(w).square().mul(bound.get(w)).sum_all();
                let grads = tape.backward(loss, &[bound.get(w)]);
                let mut slots = vec![grads[0].map(|g| g.array())];
                clip_global_norm(&mut slots, 5.0);
                opt.step(&mut store, &slots);
            }
            store.get(w).clone()
        };
        assert_eq!(run(), run());
    }
}
