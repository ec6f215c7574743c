//! Five-layer fully connected classifier with batch norm, leaky ReLU, and
//! dropout on each hidden block. Features are the penultimate activations.

use super::ClassifierSpec;
use crate::nn::{BatchNorm, Bound, Dropout, Linear, Mode, ParamStore};
use crate::tensor::{Tape, Value};
use rand_chacha::ChaCha8Rng;

pub struct MlpModel {
    blocks: Vec<(Linear, BatchNorm)>,
    head: Linear,
    dropout: Dropout,
    slope: f64,
    in_dim: usize,
}

impl MlpModel {
    pub fn build(spec: &ClassifierSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (c, h, w) = spec.input_shape;
        let in_dim = c * h * w;
        let mut blocks = Vec::new();
        let mut prev = in_dim;
        for (i, &width) in spec.mlp_hidden.iter().enumerate() {
            let fc = Linear::new(store, rng, &format!("mlp.fc{}", i + 1), prev, width);
            let bn = BatchNorm::new(store, &format!("mlp.bn{}", i + 1), width, false);
            blocks.push((fc, bn));
            prev = width;
        }
        let head = Linear::new(store, rng, "mlp.head", prev, spec.num_classes);
        Self {
            blocks,
            head,
            dropout: Dropout::new(spec.dropout),
            slope: spec.leaky_slope,
            in_dim,
        }
    }

    /// Returns (logits, penultimate features).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: Option<&mut ParamStore>,
        bound: &Bound<'t>,
        x: Value<'t>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Value<'t>, Value<'t>) {
        let b = x.shape()[0];
        let mut h = x.reshape(&[b, self.in_dim]);
        let mut store = store;
        for (fc, bn) in &self.blocks {
            h = fc.forward(bound, h);
            h = match (mode, store.as_deref_mut()) {
                (Mode::Train, Some(s)) => bn.forward_train(s, bound, h),
                _ => bn.forward_eval(bound, h),
            };
            h = h.leaky_relu(self.slope);
            h = self.dropout.forward(tape, h, mode, rng.as_deref_mut());
        }
        let logits = self.head.forward(bound, h);
        (logits, h)
    }

    pub fn feature_dim(&self, spec: &ClassifierSpec) -> usize {
        *spec.mlp_hidden.last().expect("mlp has hidden layers")
    }
}
