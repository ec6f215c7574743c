//! Three-layer strided CNN with batch norm and dropout, one fully connected
//! classification layer on the flattened final feature map.

use super::{ClassifierSpec, CnnFeatureSource};
use crate::nn::{BatchNorm, Bound, Conv2d, Dropout, Linear, Mode, ParamStore};
use crate::tensor::{conv::conv2d_out_hw, Tape, Value};
use rand_chacha::ChaCha8Rng;

pub struct CnnModel {
    blocks: Vec<(Conv2d, BatchNorm)>,
    head: Linear,
    dropout: Dropout,
    slope: f64,
    flat_dim: usize,
    feature_source: CnnFeatureSource,
}

impl CnnModel {
    pub fn build(spec: &ClassifierSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (c, mut h, mut w) = spec.input_shape;
        let mut blocks = Vec::new();
        let mut prev = c;
        for (i, &ch) in spec.cnn_channels.iter().enumerate() {
            let conv = Conv2d::new(store, rng, &format!("cnn.conv{}", i + 1), prev, ch, 3, 2, 1);
            let bn = BatchNorm::new(store, &format!("cnn.bn{}", i + 1), ch, true);
            blocks.push((conv, bn));
            let (nh, nw) = conv2d_out_hw(h, w, 3, 3, 2, 1);
            h = nh;
            w = nw;
            prev = ch;
        }
        let flat_dim = prev * h * w;
        let head = Linear::new(store, rng, "cnn.head", flat_dim, spec.num_classes);
        Self {
            blocks,
            head,
            dropout: Dropout::new(spec.dropout),
            slope: spec.leaky_slope,
            flat_dim,
            feature_source: spec.cnn_feature_source,
        }
    }

    /// Returns (logits, features): features are the flattened convolutional
    /// map by default, or the fully connected layer's output when configured.
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
        let mut h = x;
        let mut store = store;
        for (conv, bn) in &self.blocks {
            h = conv.forward(bound, h);
            h = match (mode, store.as_deref_mut()) {
                (Mode::Train, Some(s)) => bn.forward_train(s, bound, h),
                _ => bn.forward_eval(bound, h),
            };
            h = h.leaky_relu(self.slope);
            h = self.dropout.forward(tape, h, mode, rng.as_deref_mut());
        }
        let flat = h.reshape(&[b, self.flat_dim]);
        let logits = self.head.forward(bound, flat);
        let features = match self.feature_source {
            CnnFeatureSource::FlattenedConv => flat,
            CnnFeatureSource::FcOutput => logits,
        };
        (logits, features)
    }

    pub fn feature_dim(&self, spec: &ClassifierSpec) -> usize {
        match self.feature_source {
            CnnFeatureSource::FlattenedConv => self.flat_dim,
            CnnFeatureSource::FcOutput => spec.num_classes,
        }
    }
}
