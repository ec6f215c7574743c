//! Neural-network building blocks over the autodiff tape.
//!
//! Parameters live in a [`ParamStore`] as plain arrays between steps. Each
//! step binds the store onto a fresh tape ([`ParamStore::bind`]), runs the
//! model forward, sweeps gradients, and updates the store. Batch-norm
//! running statistics are stored as non-trainable entries and updated only
//! by train-mode forwards.

pub mod optim;

use crate::tensor::{softmax, Tape, Value};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub array: ArrayD<f64>,
    pub trainable: bool,
}

/// Named parameter set with deterministic ordering.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, array: ArrayD<f64>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            array,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].array
    }

    pub fn set(&mut self, id: ParamId, array: ArrayD<f64>) {
        assert_eq!(self.entries[id.0].array.shape(), array.shape());
        self.entries[id.0].array = array;
    }

    pub fn set_by_index(&mut self, index: usize, array: ArrayD<f64>) {
        assert_eq!(self.entries[index].array.shape(), array.shape());
        self.entries[index].array = array;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.array.len()).sum()
    }

    /// Copy every entry onto `tape`: trainable entries as gradient leaves,
    /// buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let values = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.variable(e.array.clone())
                } else {
                    tape.constant(e.array.clone())
                }
            })
            .collect();
        Bound { values }
    }
}

/// Tape leaves for one store, in entry order.
pub struct Bound<'t> {
    values: Vec<Value<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Value<'t> {
        self.values[id.0]
    }

    /// Leaves of trainable entries, paired with their store indices.
    pub fn trainable(&self, store: &ParamStore) -> Vec<(usize, Value<'t>)> {
        store
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| (i, self.values[i]))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn uniform_init(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

pub fn normal_init(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Fully connected layer; weight stored `[in, out]` so forward is one matmul.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(&[in_dim, out_dim], bound, rng), true);
        let b = store.add(format!("{name}.b"), uniform_init(&[out_dim], bound, rng), true);
        Self { w, b }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Value<'t>) -> Value<'t> {
        x.matmul(bound.get(self.w)).add(bound.get(self.b))
    }
}

/// Strided 2-d convolution, weight `[out_ch, in_ch, k, k]`.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = (1.0 / (in_ch * k * k) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform_init(&[out_ch, in_ch, k, k], bound, rng),
            true,
        );
        let b = store.add(format!("{name}.b"), uniform_init(&[out_ch], bound, rng), true);
        Self {
            w,
            b,
            stride,
            pad,
            out_ch,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Value<'t>) -> Value<'t> {
        let y = x.conv2d(bound.get(self.w), self.stride, self.pad);
        y.add(bound.get(self.b).reshape(&[1, self.out_ch, 1, 1]))
    }
}

/// Transposed convolution with a fixed output size, weight `[in_ch, out_ch, k, k]`.
pub struct ConvT2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
    out_ch: usize,
}

impl ConvT2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Self {
        let bound = (1.0 / (in_ch * k * k) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform_init(&[in_ch, out_ch, k, k], bound, rng),
            true,
        );
        let b = store.add(format!("{name}.b"), uniform_init(&[out_ch], bound, rng), true);
        Self {
            w,
            b,
            stride,
            pad,
            out_hw,
            out_ch,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Value<'t>) -> Value<'t> {
        let y = x.conv_t2d(bound.get(self.w), self.stride, self.pad, self.out_hw);
        y.add(bound.get(self.b).reshape(&[1, self.out_ch, 1, 1]))
    }
}

/// Batch normalization over `[B, F]` (dense) or `[B, C, H, W]` (spatial).
///
/// Train mode normalizes with batch statistics and updates the running
/// buffers; eval mode is a fixed affine map of the running statistics, so
/// inversion-time forwards are deterministic and cheap to differentiate twice.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    spatial: bool,
    features: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, spatial: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[features]), 1.0), true);
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[features])), true);
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[features])),
            false,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[features]), 1.0),
            false,
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
            spatial,
            features,
        }
    }

    fn param_shape(&self) -> Vec<usize> {
        if self.spatial {
            vec![1, self.features, 1, 1]
        } else {
            vec![1, self.features]
        }
    }

    fn stat_axes(&self) -> Vec<usize> {
        if self.spatial {
            vec![0, 2, 3]
        } else {
            vec![0]
        }
    }

    /// Normalize with batch statistics and fold them into the running
    /// buffers (unbiased variance, torch-style).
    pub fn forward_train<'t>(
        &self,
        store: &mut ParamStore,
        bound: &Bound<'t>,
        x: Value<'t>,
    ) -> Value<'t> {
        let pshape = self.param_shape();
        let gamma = bound.get(self.gamma).reshape(&pshape);
        let beta = bound.get(self.beta).reshape(&pshape);
        let axes = self.stat_axes();
        let mean = x.mean_axes(&axes, true);
        let centered = x.sub(mean);
        let var = centered.square().mean_axes(&axes, true);
        let xhat = centered.div(var.add_scalar(self.eps).sqrt());

        let shape = x.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let batch_mean = mean.array().into_shape_with_order(IxDyn(&[self.features])).unwrap();
        let batch_var = var
            .array()
            .into_shape_with_order(IxDyn(&[self.features]))
            .unwrap()
            * unbias;
        let m = self.momentum;
        let new_mean = store.get(self.running_mean) * (1.0 - m) + &batch_mean * m;
        let new_var = store.get(self.running_var) * (1.0 - m) + &batch_var * m;
        store.set(self.running_mean, new_mean);
        store.set(self.running_var, new_var);

        xhat.mul(gamma).add(beta)
    }

    /// Fixed affine map of the running statistics; no state is touched.
    pub fn forward_eval<'t>(&self, bound: &Bound<'t>, x: Value<'t>) -> Value<'t> {
        let pshape = self.param_shape();
        let gamma = bound.get(self.gamma).reshape(&pshape);
        let beta = bound.get(self.beta).reshape(&pshape);
        let rm = bound.get(self.running_mean).reshape(&pshape);
        let rv = bound.get(self.running_var).reshape(&pshape);
        x.sub(rm).div(rv.add_scalar(self.eps).sqrt()).mul(gamma).add(beta)
    }
}

/// One-hot rows as a tape constant.
pub fn one_hot_const<'t>(tape: &'t Tape, labels: &[usize], num_classes: usize) -> Value<'t> {
    let mut arr = ArrayD::zeros(IxDyn(&[labels.len(), num_classes]));
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < num_classes, "label {l} out of range 0..{num_classes}");
        arr[[i, l]] = 1.0;
    }
    tape.constant(arr)
}

/// Batch-mean cross-entropy of softmaxed logits against integer labels.
pub fn cross_entropy<'t>(tape: &'t Tape, logits: Value<'t>, labels: &[usize]) -> Value<'t> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "logits must be [batch, classes]");
    assert_eq!(shape[0], labels.len(), "one label per row");
    let lsm = crate::tensor::log_softmax(tape, logits);
    let oh = one_hot_const(tape, labels, shape[1]);
    oh.mul(lsm).sum_all().scale(-1.0 / labels.len() as f64)
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[dim]), 1.0), true);
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])), true);
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Value<'t>) -> Value<'t> {
        let last = x.shape().len() - 1;
        let mean = x.mean_axes(&[last], true);
        let centered = x.sub(mean);
        let var = centered.square().mean_axes(&[last], true);
        let xhat = centered.div(var.add_scalar(self.eps).sqrt());
        xhat.mul(bound.get(self.gamma)).add(bound.get(self.beta))
    }
}

/// Inverted dropout; identity in eval mode.
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p in [0,1)");
        Self { p }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Value<'t>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Value<'t> {
        match (mode, rng) {
            (Mode::Eval, _) | (Mode::Train, None) => x,
            (Mode::Train, Some(rng)) => {
                if self.p == 0.0 {
                    return x;
                }
                let keep = 1.0 - self.p;
                let shape = x.shape();
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = tape.constant(ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap());
                x.mul(mask)
            }
        }
    }
}

/// Standard multi-head self-attention for `[B, T, D]` sequences.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "embed dim must split across heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: Value<'t>) -> Value<'t> {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.dim);
        let dh = d / self.heads;

        let split = |v: Value<'t>| -> Value<'t> {
            // [B,T,D] -> [B*heads, T, dh]
            v.reshape(&[b, t, self.heads, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * self.heads, t, dh])
        };

        let flat = x.reshape(&[b * t, d]);
        let q = split(self.wq.forward(bound, flat).reshape(&[b, t, d]));
        let k = split(self.wk.forward(bound, flat).reshape(&[b, t, d]));
        let v = split(self.wv.forward(bound, flat).reshape(&[b, t, d]));

        let scores = q.bmm(k.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt());
        let attn = softmax(tape, scores);
        let ctx = attn
            .bmm(v)
            .reshape(&[b, self.heads, t, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * t, d]);
        self.wo.forward(bound, ctx).reshape(&[b, t, d])
    }
}

/// Tanh-form GELU.
pub fn gelu(x: crate::tensor::Value<'_>) -> crate::tensor::Value<'_> {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    let inner = x.add(x.square().mul(x).scale(0.044715)).scale(C);
    x.scale(0.5).mul(inner.tanh().add_scalar(1.0))
}
