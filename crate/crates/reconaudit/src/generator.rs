//! Vector-matrix conditioned generator.
//!
//! Class identity enters the generator twice: a softmaxed condition vector is
//! concatenated with the latent before the first dense layer, and an N x N
//! "hot" matrix (one full row or column set to 1 for class k) is appended as
//! an extra channel at the stage where the feature map reaches N x N spatial
//! size. From there transposed convolutions grow the map to the classifier's
//! input size. The output is linear and unclamped; the pixel-bound loss, not
//! an output squash, is what pushes values into [0, 1].

use crate::data::ImageBatch;
use crate::nn::{
    BatchNorm, Bound, Conv2d, ConvT2d, Dropout, Linear, Mode, ParamStore,
};
use crate::tensor::{Tape, Value};
use crate::util::derive_seed;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HotOrientation {
    Row,
    Column,
}

/// Everything the generator consumes for one sample.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    pub latent: ArrayD<f64>,
    pub condition_vector: ArrayD<f64>,
    pub class_index: usize,
    pub orientation: HotOrientation,
    pub hot_matrix: ArrayD<f64>,
}

impl ConditioningBundle {
    fn new(
        latent: ArrayD<f64>,
        condition_vector: ArrayD<f64>,
        class_index: usize,
        orientation: HotOrientation,
    ) -> Self {
        let n = condition_vector.len();
        debug_assert!(class_index < n);
        debug_assert!((condition_vector.sum() - 1.0).abs() < 1e-6);
        let mut hot = ArrayD::zeros(IxDyn(&[n, n]));
        for i in 0..n {
            match orientation {
                HotOrientation::Row => hot[[class_index, i]] = 1.0,
                HotOrientation::Column => hot[[i, class_index]] = 1.0,
            }
        }
        Self {
            latent,
            condition_vector,
            class_index,
            orientation,
            hot_matrix: hot,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.condition_vector.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Softmaxed Gaussian condition vectors; encourages diverse inversion.
    Diverse,
    /// Smoothed one-hot targets at uniformly sampled classes; the
    /// reconstruction objective.
    OneHotTarget,
}

impl ConditioningMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diverse" => Ok(Self::Diverse),
            "one_hot_target" | "one-hot-target" | "onehot" => Ok(Self::OneHotTarget),
            other => Err(Error::Config(format!(
                "unknown conditioning mode '{other}' (expected diverse or one_hot_target)"
            ))),
        }
    }
}

/// Draw a batch of conditioning bundles. Orientation alternates row/column
/// per sample; the class index is always the argmax of the condition vector.
pub fn sample_conditioning(
    latent_dim: usize,
    num_classes: usize,
    batch: usize,
    mode: ConditioningMode,
    smoothing: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ConditioningBundle> {
    assert!(num_classes >= 2, "conditioning needs at least 2 classes");
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..batch)
        .map(|i| {
            let latent = ArrayD::from_shape_vec(
                IxDyn(&[latent_dim]),
                (0..latent_dim).map(|_| normal.sample(rng)).collect(),
            )
            .unwrap();
            let (v, k) = match mode {
                ConditioningMode::Diverse => {
                    let g: Vec<f64> = (0..num_classes).map(|_| normal.sample(rng)).collect();
                    let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = g.iter().map(|x| (x - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    let v: Vec<f64> = e.iter().map(|x| x / s).collect();
                    let k = argmax(&v);
                    (v, k)
                }
                ConditioningMode::OneHotTarget => {
                    let k = rng.random_range(0..num_classes);
                    let v: Vec<f64> = (0..num_classes)
                        .map(|i| {
                            let hot = if i == k { 1.0 } else { 0.0 };
                            (1.0 - smoothing) * hot + smoothing / num_classes as f64
                        })
                        .collect();
                    (v, k)
                }
            };
            let orientation = if i % 2 == 0 {
                HotOrientation::Row
            } else {
                HotOrientation::Column
            };
            ConditioningBundle::new(
                latent,
                ArrayD::from_shape_vec(IxDyn(&[num_classes]), v).unwrap(),
                k,
                orientation,
            )
        })
        .collect()
}

/// Bundles targeted at one fixed class (smoothed one-hot targets), used
/// when sampling reconstructions class by class.
pub fn sample_conditioning_for_class(
    latent_dim: usize,
    num_classes: usize,
    batch: usize,
    class: usize,
    smoothing: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ConditioningBundle> {
    assert!(class < num_classes, "class {class} out of range");
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..batch)
        .map(|i| {
            let latent = ArrayD::from_shape_vec(
                IxDyn(&[latent_dim]),
                (0..latent_dim).map(|_| normal.sample(rng)).collect(),
            )
            .unwrap();
            let v: Vec<f64> = (0..num_classes)
                .map(|j| {
                    let hot = if j == class { 1.0 } else { 0.0 };
                    (1.0 - smoothing) * hot + smoothing / num_classes as f64
                })
                .collect();
            let orientation = if i % 2 == 0 {
                HotOrientation::Row
            } else {
                HotOrientation::Column
            };
            ConditioningBundle::new(
                latent,
                ArrayD::from_shape_vec(IxDyn(&[num_classes]), v).unwrap(),
                class,
                orientation,
            )
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One transposed-convolution stage of the post-injection stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub output_shape: (usize, usize, usize),
    /// Channels of the stem (pre-injection) feature map.
    pub stem_channels: usize,
    /// Channels after each post-injection transposed convolution.
    pub stage_channels: Vec<usize>,
    /// Channels of the refinement convolution before the output layer.
    pub refine_channels: usize,
    pub dropout: f64,
}

impl GeneratorSpec {
    /// Default plan for a classifier's class count and input shape.
    pub fn for_output(num_classes: usize, output_shape: (usize, usize, usize)) -> Result<Self> {
        let spec = Self {
            latent_dim: 64,
            num_classes,
            output_shape,
            stem_channels: 64,
            stage_channels: Vec::new(),
            refine_channels: 16,
            dropout: 0.1,
        };
        let stages = spec.plan_stages()?;
        let mut channels = Vec::new();
        for i in 0..stages.len() {
            channels.push(std::cmp::max(16, 48 >> i));
        }
        Ok(Self {
            stage_channels: channels,
            ..spec
        })
    }

    /// Scale every width by `factor` (floored at 8); used by desk-scale runs.
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |c: usize| ((c as f64 * factor).round() as usize).max(8);
        self.stem_channels = s(self.stem_channels);
        self.refine_channels = s(self.refine_channels);
        for c in &mut self.stage_channels {
            *c = s(*c);
        }
        self
    }

    /// The stem upsamples a dense reshape to N x N; this is its input size.
    fn stem_hw(&self) -> usize {
        self.num_classes.div_ceil(2)
    }

    /// Solve the transposed-convolution geometry from N x N to the target
    /// side: doubling stages (k4 s2 p1) until one stride-2 or stride-3
    /// stage with a modest kernel lands exactly on the target.
    pub fn plan_stages(&self) -> Result<Vec<StageGeom>> {
        let n = self.num_classes;
        let target = self.output_shape.1;
        if self.output_shape.1 != self.output_shape.2 {
            return Err(Error::Config("generator requires square outputs".into()));
        }
        if n >= target {
            return Err(Error::Config(format!(
                "class count {n} must be smaller than the image side {target}"
            )));
        }
        let mut stages = Vec::new();
        let mut cur = n;
        loop {
            for stride in [2usize, 3] {
                let k = target as isize - (stride * (cur - 1)) as isize + 2;
                if (2..=9).contains(&k) {
                    stages.push(StageGeom {
                        kernel: k as usize,
                        stride,
                        pad: 1,
                        out: target,
                    });
                    return Ok(stages);
                }
            }
            let next = cur * 2;
            if next >= target || stages.len() > 4 {
                return Err(Error::Config(format!(
                    "no transposed-convolution plan from {n} to {target}"
                )));
            }
            stages.push(StageGeom {
                kernel: 4,
                stride: 2,
                pad: 1,
                out: next,
            });
            cur = next;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("generator needs a latent and at least 2 classes".into()));
        }
        let stages = self.plan_stages()?;
        if stages.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "stage_channels has {} entries but the plan has {} stages",
                self.stage_channels.len(),
                stages.len()
            )));
        }
        Ok(())
    }
}

pub struct Generator {
    pub spec: GeneratorSpec,
    store: ParamStore,
    stem_fc: Linear,
    stem_fc_bn: BatchNorm,
    stem_ct: Option<ConvT2d>,
    stem_ct_bn: BatchNorm,
    stages: Vec<(ConvT2d, BatchNorm)>,
    refine: Conv2d,
    refine_bn: BatchNorm,
    out_conv: Conv2d,
    dropout: Dropout,
}

/// Seeded, reproducible generator construction.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "generator-init"));
    let n = spec.num_classes;
    let c0 = spec.stem_channels;
    let s0 = spec.stem_hw();

    let stem_fc = Linear::new(
        &mut store,
        &mut rng,
        "gen.stem_fc",
        spec.latent_dim + n,
        c0 * s0 * s0,
    );
    let stem_fc_bn = BatchNorm::new(&mut store, "gen.stem_fc_bn", c0, true);
    // grow s0 -> N unless the dense reshape already lands on N
    let stem_ct = if s0 == n {
        None
    } else {
        let k = n + 2            // out = (s0-1)*2 + k - 2p with p = 1
            - 2 * (s0 - 1);
        Some(ConvT2d::new(
            &mut store,
            &mut rng,
            "gen.stem_ct",
            c0,
            c0,
            k,
            2,
            1,
            (n, n),
        ))
    };
    let stem_ct_bn = BatchNorm::new(&mut store, "gen.stem_ct_bn", c0, true);

    let plan = spec.plan_stages()?;
    let mut stages = Vec::new();
    let mut prev_c = c0 + 1; // +1 for the injected hot-matrix channel
    for (i, (geom, &ch)) in plan.iter().zip(&spec.stage_channels).enumerate() {
        let ct = ConvT2d::new(
            &mut store,
            &mut rng,
            &format!("gen.stage{i}"),
            prev_c,
            ch,
            geom.kernel,
            geom.stride,
            geom.pad,
            (geom.out, geom.out),
        );
        let bn = BatchNorm::new(&mut store, &format!("gen.stage{i}_bn"), ch, true);
        stages.push((ct, bn));
        prev_c = ch;
    }

    let refine = Conv2d::new(&mut store, &mut rng, "gen.refine", prev_c, spec.refine_channels, 3, 1, 1);
    let refine_bn = BatchNorm::new(&mut store, "gen.refine_bn", spec.refine_channels, true);
    let out_conv = Conv2d::new(
        &mut store,
        &mut rng,
        "gen.out",
        spec.refine_channels,
        spec.output_shape.0,
        3,
        1,
        1,
    );

    Ok(Generator {
        spec: spec.clone(),
        store,
        stem_fc,
        stem_fc_bn,
        stem_ct,
        stem_ct_bn,
        stages,
        refine,
        refine_bn,
        out_conv,
        dropout: Dropout::new(spec.dropout),
    })
}

/// Append the per-sample hot matrices as one extra channel of a feature map
/// whose spatial size is exactly N x N.
pub fn inject_hot_matrix<'t>(
    tape: &'t Tape,
    feature_map: Value<'t>,
    bundles: &[ConditioningBundle],
) -> Result<Value<'t>> {
    let shape = feature_map.shape();
    let n = bundles
        .first()
        .map(ConditioningBundle::num_classes)
        .ok_or_else(|| Error::Contract("no bundles to inject".into()))?;
    if shape.len() != 4 || shape[2] != n || shape[3] != n {
        return Err(Error::Contract(format!(
            "hot-matrix injection expects [B,C,{n},{n}], got {shape:?}"
        )));
    }
    if shape[0] != bundles.len() {
        return Err(Error::Contract("one bundle per batch row required".into()));
    }
    let mut chan = ArrayD::zeros(IxDyn(&[bundles.len(), 1, n, n]));
    for (b, bundle) in bundles.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                chan[[b, 0, i, j]] = bundle.hot_matrix[[i, j]];
            }
        }
    }
    Ok(tape.concat(&[feature_map, tape.constant(chan)], 1))
}

impl Generator {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.store.bind(tape)
    }

    fn bundle_input(&self, bundles: &[ConditioningBundle]) -> Result<ArrayD<f64>> {
        let n = self.spec.num_classes;
        let l = self.spec.latent_dim;
        let mut input = ArrayD::zeros(IxDyn(&[bundles.len(), l + n]));
        for (b, bundle) in bundles.iter().enumerate() {
            if bundle.num_classes() != n {
                return Err(Error::Config(format!(
                    "bundle has {} classes, generator expects {n}",
                    bundle.num_classes()
                )));
            }
            if bundle.latent.len() != l {
                return Err(Error::Config(format!(
                    "bundle latent dim {} does not match generator {l}",
                    bundle.latent.len()
                )));
            }
            for i in 0..l {
                input[[b, i]] = bundle.latent[[i]];
            }
            for i in 0..n {
                input[[b, l + i]] = bundle.condition_vector[[i]];
            }
        }
        Ok(input)
    }

    /// Deterministic eval-mode forward on an existing tape/binding; the
    /// output is unclamped.
    pub fn forward_eval<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        bundles: &[ConditioningBundle],
    ) -> Result<Value<'t>> {
        let input = self.bundle_input(bundles)?;
        forward_impl(ForwardParts::of(self), tape, None, bound, input, bundles, Mode::Eval, None)
    }

    /// Train-mode forward: batch-norm batch statistics (running buffers are
    /// updated) and live dropout from `rng`. The generator is the model
    /// being trained, so this is the path the inversion loop drives.
    pub fn forward_train<'t>(
        &mut self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        bundles: &[ConditioningBundle],
        rng: &mut ChaCha8Rng,
    ) -> Result<Value<'t>> {
        let input = self.bundle_input(bundles)?;
        let Self {
            spec,
            store,
            stem_fc,
            stem_fc_bn,
            stem_ct,
            stem_ct_bn,
            stages,
            refine,
            refine_bn,
            out_conv,
            dropout,
        } = self;
        let parts = ForwardParts {
            spec,
            stem_fc,
            stem_fc_bn,
            stem_ct: stem_ct.as_ref(),
            stem_ct_bn,
            stages,
            refine,
            refine_bn,
            out_conv,
            dropout,
        };
        forward_impl(parts, tape, Some(store), bound, input, bundles, Mode::Train, Some(rng))
    }

    /// Deterministic eval-mode generation: same weights and bundles give
    /// bit-identical unclamped pixels. Labels carry the conditioning class.
    pub fn generate(&self, bundles: &[ConditioningBundle]) -> Result<ImageBatch> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = self.forward_eval(&tape, &bound, bundles)?;
        Ok(ImageBatch {
            pixels: out.array(),
            labels: Some(bundles.iter().map(|b| b.class_index).collect()),
        })
    }
}

struct ForwardParts<'g> {
    spec: &'g GeneratorSpec,
    stem_fc: &'g Linear,
    stem_fc_bn: &'g BatchNorm,
    stem_ct: Option<&'g ConvT2d>,
    stem_ct_bn: &'g BatchNorm,
    stages: &'g [(ConvT2d, BatchNorm)],
    refine: &'g Conv2d,
    refine_bn: &'g BatchNorm,
    out_conv: &'g Conv2d,
    dropout: &'g Dropout,
}

impl<'g> ForwardParts<'g> {
    fn of(g: &'g Generator) -> Self {
        Self {
            spec: &g.spec,
            stem_fc: &g.stem_fc,
            stem_fc_bn: &g.stem_fc_bn,
            stem_ct: g.stem_ct.as_ref(),
            stem_ct_bn: &g.stem_ct_bn,
            stages: &g.stages,
            refine: &g.refine,
            refine_bn: &g.refine_bn,
            out_conv: &g.out_conv,
            dropout: &g.dropout,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl<'t>(
    parts: ForwardParts<'_>,
    tape: &'t Tape,
    mut store: Option<&mut ParamStore>,
    bound: &Bound<'t>,
    input: ArrayD<f64>,
    bundles: &[ConditioningBundle],
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Value<'t>> {
    let n = parts.spec.num_classes;
    let c0 = parts.spec.stem_channels;
    let s0 = parts.spec.stem_hw();
    let b = bundles.len();

    let input = tape.constant(input);
    let mut h = parts.stem_fc.forward(bound, input).reshape(&[b, c0, s0, s0]);
    h = match (mode, store.as_deref_mut()) {
        (Mode::Train, Some(s)) => parts.stem_fc_bn.forward_train(s, bound, h),
        _ => parts.stem_fc_bn.forward_eval(bound, h),
    };
    h = h.leaky_relu(0.01);
    if let Some(ct) = parts.stem_ct {
        h = ct.forward(bound, h);
        h = match (mode, store.as_deref_mut()) {
            (Mode::Train, Some(s)) => parts.stem_ct_bn.forward_train(s, bound, h),
            _ => parts.stem_ct_bn.forward_eval(bound, h),
        };
        h = h.leaky_relu(0.01);
    }
    debug_assert_eq!(h.shape()[2], n);

    h = inject_hot_matrix(tape, h, bundles)?;

    for (ct, bn) in parts.stages {
        h = ct.forward(bound, h);
        h = match (mode, store.as_deref_mut()) {
            (Mode::Train, Some(s)) => bn.forward_train(s, bound, h),
            _ => bn.forward_eval(bound, h),
        };
        h = h.leaky_relu(0.01);
        h = parts.dropout.forward(tape, h, mode, rng.as_deref_mut());
    }

    h = parts.refine.forward(bound, h);
    h = match (mode, store) {
        (Mode::Train, Some(s)) => parts.refine_bn.forward_train(s, bound, h),
        _ => parts.refine_bn.forward_eval(bound, h),
    };
    h = h.leaky_relu(0.01);
    Ok(parts.out_conv.forward(bound, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn smoothed_one_hot_values() {
        let mut r = rng(1);
        let bundles = sample_conditioning(8, 10, 32, ConditioningMode::OneHotTarget, 0.01, &mut r);
        for b in &bundles {
            let v = &b.condition_vector;
            let sum: f64 = v.sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for i in 0..10 {
                let expect = if i == b.class_index { 0.991 } else { 0.001 };
                assert!((v[[i]] - expect).abs() < 1e-12, "v[{i}] = {}", v[[i]]);
            }
            assert_eq!(b.class_index, argmax(v.as_slice().unwrap()));
        }
    }

    #[test]
    fn diverse_vectors_are_distributions() {
        let mut r = rng(2);
        let bundles = sample_conditioning(8, 10, 64, ConditioningMode::Diverse, 0.0, &mut r);
        for b in &bundles {
            assert!((b.condition_vector.sum() - 1.0).abs() < 1e-6);
            assert!(b.condition_vector.iter().all(|&p| p > 0.0));
            assert_eq!(b.class_index, argmax(b.condition_vector.as_slice().unwrap()));
        }
        // orientation alternates
        assert_eq!(bundles[0].orientation, HotOrientation::Row);
        assert_eq!(bundles[1].orientation, HotOrientation::Column);
    }

    #[test]
    fn hot_matrix_patterns() {
        let mut r = rng(3);
        let bundles = sample_conditioning(4, 4, 8, ConditioningMode::OneHotTarget, 0.01, &mut r);
        for b in &bundles {
            let ones: usize = b.hot_matrix.iter().filter(|&&x| x == 1.0).count();
            let zeros: usize = b.hot_matrix.iter().filter(|&&x| x == 0.0).count();
            assert_eq!(ones, 4);
            assert_eq!(zeros, 12);
            for i in 0..4 {
                match b.orientation {
                    HotOrientation::Row => assert_eq!(b.hot_matrix[[b.class_index, i]], 1.0),
                    HotOrientation::Column => assert_eq!(b.hot_matrix[[i, b.class_index]], 1.0),
                }
            }
        }
        // row vs column for the same class differ off the diagonal
        let row = ConditioningBundle::new(
            ArrayD::zeros(IxDyn(&[4])),
            ArrayD::from_elem(IxDyn(&[4]), 0.25),
            1,
            HotOrientation::Row,
        );
        let col = ConditioningBundle::new(
            ArrayD::zeros(IxDyn(&[4])),
            ArrayD::from_elem(IxDyn(&[4]), 0.25),
            1,
            HotOrientation::Column,
        );
        assert_ne!(row.hot_matrix, col.hot_matrix);
    }

    #[test]
    fn stage_plans_for_benchmark_shapes() {
        let mnist = GeneratorSpec::for_output(10, (1, 28, 28)).unwrap();
        let plan = mnist.plan_stages().unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!((plan[0].kernel, plan[0].stride, plan[0].out), (3, 3, 28));

        let cifar = GeneratorSpec::for_output(10, (3, 32, 32)).unwrap();
        let plan = cifar.plan_stages().unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!((plan[0].kernel, plan[0].stride, plan[0].out), (7, 3, 32));

        let toy = GeneratorSpec::for_output(4, (1, 28, 28)).unwrap();
        let plan = toy.plan_stages().unwrap();
        assert_eq!(plan.last().unwrap().out, 28);
    }

    #[test]
    fn generate_shapes_and_determinism() {
        for (classes, shape) in [(10usize, (1usize, 28usize, 28usize)), (10, (3, 32, 32))] {
            let spec = GeneratorSpec::for_output(classes, shape).unwrap().scaled(0.25);
            let gen = build_generator(&spec, 4).unwrap();
            let mut r = rng(5);
            let bundles =
                sample_conditioning(spec.latent_dim, classes, 16, ConditioningMode::OneHotTarget, 0.01, &mut r);
            let out = gen.generate(&bundles).unwrap();
            assert_eq!(
                out.pixels.shape(),
                &[16, shape.0, shape.1, shape.2],
                "{shape:?}"
            );
            let again = gen.generate(&bundles).unwrap();
            assert_eq!(out.pixels, again.pixels, "eval generation is deterministic");
        }
    }

    #[test]
    fn latent_variation_changes_output() {
        let spec = GeneratorSpec::for_output(4, (1, 28, 28)).unwrap().scaled(0.25);
        let gen = build_generator(&spec, 6).unwrap();
        let mut r = rng(7);
        // same class and orientation, different latents
        let normal = Normal::new(0.0, 1.0).unwrap();
        let v = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.9925, 0.0025, 0.0025, 0.0025]).unwrap();
        let bundles: Vec<ConditioningBundle> = (0..16)
            .map(|_| {
                let latent = ArrayD::from_shape_vec(
                    IxDyn(&[spec.latent_dim]),
                    (0..spec.latent_dim).map(|_| normal.sample(&mut r)).collect(),
                )
                .unwrap();
                ConditioningBundle::new(latent, v.clone(), 0, HotOrientation::Row)
            })
            .collect();
        let out = gen.generate(&bundles).unwrap().pixels;
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..16 {
            for j in (i + 1)..16 {
                let a = out.index_axis(ndarray::Axis(0), i);
                let b = out.index_axis(ndarray::Axis(0), j);
                total += (&a.to_owned() - &b.to_owned()).mapv(f64::abs).mean().unwrap();
                pairs += 1;
            }
        }
        assert!(total / pairs as f64 > 0.0, "latents must matter");
    }

    #[test]
    fn injection_validates_spatial_size() {
        let tape = Tape::new();
        let mut r = rng(8);
        let bundles = sample_conditioning(4, 4, 2, ConditioningMode::OneHotTarget, 0.01, &mut r);
        let good = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 4, 4])));
        let injected = inject_hot_matrix(&tape, good, &bundles).unwrap();
        assert_eq!(injected.shape(), vec![2, 4, 4, 4]);

        let bad = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 5, 5])));
        assert!(inject_hot_matrix(&tape, bad, &bundles).is_err());
    }

    #[test]
    fn generator_weight_gradient_matches_fd() {
        let spec = GeneratorSpec::for_output(4, (1, 28, 28)).unwrap().scaled(0.15);
        let mut gen = build_generator(&spec, 9).unwrap();
        let mut r = rng(10);
        let bundles = sample_conditioning(spec.latent_dim, 4, 2, ConditioningMode::OneHotTarget, 0.01, &mut r);

        // scalar probe: weighted sum of output pixels
        let probe_of = |g: &Generator| -> f64 {
            let tape = Tape::new();
            let bound = g.bind(&tape);
            let out = g.forward_eval(&tape, &bound, &bundles).unwrap();
            out.tanh().sum_all().scalar()
        };

        let tape = Tape::new();
        let bound = gen.bind(&tape);
        let out = gen.forward_eval(&tape, &bound, &bundles).unwrap();
        let loss = out.tanh().sum_all();
        let targets = bound.trainable(gen.store());
        let (entry_idx, wval) = targets[1]; // stem fc bias or similar early weight
        let grad = tape.backward(loss, &[wval])[0].unwrap().array();

        let eps = 1e-5;
        let base = gen.store().entries()[entry_idx].array.clone();
        for flat in [0usize, base.len() / 2] {
            let idx: Vec<usize> = {
                let mut rem = flat;
                let shape = base.shape().to_vec();
                let mut idx = vec![0; shape.len()];
                for (d, &s) in shape.iter().enumerate().rev() {
                    idx[d] = rem % s;
                    rem /= s;
                }
                idx
            };
            let mut up = base.clone();
            up[IxDyn(&idx)] += eps;
            gen.store_mut().set_by_index(entry_idx, up);
            let fu = probe_of(&gen);
            let mut dn = base.clone();
            dn[IxDyn(&idx)] -= eps;
            gen.store_mut().set_by_index(entry_idx, dn);
            let fd_val = probe_of(&gen);
            gen.store_mut().set_by_index(entry_idx, base.clone());
            let fd = (fu - fd_val) / (2.0 * eps);
            let ad = grad[IxDyn(&idx)];
            assert!(
                (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8) < 1e-3,
                "fd {fd} vs ad {ad}"
            );
        }
    }
}
