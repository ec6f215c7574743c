//! The three classifier architectures, their training loop, and the frozen
//! classifier handle used by inversion and evaluation.
//!
//! A frozen classifier is a pure function: forward passes run in eval mode
//! (fixed normalization statistics, no dropout), so identical inputs give
//! bit-identical outputs for the lifetime of the checkpoint.

mod cnn;
mod mlp;
mod vit;

pub use cnn::CnnModel;
pub use mlp::MlpModel;
pub use vit::VitModel;

use crate::data::{batch_iterator, Dataset, ImageBatch};
use crate::nn::{cross_entropy, optim::Adam, Bound, Mode, ParamStore};
use crate::tensor::{global_norm, Tape, Value};
use crate::util::derive_seed;
use crate::{Error, Result};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
    Vit,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "cnn" => Ok(Self::Cnn),
            "vit" => Ok(Self::Vit),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected mlp, cnn or vit)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::Vit => "vit",
        })
    }
}

/// Where the CNN's feature vector is tapped; the flattened convolutional
/// map is the default, the fully connected layer's output the alternative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CnnFeatureSource {
    #[default]
    FlattenedConv,
    FcOutput,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: Arch,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub mlp_hidden: Vec<usize>,
    pub cnn_channels: Vec<usize>,
    pub vit_embed_dim: usize,
    pub vit_heads: usize,
    pub vit_depth: usize,
    pub vit_patch: usize,
    pub vit_mlp_ratio: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub cnn_feature_source: CnnFeatureSource,
}

impl ClassifierSpec {
    pub fn new(arch: Arch, input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Self {
            arch,
            input_shape,
            num_classes,
            mlp_hidden: vec![512, 256, 128, 64],
            cnn_channels: vec![32, 64, 128],
            vit_embed_dim: 128,
            vit_heads: 4,
            vit_depth: 3,
            vit_patch: 4,
            vit_mlp_ratio: 2,
            dropout: 0.1,
            leaky_slope: 0.01,
            cnn_feature_source: CnnFeatureSource::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.num_classes < 2 {
            return Err(Error::Config("degenerate input shape or class count".into()));
        }
        match self.arch {
            Arch::Mlp => {
                // 4 hidden layers + head = 5 weight layers
                if self.mlp_hidden.len() != 4 {
                    return Err(Error::Config(format!(
                        "MLP needs exactly 4 hidden widths (5 weight layers), got {}",
                        self.mlp_hidden.len()
                    )));
                }
            }
            Arch::Cnn => {
                if self.cnn_channels.len() != 3 {
                    return Err(Error::Config(format!(
                        "CNN needs exactly 3 convolutional layers, got {}",
                        self.cnn_channels.len()
                    )));
                }
            }
            Arch::Vit => {
                if self.vit_depth != 3 || self.vit_heads != 4 || self.vit_patch != 4 {
                    return Err(Error::Config(
                        "ViT is fixed at 3 blocks, 4 heads, 4x4 patches".into(),
                    ));
                }
                if h % self.vit_patch != 0 || w % self.vit_patch != 0 {
                    return Err(Error::Config(format!(
                        "ViT patch size {} must divide image {h}x{w}",
                        self.vit_patch
                    )));
                }
                if !self.vit_embed_dim.is_multiple_of(self.vit_heads) {
                    return Err(Error::Config("ViT embed dim must split across heads".into()));
                }
            }
        }
        Ok(())
    }
}

pub enum ArchModel {
    Mlp(MlpModel),
    Cnn(CnnModel),
    Vit(VitModel),
}

/// Record of how a checkpoint came to be; written into the manifest JSON.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub dataset: Option<String>,
    pub epochs: usize,
    pub seed: u64,
    pub steps: usize,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

/// Differentiable outputs of one frozen-classifier forward pass.
pub struct FeatureBundle<'t> {
    pub logits: Value<'t>,
    pub features: Value<'t>,
}

pub struct TrainedClassifier {
    pub spec: ClassifierSpec,
    store: ParamStore,
    model: ArchModel,
    pub record: TrainingRecord,
    frozen: bool,
}

/// Seeded, reproducible construction; the returned classifier is unfrozen
/// (trainable) with near-chance behavior.
pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<TrainedClassifier> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classifier-init"));
    let model = match spec.arch {
        Arch::Mlp => ArchModel::Mlp(MlpModel::build(spec, &mut store, &mut rng)),
        Arch::Cnn => ArchModel::Cnn(CnnModel::build(spec, &mut store, &mut rng)),
        Arch::Vit => ArchModel::Vit(VitModel::build(spec, &mut store, &mut rng)),
    };
    Ok(TrainedClassifier {
        spec: spec.clone(),
        store,
        model,
        record: TrainingRecord {
            seed,
            ..TrainingRecord::default()
        },
        frozen: false,
    })
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Cross-entropy training with Adam, then freeze. Fully seed-reproducible:
/// shuffling, dropout, and initialization all derive from the config seed.
pub fn train_classifier(
    mut clf: TrainedClassifier,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(TrainedClassifier, TrainMetrics)> {
    if clf.frozen {
        return Err(Error::Contract("classifier is already frozen".into()));
    }
    let (c, h, w) = clf.spec.input_shape;
    if train.spec.image_shape != (c, h, w) || train.spec.num_classes != clf.spec.num_classes {
        return Err(Error::Shape(format!(
            "dataset {:?}/{} does not match classifier {:?}/{}",
            train.spec.image_shape, train.spec.num_classes, clf.spec.input_shape, clf.spec.num_classes
        )));
    }

    let mut opt = Adam::new(&clf.store, cfg.lr);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut step = 0usize;
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, &format!("epoch{epoch}"));
        for batch in batch_iterator(train, cfg.batch_size, epoch_seed) {
            let labels = batch.labels.as_ref().expect("training batches are labeled");
            let tape = Tape::new();
            let bound = clf.store.bind(&tape);
            let x = tape.constant(batch.pixels.clone());
            let logits = forward_model(
                &clf.model,
                &tape,
                Some(&mut clf.store),
                &bound,
                x,
                Mode::Train,
                Some(&mut dropout_rng),
            )
            .0;
            let loss = cross_entropy(&tape, logits, labels);
            last_loss = loss.scalar();
            if !last_loss.is_finite() {
                return Err(Error::Train {
                    step,
                    message: format!("loss became {last_loss}"),
                });
            }
            let targets = bound.trainable(&clf.store);
            let values: Vec<Value> = targets.iter().map(|(_, v)| *v).collect();
            let grads = tape.backward(loss, &values);
            let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; clf.store.len()];
            for ((idx, _), grad) in targets.iter().zip(grads) {
                slots[*idx] = grad.map(|g| g.array());
            }
            opt.step(&mut clf.store, &slots);
            step += 1;
        }
    }

    clf.frozen = true;
    let train_accuracy = clf.accuracy(train, 256)?;
    let test_accuracy = match test {
        Some(ds) => Some(clf.accuracy(ds, 256)?),
        None => None,
    };
    clf.record = TrainingRecord {
        dataset: Some(train.spec.name.to_string()),
        epochs: cfg.epochs,
        seed: cfg.seed,
        steps: step,
        final_train_accuracy: Some(train_accuracy),
        final_test_accuracy: test_accuracy,
    };
    let metrics = TrainMetrics {
        steps: step,
        final_loss: if step == 0 { 0.0 } else { last_loss },
        train_accuracy,
        test_accuracy,
    };
    Ok((clf, metrics))
}

#[allow(clippy::too_many_arguments)]
fn forward_model<'t>(
    model: &ArchModel,
    tape: &'t Tape,
    store: Option<&mut ParamStore>,
    bound: &Bound<'t>,
    x: Value<'t>,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> (Value<'t>, Value<'t>) {
    match model {
        ArchModel::Mlp(m) => m.forward(tape, store, bound, x, mode, rng),
        ArchModel::Cnn(m) => m.forward(tape, store, bound, x, mode, rng),
        ArchModel::Vit(m) => m.forward(tape, bound, x, mode, rng),
    }
}

impl TrainedClassifier {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing is one-way; a frozen classifier only runs eval forwards.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn feature_dim(&self) -> usize {
        match &self.model {
            ArchModel::Mlp(m) => m.feature_dim(&self.spec),
            ArchModel::Cnn(m) => m.feature_dim(&self.spec),
            ArchModel::Vit(m) => m.feature_dim(),
        }
    }

    fn check_batch_shape(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::Shape(format!(
                "batch shape {shape:?} does not match classifier input {:?}",
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.store.bind(tape)
    }

    /// Eval-mode forward on an existing tape and binding. Logits and
    /// features stay differentiable with respect to `x`.
    pub fn forward_bound<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x: Value<'t>,
    ) -> Result<FeatureBundle<'t>> {
        if !self.frozen {
            return Err(Error::Contract("inversion requires a frozen classifier".into()));
        }
        self.check_batch_shape(&x.shape())?;
        let (logits, features) = forward_model(&self.model, tape, None, bound, x, Mode::Eval, None);
        Ok(FeatureBundle { logits, features })
    }

    /// Convenience forward for a plain batch: binds a private tape.
    pub fn forward_features(&self, batch: &ImageBatch) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let x = tape.constant(batch.pixels.clone());
        let fb = self.forward_bound(&tape, &bound, x)?;
        Ok((fb.logits.array(), fb.features.array()))
    }

    /// L2 norm of the gradient of batch-mean cross-entropy with respect to
    /// every trainable weight, as a tape value differentiable in `x`
    /// (double backpropagation).
    pub fn loss_grad_norm_value<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x: Value<'t>,
        labels: &[usize],
    ) -> Result<Value<'t>> {
        let fb = self.forward_bound(tape, bound, x)?;
        let ce = cross_entropy(tape, fb.logits, labels);
        self.grad_norm_of(tape, bound, ce)
    }

    /// Same, but reusing an already-built scalar loss on the tape.
    pub fn grad_norm_of<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        loss: Value<'t>,
    ) -> Result<Value<'t>> {
        let targets = bound.trainable(&self.store);
        let values: Vec<Value> = targets.iter().map(|(_, v)| *v).collect();
        let grads = tape.backward(loss, &values);
        let present: Vec<Value> = grads.into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Numeric {
                term: "grad".into(),
                message: "loss does not depend on any classifier weight".into(),
            });
        }
        let norm = global_norm(tape, &present, 1e-12);
        if !norm.is_finite() {
            return Err(Error::Numeric {
                term: "grad".into(),
                message: "gradient norm is not finite".into(),
            });
        }
        Ok(norm)
    }

    /// Plain-number form of the gradient-norm penalty for a concrete batch.
    pub fn classification_loss_grad_norm(&self, batch: &ImageBatch, labels: &[usize]) -> Result<f64> {
        self.check_batch_shape(batch.pixels.shape())?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let x = tape.constant(batch.pixels.clone());
        Ok(self.loss_grad_norm_value(&tape, &bound, x, labels)?.scalar())
    }

    /// argmax-accuracy over a dataset, evaluated in fixed-size batches.
    pub fn accuracy(&self, ds: &Dataset, batch_size: usize) -> Result<f64> {
        let mut correct = 0usize;
        let mut index = 0usize;
        while index < ds.len() {
            let end = (index + batch_size).min(ds.len());
            let indices: Vec<usize> = (index..end).collect();
            let batch = ds.batch(&indices);
            let (logits, _) = self.forward_features(&batch)?;
            for (row, &i) in indices.iter().enumerate() {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for k in 0..self.spec.num_classes {
                    let v = logits[[row, k]];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                if best == ds.label(i) {
                    correct += 1;
                }
            }
            index = end;
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Mean softmax probability assigned to the given labels.
    pub fn mean_confidence(&self, batch: &ImageBatch, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward_features(batch)?;
        let b = logits.shape()[0];
        let n = logits.shape()[1];
        let mut total = 0.0;
        for i in 0..b {
            let row: Vec<f64> = (0..n).map(|k| logits[[i, k]]).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            total += exps[labels[i]] / denom;
        }
        Ok(total / b as f64)
    }
}

/// Rebuild a classifier from its spec and load weights from a blob.
pub fn restore_classifier(
    spec: &ClassifierSpec,
    record: TrainingRecord,
    blob: &[u8],
) -> Result<TrainedClassifier> {
    let mut clf = build_classifier(spec, record.seed)?;
    crate::checkpoint::decode_into(clf.store_mut(), blob)?;
    clf.record = record;
    clf.freeze();
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetName, DatasetSpec, Split};
    use ndarray::IxDyn;
    use std::path::Path;

    fn toy_train() -> Dataset {
        load_dataset(
            &DatasetSpec::new(DatasetName::SyntheticShapes, Split::Train),
            Path::new("/nonexistent"),
        )
        .unwrap()
    }

    fn toy_spec(arch: Arch) -> ClassifierSpec {
        ClassifierSpec::new(arch, (1, 28, 28), 4)
    }

    #[test]
    fn build_rejects_bad_specs() {
        let mut spec = toy_spec(Arch::Mlp);
        spec.mlp_hidden = vec![32, 16];
        assert_eq!(build_classifier(&spec, 0).err().unwrap().exit_code(), 2);

        let mut spec = ClassifierSpec::new(Arch::Vit, (1, 30, 30), 4);
        spec.vit_embed_dim = 32;
        assert_eq!(build_classifier(&spec, 0).err().unwrap().exit_code(), 2);
    }

    #[test]
    fn forward_shapes_for_all_archs() {
        let ds = toy_train();
        let batch = ds.batch(&[0, 1, 2, 101, 102, 201, 202, 301]);
        for arch in [Arch::Mlp, Arch::Cnn, Arch::Vit] {
            let mut spec = toy_spec(arch);
            spec.mlp_hidden = vec![64, 48, 32, 16];
            spec.cnn_channels = vec![8, 16, 32];
            spec.vit_embed_dim = 32;
            let mut clf = build_classifier(&spec, 1).unwrap();
            clf.freeze();
            let (logits, features) = clf.forward_features(&batch).unwrap();
            assert_eq!(logits.shape(), &[8, 4], "{arch}");
            assert_eq!(features.shape()[0], 8, "{arch}");
            assert_eq!(features.shape()[1], clf.feature_dim(), "{arch}");
            // zero image gives finite logits
            let zero = ImageBatch {
                pixels: ArrayD::zeros(IxDyn(&[1, 1, 28, 28])),
                labels: None,
            };
            let (zl, _) = clf.forward_features(&zero).unwrap();
            assert!(zl.iter().all(|v| v.is_finite()), "{arch}");
        }
    }

    #[test]
    fn cnn_feature_dim_matches_conv_plan() {
        // three stride-2 convs: 28 -> 14 -> 7 -> 4, so D = 32 * 4 * 4
        let mut spec = toy_spec(Arch::Cnn);
        spec.cnn_channels = vec![8, 16, 32];
        let clf = build_classifier(&spec, 0).unwrap();
        assert_eq!(clf.feature_dim(), 32 * 4 * 4);
    }

    #[test]
    fn vit_token_arithmetic() {
        // (28/4)^2 = 49 patch tokens + 1 classification token
        let spec = toy_spec(Arch::Vit);
        let clf = build_classifier(&spec, 0).unwrap();
        match &clf.model {
            ArchModel::Vit(v) => assert_eq!(v.token_count(), 50),
            _ => unreachable!(),
        }
        // 32x32 inputs: (32/4)^2 = 64 + 1
        let spec32 = ClassifierSpec::new(Arch::Vit, (3, 32, 32), 10);
        let clf32 = build_classifier(&spec32, 0).unwrap();
        match &clf32.model {
            ArchModel::Vit(v) => assert_eq!(v.token_count(), 65),
            _ => unreachable!(),
        }
    }

    #[test]
    fn mlp_first_layer_dimension() {
        let spec = toy_spec(Arch::Mlp);
        let clf = build_classifier(&spec, 0).unwrap();
        assert_eq!(clf.store().entries()[0].name, "mlp.fc1.w");
        assert_eq!(clf.store().entries()[0].array.shape(), &[784, 512]);
    }

    #[test]
    fn untrained_is_near_chance_and_seeded() {
        let ds = toy_train();
        let spec = toy_spec(Arch::Mlp);
        let (clf, metrics) = train_classifier(
            build_classifier(&spec, 5).unwrap(),
            &ds,
            None,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(metrics.steps, 0);
        assert!(clf.is_frozen());
        let acc = metrics.train_accuracy;
        assert!(acc > 0.05 && acc < 0.60, "near chance, got {acc}");

        let a = build_classifier(&spec, 7).unwrap();
        let b = build_classifier(&spec, 7).unwrap();
        for (ea, eb) in a.store().entries().iter().zip(b.store().entries()) {
            assert_eq!(ea.array, eb.array);
        }
    }

    #[test]
    fn duplicated_rows_get_identical_logits() {
        let ds = toy_train();
        let batch = ds.batch(&[0, 0, 7, 7]);
        let mut clf = build_classifier(&toy_spec(Arch::Cnn), 2).unwrap();
        clf.freeze();
        let (logits, _) = clf.forward_features(&batch).unwrap();
        for k in 0..4 {
            assert_eq!(logits[[0, k]], logits[[1, k]]);
            assert_eq!(logits[[2, k]], logits[[3, k]]);
        }
    }

    #[test]
    fn grad_norm_is_nonnegative_and_differentiable_check() {
        let ds = toy_train();
        let batch = ds.batch(&[0, 1, 100, 101]);
        let labels = batch.labels.clone().unwrap();
        let mut clf = build_classifier(&toy_spec(Arch::Mlp), 3).unwrap();
        clf.freeze();
        let norm = clf.classification_loss_grad_norm(&batch, &labels).unwrap();
        assert!(norm >= 0.0 && norm.is_finite());
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let mut clf = build_classifier(&toy_spec(Arch::Mlp), 0).unwrap();
        clf.freeze();
        let bad = ImageBatch {
            pixels: ArrayD::zeros(IxDyn(&[2, 3, 32, 32])),
            labels: None,
        };
        let err = clf.forward_features(&bad).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}

