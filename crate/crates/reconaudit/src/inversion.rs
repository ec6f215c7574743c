//! The composite reconstruction loss and the optimization loop that trains
//! the generator against a frozen classifier.
//!
//! Nine weighted terms: KL divergence between the conditioning target and
//! the classifier's softmax output, cross-entropy against the conditioning
//! class, both repeated on noise-perturbed copies of the generated images,
//! cosine diversity and Gram-matrix orthogonality over classifier features,
//! total variation and pixel-range hinges on the raw images, and the L2
//! norm of the classifier's weight gradient (differentiated again with
//! respect to the generator: double backpropagation).

use crate::classifiers::TrainedClassifier;
use crate::generator::{sample_conditioning, ConditioningBundle, ConditioningMode, Generator};
use crate::nn::{cross_entropy, optim::clip_global_norm, optim::Adam, Bound};
use crate::tensor::{softmax, Tape, Value};
use crate::util::derive_seed;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;
/// Stabilizer inside square roots of norms.
pub const NORM_EPS: f64 = 1e-12;

/// The nine scalars weighting the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconLossWeights {
    pub alpha: f64,
    pub alpha_pert: f64,
    pub beta: f64,
    pub beta_pert: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eta_var: f64,
    pub eta_pix: f64,
    pub eta_grad: f64,
}

impl Default for ReconLossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            alpha_pert: 1.0,
            beta: 1.0,
            beta_pert: 1.0,
            gamma: 0.1,
            delta: 0.1,
            eta_var: 1e-4,
            eta_pix: 1.0,
            eta_grad: 1e-2,
        }
    }
}

impl ReconLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.alpha_pert,
            self.beta,
            self.beta_pert,
            self.gamma,
            self.delta,
            self.eta_var,
            self.eta_pix,
            self.eta_grad,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.alpha <= 0.0 && self.beta <= 0.0 {
            return Err(Error::Config(
                "at least one of alpha or beta must be positive: the attack needs a classification objective".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

/// Additive noise applied to generated images for the perturbed loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma: 0.05,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config("perturbation sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-term loss values and the weighted total for one step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub kl_pert: f64,
    pub ce: f64,
    pub ce_pert: f64,
    pub cosine: f64,
    pub ortho: f64,
    pub var: f64,
    pub pix: f64,
    pub grad: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Re-derive the total from the terms; the invariant is that this
    /// matches `total` to 1e-6 at every logged step.
    pub fn recompose(&self, w: &ReconLossWeights) -> f64 {
        w.alpha * self.kl
            + w.alpha_pert * self.kl_pert
            + w.beta * self.ce
            + w.beta_pert * self.ce_pert
            + w.gamma * self.cosine
            + w.delta * self.ortho
            + w.eta_var * self.var
            + w.eta_pix * self.pix
            + w.eta_grad * self.grad
    }

    pub fn is_finite(&self) -> bool {
        [
            self.kl, self.kl_pert, self.ce, self.ce_pert, self.cosine, self.ortho, self.var,
            self.pix, self.grad, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A probability vector over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Contract("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(k: usize, n: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[k] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// KL(P || Q) with Q floored at `PROB_FLOOR` before the log; terms with
/// P(i) = 0 contribute nothing.
pub fn kl_loss(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::Contract("distributions must have equal support".into()));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi > 0.0 {
            total += pi * (pi.ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric {
            term: "kl".into(),
            message: format!("kl evaluated to {total}"),
        });
    }
    Ok(total)
}

/// Tape form of the KL term: mean over batch rows of KL(P_b || Q_b), where
/// `targets` is a constant [B, N] matrix of conditioning distributions and
/// `probs` the classifier's softmax output on the same rows.
fn kl_loss_value<'t>(tape: &'t Tape, targets: &ArrayD<f64>, probs: Value<'t>) -> Value<'t> {
    let b = targets.shape()[0] as f64;
    // sum_i p_i ln p_i is constant with respect to the generator
    let p_logp: f64 = targets
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let p_const = tape.constant(targets.clone());
    let cross = p_const.mul(probs.max_scalar(PROB_FLOOR).ln()).sum_all();
    tape.scalar_const(p_logp).sub(cross).scale(1.0 / b)
}

/// Batch-mean cross-entropy of softmaxed logits against conditioning classes.
pub fn ce_loss<'t>(tape: &'t Tape, logits: Value<'t>, labels: &[usize]) -> Value<'t> {
    cross_entropy(tape, logits, labels)
}

/// Mean pairwise cosine similarity over ordered pairs i != j; in [-1, 1].
/// Rows are unit-normalized with an epsilon-stabilized norm.
pub fn cosine_diversity_loss<'t>(features: Value<'t>) -> Result<Value<'t>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Contract(format!(
            "cosine diversity needs at least 2 feature rows, got shape {shape:?}"
        )));
    }
    let b = shape[0] as f64;
    let unit = normalize_rows(features);
    let gram = unit.matmul(unit.t2());
    let diag = unit.square().sum_all();
    Ok(gram.sum_all().sub(diag).scale(1.0 / (b * (b - 1.0))))
}

/// Mean squared deviation of the Gram matrix of unit-normalized feature
/// rows from the identity; zero iff the rows are orthonormal.
pub fn orthogonality_loss<'t>(tape: &'t Tape, features: Value<'t>) -> Result<Value<'t>> {
    let shape = features.shape();
    if shape.len() != 2 || shape.is_empty() || shape[0] < 1 {
        return Err(Error::Contract(format!(
            "orthogonality needs a [B, D] feature matrix, got {shape:?}"
        )));
    }
    let b = shape[0];
    let unit = normalize_rows(features);
    let gram = unit.matmul(unit.t2());
    let mut eye = ArrayD::zeros(IxDyn(&[b, b]));
    for i in 0..b {
        eye[[i, i]] = 1.0;
    }
    let diff = gram.sub(tape.constant(eye));
    Ok(diff.square().sum_all().scale(1.0 / (b * b) as f64))
}

fn normalize_rows(features: Value<'_>) -> Value<'_> {
    let norms = features.square().sum_axes(&[1], true).add_scalar(NORM_EPS).sqrt();
    features.div(norms)
}

/// Per-sample sum of squared forward differences in both spatial directions
/// (channels summed), averaged over the batch.
pub fn variational_loss<'t>(images: Value<'t>) -> Result<Value<'t>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
        return Err(Error::Contract(format!(
            "variational loss needs [B,C,H,W] with H,W >= 2, got {shape:?}"
        )));
    }
    let b = shape[0] as f64;
    let (h, w) = (shape[2], shape[3]);
    let dh = images
        .slice_axis(2, 1, h - 1)
        .sub(images.slice_axis(2, 0, h - 1));
    let dw = images
        .slice_axis(3, 1, w - 1)
        .sub(images.slice_axis(3, 0, w - 1));
    Ok(dh.square().sum_all().add(dw.square().sum_all()).scale(1.0 / b))
}

/// Hinge penalties for pixels below 0 or above 1, summed per sample and
/// averaged over the batch. Vacuous for in-range images.
pub fn pixel_bound_loss<'t>(images: Value<'t>) -> Value<'t> {
    let b = images.shape()[0] as f64;
    let below = images.neg().relu().sum_all();
    let above = images.add_scalar(-1.0).relu().sum_all();
    below.add(above).scale(1.0 / b)
}

/// Additive noise with gradients flowing through the identity path: the
/// drawn noise is a tape constant.
pub fn perturb<'t>(
    tape: &'t Tape,
    images: Value<'t>,
    spec: &PerturbationSpec,
    rng: &mut ChaCha8Rng,
) -> Value<'t> {
    let shape = images.shape();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = match spec.kind {
        NoiseKind::Gaussian => {
            let dist = Normal::new(0.0, 1.0).unwrap();
            (0..n).map(|_| dist.sample(rng) * spec.sigma).collect()
        }
        NoiseKind::Uniform => {
            let dist = Uniform::new_inclusive(-1.0, 1.0).unwrap();
            (0..n).map(|_| dist.sample(rng) * spec.sigma).collect()
        }
    };
    images.add(tape.constant(ArrayD::from_shape_vec(IxDyn(&shape), noise).unwrap()))
}

/// L2 norm of the gradient of batch-mean cross-entropy at `x` with respect
/// to the pixels themselves (not the weights). Reported as a diagnostic for
/// the robustness property; never part of the training loss.
pub fn input_gradient_norm(
    clf: &TrainedClassifier,
    pixels: &ArrayD<f64>,
    labels: &[usize],
) -> Result<f64> {
    let tape = Tape::new();
    let bound = clf.bind(&tape);
    let x = tape.variable(pixels.clone());
    let fb = clf.forward_bound(&tape, &bound, x)?;
    let ce = cross_entropy(&tape, fb.logits, labels);
    let grad = tape.backward(ce, &[x])[0].ok_or_else(|| Error::Numeric {
        term: "input_grad".into(),
        message: "loss does not depend on the input".into(),
    })?;
    Ok(crate::tensor::global_norm(&tape, &[grad], NORM_EPS).scalar())
}

fn check_term(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            term: name.into(),
            message: format!("evaluated to {v}"),
        })
    }
}

/// Evaluate all nine terms on one generated batch and compose the weighted
/// total. Returns the breakdown (plain numbers) and the total as a tape
/// value ready for backward.
#[allow(clippy::too_many_arguments)]
pub fn total_recon_loss<'t>(
    tape: &'t Tape,
    clf: &TrainedClassifier,
    clf_bound: &Bound<'t>,
    gen_output: Value<'t>,
    bundles: &[ConditioningBundle],
    weights: &ReconLossWeights,
    pert: &PerturbationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Value<'t>)> {
    weights.validate()?;
    pert.validate()?;
    if bundles.len() != gen_output.shape()[0] {
        return Err(Error::Contract("one bundle per generated image required".into()));
    }
    if bundles.len() < 2 {
        return Err(Error::Contract("reconstruction batches need at least 2 samples".into()));
    }
    let n = bundles[0].num_classes();
    let labels: Vec<usize> = bundles.iter().map(|b| b.class_index).collect();
    let mut targets = ArrayD::zeros(IxDyn(&[bundles.len(), n]));
    for (i, b) in bundles.iter().enumerate() {
        for k in 0..n {
            targets[[i, k]] = b.condition_vector[[k]];
        }
    }

    let clean = clf.forward_bound(tape, clf_bound, gen_output)?;
    let q_clean = softmax(tape, clean.logits);
    let kl = kl_loss_value(tape, &targets, q_clean);
    let ce = ce_loss(tape, clean.logits, &labels);

    let perturbed_x = perturb(tape, gen_output, pert, rng);
    let pert_fb = clf.forward_bound(tape, clf_bound, perturbed_x)?;
    let q_pert = softmax(tape, pert_fb.logits);
    let kl_pert = kl_loss_value(tape, &targets, q_pert);
    let ce_pert = ce_loss(tape, pert_fb.logits, &labels);

    let cosine = cosine_diversity_loss(clean.features)?;
    let ortho = orthogonality_loss(tape, clean.features)?;
    let var = variational_loss(gen_output)?;
    let pix = pixel_bound_loss(gen_output);
    let grad = clf.grad_norm_of(tape, clf_bound, ce)?;

    let breakdown = LossBreakdown {
        kl: check_term("kl", kl.scalar())?,
        kl_pert: check_term("kl_pert", kl_pert.scalar())?,
        ce: check_term("ce", ce.scalar())?,
        ce_pert: check_term("ce_pert", ce_pert.scalar())?,
        cosine: check_term("cosine", cosine.scalar())?,
        ortho: check_term("ortho", ortho.scalar())?,
        var: check_term("var", var.scalar())?,
        pix: check_term("pix", pix.scalar())?,
        grad: check_term("grad", grad.scalar())?,
        total: 0.0,
    };

    let mut total = tape.scalar_const(0.0);
    for (w, term) in [
        (weights.alpha, kl),
        (weights.alpha_pert, kl_pert),
        (weights.beta, ce),
        (weights.beta_pert, ce_pert),
        (weights.gamma, cosine),
        (weights.delta, ortho),
        (weights.eta_var, var),
        (weights.eta_pix, pix),
        (weights.eta_grad, grad),
    ] {
        if w != 0.0 {
            total = total.add(term.scale(w));
        }
    }
    let breakdown = LossBreakdown {
        total: check_term("total", total.scalar())?,
        ..breakdown
    };
    debug_assert!((breakdown.total - breakdown.recompose(weights)).abs() <= 1e-6);
    Ok((breakdown, total))
}

/// Configuration of one reconstruction run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: ReconLossWeights,
    pub pert: PerturbationSpec,
    pub seed: u64,
    pub mode: ConditioningMode,
    pub smoothing: f64,
    pub log_every: usize,
    pub clip_norm: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            weights: ReconLossWeights::default(),
            pert: PerturbationSpec::default(),
            seed: 0,
            mode: ConditioningMode::OneHotTarget,
            smoothing: 0.01,
            log_every: 10,
            clip_norm: 5.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.pert.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("inversion batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("smoothing must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub losses: LossBreakdown,
}

/// CSV header for loss-history logs.
pub const HISTORY_HEADER: &str = "step,kl,kl_pert,ce,ce_pert,cosine,ortho,var,pix,grad,total";

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step, l.kl, l.kl_pert, l.ce, l.ce_pert, l.cosine, l.ortho, l.var, l.pix, l.grad, l.total
        ));
    }
    out
}

/// Stepwise driver for one reconstruction run. Owns the generator and its
/// optimizer; the caller drives it step by step (checkpointing at will) or
/// via [`InversionEngine::run_to_end`].
pub struct InversionEngine<'c> {
    clf: &'c TrainedClassifier,
    gen: Generator,
    opt: Adam,
    pub cfg: InversionConfig,
    step: usize,
    history: Vec<HistoryRow>,
}

impl<'c> InversionEngine<'c> {
    pub fn new(clf: &'c TrainedClassifier, gen: Generator, cfg: InversionConfig) -> Result<Self> {
        cfg.validate()?;
        if !clf.is_frozen() {
            return Err(Error::Contract("inversion requires a frozen classifier".into()));
        }
        if gen.spec.num_classes != clf.spec.num_classes {
            return Err(Error::Config(format!(
                "generator emits {} classes, classifier expects {}",
                gen.spec.num_classes, clf.spec.num_classes
            )));
        }
        if gen.spec.output_shape != clf.spec.input_shape {
            return Err(Error::Config(format!(
                "generator output {:?} does not match classifier input {:?}",
                gen.spec.output_shape, clf.spec.input_shape
            )));
        }
        let opt = Adam::new(gen.store(), cfg.lr);
        Ok(Self {
            clf,
            gen,
            opt,
            cfg,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn take_history(&mut self) -> Vec<HistoryRow> {
        std::mem::take(&mut self.history)
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.gen
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.opt
    }

    /// Restore mid-run state when resuming from a checkpoint.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    /// One optimization step: sample bundles, generate, evaluate the nine
    /// terms, sweep gradients to the generator, clip, and update.
    ///
    /// Per-step randomness derives from `(seed, step)`, so a resumed run
    /// replays exactly the sequence the uninterrupted run would have seen.
    pub fn step_once(&mut self) -> Result<LossBreakdown> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("step{}", self.step)));
        let tape = Tape::new();
        let clf_bound = self.clf.bind(&tape);
        let gen_bound = self.gen.bind(&tape);
        let bundles = sample_conditioning(
            self.gen.spec.latent_dim,
            self.gen.spec.num_classes,
            self.cfg.batch_size,
            self.cfg.mode,
            self.cfg.smoothing,
            &mut rng,
        );
        let output = self.gen.forward_train(&tape, &gen_bound, &bundles, &mut rng)?;
        let (breakdown, total) = total_recon_loss(
            &tape,
            self.clf,
            &clf_bound,
            output,
            &bundles,
            &self.cfg.weights,
            &self.cfg.pert,
            &mut rng,
        )?;

        let targets = gen_bound.trainable(self.gen.store());
        let values: Vec<Value> = targets.iter().map(|(_, v)| *v).collect();
        let grads = tape.backward(total, &values);
        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; self.gen.store().len()];
        for ((idx, _), grad) in targets.iter().zip(grads) {
            slots[*idx] = grad.map(|g| g.array());
        }
        clip_global_norm(&mut slots, self.cfg.clip_norm);
        self.opt.step(self.gen.store_mut(), &slots);

        if self.step.is_multiple_of(self.cfg.log_every) || self.step + 1 == self.cfg.steps {
            self.history.push(HistoryRow {
                step: self.step,
                losses: breakdown,
            });
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Run every remaining step. On a non-finite loss the error carries the
    /// step index; the caller decides what checkpoint to retain.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step < self.cfg.steps {
            let at = self.step;
            self.step_once().map_err(|e| match e {
                Error::Numeric { term, message } => Error::Train {
                    step: at,
                    message: format!("non-finite {term}: {message}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn into_generator(self) -> Generator {
        self.gen
    }
}

/// Convenience wrapper: build the engine, run all steps, return the trained
/// generator and the logged history.
pub fn run_reconstruction(
    clf: &TrainedClassifier,
    gen: Generator,
    cfg: InversionConfig,
) -> Result<(Generator, Vec<HistoryRow>)> {
    let mut engine = InversionEngine::new(clf, gen, cfg)?;
    engine.run_to_end()?;
    let history = engine.take_history();
    Ok((engine.into_generator(), history))
}
