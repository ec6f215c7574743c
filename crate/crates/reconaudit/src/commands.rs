//! The five CLI commands and the checkpoint sidecar formats they exchange.
//!
//! Each command resolves its configuration (flags over config file over
//! defaults), does its work, and leaves a directory containing its
//! artifacts plus a manifest that digests all of them. Artifact writes are
//! atomic, so an interrupted run never leaves a half-written checkpoint.

use crate::checkpoint;
use crate::classifiers::{
    build_classifier, restore_classifier, train_classifier, Arch, ClassifierSpec, TrainConfig,
    TrainedClassifier, TrainingRecord,
};
use crate::config::{pick, Config};
use crate::data::{load_dataset, DatasetName, DatasetSpec, ImageBatch, Split};
use crate::evaluation::{
    build_report, grid, match_reconstructions, MatchConfig, MatchScope, SSIMConfig,
};
use crate::generator::{
    build_generator, sample_conditioning_for_class, ConditioningMode, Generator, GeneratorSpec,
};
use crate::inversion::{
    history_to_csv, HistoryRow, InversionConfig, InversionEngine, NoiseKind, PerturbationSpec,
    ReconLossWeights, HISTORY_HEADER,
};
use crate::manifest::{verify_tree, RunManifest};
use crate::util::{atomic_write, derive_seed, sha256_file};
use crate::{Error, Result};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CLASSIFIER_WEIGHTS: &str = "weights.bin";
pub const CLASSIFIER_SIDECAR: &str = "classifier.json";
pub const GENERATOR_WEIGHTS: &str = "generator.bin";
pub const GENERATOR_SIDECAR: &str = "generator.json";
pub const HISTORY_FILE: &str = "history.csv";

/// Cache directory resolution: flag, then env var, then `./data-cache`.
pub fn resolve_cache_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("RECONAUDIT_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data-cache"))
}

#[derive(Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub spec: ClassifierSpec,
    pub record: TrainingRecord,
    pub weights_sha256: String,
}

#[derive(Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub spec: GeneratorSpec,
    pub classifier_weights_sha256: String,
    pub inversion: InversionConfig,
    pub steps_done: usize,
    pub weights_sha256: String,
}

/// Load and digest-check a classifier checkpoint directory.
pub fn load_classifier_checkpoint(dir: &Path) -> Result<(TrainedClassifier, String)> {
    let sidecar_path = dir.join(CLASSIFIER_SIDECAR);
    let sidecar: ClassifierCheckpoint = serde_json::from_slice(&std::fs::read(&sidecar_path)
        .map_err(|e| Error::Integrity(format!("missing {}: {e}", sidecar_path.display())))?)?;
    let weights_path = dir.join(CLASSIFIER_WEIGHTS);
    let observed = sha256_file(&weights_path)?;
    if observed != sidecar.weights_sha256 {
        return Err(Error::Integrity(format!(
            "classifier weights at {} do not match their recorded digest",
            weights_path.display()
        )));
    }
    let blob = std::fs::read(&weights_path)?;
    let clf = restore_classifier(&sidecar.spec, sidecar.record, &blob)?;
    Ok((clf, observed))
}

fn dataset_spec_from(name: DatasetName, split: Split, subset: Option<usize>, seed: u64) -> DatasetSpec {
    let mut spec = DatasetSpec::new(name, split).with_subset(subset);
    spec.synthetic_seed = seed;
    spec
}

// ---- train-classifier -----------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct TrainClassifierArgs {
    pub arch: Option<String>,
    pub dataset: Option<String>,
    pub subset: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub eval_test: bool,
    pub config: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_train_classifier(args: &TrainClassifierArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    let arch = Arch::parse(&pick(args.arch.clone(), &file_cfg, "train.arch", "mlp".into())?)
        .map_err(|e| Error::Config(format!("--arch: {e}")))?;
    let dataset = DatasetName::parse(&pick(
        args.dataset.clone(),
        &file_cfg,
        "data.dataset",
        "synthetic".into(),
    )?)
    .map_err(|e| Error::Config(format!("--dataset: {e}")))?;
    let subset = match args.subset {
        Some(s) => Some(s),
        None => file_cfg.get_parsed::<usize>("data.subset")?,
    };
    let epochs = pick(args.epochs, &file_cfg, "train.epochs", 10)?;
    let batch = pick(args.batch, &file_cfg, "train.batch", 64)?;
    let lr = pick(args.lr, &file_cfg, "train.lr", 1e-3)?;
    let seed = pick(args.seed, &file_cfg, "train.seed", 0)?;
    let cache_dir = resolve_cache_dir(args.cache_dir.clone());

    let mut resolved = Config::new();
    resolved.set("command", "train-classifier");
    resolved.set("train.arch", arch);
    resolved.set("data.dataset", dataset);
    if let Some(s) = subset {
        resolved.set("data.subset", s);
    }
    resolved.set("train.epochs", epochs);
    resolved.set("train.batch", batch);
    resolved.set("train.lr", lr);
    resolved.set("train.seed", seed);
    resolved.set("train.eval_test", args.eval_test);

    let ds_spec = dataset_spec_from(dataset, Split::Train, subset, seed);
    let train = load_dataset(&ds_spec, &cache_dir)?;
    let test = if args.eval_test {
        Some(load_dataset(
            &dataset_spec_from(dataset, Split::Test, None, seed),
            &cache_dir,
        )?)
    } else {
        None
    };

    let cspec = ClassifierSpec::new(arch, train.spec.image_shape, train.spec.num_classes);
    let clf = build_classifier(&cspec, seed)?;
    let (clf, metrics) = train_classifier(
        clf,
        &train,
        test.as_ref(),
        &TrainConfig {
            epochs,
            batch_size: batch,
            lr,
            seed,
        },
    )?;
    println!(
        "trained {arch} on {dataset}: {} steps, train acc {:.4}{}",
        metrics.steps,
        metrics.train_accuracy,
        metrics
            .test_accuracy
            .map(|a| format!(", test acc {a:.4}"))
            .unwrap_or_default()
    );

    std::fs::create_dir_all(&args.out)?;
    let blob = checkpoint::encode(clf.store(), &[]);
    atomic_write(&args.out.join(CLASSIFIER_WEIGHTS), &blob)?;
    let sidecar = ClassifierCheckpoint {
        spec: clf.spec.clone(),
        record: clf.record.clone(),
        weights_sha256: crate::util::sha256_hex(&blob),
    };
    atomic_write(
        &args.out.join(CLASSIFIER_SIDECAR),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )?;

    let mut manifest = RunManifest::new("train-classifier", &resolved);
    manifest.record_seed("train", seed);
    manifest.record_artifact(&args.out, CLASSIFIER_WEIGHTS)?;
    manifest.record_artifact(&args.out, CLASSIFIER_SIDECAR)?;
    manifest.finish();
    manifest.write(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

// ---- invert ----------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct InvertArgs {
    pub classifier: PathBuf,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub smoothing: Option<f64>,
    pub sigma: Option<f64>,
    pub noise: Option<String>,
    pub log_every: Option<usize>,
    pub ckpt_every: Option<usize>,
    pub gen_width: Option<f64>,
    pub latent_dim: Option<usize>,
    pub weights: WeightFlags,
    pub resume: bool,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WeightFlags {
    pub alpha: Option<f64>,
    pub alpha_pert: Option<f64>,
    pub beta: Option<f64>,
    pub beta_pert: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub eta3: Option<f64>,
}

fn resolve_weights(flags: &WeightFlags, cfg: &Config) -> Result<ReconLossWeights> {
    let d = ReconLossWeights::default();
    Ok(ReconLossWeights {
        alpha: pick(flags.alpha, cfg, "weights.alpha", d.alpha)?,
        alpha_pert: pick(flags.alpha_pert, cfg, "weights.alpha_pert", d.alpha_pert)?,
        beta: pick(flags.beta, cfg, "weights.beta", d.beta)?,
        beta_pert: pick(flags.beta_pert, cfg, "weights.beta_pert", d.beta_pert)?,
        gamma: pick(flags.gamma, cfg, "weights.gamma", d.gamma)?,
        delta: pick(flags.delta, cfg, "weights.delta", d.delta)?,
        eta_var: pick(flags.eta1, cfg, "weights.eta1", d.eta_var)?,
        eta_pix: pick(flags.eta2, cfg, "weights.eta2", d.eta_pix)?,
        eta_grad: pick(flags.eta3, cfg, "weights.eta3", d.eta_grad)?,
    })
}

fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != HISTORY_HEADER {
                return Err(Error::Integrity("history.csv has an unexpected header".into()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Integrity(format!("history.csv line {} malformed", i + 1)));
        }
        let f = |k: usize| -> Result<f64> {
            fields[k]
                .parse()
                .map_err(|_| Error::Integrity(format!("history.csv line {} malformed", i + 1)))
        };
        rows.push(HistoryRow {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Integrity("bad step in history.csv".into()))?,
            losses: crate::inversion::LossBreakdown {
                kl: f(1)?,
                kl_pert: f(2)?,
                ce: f(3)?,
                ce_pert: f(4)?,
                cosine: f(5)?,
                ortho: f(6)?,
                var: f(7)?,
                pix: f(8)?,
                grad: f(9)?,
                total: f(10)?,
            },
        });
    }
    Ok(rows)
}

fn adam_extras(gen: &Generator, opt: &crate::nn::optim::Adam) -> Vec<(String, ndarray::ArrayD<f64>)> {
    let mut extras = Vec::new();
    extras.push((
        "adam.step".to_string(),
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), opt.step_count() as f64),
    ));
    let (_, m, v) = opt.state();
    for (i, e) in gen.store().entries().iter().enumerate() {
        if let Some(m) = &m[i] {
            extras.push((format!("adam.m.{}", e.name), m.clone()));
        }
        if let Some(v) = &v[i] {
            extras.push((format!("adam.v.{}", e.name), v.clone()));
        }
    }
    extras
}

type AdamState = (usize, Vec<Option<ndarray::ArrayD<f64>>>, Vec<Option<ndarray::ArrayD<f64>>>);

fn adam_state_from_extras(
    gen: &Generator,
    extras: &[(String, ndarray::ArrayD<f64>)],
) -> Result<AdamState> {
    let lookup: std::collections::HashMap<&str, &ndarray::ArrayD<f64>> =
        extras.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let step = lookup
        .get("adam.step")
        .map(|a| a[ndarray::IxDyn(&[])] as usize)
        .ok_or_else(|| Error::Integrity("generator checkpoint lacks optimizer state".into()))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in gen.store().entries() {
        if e.trainable {
            let mk = format!("adam.m.{}", e.name);
            let vk = format!("adam.v.{}", e.name);
            let me = lookup
                .get(mk.as_str())
                .ok_or_else(|| Error::Integrity(format!("missing optimizer moment {mk}")))?;
            let ve = lookup
                .get(vk.as_str())
                .ok_or_else(|| Error::Integrity(format!("missing optimizer moment {vk}")))?;
            m.push(Some((*me).clone()));
            v.push(Some((*ve).clone()));
        } else {
            m.push(None);
            v.push(None);
        }
    }
    Ok((step, m, v))
}

fn write_generator_checkpoint(
    out: &Path,
    engine: &InversionEngine<'_>,
    classifier_sha: &str,
    history: &[HistoryRow],
    manifest: &mut RunManifest,
) -> Result<()> {
    let gen = engine.generator();
    let blob = checkpoint::encode(gen.store(), &adam_extras(gen, engine.optimizer()));
    atomic_write(&out.join(GENERATOR_WEIGHTS), &blob)?;
    let sidecar = GeneratorCheckpoint {
        spec: gen.spec.clone(),
        classifier_weights_sha256: classifier_sha.to_string(),
        inversion: engine.cfg.clone(),
        steps_done: engine.step_index(),
        weights_sha256: crate::util::sha256_hex(&blob),
    };
    atomic_write(
        &out.join(GENERATOR_SIDECAR),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )?;
    atomic_write(&out.join(HISTORY_FILE), history_to_csv(history).as_bytes())?;
    manifest.record_artifact(out, GENERATOR_WEIGHTS)?;
    manifest.record_artifact(out, GENERATOR_SIDECAR)?;
    manifest.record_artifact(out, HISTORY_FILE)?;
    manifest.write(out)?;
    Ok(())
}

pub fn cmd_invert(args: &InvertArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    let defaults = InversionConfig::default();
    let weights = resolve_weights(&args.weights, &file_cfg)?;
    let noise = match pick(args.noise.clone(), &file_cfg, "invert.noise", "gaussian".into())?
        .to_ascii_lowercase()
        .as_str()
    {
        "gaussian" => NoiseKind::Gaussian,
        "uniform" => NoiseKind::Uniform,
        other => {
            return Err(Error::Config(format!(
                "unknown noise kind '{other}' (expected gaussian or uniform)"
            )))
        }
    };
    let cfg = InversionConfig {
        steps: pick(args.steps, &file_cfg, "invert.steps", defaults.steps)?,
        batch_size: pick(args.batch, &file_cfg, "invert.batch", defaults.batch_size)?,
        lr: pick(args.lr, &file_cfg, "invert.lr", defaults.lr)?,
        weights,
        pert: PerturbationSpec {
            kind: noise,
            sigma: pick(args.sigma, &file_cfg, "invert.sigma", defaults.pert.sigma)?,
        },
        seed: pick(args.seed, &file_cfg, "invert.seed", defaults.seed)?,
        mode: ConditioningMode::parse(&pick(
            args.mode.clone(),
            &file_cfg,
            "invert.mode",
            "one_hot_target".into(),
        )?)?,
        smoothing: pick(args.smoothing, &file_cfg, "invert.smoothing", defaults.smoothing)?,
        log_every: pick(args.log_every, &file_cfg, "invert.log_every", defaults.log_every)?,
        clip_norm: pick(None, &file_cfg, "invert.clip_norm", defaults.clip_norm)?,
    };
    let ckpt_every = pick(args.ckpt_every, &file_cfg, "invert.ckpt_every", 200)?;
    let gen_width = pick(args.gen_width, &file_cfg, "gen.width", 1.0)?;
    let latent_dim = pick(args.latent_dim, &file_cfg, "gen.latent_dim", 64)?;

    let (clf, clf_sha) = load_classifier_checkpoint(&args.classifier)?;

    let mut resolved = Config::new();
    resolved.set("command", "invert");
    resolved.set("invert.steps", cfg.steps);
    resolved.set("invert.batch", cfg.batch_size);
    resolved.set("invert.lr", cfg.lr);
    resolved.set("invert.seed", cfg.seed);
    resolved.set(
        "invert.mode",
        match cfg.mode {
            ConditioningMode::Diverse => "diverse",
            ConditioningMode::OneHotTarget => "one_hot_target",
        },
    );
    resolved.set("invert.smoothing", cfg.smoothing);
    resolved.set("invert.sigma", cfg.pert.sigma);
    resolved.set(
        "invert.noise",
        match cfg.pert.kind {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
        },
    );
    resolved.set("invert.log_every", cfg.log_every);
    resolved.set("invert.clip_norm", cfg.clip_norm);
    resolved.set("invert.ckpt_every", ckpt_every);
    resolved.set("weights.alpha", weights.alpha);
    resolved.set("weights.alpha_pert", weights.alpha_pert);
    resolved.set("weights.beta", weights.beta);
    resolved.set("weights.beta_pert", weights.beta_pert);
    resolved.set("weights.gamma", weights.gamma);
    resolved.set("weights.delta", weights.delta);
    resolved.set("weights.eta1", weights.eta_var);
    resolved.set("weights.eta2", weights.eta_pix);
    resolved.set("weights.eta3", weights.eta_grad);
    resolved.set("gen.width", gen_width);
    resolved.set("gen.latent_dim", latent_dim);
    resolved.set("classifier.sha256", &clf_sha);

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new("invert", &resolved);
    manifest.record_seed("invert", cfg.seed);
    manifest.record_input(&args.classifier.join(CLASSIFIER_WEIGHTS))?;

    let mut prior_history: Vec<HistoryRow> = Vec::new();
    let gen_path = args.out.join(GENERATOR_WEIGHTS);
    let (gen, resume_step) = if args.resume && gen_path.exists() {
        let sidecar: GeneratorCheckpoint =
            serde_json::from_slice(&std::fs::read(args.out.join(GENERATOR_SIDECAR))?)?;
        if sidecar.classifier_weights_sha256 != clf_sha {
            return Err(Error::Integrity(
                "resume checkpoint was trained against a different classifier".into(),
            ));
        }
        let observed = sha256_file(&gen_path)?;
        if observed != sidecar.weights_sha256 {
            return Err(Error::Integrity(
                "generator weights do not match their recorded digest".into(),
            ));
        }
        let mut gen = build_generator(&sidecar.spec, cfg.seed)?;
        let extras = checkpoint::decode_into(gen.store_mut(), &std::fs::read(&gen_path)?)?;
        let history_path = args.out.join(HISTORY_FILE);
        if history_path.exists() {
            prior_history = parse_history(&std::fs::read_to_string(&history_path)?)?;
        }
        (gen, Some((sidecar.steps_done, extras)))
    } else {
        let mut gspec =
            GeneratorSpec::for_output(clf.spec.num_classes, clf.spec.input_shape)?.scaled(gen_width);
        gspec.latent_dim = latent_dim;
        (build_generator(&gspec, cfg.seed)?, None)
    };

    let total_steps = cfg.steps;
    let mut engine = InversionEngine::new(&clf, gen, cfg)?;
    if let Some((step, extras)) = resume_step {
        let (restored, m, v) = adam_state_from_extras(engine.generator(), &extras)?;
        debug_assert_eq!(restored, step);
        engine.optimizer_mut().restore(restored, m, v);
        engine.set_step(step);
        println!("resuming from step {step}");
    }

    while engine.step_index() < total_steps {
        let at = engine.step_index();
        match engine.step_once() {
            Ok(losses) => {
                if at % 100 == 0 {
                    println!("step {at}: total {:.4} kl {:.4} ce {:.4}", losses.total, losses.kl, losses.ce);
                }
            }
            Err(e) => {
                // leave the last good checkpoint in place
                let mut history = prior_history.clone();
                history.extend_from_slice(engine.history());
                let _ = write_generator_checkpoint(&args.out, &engine, &clf_sha, &history, &mut manifest);
                return Err(Error::Train {
                    step: at,
                    message: format!("{e}; last checkpoint retained at {}", args.out.display()),
                });
            }
        }
        let done = engine.step_index();
        if done % ckpt_every == 0 || done == total_steps {
            let mut history = prior_history.clone();
            history.extend_from_slice(engine.history());
            write_generator_checkpoint(&args.out, &engine, &clf_sha, &history, &mut manifest)?;
        }
    }
    let mut history = prior_history;
    history.extend_from_slice(engine.history());
    let mut final_manifest = manifest;
    write_generator_checkpoint(&args.out, &engine, &clf_sha, &history, &mut final_manifest)?;
    final_manifest.finish();
    final_manifest.write(&args.out)?;
    println!(
        "inversion finished at step {}; artifacts in {}",
        engine.step_index(),
        args.out.display()
    );
    Ok(())
}

// ---- evaluate ---------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct EvaluateArgs {
    pub classifier: PathBuf,
    pub generator: PathBuf,
    pub subset: Option<usize>,
    pub per_class: Option<usize>,
    pub match_scope: Option<String>,
    pub candidate_cap: Option<usize>,
    pub grid_per_class: Option<usize>,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: PathBuf,
}

pub struct EvaluateOutcome {
    pub report: crate::evaluation::EvaluationReport,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluateOutcome> {
    let file_cfg = match &args.config {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    let per_class = pick(args.per_class, &file_cfg, "eval.per_class", 64)?;
    let scope = MatchScope::parse(&pick(
        args.match_scope.clone(),
        &file_cfg,
        "eval.scope",
        "same-class".into(),
    )?)?;
    let candidate_cap = match args.candidate_cap {
        Some(c) => Some(c),
        None => file_cfg.get_parsed::<usize>("eval.candidate_cap")?,
    };
    let grid_per_class = pick(args.grid_per_class, &file_cfg, "eval.grid_per_class", 5)?;
    let seed = pick(args.seed, &file_cfg, "eval.seed", 0)?;
    let subset = match args.subset {
        Some(s) => Some(s),
        None => file_cfg.get_parsed::<usize>("data.subset")?,
    };
    let cache_dir = resolve_cache_dir(args.cache_dir.clone());

    let (clf, clf_sha) = load_classifier_checkpoint(&args.classifier)?;
    let gen_sidecar: GeneratorCheckpoint =
        serde_json::from_slice(&std::fs::read(args.generator.join(GENERATOR_SIDECAR)).map_err(
            |e| Error::Integrity(format!("missing generator sidecar: {e}")),
        )?)?;
    if gen_sidecar.classifier_weights_sha256 != clf_sha {
        return Err(Error::Integrity(
            "generator was trained against a different classifier checkpoint".into(),
        ));
    }
    let gen_blob_path = args.generator.join(GENERATOR_WEIGHTS);
    if sha256_file(&gen_blob_path)? != gen_sidecar.weights_sha256 {
        return Err(Error::Integrity(
            "generator weights do not match their recorded digest".into(),
        ));
    }
    let mut gen = build_generator(&gen_sidecar.spec, 0)?;
    checkpoint::decode_into(gen.store_mut(), &std::fs::read(&gen_blob_path)?)?;

    let dataset_name = clf
        .record
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("classifier checkpoint does not name its dataset".into()))?;
    let dataset = DatasetName::parse(dataset_name)?;
    let train = load_dataset(
        &dataset_spec_from(dataset, Split::Train, subset, clf.record.seed),
        &cache_dir,
    )?;

    // exhaustive SSIM search dominates runtime on large training sets;
    // without an explicit cap, pools above 2000 per class are subsampled
    let effective_cap = candidate_cap.or_else(|| {
        let largest = (0..train.spec.num_classes)
            .map(|c| train.class_indices(c).len())
            .max()
            .unwrap_or(0);
        (largest > 2000).then_some(2000)
    });

    let mut resolved = Config::new();
    resolved.set("command", "evaluate");
    resolved.set("eval.per_class", per_class);
    resolved.set(
        "eval.scope",
        match scope {
            MatchScope::SameClass => "same-class",
            MatchScope::Global => "global",
        },
    );
    if let Some(c) = effective_cap {
        resolved.set("eval.candidate_cap", c);
    }
    resolved.set("eval.grid_per_class", grid_per_class);
    resolved.set("eval.seed", seed);
    resolved.set("data.dataset", dataset);
    if let Some(s) = subset {
        resolved.set("data.subset", s);
    }
    resolved.set("classifier.sha256", &clf_sha);
    resolved.set("generator.sha256", &gen_sidecar.weights_sha256);
    let digest = resolved.digest();

    // reconstructions, class by class, eval mode
    let n = clf.spec.num_classes;
    let mut recon_pixels = Vec::new();
    let mut recon_labels = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "evaluate-recon"));
    for class in 0..n {
        let bundles = sample_conditioning_for_class(
            gen.spec.latent_dim,
            n,
            per_class,
            class,
            gen_sidecar.inversion.smoothing,
            &mut rng,
        );
        let batch = gen.generate(&bundles)?;
        recon_pixels.push(batch.pixels);
        recon_labels.extend(std::iter::repeat_n(class, per_class));
    }
    let views: Vec<_> = recon_pixels.iter().map(|p| p.view()).collect();
    let recons = ImageBatch {
        pixels: ndarray::concatenate(Axis(0), &views).expect("same shapes"),
        labels: Some(recon_labels),
    };

    let match_cfg = MatchConfig {
        ssim: SSIMConfig::default(),
        scope,
        candidate_cap: effective_cap,
        candidate_seed: derive_seed(seed, "candidate-pool"),
    };
    let matches = match_reconstructions(&recons, &train, &match_cfg)?;
    let mut report = build_report(
        &matches,
        &dataset.to_string(),
        &clf.spec.arch.to_string(),
        n,
        &digest,
    );
    if report.aggregation_residual() > 1e-9 {
        return Err(Error::Numeric {
            term: "report".into(),
            message: "aggregation invariant violated".into(),
        });
    }

    std::fs::create_dir_all(&args.out)?;
    // grid: column 0 the matched training samples, column 1 reconstructions
    let mut train_col = Vec::new();
    let mut recon_col = Vec::new();
    for class in 0..n {
        let class_matches: Vec<&crate::evaluation::MatchResult> =
            matches.iter().filter(|m| m.class == class).collect();
        for m in class_matches.iter().take(grid_per_class) {
            train_col.push(train.image(m.matched_index));
            recon_col.push(
                recons
                    .pixels
                    .index_axis(Axis(0), m.recon_index)
                    .to_owned()
                    .into_dyn()
                    .mapv(|v| v.clamp(0.0, 1.0)),
            );
        }
    }
    grid::write_grid(
        &args.out.join("grid.png"),
        &[
            grid::GridColumn { images: train_col },
            grid::GridColumn { images: recon_col },
        ],
    )?;

    report.artifacts = vec!["report.csv".into(), "report.json".into(), "grid.png".into()];
    atomic_write(&args.out.join("report.csv"), report.to_csv().as_bytes())?;
    atomic_write(
        &args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;

    let mut manifest = RunManifest::new("evaluate", &resolved);
    manifest.record_seed("evaluate", seed);
    manifest.record_input(&args.classifier.join(CLASSIFIER_WEIGHTS))?;
    manifest.record_input(&gen_blob_path)?;
    manifest.record_artifact(&args.out, "report.csv")?;
    manifest.record_artifact(&args.out, "report.json")?;
    manifest.record_artifact(&args.out, "grid.png")?;
    manifest.finish();
    manifest.write(&args.out)?;

    if !report.cell_valid() {
        eprintln!(
            "warning: classes {:?} have no reconstructions; cell marked invalid",
            report.invalid_classes
        );
    }
    println!(
        "evaluated {} x {}: mean SSIM {:.4} over {} matches",
        report.dataset, report.architecture, report.overall_mean, report.total_matches
    );
    Ok(EvaluateOutcome { report })
}

// ---- benchmark ----------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct BenchmarkArgs {
    pub cells: Option<String>,
    pub master_seed: Option<u64>,
    pub subset: Option<usize>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub per_class: Option<usize>,
    pub gen_width: Option<f64>,
    pub candidate_cap: Option<usize>,
    pub jobs: Option<usize>,
    pub config: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CellStatus {
    dataset: String,
    arch: String,
    ok: bool,
    detail: String,
    mean_ssim: Option<f64>,
}

fn parse_cells(spec: &str) -> Result<Vec<(DatasetName, Arch)>> {
    let mut cells = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (ds, arch) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("cell '{part}' is not dataset:arch")))?;
        let dataset = DatasetName::parse(ds)?;
        match arch.to_ascii_lowercase().as_str() {
            "all" => {
                for a in [Arch::Mlp, Arch::Vit, Arch::Cnn] {
                    cells.push((dataset, a));
                }
            }
            other => cells.push((dataset, Arch::parse(other)?)),
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("no benchmark cells requested".into()));
    }
    Ok(cells)
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    let cells_spec = pick(
        args.cells.clone(),
        &file_cfg,
        "benchmark.cells",
        "mnist:all,fashionmnist:all,svhn:all,cifar10:all".into(),
    )?;
    let cells = parse_cells(&cells_spec)?;
    let master_seed = pick(args.master_seed, &file_cfg, "benchmark.master_seed", 0)?;
    let jobs = pick(args.jobs, &file_cfg, "benchmark.jobs", 1)?.max(1);

    let mut resolved = Config::new();
    resolved.set("command", "benchmark");
    resolved.set("benchmark.cells", &cells_spec);
    resolved.set("benchmark.master_seed", master_seed);
    if let Some(s) = args.subset {
        resolved.set("data.subset", s);
    }
    if let Some(e) = args.epochs {
        resolved.set("train.epochs", e);
    }
    if let Some(s) = args.steps {
        resolved.set("invert.steps", s);
    }
    if let Some(p) = args.per_class {
        resolved.set("eval.per_class", p);
    }

    std::fs::create_dir_all(&args.out)?;
    let cache_dir = resolve_cache_dir(args.cache_dir.clone());

    // each cell is one child-process pipeline; numerical state stays isolated
    let mut pending: Vec<(DatasetName, Arch, Vec<Vec<String>>)> = Vec::new();
    for (dataset, arch) in &cells {
        let cell = format!("{dataset}_{arch}");
        let cell_dir = args.out.join("cells").join(&cell);
        let clf_dir = cell_dir.join("classifier");
        let inv_dir = cell_dir.join("inversion");
        let eval_dir = cell_dir.join("evaluation");
        let train_seed = derive_seed(master_seed, &format!("train:{cell}"));
        let invert_seed = derive_seed(master_seed, &format!("invert:{cell}"));
        let eval_seed = derive_seed(master_seed, &format!("evaluate:{cell}"));

        let mut train = vec![
            "train-classifier".to_string(),
            "--arch".into(),
            arch.to_string(),
            "--dataset".into(),
            dataset.to_string(),
            "--seed".into(),
            train_seed.to_string(),
            "--out".into(),
            clf_dir.display().to_string(),
            "--cache-dir".into(),
            cache_dir.display().to_string(),
        ];
        if let Some(s) = args.subset {
            train.extend(["--subset".into(), s.to_string()]);
        }
        if let Some(e) = args.epochs {
            train.extend(["--epochs".into(), e.to_string()]);
        }
        let mut invert = vec![
            "invert".to_string(),
            "--classifier".into(),
            clf_dir.display().to_string(),
            "--seed".into(),
            invert_seed.to_string(),
            "--out".into(),
            inv_dir.display().to_string(),
        ];
        if let Some(s) = args.steps {
            invert.extend(["--steps".into(), s.to_string()]);
        }
        if let Some(w) = args.gen_width {
            invert.extend(["--gen-width".into(), w.to_string()]);
        }
        let mut eval = vec![
            "evaluate".to_string(),
            "--classifier".into(),
            clf_dir.display().to_string(),
            "--generator".into(),
            inv_dir.display().to_string(),
            "--seed".into(),
            eval_seed.to_string(),
            "--out".into(),
            eval_dir.display().to_string(),
            "--cache-dir".into(),
            cache_dir.display().to_string(),
        ];
        if let Some(s) = args.subset {
            eval.extend(["--subset".into(), s.to_string()]);
        }
        if let Some(p) = args.per_class {
            eval.extend(["--per-class".into(), p.to_string()]);
        }
        if let Some(c) = args.candidate_cap {
            eval.extend(["--candidate-cap".into(), c.to_string()]);
        }
        if let Some(cfg) = &args.config {
            for stage in [&mut train, &mut invert, &mut eval] {
                stage.extend(["--config".into(), cfg.display().to_string()]);
            }
        }
        pending.push((*dataset, *arch, vec![train, invert, eval]));
    }

    type RunningCell = (DatasetName, Arch, Vec<Vec<String>>, usize, std::process::Child);
    let mut statuses: Vec<CellStatus> = Vec::new();
    let mut queue = std::collections::VecDeque::from(pending);
    let mut running: Vec<RunningCell> = Vec::new();
    let exe = std::env::current_exe()?;
    loop {
        while running.len() < jobs && !queue.is_empty() {
            let (ds, arch, stages) = queue.pop_front().unwrap();
            let child = std::process::Command::new(&exe).args(&stages[0]).spawn()?;
            running.push((ds, arch, stages, 0, child));
        }
        if running.is_empty() {
            break;
        }
        // single-threaded polling keeps cell ordering deterministic enough
        std::thread::sleep(std::time::Duration::from_millis(50));
        let mut i = 0;
        while i < running.len() {
            if let Some(status) = running[i].4.try_wait()? {
                let (ds, arch, stages, stage_idx, _) = running.remove(i);
                if !status.success() {
                    statuses.push(CellStatus {
                        dataset: ds.to_string(),
                        arch: arch.to_string(),
                        ok: false,
                        detail: format!("stage {} failed with {status}", stage_idx),
                        mean_ssim: None,
                    });
                } else if stage_idx + 1 < stages.len() {
                    let child = std::process::Command::new(&exe)
                        .args(&stages[stage_idx + 1])
                        .spawn()?;
                    running.push((ds, arch, stages, stage_idx + 1, child));
                } else {
                    // finished cell: pull the mean from its report
                    let eval_dir = args
                        .out
                        .join("cells")
                        .join(format!("{ds}_{arch}"))
                        .join("evaluation");
                    let report: crate::evaluation::EvaluationReport =
                        serde_json::from_slice(&std::fs::read(eval_dir.join("report.json"))?)?;
                    statuses.push(CellStatus {
                        dataset: ds.to_string(),
                        arch: arch.to_string(),
                        ok: report.cell_valid(),
                        detail: if report.cell_valid() {
                            "ok".into()
                        } else {
                            format!("invalid classes {:?}", report.invalid_classes)
                        },
                        mean_ssim: Some(report.overall_mean),
                    });
                }
                continue;
            }
            i += 1;
        }
    }

    // merged Table-I-shaped CSV: rows datasets, columns architectures
    let datasets: Vec<String> = {
        let mut seen = Vec::new();
        for (ds, _) in &cells {
            let s = ds.to_string();
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        seen
    };
    let archs = ["mlp", "vit", "cnn"];
    let mut table = String::from("dataset,mlp,vit,cnn\n");
    for ds in &datasets {
        table.push_str(ds);
        for arch in archs {
            let cell = statuses
                .iter()
                .find(|s| &s.dataset == ds && s.arch == arch);
            match cell {
                Some(CellStatus { ok: true, mean_ssim: Some(v), .. }) => {
                    table.push_str(&format!(",{v}"));
                }
                Some(_) => table.push_str(",invalid"),
                None => table.push(','),
            }
        }
        table.push('\n');
    }
    atomic_write(&args.out.join("table.csv"), table.as_bytes())?;
    atomic_write(
        &args.out.join("cells.json"),
        serde_json::to_string_pretty(&statuses)?.as_bytes(),
    )?;

    let mut manifest = RunManifest::new("benchmark", &resolved);
    manifest.record_seed("master", master_seed);
    manifest.record_artifact(&args.out, "table.csv")?;
    manifest.record_artifact(&args.out, "cells.json")?;

    // per-dataset comparison figure: training samples first, then one
    // reconstruction column per architecture
    for ds in &datasets {
        let name = DatasetName::parse(ds)?;
        let (c, h, w) = name.image_shape();
        let mut columns: Vec<grid::GridColumn> = Vec::new();
        for arch in archs {
            let ok = statuses
                .iter()
                .any(|s| &s.dataset == ds && s.arch == arch && s.mean_ssim.is_some());
            if !ok {
                continue;
            }
            let cell_grid = args
                .out
                .join("cells")
                .join(format!("{ds}_{arch}"))
                .join("evaluation")
                .join("grid.png");
            let tiles = grid::read_column_tiles(&cell_grid, c, h, w)?;
            if tiles.len() < 2 {
                continue;
            }
            if columns.is_empty() {
                columns.push(grid::GridColumn { images: tiles[0].clone() });
            }
            columns.push(grid::GridColumn { images: tiles[1].clone() });
        }
        if columns.len() >= 2 {
            let fig = format!("comparison_{ds}.png");
            grid::write_grid(&args.out.join(&fig), &columns)?;
            manifest.record_artifact(&args.out, &fig)?;
        }
    }
    manifest.finish();
    manifest.write(&args.out)?;

    println!("{table}");
    let failed = statuses.iter().filter(|s| !s.ok).count();
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed or invalid; see cells.json");
    }
    Ok(())
}

// ---- verify ----------------------------------------------------------------

pub fn cmd_verify(dir: &Path) -> Result<()> {
    let (checked, drifts) = verify_tree(dir)?;
    if drifts.is_empty() {
        println!("verified {checked} artifact(s), no drift");
        Ok(())
    } else {
        for d in &drifts {
            eprintln!(
                "drift in {}: {} expected {} got {}",
                d.manifest_dir.display(),
                d.artifact,
                &d.expected_sha256[..12.min(d.expected_sha256.len())],
                &d.observed[..12.min(d.observed.len())]
            );
        }
        Err(Error::Integrity(format!(
            "{} of {checked} artifact(s) drifted from their manifests",
            drifts.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_parsing() {
        let cells = parse_cells("synthetic:mlp, mnist:all").unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0], (DatasetName::SyntheticShapes, Arch::Mlp));
        assert!(parse_cells("mnist").is_err());
        assert!(parse_cells("").is_err());
    }

    #[test]
    fn history_roundtrip() {
        let rows = vec![
            HistoryRow {
                step: 0,
                losses: crate::inversion::LossBreakdown {
                    kl: 1.25,
                    kl_pert: 1.5,
                    ce: 0.5,
                    ce_pert: 0.625,
                    cosine: -0.125,
                    ortho: 0.25,
                    var: 3.5,
                    pix: 0.75,
                    grad: 2.25,
                    total: 9.0,
                },
            },
            HistoryRow {
                step: 10,
                losses: Default::default(),
            },
        ];
        let text = history_to_csv(&rows);
        let back = parse_history(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].step, 0);
        assert_eq!(back[0].losses.kl, 1.25);
        assert_eq!(back[0].losses.total, 9.0);
        assert_eq!(back[1].step, 10);
    }

    #[test]
    fn cache_dir_resolution_order() {
        let flag = resolve_cache_dir(Some(PathBuf::from("/explicit")));
        assert_eq!(flag, PathBuf::from("/explicit"));
    }
}
