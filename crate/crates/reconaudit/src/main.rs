use clap::{Args, Parser, Subcommand};
use reconaudit::commands::{
    cmd_benchmark, cmd_evaluate, cmd_invert, cmd_train_classifier, cmd_verify, BenchmarkArgs,
    EvaluateArgs, InvertArgs, TrainClassifierArgs, WeightFlags,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Privacy audit for vision classifiers: reconstruct training-like data
/// from a frozen model via conditioned network inversion and score the
/// memorization with nearest-training-sample SSIM.
#[derive(Parser)]
#[command(name = "reconaudit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train one classifier and freeze it into a checkpoint.
    TrainClassifier(TrainClassifierCli),
    /// Train the conditioned generator against a frozen classifier.
    Invert(InvertCli),
    /// Score reconstructions against the training set and emit reports.
    Evaluate(EvaluateCli),
    /// Run train -> invert -> evaluate over dataset x architecture cells.
    Benchmark(BenchmarkCli),
    /// Re-hash artifacts under a directory against their manifests.
    Verify(VerifyCli),
}

#[derive(Args)]
struct TrainClassifierCli {
    /// Architecture: mlp, cnn or vit.
    #[arg(long)]
    arch: Option<String>,
    /// Dataset: mnist, fashionmnist, svhn, cifar10 or synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Per-class cap on training samples.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also load the test split and record test accuracy.
    #[arg(long)]
    eval_test: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset cache directory (env RECONAUDIT_CACHE_DIR overrides default).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory for the checkpoint and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertCli {
    /// Classifier checkpoint directory.
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Conditioning mode: one_hot_target (reconstruction) or diverse.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    smoothing: Option<f64>,
    /// Perturbation magnitude for the perturbed loss terms.
    #[arg(long)]
    sigma: Option<f64>,
    /// Perturbation kind: gaussian or uniform.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    ckpt_every: Option<usize>,
    /// Width multiplier for the generator's channel plan.
    #[arg(long)]
    gen_width: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long = "weights.alpha")]
    alpha: Option<f64>,
    #[arg(long = "weights.alpha-pert")]
    alpha_pert: Option<f64>,
    #[arg(long = "weights.beta")]
    beta: Option<f64>,
    #[arg(long = "weights.beta-pert")]
    beta_pert: Option<f64>,
    #[arg(long = "weights.gamma")]
    gamma: Option<f64>,
    #[arg(long = "weights.delta")]
    delta: Option<f64>,
    #[arg(long = "weights.eta1")]
    eta1: Option<f64>,
    #[arg(long = "weights.eta2")]
    eta2: Option<f64>,
    #[arg(long = "weights.eta3")]
    eta3: Option<f64>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateCli {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    /// Per-class cap on the training candidate pool's source subset.
    #[arg(long)]
    subset: Option<usize>,
    /// Reconstructions per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Matching scope: same-class (default) or global.
    #[arg(long)]
    match_scope: Option<String>,
    /// Cap on SSIM candidates per class (seeded subsample).
    #[arg(long)]
    candidate_cap: Option<usize>,
    /// Rows per class in the comparison grid.
    #[arg(long)]
    grid_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkCli {
    /// Comma list of dataset:arch cells; arch may be `all`.
    #[arg(long)]
    cells: Option<String>,
    /// Master seed; per-cell seeds derive from it by stable hashing.
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    gen_width: Option<f64>,
    #[arg(long)]
    candidate_cap: Option<usize>,
    /// Concurrent cell processes.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyCli {
    /// Directory tree whose manifests should be checked.
    #[arg(long, default_value = "runs")]
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainClassifier(a) => cmd_train_classifier(&TrainClassifierArgs {
            arch: a.arch,
            dataset: a.dataset,
            subset: a.subset,
            epochs: a.epochs,
            batch: a.batch,
            lr: a.lr,
            seed: a.seed,
            eval_test: a.eval_test,
            config: a.config,
            cache_dir: a.cache_dir,
            out: a.out,
        }),
        Command::Invert(a) => cmd_invert(&InvertArgs {
            classifier: a.classifier,
            steps: a.steps,
            batch: a.batch,
            lr: a.lr,
            seed: a.seed,
            mode: a.mode,
            smoothing: a.smoothing,
            sigma: a.sigma,
            noise: a.noise,
            log_every: a.log_every,
            ckpt_every: a.ckpt_every,
            gen_width: a.gen_width,
            latent_dim: a.latent_dim,
            weights: WeightFlags {
                alpha: a.alpha,
                alpha_pert: a.alpha_pert,
                beta: a.beta,
                beta_pert: a.beta_pert,
                gamma: a.gamma,
                delta: a.delta,
                eta1: a.eta1,
                eta2: a.eta2,
                eta3: a.eta3,
            },
            resume: a.resume,
            config: a.config,
            out: a.out,
        }),
        Command::Evaluate(a) => cmd_evaluate(&EvaluateArgs {
            classifier: a.classifier,
            generator: a.generator,
            subset: a.subset,
            per_class: a.per_class,
            match_scope: a.match_scope,
            candidate_cap: a.candidate_cap,
            grid_per_class: a.grid_per_class,
            seed: a.seed,
            config: a.config,
            cache_dir: a.cache_dir,
            out: a.out,
        })
        .map(|_| ()),
        Command::Benchmark(a) => cmd_benchmark(&BenchmarkArgs {
            cells: a.cells,
            master_seed: a.master_seed,
            subset: a.subset,
            epochs: a.epochs,
            steps: a.steps,
            per_class: a.per_class,
            gen_width: a.gen_width,
            candidate_cap: a.candidate_cap,
            jobs: a.jobs,
            config: a.config,
            cache_dir: a.cache_dir,
            out: a.out,
        }),
        Command::Verify(a) => cmd_verify(&a.dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
