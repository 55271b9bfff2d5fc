//! `maskbench` — single entry point for the whole pipeline: segmentation,
//! dataset construction, training, attacks, evaluation, and the seeded
//! end-to-end experiment.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 operation failure, 2 usage error. Given identical flags, seeds, and
//! input files, every subcommand writes byte-identical outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskbench_core::dataset::{
    build_dataset, read_annotations, read_manifest, synth_generate, write_manifest, SynthConfig,
};
use maskbench_core::pipeline::{end2end, End2EndConfig};
use maskbench_core::segmenter::{segment, Connectivity, SegmenterParams};
use maskbench_core::trainer::{
    compare_table, evaluate, read_report, train, write_report, InputMode, TrainConfig, TrainMode,
};
use maskbench_core::transforms::binarize;
use maskbench_core::{grad_check, AttackConfig, Error, Image, Model, Result, Tensor};

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (formats: MBNET1, MBMANIFEST 1, MBANNOT 1, MBREPORT 1)"
);

#[derive(Parser)]
#[command(
    name = "maskbench",
    version = VERSION,
    about = "Foreground-mask robustness toolkit: graph-cut segmentation, dataset \
             construction, PGD attacks, and natural/adversarial training",
    arg_required_else_help = true,
    // Later occurrences win, which is what gives explicit flags precedence
    // over --config-spliced ones.
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// key=value file supplying defaults for this subcommand's flags
    /// (explicit flags win; unknown keys are rejected)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Upper bound on worker threads. All operations currently run
    /// sequentially, so this caps rather than creates parallelism.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Graph-cut foreground segmentation of one image
    Segment(SegmentArgs),
    /// Build a 32x32 classification dataset from object annotations
    BuildDataset(BuildDatasetArgs),
    /// Generate the synthetic shapes dataset
    Synth(SynthArgs),
    /// Threshold an image to exact 0/1 values
    Binarize(BinarizeArgs),
    /// Train a model on a manifest (natural or adversarial)
    Train(TrainArgs),
    /// Run the PGD attack against a checkpoint and report accuracies
    Attack(AttackArgs),
    /// Evaluate a checkpoint, or render the four-report comparison table
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// synth -> train x4 -> eval x4 -> comparison table, from one seed
    End2end(End2endArgs),
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    common: Common,
    /// Input image (PPM/PGM)
    #[arg(long)]
    input: PathBuf,
    /// Output mask (PGM)
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = SegmenterParams::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = SegmenterParams::default().quantization)]
    quantization: f64,
    /// Pixel neighborhood: 4 or 8
    #[arg(long, default_value_t = 4)]
    connectivity: u8,
    /// Foreground seed disk radius as a fraction of min(h, w)
    #[arg(long, default_value_t = SegmenterParams::default().seed_radius)]
    seed_radius: f64,
    /// Number of foreground seeds sampled from the disk
    #[arg(long, default_value_t = SegmenterParams::default().seed_count)]
    seed_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[command(flatten)]
    common: Common,
    /// MBANNOT 1 annotation file
    #[arg(long)]
    annotations: PathBuf,
    /// Output directory (images, masks, dataset.manifest)
    #[arg(long)]
    out: PathBuf,
    /// Keep the k most frequent classes
    #[arg(long)]
    classes: usize,
    /// Class names to exclude before ranking (comma-separated)
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (images, masks, dataset.manifest)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n_samples)]
    samples: usize,
    #[arg(long, default_value_t = SynthConfig::default().side)]
    side: usize,
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().amplitude)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BinarizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write (MBNET1)
    #[arg(long)]
    out: PathBuf,
    /// natural | adversarial
    #[arg(long, default_value = "natural", value_parser = TrainMode::parse)]
    mode: TrainMode,
    /// raw | masked
    #[arg(long, default_value = "raw", value_parser = InputMode::parse)]
    input_mode: InputMode,
    /// Default: 30 natural, 60 adversarial
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::natural(InputMode::Raw, 0).batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::natural(InputMode::Raw, 0).lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::natural(InputMode::Raw, 0).momentum)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PGD steps per training batch (adversarial mode)
    #[arg(long, default_value_t = AttackConfig::default().steps)]
    attack_steps: usize,
    /// L-inf budget for training attacks
    #[arg(long, default_value_t = AttackConfig::default().epsilon)]
    epsilon: f64,
    /// PGD step size for training attacks
    #[arg(long, default_value_t = AttackConfig::default().step_size)]
    step_size: f64,
    /// Epochs over which the training attack budget ramps up to epsilon.
    /// Default: 0 (natural mode), 5 (adversarial mode)
    #[arg(long)]
    epsilon_ramp_epochs: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to attack
    #[arg(long)]
    model: PathBuf,
    /// Evaluation manifest
    #[arg(long)]
    manifest: PathBuf,
    /// raw | masked (masked also restricts the perturbation to the mask)
    #[arg(long, default_value = "raw", value_parser = InputMode::parse)]
    input_mode: InputMode,
    #[arg(long, default_value_t = AttackConfig::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = AttackConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = AttackConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    random_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the evaluation report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Render the comparison table from four reports: X/N X/A X_FG/N X_FG/A
    #[arg(long, num_args = 4, value_names = ["X_N", "X_A", "FG_N", "FG_A"],
          conflicts_with_all = ["model", "manifest", "out"])]
    table: Option<Vec<PathBuf>>,
    #[arg(long, required_unless_present = "table")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "table")]
    manifest: Option<PathBuf>,
    /// raw | masked
    #[arg(long, default_value = "raw", value_parser = InputMode::parse)]
    input_mode: InputMode,
    /// Also evaluate under the PGD attack
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pgd: bool,
    #[arg(long, default_value_t = AttackConfig::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = AttackConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = AttackConfig::default().steps)]
    steps: usize,
    /// Write the evaluation report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Seeds the model parameters and the probe batch
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct End2endArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for all artifacts
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = End2EndConfig::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = End2EndConfig::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = End2EndConfig::default().side)]
    side: usize,
    #[arg(long, default_value_t = End2EndConfig::default().amplitude)]
    amplitude: f64,
    #[arg(long, default_value_t = End2EndConfig::default().train_frac)]
    train_frac: f64,
    #[arg(long, default_value_t = End2EndConfig::default().epochs_natural)]
    epochs_natural: usize,
    #[arg(long, default_value_t = End2EndConfig::default().epochs_adversarial)]
    epochs_adversarial: usize,
    #[arg(long, default_value_t = End2EndConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = End2EndConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = End2EndConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = End2EndConfig::default().train_attack_steps)]
    train_attack_steps: usize,
    #[arg(long, default_value_t = End2EndConfig::default().epsilon_ramp_epochs)]
    epsilon_ramp_epochs: usize,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match expand_config(argv) {
        Ok(argv) => argv,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help/--version.
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Splices `--key value` pairs from a `--config` file into argv right after
/// the subcommand, so explicit flags (which come later) override them.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut config = None;
    for (i, arg) in argv.iter().enumerate().skip(2) {
        let value = if arg == "--config" {
            argv.get(i + 1).cloned()
        } else if let Some(v) = arg.strip_prefix("--config=") {
            Some(v.to_string())
        } else {
            continue;
        };
        let Some(value) = value else { continue }; // missing value: clap reports it
        if config.replace(value).is_some() {
            return Err("--config given more than once".into());
        }
    }
    let Some(config) = config else { return Ok(argv) };
    if argv.len() < 2 || argv[1].starts_with('-') {
        return Err("--config requires a subcommand".into());
    }

    let text = fs::read_to_string(&config).map_err(|e| format!("{config}: {e}"))?;
    let mut inserted = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{config}:{}: expected key=value, got `{line}`", idx + 1));
        };
        let key = key.trim();
        if key.is_empty() || !key.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_') {
            return Err(format!("{config}:{}: bad key `{key}`", idx + 1));
        }
        if matches!(key, "config" | "help" | "version") {
            return Err(format!("{config}:{}: `{key}` is not allowed in a config file", idx + 1));
        }
        inserted.push(format!("--{}", key.replace('_', "-")));
        inserted.push(value.trim().to_string());
    }

    let mut out = Vec::with_capacity(argv.len() + inserted.len());
    out.extend(argv[..2].iter().cloned());
    out.append(&mut inserted);
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Segment(args) => cmd_segment(args),
        Command::BuildDataset(args) => cmd_build_dataset(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Binarize(args) => cmd_binarize(args),
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::End2end(args) => cmd_end2end(args),
    }
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let connectivity = match args.connectivity {
        4 => Connectivity::Four,
        8 => Connectivity::Eight,
        other => {
            return Err(Error::invalid_param("connectivity", format!("{other} (use 4 or 8)")));
        }
    };
    let params = SegmenterParams {
        sigma: args.sigma,
        quantization: args.quantization,
        connectivity,
        seed_radius: args.seed_radius,
        seed_count: args.seed_count,
    };
    let image = Image::read_netpbm(&args.input)?;
    let mask = segment(&image, &params, args.seed)?;
    mask.write_pgm(&args.output)?;
    println!(
        "wrote {} (foreground {}/{})",
        args.output.display(),
        mask.count_ones(),
        mask.height() * mask.width()
    );
    Ok(())
}

fn cmd_build_dataset(args: BuildDatasetArgs) -> Result<()> {
    let annots = read_annotations(&args.annotations)?;
    let exclude: BTreeSet<String> = args.exclude.into_iter().collect();
    let (manifest, report) = build_dataset(&annots, args.classes, &exclude, &args.out)?;
    let manifest_path = args.out.join("dataset.manifest");
    write_manifest(&manifest, &manifest_path)?;
    println!(
        "wrote {} ({} records, {} skipped, classes: {})",
        manifest_path.display(),
        report.emitted,
        report.skipped,
        manifest.label_names.join(",")
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_samples: args.samples,
        side: args.side,
        classes: args.classes,
        amplitude: args.amplitude,
        seed: args.seed,
    };
    let (manifest, stats) = synth_generate(&cfg, &args.out)?;
    let manifest_path = args.out.join("dataset.manifest");
    write_manifest(&manifest, &manifest_path)?;
    println!(
        "wrote {} ({} samples, foreground fraction mean={:.4} min={:.4} max={:.4})",
        manifest_path.display(),
        manifest.len(),
        stats.mean_fraction,
        stats.min_fraction,
        stats.max_fraction
    );
    Ok(())
}

fn cmd_binarize(args: BinarizeArgs) -> Result<()> {
    let image = Image::read_netpbm(&args.input)?;
    let out = binarize(&image, args.threshold)?;
    out.write_netpbm(&args.output)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let mut cfg = match args.mode {
        TrainMode::Natural => TrainConfig::natural(args.input_mode, args.seed),
        TrainMode::Adversarial => TrainConfig::adversarial(args.input_mode, args.seed),
    };
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.batch_size = args.batch_size;
    cfg.lr = args.lr;
    cfg.momentum = args.momentum;
    cfg.attack.steps = args.attack_steps;
    cfg.attack.epsilon = args.epsilon;
    cfg.attack.step_size = args.step_size;
    if let Some(ramp) = args.epsilon_ramp_epochs {
        cfg.epsilon_ramp_epochs = ramp;
    }

    let (model, log) = train(&manifest, &cfg)?;
    for (i, epoch) in log.iter().enumerate() {
        eprintln!("epoch {:>3}: loss {:.6} accuracy {:.4}", i + 1, epoch.loss, epoch.accuracy);
    }
    model.save(&args.out)?;
    let last = log.last();
    println!(
        "wrote {} (epochs={} final_loss={} final_acc={})",
        args.out.display(),
        log.len(),
        last.map_or("-".to_string(), |e| format!("{:.6}", e.loss)),
        last.map_or("-".to_string(), |e| format!("{:.4}", e.accuracy)),
    );
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let manifest = read_manifest(&args.manifest)?;
    let attack = AttackConfig {
        epsilon: args.epsilon,
        step_size: args.step_size,
        steps: args.steps,
        random_start: args.random_start,
        seed: args.seed,
    };
    let report = evaluate(&model, &manifest, Some(&attack), args.input_mode)?;
    if let Some(out) = &args.out {
        write_report(&report, out)?;
    }
    println!(
        "natural_acc={:.4} adv_acc={:.4}",
        report.natural_accuracy(),
        report.pgd_accuracy().expect("attack evaluation always yields a PGD accuracy")
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if let Some(paths) = &args.table {
        let [x_n, x_a, fg_n, fg_a]: [_; 4] =
            paths.clone().try_into().expect("clap enforces exactly four");
        let table = compare_table(
            &read_report(&x_n)?,
            &read_report(&x_a)?,
            &read_report(&fg_n)?,
            &read_report(&fg_a)?,
        );
        print!("{table}");
        return Ok(());
    }
    let model = Model::load(args.model.as_deref().expect("clap requires --model"))?;
    let manifest = read_manifest(args.manifest.as_deref().expect("clap requires --manifest"))?;
    let attack = args.pgd.then(|| AttackConfig {
        epsilon: args.epsilon,
        step_size: args.step_size,
        steps: args.steps,
        ..AttackConfig::default()
    });
    let report = evaluate(&model, &manifest, attack.as_ref(), args.input_mode)?;
    if let Some(out) = &args.out {
        write_report(&report, out)?;
    }
    match report.pgd_accuracy() {
        Some(pgd) => println!(
            "samples={} natural_acc={:.4} pgd_acc={:.4}",
            report.samples,
            report.natural_accuracy(),
            pgd
        ),
        None => println!(
            "samples={} natural_acc={:.4}",
            report.samples,
            report.natural_accuracy()
        ),
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    // The probe scenario from the library's own verification: a seeded
    // SmallVGG on a two-sample random batch.
    let model = Model::small_vgg([3, 8, 8], 2, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = Tensor::new(&[2, 3, 8, 8], data)?;
    let report = grad_check(&model, &batch, &[0, 1], args.h, args.tol)?;
    println!(
        "max_rel_err={:e} checked={} skipped={} {}",
        report.max_rel_err,
        report.checked,
        report.skipped,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check failed: max_rel_err {:e} > tol {:e}",
            report.max_rel_err, args.tol
        )))
    }
}

fn cmd_end2end(args: End2endArgs) -> Result<()> {
    let cfg = End2EndConfig {
        samples: args.samples,
        classes: args.classes,
        side: args.side,
        amplitude: args.amplitude,
        train_frac: args.train_frac,
        seed: args.seed,
        epochs_natural: args.epochs_natural,
        epochs_adversarial: args.epochs_adversarial,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        train_attack_steps: args.train_attack_steps,
        epsilon_ramp_epochs: args.epsilon_ramp_epochs,
    };
    let outcome = end2end(&cfg, &args.out, &mut |line| eprintln!("{line}"))?;
    print!("{}", outcome.table);
    Ok(())
}
