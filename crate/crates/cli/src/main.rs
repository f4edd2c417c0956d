//! `ala`: generate a corpus, train a classifier, attack it, and evaluate.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::Layer;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// IO failure, unreadable inputs, model/corpus mismatch; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<ala_core::Error> for CliError {
    fn from(e: ala_core::Error) -> Self {
        match e {
            ala_core::Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ala", version, about = "Adversarial lightness attack toolkit")]
struct Cli {
    /// key = value settings file; flags and ALA_* variables take precedence
    #[arg(long, global = true, env = "ALA_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic corpus
    GenCorpus(GenCorpusArgs),
    /// Train a classifier on a corpus
    Train(TrainArgs),
    /// Attack every correctly classified image of a corpus split
    Attack(AttackArgs),
    /// Score a corpus split or re-score the outputs of `attack`
    Eval(EvalArgs),
    /// Cross-model transfer matrix
    Transfer(TransferArgs),
    /// Run the eight ablation variants
    Ablation(AblationArgs),
    /// Fine-tune on a 1:1 mix of clean and adversarial training images
    Finetune(FinetuneArgs),
    /// Write lightness-shifted copies of a corpus split
    Corrupt(CorruptArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Image side length in pixels
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// conv, mlp or linear
    #[arg(long, value_parser = ["conv", "mlp", "linear"])]
    arch: Option<String>,
    #[arg(long)]
    corpus: PathBuf,
    /// Number of classes; defaults to the corpus manifest or the largest label + 1
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    /// Weights file; a JSON description, metrics and run manifest are written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackFlags {
    /// Ablation row shorthand, ala0..ala7, setting all four switches
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    kappa: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    init_lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    init_hi: Option<f64>,
    /// Confine lightness to the scene's own range
    #[arg(long, overrides_with = "no_range")]
    range: bool,
    #[arg(long, overrides_with = "range")]
    no_range: bool,
    /// Slope-magnitude regularizer
    #[arg(long, overrides_with = "no_dist")]
    dist: bool,
    #[arg(long, overrides_with = "dist")]
    no_dist: bool,
    /// Allow negative slopes
    #[arg(long, overrides_with = "mono")]
    non_mono: bool,
    #[arg(long, overrides_with = "non_mono")]
    mono: bool,
    /// Random slope initialization
    #[arg(long, overrides_with = "no_rand")]
    rand: bool,
    #[arg(long, overrides_with = "rand")]
    no_rand: bool,
    /// Worker threads; 0 uses every core
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus to score
    #[arg(long, conflicts_with = "attack_dir", required_unless_present = "attack_dir")]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Score lightness-shifted copies instead of the clean split
    #[arg(long)]
    corrupted: bool,
    /// Comma-separated lightness shifts used with --corrupted
    #[arg(long, allow_hyphen_values = true)]
    levels: Option<String>,
    /// Output directory of `attack`; re-scores its adversarial PNGs
    #[arg(long)]
    attack_dir: Option<PathBuf>,
    /// Metrics JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Generated corpus with train/ and test/ splits
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Comma-separated lightness shifts
    #[arg(long, allow_hyphen_values = true)]
    levels: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn put<T: ToString>(layer: &mut Layer, key: &str, v: Option<T>) {
    if let Some(v) = v {
        layer.insert(key.to_string(), v.to_string());
    }
}

fn tri(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl AttackFlags {
    fn layer(&self) -> Layer {
        let mut l = Layer::new();
        put(&mut l, "variant", self.variant.clone());
        put(&mut l, "segments", self.segments);
        put(&mut l, "iters", self.iters);
        put(&mut l, "alpha", self.alpha);
        put(&mut l, "beta", self.beta);
        put(&mut l, "kappa", self.kappa);
        put(&mut l, "init_lo", self.init_lo);
        put(&mut l, "init_hi", self.init_hi);
        put(&mut l, "range", tri(self.range, self.no_range));
        put(&mut l, "dist", tri(self.dist, self.no_dist));
        put(&mut l, "non_mono", tri(self.non_mono, self.mono));
        put(&mut l, "rand", tri(self.rand, self.no_rand));
        put(&mut l, "workers", self.workers);
        put(&mut l, "seed", self.seed);
        l
    }
}

impl TrainFlags {
    fn layer(&self) -> Layer {
        let mut l = Layer::new();
        put(&mut l, "epochs", self.epochs);
        put(&mut l, "lr", self.lr);
        put(&mut l, "batch_size", self.batch_size);
        put(&mut l, "momentum", self.momentum);
        put(&mut l, "lr_decay", self.lr_decay);
        l
    }
}

/// Settings for one command: config file, then environment, then flags.
fn layered(config: &Option<PathBuf>, keys: &[&str], flags: Layer) -> Result<Layer, CliError> {
    let file = match config {
        Some(p) => settings::read_config(p)?,
        None => Layer::new(),
    };
    let env = settings::env_layer(keys);
    settings::resolve(keys, &[&file, &env, &flags])
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = &cli.config;
    match cli.command {
        Command::GenCorpus(a) => {
            let mut flags = Layer::new();
            put(&mut flags, "classes", a.classes);
            put(&mut flags, "per_class", a.per_class);
            put(&mut flags, "size", a.size);
            put(&mut flags, "seed", a.seed);
            let s = layered(cfg, settings::CORPUS_KEYS, flags)?;
            commands::gen_corpus(&settings::corpus_spec(&s)?, &a.out)
        }
        Command::Train(a) => {
            let mut flags = a.train.layer();
            put(&mut flags, "arch", a.arch.clone());
            put(&mut flags, "classes", a.classes);
            put(&mut flags, "seed", a.seed);
            let s = layered(cfg, settings::TRAIN_KEYS, flags)?;
            commands::train(&s, &a.corpus, &a.out)
        }
        Command::Attack(a) => {
            let s = layered(cfg, settings::ATTACK_KEYS, a.attack.layer())?;
            let (config, workers) = settings::attack_config(&s)?;
            commands::attack(&a.model, &a.corpus, a.split, &config, workers, &a.out)
        }
        Command::Eval(a) => {
            let s = layered(cfg, settings::CORRUPT_KEYS, {
                let mut l = Layer::new();
                put(&mut l, "levels", a.levels.clone());
                l
            })?;
            let levels = s.get("levels").map(|v| settings::parse_levels(v)).transpose()?;
            match (&a.corpus, &a.attack_dir) {
                (_, Some(dir)) => commands::eval_attack_dir(&a.model, dir, &a.out),
                (Some(corpus), None) => {
                    commands::eval_corpus(&a.model, corpus, a.split, a.corrupted.then_some(levels), &a.out)
                }
                (None, None) => Err(CliError::usage("one of --corpus or --attack-dir is required")),
            }
        }
        Command::Transfer(a) => {
            let s = layered(cfg, settings::ATTACK_KEYS, a.attack.layer())?;
            let (config, workers) = settings::attack_config(&s)?;
            commands::transfer(&a.models, &a.corpus, a.split, &config, workers, &a.out)
        }
        Command::Ablation(a) => {
            let s = layered(cfg, settings::ATTACK_KEYS, a.attack.layer())?;
            let (config, workers) = settings::attack_config(&s)?;
            commands::ablation(&a.model, &a.corpus, a.split, &config, workers, &a.out)
        }
        Command::Finetune(a) => {
            let s = layered(cfg, settings::ATTACK_KEYS, a.attack.layer())?;
            let (config, workers) = settings::attack_config(&s)?;
            // the attack and training both read `seed`; training keeps its own default
            let mut train_keys: Vec<&str> = settings::TRAIN_KEYS.to_vec();
            train_keys.retain(|k| *k != "seed" && *k != "classes" && *k != "arch");
            let t = layered(cfg, &train_keys, a.train.layer())?;
            let train = settings::train_config(&t, ala_core::model::TrainConfig::fine_tune())?;
            commands::finetune(&a.model, &a.corpus, &config, workers, &train, &a.out)
        }
        Command::Corrupt(a) => {
            let mut flags = Layer::new();
            put(&mut flags, "levels", a.levels.clone());
            let s = layered(cfg, settings::CORRUPT_KEYS, flags)?;
            let levels = match s.get("levels") {
                Some(v) => settings::parse_levels(v)?,
                None => ala_core::dataset::DEFAULT_CORRUPTION_LEVELS.to_vec(),
            };
            commands::corrupt(&a.corpus, a.split, &levels, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
