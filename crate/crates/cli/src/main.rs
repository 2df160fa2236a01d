use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixopt_core::dataset::{generate_synthetic_suite, load_manifest, write_dataset, SplitSpec, SuiteSizes, SyntheticKind};
use mixopt_core::dro::{DroConfig, MixtureWeights, Provenance};
use mixopt_core::pipeline::{
    dro_stage, find_preprocess, prepare_data, read_preprocess, reference_stage, run_pipeline, subset_stage,
    weights_for, PipelineConfig, REFERENCE_FILE,
};
use mixopt_core::policy::{Checkpoint, DEFAULT_LEARNING_RATE};
use mixopt_core::preprocess::{PreprocessSettings, Scheme};
use mixopt_core::reference::{TrainConfig, DEFAULT_DELTA};
use mixopt_core::report::{read_weights, render_weight_table};
use mixopt_core::{Error, Result};

/// Domain mixture weights for imitation-learning datasets via group DRO
/// over excess discretized behavior-cloning loss.
#[derive(Parser)]
#[command(name = "mixopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen(GenArgs),
    /// Train the reference policy and select its checkpoint.
    TrainRef(TrainRefArgs),
    /// Learn mixture weights against a reference policy.
    Dro(DroArgs),
    /// Cut a dataset down according to mixture weights.
    Subset(SubsetArgs),
    /// Render weight files side by side.
    Report(ReportArgs),
    /// Run every stage from one config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Trajectories per domain.
    #[arg(long, default_value_t = SuiteSizes::default().trajectories)]
    trajectories: usize,
    /// Steps per trajectory.
    #[arg(long, default_value_t = SuiteSizes::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = SuiteSizes::default().state_dim)]
    state_dim: usize,
    #[arg(long, default_value_t = SuiteSizes::default().action_dim)]
    action_dim: usize,
}

/// Stage-one settings shared by `train-ref` and `dro`.
#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Bins per action dimension.
    #[arg(long)]
    bins: Option<usize>,
    /// Discretization covers [-range, range).
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

impl PreprocessArgs {
    fn resolve(&self, base: PreprocessSettings, seed: u64) -> PreprocessSettings {
        PreprocessSettings {
            scheme: self.scheme.unwrap_or(base.scheme),
            bins: self.bins.unwrap_or(base.bins),
            range: self.range.unwrap_or(base.range),
            split: SplitSpec {
                validation_fraction: self.val_fraction.unwrap_or(base.split.validation_fraction),
                seed,
            },
        }
    }
}

#[derive(Args)]
struct TrainRefArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().total_steps)]
    steps: u64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().eval_interval)]
    eval_interval: u64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = TrainConfig::default().hidden)]
    hidden: Vec<usize>,
    #[command(flatten)]
    preprocess: PreprocessArgs,
}

#[derive(Args)]
struct DroArgs {
    #[arg(long)]
    data: PathBuf,
    /// Reference checkpoint, or the `train-ref` output directory.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DroConfig::default().eta)]
    eta: f64,
    #[arg(long, default_value_t = DroConfig::default().smoothing)]
    smoothing: f64,
    /// Defaults to the reference checkpoint's step.
    #[arg(long, visible_alias = "dro-steps")]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DroConfig::default().per_domain_batch)]
    per_domain_batch: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Keep negative excess losses instead of clipping them at zero.
    #[arg(long)]
    no_clip: bool,
    /// Split seed; defaults to the one recorded beside the reference.
    #[arg(long)]
    split_seed: Option<u64>,
    #[command(flatten)]
    preprocess: PreprocessArgs,
}

#[derive(Args)]
struct SubsetArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Weight files; a row named `uniform` is the baseline, else the first.
    #[arg(long, num_args = 1.., required = true)]
    weights: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    names: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `dro_steps` from the config.
    #[arg(long)]
    dro_steps: Option<u64>,
}

fn reference_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(REFERENCE_FILE)
    } else {
        path.to_path_buf()
    }
}

fn gen(args: GenArgs) -> Result<()> {
    let sizes = SuiteSizes {
        trajectories: args.trajectories,
        steps: args.steps,
        state_dim: args.state_dim,
        action_dim: args.action_dim,
    };
    let domains = generate_synthetic_suite(args.kind, args.seed, &sizes)?;
    write_dataset(&args.out, &domains)?;
    println!("wrote {} domains to {}", domains.len(), args.out.display());
    Ok(())
}

fn train_ref(args: TrainRefArgs) -> Result<()> {
    let settings = args.preprocess.resolve(PreprocessSettings::default(), args.seed);
    let config = TrainConfig {
        total_steps: args.steps,
        eval_interval: args.eval_interval.min(args.steps),
        batch_size: args.batch_size,
        learning_rate: args.lr,
        seed: args.seed,
        delta: args.delta,
        hidden: args.hidden,
        ..TrainConfig::default()
    };
    let data = prepare_data(&args.data, &settings)?;
    let out = reference_stage(&data, &args.out, &config)?;
    println!(
        "selected step {} of {}; fingerprint {}",
        out.summary.selected_step, out.summary.final_step, out.summary.fingerprint
    );
    Ok(())
}

fn dro(args: DroArgs) -> Result<()> {
    let ref_path = reference_path(&args.reference);
    let reference = Checkpoint::load(&ref_path)?;
    let base = match find_preprocess(&ref_path) {
        Some(p) => read_preprocess(&p)?.settings,
        None => PreprocessSettings::default(),
    };
    let split_seed = args.split_seed.unwrap_or(base.split.seed);
    let settings = args.preprocess.resolve(base, split_seed);
    let config = DroConfig {
        eta: args.eta,
        smoothing: args.smoothing,
        clip_excess_at_zero: !args.no_clip,
        per_domain_batch: args.per_domain_batch,
        total_steps: args.steps.unwrap_or(reference.step),
        learning_rate: args.lr,
        seed: args.seed,
    };
    let data = prepare_data(&args.data, &settings)?;
    let out = dro_stage(&data, &reference, &args.out, &config)?;
    for (name, a) in out.summary.names.iter().zip(&out.summary.weights.alpha) {
        println!("{name}\t{a:.6}");
    }
    Ok(())
}

fn subset(args: SubsetArgs) -> Result<()> {
    let (_, domains) = load_manifest(&args.data)?;
    let names: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
    let weights = weights_for(&args.weights, &names)?;
    let report = subset_stage(&domains, &names, &weights, args.fraction, args.seed, None, &args.out)?;
    for d in &report.domains {
        println!("{}\t{} of {}", d.name, d.retained, d.size);
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    if args.weights.len() != args.names.len() {
        return Err(Error::Invalid(format!(
            "{} weight files but {} names",
            args.weights.len(),
            args.names.len()
        )));
    }
    let mut rows: Vec<(String, MixtureWeights)> = Vec::new();
    let mut domains: Option<Vec<String>> = None;
    for (path, name) in args.weights.iter().zip(&args.names) {
        let provenance = if name.eq_ignore_ascii_case("uniform") {
            Provenance::Uniform
        } else {
            Provenance::DroAveraged
        };
        let weights = match &domains {
            None => {
                let (n, w) = read_weights(path, provenance)?;
                domains = Some(n);
                w
            }
            Some(n) => MixtureWeights {
                provenance,
                ..weights_for(path, n)?
            },
        };
        rows.push((name.clone(), weights));
    }
    let table = render_weight_table(&rows, &domains.unwrap_or_default())?;
    table.write(&args.out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if args.dro_steps.is_some() {
        config.dro_steps = args.dro_steps;
    }
    let summary = run_pipeline(&config)?;
    println!(
        "selected reference step {}, {} DRO steps",
        summary.selected_reference_step, summary.dro_steps
    );
    println!("{:#}", summary.weights);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::TrainRef(a) => train_ref(a),
        Command::Dro(a) => dro(a),
        Command::Subset(a) => subset(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
