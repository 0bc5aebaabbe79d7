//! `covis`: embed users and items from sparse rating data into a Euclidean
//! space, compare sampler variants on held-out ratings, generate synthetic
//! instances, and render 2-D embeddings as SVG scatter plots.

mod config;
mod plot;

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use covis_core::eval::{
    generate_synthetic, run_experiment, EvalError, EvalReport, SplitSpec, SyntheticSpec, Variant,
};
use covis_core::imputation::{fill_linear_regression, ImputationError};
use covis_core::ratings::{load_labels, RatingMatrix, RatingScale, RatingsError};
use covis_core::sampler::{
    run_em, sample_prior, Embedding, RunReport, SamplerConfig, SamplerError,
};

use crate::config::FileConfig;
use crate::plot::PlotOptions;

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Plot(String),
    #[error(transparent)]
    Ratings(#[from] RatingsError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
}

#[derive(Parser)]
#[command(name = "covis", version, about = "Euclidean embeddings of collaborative rating data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an embedding from a ratings CSV
    Embed(EmbedArgs),
    /// Compare sampler variants over replicated train/test splits
    Eval(EvalArgs),
    /// Generate a planted synthetic ratings instance
    Synth(SynthArgs),
    /// Render a 2-D embedding as an SVG scatter plot
    Plot(PlotArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Ratings CSV with header `user,item,rating`
    #[arg(long)]
    input: PathBuf,
    /// Directory for output artifacts
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Wall-clock budget in seconds; 0 disables the budget
    #[arg(long)]
    budget_secs: Option<f64>,
    /// Disable the annealing schedule
    #[arg(long)]
    no_anneal: bool,
    /// Observation noise; defaults to a preset picked from the rating levels
    #[arg(long)]
    sigma_r: Option<f64>,
    /// Smallest raw rating on the input scale
    #[arg(long)]
    scale_min: Option<f64>,
    /// Largest raw rating on the input scale
    #[arg(long)]
    scale_max: Option<f64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sampler variant
    #[arg(long, value_parser = parse_variant_arg)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Variant to evaluate (repeatable); default compares all four
    #[arg(long = "variant", value_parser = parse_variant_arg)]
    variants: Vec<Variant>,
    /// Number of train/test replicas
    #[arg(long)]
    replicas: Option<usize>,
    /// Number of training items drawn per replica
    #[arg(long = "train-size")]
    train_size: Option<usize>,
    /// Number of training users; defaults to scaling with --train-size
    #[arg(long)]
    train_users: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    users: usize,
    #[arg(long, default_value_t = 20)]
    items: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Number of rating levels
    #[arg(long, default_value_t = 5)]
    levels: usize,
    /// Keep probability per user-item cell
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    /// Gaussian noise added before re-quantization
    #[arg(long, default_value_t = 0.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Embedding TSV produced by `embed`
    #[arg(long)]
    embedding: PathBuf,
    /// Item category CSV with header `item,category`
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output SVG path
    #[arg(long, default_value = "plot.svg")]
    output: PathBuf,
    /// JSON config file (plot_size, plot_point_radius)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Canvas size in pixels
    #[arg(long)]
    size: Option<f64>,
    /// Item marker radius in pixels
    #[arg(long)]
    point_radius: Option<f64>,
}

fn parse_variant_arg(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| "expected mcmc, mcmc-sa, mcmc-reg, or random".to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Embed(args) => cmd_embed(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

// ---------------------------------------------------------------- helpers

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            FileConfig::parse(&text).map_err(|message| CliError::Config {
                path: p.display().to_string(),
                message,
            })
        }
    }
}

fn write_file<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    fill(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
        writeln!(w)
    })
}

fn resolve_scale(common: &CommonArgs, file: &FileConfig) -> Result<RatingScale, CliError> {
    let min = common.scale_min.or(file.scale_min).unwrap_or(0.0);
    let max = common.scale_max.or(file.scale_max).unwrap_or(1.0);
    Ok(RatingScale::new(min, max, 0.0)?)
}

/// Defaults, then config file, then flags; the observation-noise preset fires
/// only when neither source pins `sigma_r`.
fn resolve_sampler(
    common: &CommonArgs,
    file: &FileConfig,
    matrix: &RatingMatrix,
) -> Result<SamplerConfig, CliError> {
    let mut c = SamplerConfig::new(2);
    file.apply_sampler(&mut c);
    if let Some(d) = common.dim {
        c.dim = d;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(b) = common.budget_secs {
        c.budget_secs = if b == 0.0 { None } else { Some(b) };
    }
    if common.no_anneal {
        c.anneal = false;
    }
    if let Some(s) = common.sigma_r {
        c.sigma_r = s;
    } else if file.sigma_r.is_none() {
        c.sigma_r = SamplerConfig::sigma_r_preset(matrix.distinct_levels()?.len());
    }
    c.validate()?;
    Ok(c)
}

fn variant_from_name(name: &str, config_path: Option<&Path>) -> Result<Variant, CliError> {
    Variant::parse(name).ok_or_else(|| CliError::Config {
        path: config_path
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<none>".into()),
        message: format!("unknown variant `{name}` (expected mcmc, mcmc-sa, mcmc-reg, or random)"),
    })
}

// ---------------------------------------------------------------- commands

#[derive(Serialize)]
struct EmbedReport<'a> {
    input: String,
    scale: RatingScale,
    variant: Variant,
    config: &'a SamplerConfig,
    /// `null` for the random baseline, which fits nothing.
    run: Option<&'a RunReport>,
}

fn cmd_embed(args: EmbedArgs) -> Result<(), CliError> {
    let file = load_file_config(args.common.config.as_deref())?;
    let scale = resolve_scale(&args.common, &file)?;
    let matrix = RatingMatrix::load_csv(&args.common.input, &scale)?;
    let mut config = resolve_sampler(&args.common, &file, &matrix)?;
    let variant = match args.variant {
        Some(v) => v,
        None => match &file.variant {
            Some(name) => variant_from_name(name, args.common.config.as_deref())?,
            None => Variant::McmcSa,
        },
    };
    // The plain and annealed variants fix the schedule themselves.
    match variant {
        Variant::Mcmc => config.anneal = false,
        Variant::McmcSa => config.anneal = true,
        Variant::McmcReg | Variant::Random => {}
    }

    let dir = &args.common.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let started = Instant::now();
    let outcome = match variant {
        Variant::Random => None,
        Variant::McmcReg => {
            let dense = fill_linear_regression(&matrix)?;
            Some(run_em(&dense.to_rating_matrix(), &config)?)
        }
        Variant::Mcmc | Variant::McmcSa => Some(run_em(&matrix, &config)?),
    };
    let embedding = match &outcome {
        Some(o) => o.embedding.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            sample_prior(&config, matrix.user_count(), matrix.item_count(), &mut rng)
        }
    };
    eprintln!(
        "{}: embedded {} users and {} items in {:.1} s",
        variant.label(),
        matrix.user_count(),
        matrix.item_count(),
        started.elapsed().as_secs_f64()
    );

    write_file(&dir.join("embedding.tsv"), |w| {
        embedding.write_tsv(w, matrix.user_ids(), matrix.item_ids())
    })?;
    write_file(&dir.join("index_map.csv"), |w| matrix.write_index_map(w))?;
    let report = EmbedReport {
        input: args.common.input.display().to_string(),
        scale,
        variant,
        config: &config,
        run: outcome.as_ref().map(|o| &o.report),
    };
    write_json(&dir.join("report.json"), &report)
}

#[derive(Serialize)]
struct CliEvalReport<'a> {
    input: String,
    scale: RatingScale,
    config: &'a SamplerConfig,
    split: &'a SplitSpec,
    experiment: &'a EvalReport,
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = load_file_config(args.common.config.as_deref())?;
    let scale = resolve_scale(&args.common, &file)?;
    let matrix = RatingMatrix::load_csv(&args.common.input, &scale)?;
    let config = resolve_sampler(&args.common, &file, &matrix)?;

    let mut split = SplitSpec::new(config.seed);
    file.apply_split(&mut split);
    if let Some(s) = args.common.seed {
        split.seed = s;
    }
    if let Some(r) = args.replicas {
        split.replicas = r;
    }
    if let Some(t) = args.train_size {
        split.train_items = Some(t);
    }
    if let Some(u) = args.train_users {
        split.train_users = Some(u);
    }

    let variants: Vec<Variant> = if !args.variants.is_empty() {
        args.variants.clone()
    } else if let Some(names) = &file.variants {
        names
            .iter()
            .map(|n| variant_from_name(n, args.common.config.as_deref()))
            .collect::<Result<_, _>>()?
    } else {
        // Always keep the prior-draw control in the default comparison.
        vec![Variant::Mcmc, Variant::McmcSa, Variant::McmcReg, Variant::Random]
    };
    let lanes: Vec<(Variant, SamplerConfig)> =
        variants.iter().map(|v| (*v, config.clone())).collect();

    let report = run_experiment(&matrix, &split, &lanes)?;
    for v in &report.variants {
        println!("{:>8}: mean tau {:+.4} (std {:.4})", v.variant.label(), v.mean, v.std);
    }
    println!("{:>8}: mean tau {:+.4}", "ideal", report.ideal_mean);
    if !report.dropped_users.is_empty() || !report.dropped_items.is_empty() {
        eprintln!(
            "dropped {} users and {} items across replicas (no training ratings)",
            report.dropped_users.len(),
            report.dropped_items.len()
        );
    }
    eprintln!(
        "{} replicas x {} variants in {:.1} s",
        report.replicas,
        report.variants.len(),
        report.wall_secs
    );

    let dir = &args.common.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let wrapped = CliEvalReport {
        input: args.common.input.display().to_string(),
        scale,
        config: &config,
        split: &split,
        experiment: &report,
    };
    write_json(&dir.join("eval_report.json"), &wrapped)?;
    write_file(&dir.join("eval_report.csv"), |w| report.write_csv(w))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        users: args.users,
        items: args.items,
        dim: args.dim,
        levels: args.levels,
        density: args.density,
        noise_sd: args.noise_sd,
        seed: args.seed,
    };
    let synthetic = generate_synthetic(&spec)?;
    let dir = &args.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("ratings.csv"), |w| synthetic.matrix.write_csv(w))?;
    write_file(&dir.join("truth_embedding.tsv"), |w| {
        synthetic
            .embedding
            .write_tsv(w, synthetic.matrix.user_ids(), synthetic.matrix.item_ids())
    })?;
    write_file(&dir.join("truth_function.txt"), |w| {
        writeln!(w, "{}", synthetic.rating_function.to_line())
    })?;
    eprintln!(
        "planted {} ratings over {} users x {} items ({} levels)",
        synthetic.matrix.rating_count(),
        args.users,
        args.items,
        args.levels
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let reader = fs::File::open(&args.embedding).map_err(io_err(&args.embedding))?;
    let (embedding, user_ids, item_ids) = Embedding::read_tsv(BufReader::new(reader))?;
    let labels = match &args.labels {
        Some(p) => Some(load_labels(p)?),
        None => None,
    };
    let opts = PlotOptions {
        size: args.size.or(file.plot_size).unwrap_or(PlotOptions::default().size),
        point_radius: args
            .point_radius
            .or(file.plot_point_radius)
            .unwrap_or(PlotOptions::default().point_radius),
    };
    let rendered = plot::render(&embedding, &user_ids, &item_ids, labels.as_deref(), &opts)
        .map_err(CliError::Plot)?;
    for w in &rendered.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    write_file(&args.output, |w| w.write_all(rendered.svg.as_bytes()))?;
    eprintln!(
        "plotted {} users and {} items to {}",
        user_ids.len(),
        item_ids.len(),
        args.output.display()
    );
    Ok(())
}
