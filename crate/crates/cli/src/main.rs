mod config;

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use falsify_core::calibrate::{calibrate_all, BoundsFile, CalibrationConfig};
use falsify_core::cluster::{self, ClusterModel, FeatureMatrix, KMeansConfig};
use falsify_core::harness::falsify::subsample;
use falsify_core::harness::{
    load_dataset, run_campaign, synthetic, write_dataset, ClusterStatus, Dataset, DisableRule,
    FalsifyConfig, FalsifyReport, ModelHandle, OptimizerKind, Scorer,
};
use falsify_core::optimize::DEConfig;
use falsify_core::{PerturbationKind, Registry, ThresholdSet};

use config::required;

#[derive(Parser)]
#[command(
    name = "falsify",
    version,
    about = "Search for perturbation chains that break a segmentation model"
)]
struct Cli {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find per-parameter strength bounds at a target deterioration.
    Calibrate(CalibrateArgs),
    /// Group images by appearance.
    Cluster(ClusterArgs),
    /// Run the optimizer on every cluster and write a report directory.
    Falsify(FalsifyArgs),
    /// Print a report written by `falsify`.
    Report(ReportArgs),
    /// Write a synthetic dataset.
    GenSynthetic(GenArgs),
}

fn parse_kind(s: &str) -> Result<PerturbationKind, String> {
    s.parse().map_err(|e: falsify_core::Error| e.to_string())
}

fn parse_rule(s: &str) -> Result<DisableRule, String> {
    s.parse().map_err(|e: falsify_core::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "de" | "differential_evolution" => Ok(OptimizerKind::DifferentialEvolution),
        "random" | "random_search" => Ok(OptimizerKind::RandomSearch),
        _ => Err(format!("unknown optimizer `{s}` (expected de or random)")),
    }
}

#[derive(Args, Default, Serialize, Deserialize)]
#[serde(default)]
struct CalibrateArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `builtin` or a shell command speaking the wire protocol.
    #[arg(long)]
    model: Option<String>,
    /// Output bounds JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid points per direction [default: 16].
    #[arg(long)]
    grid: Option<usize>,
    /// Target mean deterioration [default: 0.01].
    #[arg(long)]
    target: Option<f64>,
    /// Refinement measurements inside the bracketing interval; 0 keeps the
    /// linear interpolation [default: 10].
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Perturbation seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Calibrate on a fixed random subset of this many images.
    #[arg(long)]
    subsample: Option<usize>,
    /// Registry JSON replacing the built-in perturbation set.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Record perturbations as disabled in the bounds file.
    #[arg(long, value_parser = parse_kind)]
    disable: Option<Vec<PerturbationKind>>,
    /// Per-request model timeout in seconds [default: 30].
    #[arg(long)]
    timeout: Option<f64>,
}

#[derive(Args, Default, Serialize, Deserialize)]
#[serde(default)]
struct ClusterArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of clusters [default: 30].
    #[arg(long)]
    k: Option<usize>,
    /// Output assignment CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use these features instead of extracting them from the dataset.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Also write the extracted features.
    #[arg(long)]
    features_out: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Reduced dimension [default: 10].
    #[arg(long)]
    dim: Option<usize>,
    /// [default: 300]
    #[arg(long)]
    max_iter: Option<usize>,
    /// Plain Euclidean centroids instead of unit-length ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    euclidean: Option<bool>,
}

#[derive(Args, Default, Serialize, Deserialize)]
#[serde(default)]
struct FalsifyArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `builtin` or a shell command speaking the wire protocol.
    #[arg(long)]
    model: Option<String>,
    /// Bounds JSON written by `calibrate`.
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Assignment CSV; without it all images form cluster 0.
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Objective evaluations per cluster [default: 5000].
    #[arg(long)]
    budget: Option<usize>,
    /// Chain length [default: 6].
    #[arg(long)]
    k_chain: Option<usize>,
    /// `name` or `name@id,id,...`; repeatable.
    #[arg(long, value_parser = parse_rule)]
    disable: Option<Vec<DisableRule>>,
    /// Seed for the optimizer and the perturbations [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 30]
    #[arg(long)]
    population: Option<usize>,
    /// Differential weight F [default: 0.5].
    #[arg(long)]
    differential_weight: Option<f64>,
    /// Evaluate each cluster on a fixed random subset of this many images.
    #[arg(long)]
    subsample: Option<usize>,
    /// `de` or `random` [default: de].
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-request model timeout in seconds [default: 30].
    #[arg(long)]
    timeout: Option<f64>,
}

#[derive(Clone, Copy, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    #[default]
    Md,
    Json,
}

#[derive(Args, Default, Serialize, Deserialize)]
#[serde(default)]
struct ReportArgs {
    /// Report directory.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    /// [default: md]
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenArgs {
    /// Images per style [default: 50].
    #[arg(long)]
    n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// plain, dark, bright, textured, or mixed (all three non-plain
    /// styles) [default: plain].
    #[arg(long)]
    style: Option<String>,
}

fn timeout(secs: Option<f64>) -> Result<Duration> {
    match secs {
        None => Ok(falsify_core::harness::model::DEFAULT_TIMEOUT),
        Some(s) if s > 0.0 && s.is_finite() => Ok(Duration::from_secs_f64(s)),
        Some(s) => bail!("timeout must be positive, got {s}"),
    }
}

fn open_model(spec: &str, secs: Option<f64>) -> Result<ModelHandle> {
    ModelHandle::open(spec, timeout(secs)?).with_context(|| format!("starting model `{spec}`"))
}

fn load_registry(path: Option<&Path>) -> Result<Registry> {
    match path {
        None => Ok(Registry::builtin()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Registry::from_json(&text).with_context(|| format!("parsing registry {}", p.display()))
        }
    }
}

fn load(manifest: &Path) -> Result<Dataset> {
    load_dataset(manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let dataset = load(&required(a.dataset, "dataset")?)?;
    let model = open_model(&required(a.model, "model")?, a.timeout)?;
    let out = required(a.out, "out")?;
    let defaults = CalibrationConfig::default();
    let cfg = CalibrationConfig {
        grid_points: a.grid.unwrap_or(defaults.grid_points),
        target: a.target.unwrap_or(defaults.target),
        refine_steps: a.refine_steps.unwrap_or(defaults.refine_steps),
    };
    let registry =
        load_registry(a.registry.as_deref())?.with_disabled(a.disable.unwrap_or_default());
    let seed = a.seed.unwrap_or(0);
    let samples = subsample(dataset.samples.iter().collect(), a.subsample, seed);
    let scorer = Scorer::new(samples, &model, ThresholdSet::default(), seed)?;
    log::info!(
        "calibrating on {} images, mean baseline IoU {:.4}",
        scorer.samples().len(),
        scorer.mean_baseline()
    );
    let bounds = calibrate_all(&registry, &cfg, &scorer)?;
    bounds.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let features = match (&a.features, &a.dataset) {
        (Some(f), _) => FeatureMatrix::read_csv(f)
            .with_context(|| format!("reading features {}", f.display()))?,
        (None, Some(d)) => FeatureMatrix::from_dataset(&load(d)?)?,
        (None, None) => bail!("need --dataset or --features"),
    };
    if let Some(p) = &a.features_out {
        features.write_csv(p)?;
    }
    let n = features.len();
    let mut dim = a
        .dim
        .unwrap_or(cluster::DEFAULT_OUT_DIM)
        .min(features.dim());
    if n <= dim {
        log::warn!(
            "only {n} images; reducing to {} dimensions instead of {dim}",
            n.saturating_sub(1).max(1)
        );
        dim = n.saturating_sub(1).max(1);
    }
    let cfg = KMeansConfig {
        k: a.k.unwrap_or(cluster::DEFAULT_K),
        seed: a.seed.unwrap_or(0),
        max_iter: a.max_iter.unwrap_or(cluster::DEFAULT_MAX_ITER),
        cosine: !a.euclidean.unwrap_or(false),
    };
    let model = ClusterModel::fit(&features, dim, &cfg)?;
    log::info!(
        "k-means: {} iterations, inertia {:.6}",
        model.kmeans.iterations,
        model.kmeans.inertia
    );
    cluster::write_assignments(&out, model.assignments())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn falsify(a: FalsifyArgs) -> Result<()> {
    let dataset = load(&required(a.dataset, "dataset")?)?;
    let model = open_model(&required(a.model, "model")?, a.timeout)?;
    let bounds_path = required(a.bounds, "bounds")?;
    let bounds = BoundsFile::read(&bounds_path)
        .with_context(|| format!("reading bounds {}", bounds_path.display()))?;
    let out = required(a.out, "out")?;
    let registry = load_registry(a.registry.as_deref())?;
    let assignments = match &a.clusters {
        Some(p) => cluster::read_assignments(p)
            .with_context(|| format!("reading clusters {}", p.display()))?,
        None => dataset.ids().map(|id| (id.to_owned(), 0)).collect(),
    };
    let seed = a.seed.unwrap_or(0);
    let defaults = DEConfig::default();
    let cfg = FalsifyConfig {
        de: DEConfig {
            population_size: a.population.unwrap_or(defaults.population_size),
            differential_weight: a
                .differential_weight
                .unwrap_or(defaults.differential_weight),
            budget: a.budget.unwrap_or(defaults.budget),
            rng_seed: seed,
        },
        k_chain: a.k_chain.unwrap_or(falsify_core::genome::DEFAULT_CHAIN_LEN),
        seed,
        subsample: a.subsample,
        optimizer: a.optimizer.unwrap_or_default(),
        taus: ThresholdSet::default(),
    };
    cfg.de.validate()?;
    let rules = a.disable.unwrap_or_default();
    let campaign = run_campaign(
        &dataset,
        &model,
        &registry,
        &bounds.bounds,
        &assignments,
        &cfg,
        &rules,
    )?;
    campaign
        .write_dir(&out)
        .with_context(|| format!("writing report to {}", out.display()))?;
    let failed = campaign
        .report
        .clusters
        .iter()
        .filter(|e| matches!(e.status, ClusterStatus::Failed { .. }))
        .count();
    println!(
        "wrote {} ({} clusters, {failed} failed)",
        out.display(),
        campaign.report.clusters.len()
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let dir = required(a.input, "in")?;
    let report = FalsifyReport::read_dir(&dir)
        .with_context(|| format!("reading report in {}", dir.display()))?;
    match a.format.unwrap_or_default() {
        Format::Md => print!("{}", report.to_markdown()),
        Format::Json => print!("{}", report.to_json()?),
    }
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let n = a.n.unwrap_or(50);
    let seed = a.seed.unwrap_or(0);
    let dataset = match a.style.as_deref().unwrap_or("plain") {
        "mixed" => synthetic::generate_styles(n, seed)?,
        style => synthetic::generate(&synthetic::SyntheticConfig::preset(style)?, n, seed)?,
    };
    let manifest = write_dataset(&out, &dataset)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn with_config<T: Serialize + serde::de::DeserializeOwned>(
    flags: T,
    file: Option<&Path>,
    name: &str,
) -> Result<T> {
    let file = file.map(|p| config::load(p, name)).transpose()?;
    config::merge(flags, file)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let file = cli.config.as_deref();
    match cli.command {
        Command::Calibrate(a) => calibrate(with_config(a, file, "calibrate")?),
        Command::Cluster(a) => cluster(with_config(a, file, "cluster")?),
        Command::Falsify(a) => falsify(with_config(a, file, "falsify")?),
        Command::Report(a) => report(with_config(a, file, "report")?),
        Command::GenSynthetic(a) => gen_synthetic(with_config(a, file, "gen_synthetic")?),
    }
}
