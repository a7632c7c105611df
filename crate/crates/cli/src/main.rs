use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tractgraph_core::eval::metrics_table;
use tractgraph_core::geometry::{read_distance_csv, write_distance_csv};
use tractgraph_core::graphbuild::{read_edge_list, read_region_table, write_edge_list};
use tractgraph_core::interpret::{read_attention_csv, read_tract_map, AttentionReport};
use tractgraph_core::model::{read_checkpoint, TrainConfig};
use tractgraph_core::synth::SynthConfig;
use tractgraph_core::features::write_cohort_csv;
use tractgraph_core::{Error, Result, Variant};
use tractgraph_cli::config::{
    GraphKind, RunConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_K, DEFAULT_TOP,
    DEFAULT_TRAIN_FRACTION,
};
use tractgraph_cli::pipeline::{self, create_dir};
use tractgraph_cli::{describe, exit_code};

// The system allocator returns large tensor buffers to the kernel on every
// free; training spends most of its time in mmap otherwise.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Graph CNN classification from white-matter fiber cluster features.
#[derive(Parser)]
#[command(name = "tractgraph", version)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pairwise cluster distances of an atlas, as CSV.
    Distances(DistancesArgs),
    /// Cluster graph as an edge list.
    BuildGraph(BuildGraphArgs),
    /// Cohort feature CSV and train/test split.
    Features(FeaturesArgs),
    /// Train a model; writes model.ckpt and train_log.csv.
    Train(TrainArgs),
    /// Test-split metrics and attention maps of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Most attended clusters and their tracts.
    Interpret(InterpretArgs),
    /// Synthetic atlas and cohort with a planted class signal.
    Synth(SynthArgs),
    /// Every stage end to end, with a summary report.json.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct DistancesArgs {
    /// Directory of cluster_<id>.txt files, or a manifest listing them.
    #[arg(long)]
    atlas: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Resample each streamline to this many points first.
    #[arg(long)]
    resample: Option<usize>,
    /// Worker threads; the result does not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// wmg (geometric kNN) or gmg (shared regions).
    #[arg(long = "type", default_value = "wmg")]
    kind: String,
    /// Neighbors per cluster for wmg.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Distance CSV (wmg).
    #[arg(long)]
    distances: Option<PathBuf>,
    /// Region table CSV (gmg).
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Output edge list.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    /// Cohort CSV, or with --clusters a manifest `subject_id,label,dir`.
    #[arg(long)]
    cohort: PathBuf,
    /// Cluster count; reads --cohort as a manifest of subject directories.
    #[arg(long)]
    clusters: Option<usize>,
    /// Split CSV `subject_id,split`; drawn from --seed when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Training share of each class when drawing a split.
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes cohort.csv and split.csv here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    /// Edge list; required for tractgraphcnn.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// tractgraphcnn or cnn1d.
    #[arg(long, default_value = "tractgraphcnn")]
    variant: String,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long = "lr", default_value = "1e-5")]
    learning_rate: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// adamax, or adam for sensitivity checks.
    #[arg(long, default_value = "adamax")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cohort: CohortArgs,
    /// Edge list the model was trained with (tractgraphcnn).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Graph type, used only to label the metrics table.
    #[arg(long, default_value = "wmg")]
    graph_type: String,
    /// Seed for drawing the split when --split is absent.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes metrics.json, metrics.txt and attention.csv here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InterpretArgs {
    /// Per-subject attention CSV from `evaluate`.
    #[arg(long)]
    attention: PathBuf,
    /// CSV `cluster_id,tract_id,tract_name`.
    #[arg(long)]
    tract_map: PathBuf,
    /// Number of top clusters.
    #[arg(long, default_value_t = DEFAULT_TOP)]
    top: usize,
    /// Writes attention_report.json and attention_report.csv here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    clusters: usize,
    #[arg(long, default_value_t = 10)]
    tracts: usize,
    #[arg(long, default_value_t = 12)]
    regions: usize,
    #[arg(long, default_value_t = 400)]
    subjects: usize,
    /// Tracts whose clusters all carry the signal, comma separated.
    #[arg(long, value_delimiter = ',')]
    planted_tracts: Vec<usize>,
    /// Individual signal clusters, comma separated; adds to --planted-tracts.
    #[arg(long, value_delimiter = ',')]
    planted_clusters: Vec<usize>,
    /// Class 1 shift on planted clusters, in noise standard deviations.
    #[arg(long, default_value_t = 2.0)]
    effect_size: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_sd: f64,
    /// Chance that a cluster is absent from a subject.
    #[arg(long, default_value_t = 0.02)]
    absent_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write per-subject cluster files and a subjects.csv manifest.
    #[arg(long)]
    subject_dirs: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Atlas directory or manifest (needed for wmg).
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// Region table CSV (needed for gmg).
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Split CSV; drawn from the seed when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    tract_map: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// wmg or gmg [default: wmg]
    #[arg(long)]
    graph: Option<String>,
    /// Neighbors per cluster for wmg [default: 20]
    #[arg(long)]
    k: Option<usize>,
    /// Top clusters reported [default: 50]
    #[arg(long)]
    top: Option<usize>,
    /// [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 1e-5]
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training share when drawing a split [default: 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// tractgraphcnn or cnn1d [default: tractgraphcnn]
    #[arg(long)]
    variant: Option<String>,
    /// adamax, or adam for sensitivity checks [default: adamax]
    #[arg(long)]
    optimizer: Option<String>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Resample atlas streamlines to this many points [default: off]
    #[arg(long)]
    resample: Option<usize>,
    /// Distance worker threads [default: 1]
    #[arg(long)]
    workers: Option<usize>,
}

impl RunAllArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let here = Path::new("");
        let mut set = |key: &str, value: Option<String>| match value {
            Some(v) => cfg.set(key, &v, here),
            None => Ok(()),
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        set("atlas", path(&self.atlas))?;
        set("regions", path(&self.regions))?;
        set("cohort", path(&self.cohort))?;
        set("split", path(&self.split))?;
        set("tract_map", path(&self.tract_map))?;
        set("out_dir", path(&self.out_dir))?;
        set("graph", self.graph.clone())?;
        set("k", self.k.map(|v| v.to_string()))?;
        set("top", self.top.map(|v| v.to_string()))?;
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("learning_rate", self.learning_rate.map(|v| format!("{v:?}")))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("train_fraction", self.train_fraction.map(|v| format!("{v:?}")))?;
        set("variant", self.variant.clone())?;
        set("optimizer", self.optimizer.clone())?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("resample", self.resample.map(|v| v.to_string()))?;
        set("workers", self.workers.map(|v| v.to_string()))?;
        Ok(cfg)
    }
}

fn load_cohort(args: &CohortArgs, seed: u64) -> Result<tractgraph_core::Cohort> {
    let subjects = pipeline::load_subjects(&args.cohort, args.clusters)?;
    pipeline::split_cohort(subjects, args.split.as_deref(), args.train_fraction, seed)
}

fn load_graph(path: Option<&Path>) -> Result<Option<tractgraph_core::ClusterGraph>> {
    path.map(read_edge_list).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distances(a) => {
            let atlas = pipeline::load_atlas(&a.atlas, a.resample)?;
            let d = pipeline::compute_distances(&atlas, a.workers.max(1))?;
            write_distance_csv(&a.out, &d)
        }
        Command::BuildGraph(a) => {
            let kind: GraphKind = a.kind.parse()?;
            let dist = a.distances.as_deref().map(read_distance_csv).transpose()?;
            let regions = a.regions.as_deref().map(read_region_table).transpose()?;
            let g = pipeline::build_graph(kind, a.k, dist.as_ref(), regions.as_ref())?;
            write_edge_list(&a.out, &g)
        }
        Command::Features(a) => {
            let cohort = load_cohort(&a.cohort, a.seed)?;
            create_dir(&a.out_dir)?;
            write_cohort_csv(&a.out_dir.join("cohort.csv"), &cohort.subjects)?;
            pipeline::write_split(&a.out_dir.join("split.csv"), &cohort)
        }
        Command::Train(a) => {
            let variant: Variant = a.variant.parse()?;
            let cohort = load_cohort(&a.cohort, a.seed)?;
            let graph = load_graph(a.graph.as_deref())?;
            let cfg = TrainConfig {
                epochs: a.epochs,
                learning_rate: a.learning_rate,
                batch_size: a.batch_size,
                seed: a.seed,
                optimizer: a.optimizer.parse()?,
            };
            let trained = pipeline::train_model(&cohort, graph.as_ref(), variant, &cfg)?;
            create_dir(&a.out_dir)?;
            pipeline::write_split(&a.out_dir.join("split.csv"), &cohort)?;
            pipeline::write_trained(&a.out_dir, &trained)
        }
        Command::Evaluate(a) => {
            let ckpt = read_checkpoint(&a.checkpoint)?;
            let kind: GraphKind = a.graph_type.parse()?;
            let cohort = load_cohort(&a.cohort, a.seed)?;
            let graph = load_graph(a.graph.as_deref())?;
            let e = pipeline::evaluate(&ckpt, &cohort, graph.as_ref())?;
            create_dir(&a.out_dir)?;
            let method = pipeline::method_name(ckpt.config.variant, kind);
            pipeline::write_evaluation(&a.out_dir, &method, &e)?;
            print!("{}", metrics_table(&[(method, e.metrics)]));
            Ok(())
        }
        Command::Interpret(a) => {
            let (_, attention) = read_attention_csv(&a.attention)?;
            let map = read_tract_map(&a.tract_map)?;
            let report = AttentionReport::build(&attention, a.top, &map)?;
            create_dir(&a.out_dir)?;
            report.write_json(&a.out_dir.join("attention_report.json"))?;
            report.write_csv(&a.out_dir.join("attention_report.csv"), &map)?;
            for t in &report.tracts {
                println!("{}\t{}", t.tract, t.count);
            }
            Ok(())
        }
        Command::Synth(a) => {
            let mut cfg = SynthConfig {
                clusters: a.clusters,
                tracts: a.tracts,
                regions: a.regions,
                n_subjects: a.subjects,
                effect_size: a.effect_size,
                noise_sd: a.noise_sd,
                absent_fraction: a.absent_fraction,
                train_fraction: a.train_fraction,
                seed: a.seed,
                ..SynthConfig::default()
            };
            cfg.validate()?;
            cfg.plant_tracts(&a.planted_tracts);
            cfg.planted.extend(a.planted_clusters.iter().copied());
            cfg.validate()?;
            pipeline::write_synth(&cfg, &a.out_dir, a.subject_dirs)
        }
        Command::RunAll(a) => {
            let cfg = a.resolve()?;
            cfg.validate()?;
            let report = pipeline::run_all(&cfg)?;
            let out = cfg.out_dir.as_deref().expect("validated");
            let table = std::fs::read_to_string(out.join("metrics.txt")).map_err(|e| Error::Io {
                path: out.join("metrics.txt"),
                source: e,
            })?;
            print!("{table}");
            println!(
                "top {} clusters span {} tracts; report in {}",
                report.attention.top_clusters.len(),
                report.attention.tracts.len(),
                out.join("report.json").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", describe(&err));
            ExitCode::from(exit_code(err.kind()) as u8)
        }
    }
}
