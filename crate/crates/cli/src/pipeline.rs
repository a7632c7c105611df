//! Stage functions shared by the subcommands and `run-all`.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use tractgraph_core::eval::{confusion, metrics, metrics_json, metrics_table, ConfusionMatrix, Metrics};
use tractgraph_core::features::{
    assemble, minmax_normalize, read_cohort_csv, read_split_csv, read_subject_manifest, stratified_split,
    write_cohort_csv, write_split_csv,
};
use tractgraph_core::geometry::{
    distance_matrix_parallel, read_atlas, read_cluster_dir, write_atlas_dir, write_distance_csv,
};
use tractgraph_core::graphbuild::{build_gmg, build_wmg, degree_summary, write_edge_list, write_region_table};
use tractgraph_core::interpret::{
    read_tract_map, write_attention_csv, write_tract_map, AttentionReport, TractCount,
};
use tractgraph_core::model::{
    train, write_checkpoint, write_training_log, Checkpoint, EpochStats, ModelConfig, Network, TrainConfig,
};
use tractgraph_core::synth::{generate_atlas, generate_measurements, subject_clusters, SynthConfig};
use tractgraph_core::{
    ClusterGraph, Cohort, DistanceMatrix, Error, FiberCluster, RegionTable, Result, Split, SubjectFeatures, Variant,
};

use crate::config::{GraphKind, RunConfig};

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Atlas clusters, optionally resampled to `resample` points per streamline.
pub fn load_atlas(path: &Path, resample: Option<usize>) -> Result<Vec<FiberCluster>> {
    let atlas = read_atlas(path)?;
    match resample {
        Some(n) => atlas.iter().map(|c| c.resample(n)).collect(),
        None => Ok(atlas),
    }
}

pub fn compute_distances(atlas: &[FiberCluster], workers: usize) -> Result<DistanceMatrix> {
    info!("computing distances between {} clusters", atlas.len());
    distance_matrix_parallel(atlas, workers)
}

pub fn build_graph(kind: GraphKind, k: usize, dist: Option<&DistanceMatrix>, regions: Option<&RegionTable>) -> Result<ClusterGraph> {
    let g = match kind {
        GraphKind::Wmg => {
            let d = dist.ok_or_else(|| Error::InvalidConfig("wmg needs a distance matrix".into()))?;
            build_wmg(d, k)?
        }
        GraphKind::Gmg => {
            let r = regions.ok_or_else(|| Error::InvalidConfig("gmg needs a region table".into()))?;
            build_gmg(r)?
        }
    };
    let s = degree_summary(&g);
    info!("{kind} graph: {} nodes, {} edges, degree {}..{}", g.node_count(), g.edge_count(), s.min, s.max);
    Ok(g)
}

/// Subjects from a cohort CSV, or assembled from per-subject cluster files
/// when `path` is a manifest (`subject_id,label,dir`) and `clusters` is set.
pub fn load_subjects(path: &Path, clusters: Option<usize>) -> Result<Vec<SubjectFeatures>> {
    match clusters {
        None => read_cohort_csv(path),
        Some(c) => read_subject_manifest(path)?
            .into_iter()
            .map(|(id, (label, dir))| assemble(&id, label, &read_cluster_dir(&dir)?, c))
            .collect(),
    }
}

/// Attaches a split: the file's tags if given, else a stratified draw.
pub fn split_cohort(subjects: Vec<SubjectFeatures>, split: Option<&Path>, train_fraction: f64, seed: u64) -> Result<Cohort> {
    if subjects.is_empty() {
        return Err(Error::DegenerateInput("cohort has no subjects".into()));
    }
    match split {
        Some(path) => {
            let n = subjects.len();
            Cohort::new(subjects, vec![Split::Train; n])?.with_split_map(&read_split_csv(path)?)
        }
        None => {
            let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
            let tags = stratified_split(&labels, train_fraction, seed)?;
            Cohort::new(subjects, tags)
        }
    }
}

pub fn write_split(path: &Path, cohort: &Cohort) -> Result<()> {
    write_split_csv(path, &cohort.subjects, &cohort.split)
}

fn network_for(config: ModelConfig, graph: Option<&ClusterGraph>) -> Result<Network> {
    match config.variant {
        Variant::TractGraphCnn => {
            let g = graph.ok_or_else(|| Error::InvalidConfig("tractgraphcnn needs a graph".into()))?;
            Network::new(config, Some(g))
        }
        Variant::Cnn1d => Network::new(config, None),
    }
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Fits normalization on the training split, then trains.
pub fn train_model(cohort: &Cohort, graph: Option<&ClusterGraph>, variant: Variant, cfg: &TrainConfig) -> Result<Trained> {
    let (normalized, norm) = minmax_normalize(cohort)?;
    let config = ModelConfig::new(cohort.cluster_count(), variant);
    let network = network_for(config.clone(), graph)?;
    info!(
        "training {variant} on {} subjects for {} epochs",
        cohort.indices(Split::Train).len(),
        cfg.epochs
    );
    let outcome = train(&normalized, &network, cfg)?;
    if let Some(last) = outcome.history.last() {
        info!("final epoch: loss {:.6}, train accuracy {:.4}", last.loss, last.train_acc);
    }
    Ok(Trained {
        checkpoint: Checkpoint {
            config,
            seed: cfg.seed,
            norm: Some(norm),
            params: outcome.params,
        },
        history: outcome.history,
    })
}

pub fn write_trained(dir: &Path, trained: &Trained) -> Result<()> {
    write_checkpoint(&dir.join("model.ckpt"), &trained.checkpoint)?;
    write_training_log(&dir.join("train_log.csv"), &trained.history)
}

/// Test-split predictions of a checkpoint.
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub subject_ids: Vec<String>,
    pub attention: Vec<Vec<f64>>,
}

pub fn evaluate(ckpt: &Checkpoint, cohort: &Cohort, graph: Option<&ClusterGraph>) -> Result<Evaluation> {
    if cohort.cluster_count() != ckpt.config.clusters {
        return Err(Error::InvalidInput(format!(
            "cohort has {} clusters, checkpoint expects {}",
            cohort.cluster_count(),
            ckpt.config.clusters
        )));
    }
    let cohort = match &ckpt.norm {
        Some(norm) => norm.apply(cohort),
        None => cohort.clone(),
    };
    let network = network_for(ckpt.config.clone(), graph)?;
    let test: Vec<&SubjectFeatures> = cohort.indices(Split::Test).into_iter().map(|i| &cohort.subjects[i]).collect();
    if test.is_empty() {
        return Err(Error::DegenerateInput("test split is empty".into()));
    }
    let preds = network.predict(&ckpt.params, &test)?;
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let cm = confusion(&classes, &labels)?;
    Ok(Evaluation {
        confusion: cm,
        metrics: metrics(&cm)?,
        subject_ids: test.iter().map(|s| s.subject_id.clone()).collect(),
        attention: preds.into_iter().map(|p| p.attention).collect(),
    })
}

pub fn method_name(variant: Variant, graph: GraphKind) -> String {
    match variant {
        Variant::TractGraphCnn => format!("{variant} ({graph})"),
        Variant::Cnn1d => variant.to_string(),
    }
}

/// `metrics.json`, `metrics.txt` and the test-subject `attention.csv`.
pub fn write_evaluation(dir: &Path, method: &str, e: &Evaluation) -> Result<()> {
    write_text(&dir.join("metrics.json"), &metrics_json(&e.metrics))?;
    write_text(&dir.join("metrics.txt"), &metrics_table(&[(method.to_string(), e.metrics)]))?;
    let ids: Vec<&str> = e.subject_ids.iter().map(String::as_str).collect();
    write_attention_csv(&dir.join("attention.csv"), &ids, &e.attention)
}

/// Writes a synthetic dataset:
///
/// ```text
/// atlas/cluster_<id>.txt   regions.csv   tract_map.csv
/// cohort.csv   split.csv   planted.txt   run.conf
/// subjects.csv + subjects/<id>/cluster_<id>.txt   (with `subject_dirs`)
/// ```
///
/// `run.conf` points `run-all` at the files.
pub fn write_synth(cfg: &SynthConfig, out: &Path, subject_dirs: bool) -> Result<()> {
    create_dir(out)?;
    let atlas = generate_atlas(cfg)?;
    let measurements = generate_measurements(cfg)?;
    let cohort = tractgraph_core::synth::generate_cohort(cfg)?;
    write_atlas_dir(&out.join("atlas"), &atlas.clusters)?;
    write_region_table(&out.join("regions.csv"), &atlas.regions)?;
    write_tract_map(&out.join("tract_map.csv"), &atlas.tract_map)?;
    write_cohort_csv(&out.join("cohort.csv"), &cohort.subjects)?;
    write_split(&out.join("split.csv"), &cohort)?;
    let planted: String = cfg.planted.iter().map(|c| format!("{c}\n")).collect();
    write_text(&out.join("planted.txt"), &planted)?;
    if subject_dirs {
        let mut manifest = String::from("subject_id,label,dir\n");
        for m in &measurements {
            let rel = PathBuf::from("subjects").join(&m.subject_id);
            write_atlas_dir(&out.join(&rel), &subject_clusters(&atlas.clusters, m)?)?;
            manifest.push_str(&format!("{},{},{}\n", m.subject_id, m.label, rel.display()));
        }
        write_text(&out.join("subjects.csv"), &manifest)?;
    }
    let conf = "atlas = atlas\nregions = regions.csv\ncohort = cohort.csv\nsplit = split.csv\ntract_map = tract_map.csv\n";
    write_text(&out.join("run.conf"), conf)?;
    info!("wrote {} clusters and {} subjects to {}", cfg.clusters, cfg.n_subjects, out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionSummary {
    pub top: usize,
    pub top_clusters: Vec<usize>,
    pub tracts: Vec<TractCount>,
}

/// Top-level `report.json` of `run-all`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub method: String,
    pub test_subjects: usize,
    pub confusion: [[u64; 2]; 2],
    pub metrics: Metrics,
    pub attention: AttentionSummary,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Every stage in order, each artifact written to `out_dir`:
///
/// ```text
/// config.resolved  distances.csv (wmg)  graph.txt  split.csv
/// model.ckpt  train_log.csv  metrics.json  metrics.txt  attention.csv
/// attention_report.json  attention_report.csv  report.json
/// ```
pub fn run_all(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let out = cfg.out_dir.as_deref().expect("validated");
    create_dir(out)?;
    write_text(&out.join("config.resolved"), &cfg.to_text())?;

    let graph = if cfg.variant == Variant::TractGraphCnn {
        let (dist, regions) = match cfg.graph {
            GraphKind::Wmg => {
                let atlas = load_atlas(cfg.atlas.as_deref().expect("validated"), cfg.resample)?;
                let d = compute_distances(&atlas, cfg.workers)?;
                write_distance_csv(&out.join("distances.csv"), &d)?;
                (Some(d), None)
            }
            GraphKind::Gmg => {
                let path = cfg.regions.as_deref().expect("validated");
                (None, Some(tractgraph_core::graphbuild::read_region_table(path)?))
            }
        };
        let g = build_graph(cfg.graph, cfg.k, dist.as_ref(), regions.as_ref())?;
        write_edge_list(&out.join("graph.txt"), &g)?;
        Some(g)
    } else {
        None
    };

    let subjects = load_subjects(cfg.cohort.as_deref().expect("validated"), None)?;
    let cohort = split_cohort(subjects, cfg.split.as_deref(), cfg.train_fraction, cfg.seed)?;
    write_split(&out.join("split.csv"), &cohort)?;

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        optimizer: cfg.optimizer,
    };
    let trained = train_model(&cohort, graph.as_ref(), cfg.variant, &train_cfg)?;
    write_trained(out, &trained)?;

    let method = method_name(cfg.variant, cfg.graph);
    let evaluation = evaluate(&trained.checkpoint, &cohort, graph.as_ref())?;
    write_evaluation(out, &method, &evaluation)?;

    let map = read_tract_map(cfg.tract_map.as_deref().expect("validated"))?;
    let attention = AttentionReport::build(&evaluation.attention, cfg.top, &map)?;
    attention.write_json(&out.join("attention_report.json"))?;
    attention.write_csv(&out.join("attention_report.csv"), &map)?;

    let report = Report {
        config_hash: cfg.hash(),
        method,
        test_subjects: evaluation.subject_ids.len(),
        confusion: evaluation.confusion.counts,
        metrics: evaluation.metrics,
        attention: AttentionSummary {
            top: cfg.top,
            top_clusters: attention.top_clusters,
            tracts: attention.tracts,
        },
    };
    write_text(&out.join("report.json"), &report.to_json())?;
    Ok(report)
}
