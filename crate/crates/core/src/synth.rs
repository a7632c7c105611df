//! Synthetic atlases and labeled cohorts with a planted class signal.
//!
//! Tracts sit on a square grid in the x-y plane, each a bent centerline along
//! z. A tract's clusters are bundles around small offsets of that centerline,
//! so a cluster's geometric neighbors belong to the same tract first and to
//! grid-adjacent tracts next. Every cluster shares one FA and streamline
//! count baseline; class 1 subjects get both shifted upward on the planted
//! clusters.
//!
//! All noise is drawn in a fixed order that does not depend on
//! `effect_size`, so two configs differing only in effect size see the same
//! noise.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{stratified_split, Cohort, SubjectFeatures};
use crate::geometry::{FiberCluster, Point3, Streamline};
use crate::graphbuild::RegionTable;
use crate::interpret::TractMap;
use crate::rng::{self, Stream};

/// Grid pitch between neighboring tract centerlines.
const TRACT_SPACING: f64 = 20.0;
/// Radius of the disk holding a tract's cluster offsets.
const TRACT_RADIUS: f64 = 3.0;
const TRACT_LENGTH: f64 = 40.0;
const TRACT_BEND: f64 = 4.0;
const STREAMLINE_SPREAD: f64 = 0.5;
const POINT_JITTER: f64 = 0.2;

const BASELINE_FA: f64 = 0.45;
const BASELINE_COUNT: f64 = 100.0;
const FA_RANGE: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub tracts: usize,
    pub regions: usize,
    pub n_subjects: usize,
    /// Cluster ids whose features differ between classes.
    pub planted: BTreeSet<usize>,
    /// Class 1 shift on planted clusters, in noise standard deviations.
    pub effect_size: f64,
    /// Standard deviation of per-cluster FA noise.
    pub noise_sd: f64,
    /// Standard deviation of per-cluster log streamline-count noise.
    pub count_noise_sd: f64,
    /// Probability that a cluster is absent from a subject.
    pub absent_fraction: f64,
    pub train_fraction: f64,
    pub streamlines_per_cluster: usize,
    pub points_per_streamline: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 100,
            tracts: 10,
            regions: 12,
            n_subjects: 400,
            planted: BTreeSet::new(),
            effect_size: 2.0,
            noise_sd: 0.05,
            count_noise_sd: 0.2,
            absent_fraction: 0.02,
            train_fraction: 0.8,
            streamlines_per_cluster: 5,
            points_per_streamline: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.tracts == 0 || self.clusters < self.tracts {
            return bad(format!("need 1 <= tracts <= clusters, got {} tracts for {} clusters", self.tracts, self.clusters));
        }
        if self.regions < 2 {
            return bad("need at least 2 regions".into());
        }
        if let Some(&c) = self.planted.iter().find(|&&c| c >= self.clusters) {
            return bad(format!("planted cluster {c} outside 0..{}", self.clusters));
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return bad(format!("effect size must be nonnegative, got {}", self.effect_size));
        }
        if !(self.noise_sd >= 0.0 && self.count_noise_sd >= 0.0) {
            return bad("noise standard deviations must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.absent_fraction) || !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("absent fraction must be in [0, 1) and train fraction in [0, 1]".into());
        }
        if self.streamlines_per_cluster == 0 || self.points_per_streamline < 2 {
            return bad("need at least one streamline of two points per cluster".into());
        }
        Ok(())
    }

    /// Tract of each cluster: contiguous, near-equal blocks of cluster ids.
    pub fn tract_of(&self, cluster: usize) -> usize {
        cluster * self.tracts / self.clusters
    }

    /// Plants the signal in every cluster of the given tracts.
    pub fn plant_tracts(&mut self, tracts: &[usize]) {
        self.planted = (0..self.clusters).filter(|&c| tracts.contains(&self.tract_of(c))).collect();
    }
}

pub fn tract_name(t: usize) -> String {
    format!("tract_{t:02}")
}

pub fn region_name(r: usize) -> String {
    format!("region_{r:02}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthAtlas {
    pub clusters: Vec<FiberCluster>,
    pub tract_map: TractMap,
    pub regions: RegionTable,
}

fn normal(rng: &mut rng::Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn centerline(cfg: &SynthConfig, tract: usize, s: f64) -> Point3 {
    let side = (cfg.tracts as f64).sqrt().ceil() as usize;
    let x0 = (tract % side) as f64 * TRACT_SPACING;
    let y0 = (tract / side) as f64 * TRACT_SPACING;
    Point3::new(x0 + TRACT_BEND * (std::f64::consts::PI * s).sin(), y0, TRACT_LENGTH * s)
}

pub fn generate_atlas(cfg: &SynthConfig) -> Result<SynthAtlas> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::SynthAtlas);
    let n = cfg.points_per_streamline;
    let mut clusters = Vec::with_capacity(cfg.clusters);
    for id in 0..cfg.clusters {
        let tract = cfg.tract_of(id);
        let radius = TRACT_RADIUS * rng.random::<f64>().sqrt();
        let angle = std::f64::consts::TAU * rng.random::<f64>();
        let offset = Point3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
        let mut streamlines = Vec::with_capacity(cfg.streamlines_per_cluster);
        for _ in 0..cfg.streamlines_per_cluster {
            let spread = Point3::new(
                STREAMLINE_SPREAD * normal(&mut rng),
                STREAMLINE_SPREAD * normal(&mut rng),
                0.0,
            );
            let points = (0..n)
                .map(|i| {
                    let s = i as f64 / (n - 1) as f64;
                    let jitter = Point3::new(
                        POINT_JITTER * normal(&mut rng),
                        POINT_JITTER * normal(&mut rng),
                        POINT_JITTER * normal(&mut rng),
                    );
                    centerline(cfg, tract, s).translate(offset).translate(spread).translate(jitter)
                })
                .collect();
            streamlines.push(Streamline::new(points)?);
        }
        clusters.push(FiberCluster::new(id, streamlines));
    }

    let tract_map = TractMap::new(
        (0..cfg.clusters).map(|c| cfg.tract_of(c)).collect(),
        (0..cfg.tracts).map(|t| (t, tract_name(t))).collect(),
    )?;

    // Tract t dominates regions t and t+1 (mod R); everything else is low
    // background, so adjacent tracts share a region.
    let mut rows = Vec::with_capacity(cfg.clusters);
    for c in 0..cfg.clusters {
        let t = cfg.tract_of(c);
        let (r1, r2) = (t % cfg.regions, (t + 1) % cfg.regions);
        let row: Vec<f64> = (0..cfg.regions)
            .map(|r| {
                let u: f64 = rng.random();
                if r == r1 || r == r2 {
                    0.6 + 0.3 * u
                } else {
                    0.1 * u
                }
            })
            .collect();
        rows.push(row);
    }
    let regions = RegionTable::new((0..cfg.regions).map(region_name).collect(), rows)?;

    Ok(SynthAtlas {
        clusters,
        tract_map,
        regions,
    })
}

/// Raw per-subject measurements before PoS normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub subject_id: String,
    pub label: usize,
    /// `None` for absent clusters.
    pub fa: Vec<Option<f64>>,
    pub nos: Vec<u64>,
}

/// Balanced labels (alternating), one FA value and streamline count per
/// cluster per subject.
pub fn generate_measurements(cfg: &SynthConfig) -> Result<Vec<Measurement>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::SynthCohort);
    let width = cfg.n_subjects.saturating_sub(1).to_string().len().max(3);
    let mut out = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let label = i % 2;
        let mut fa = Vec::with_capacity(cfg.clusters);
        let mut nos = Vec::with_capacity(cfg.clusters);
        for c in 0..cfg.clusters {
            let z_fa = normal(&mut rng);
            let z_count = normal(&mut rng);
            let absent = rng.random::<f64>() < cfg.absent_fraction;
            let shift = if label == 1 && cfg.planted.contains(&c) { cfg.effect_size } else { 0.0 };
            if absent {
                fa.push(None);
                nos.push(0);
                continue;
            }
            let value = (BASELINE_FA + cfg.noise_sd * (z_fa + shift)).clamp(FA_RANGE.0, FA_RANGE.1);
            let log_count = BASELINE_COUNT.ln() + cfg.count_noise_sd * (z_count + shift);
            fa.push(Some(value));
            nos.push((log_count.exp().round() as u64).max(1));
        }
        if nos.iter().all(|&n| n == 0) {
            fa[0] = Some(BASELINE_FA);
            nos[0] = BASELINE_COUNT as u64;
        }
        out.push(Measurement {
            subject_id: format!("sub{i:0width$}"),
            label,
            fa,
            nos,
        });
    }
    Ok(out)
}

/// The mean `cluster_fa` computes over `n` two-point streamlines of constant
/// FA `v`. Storing this instead of `v` keeps the cohort table bit-identical
/// to features assembled from the subject files.
fn read_back_fa(v: f64, n: u64) -> f64 {
    let mut sum = 0.0;
    for _ in 0..n {
        sum += v + v;
    }
    sum / (2 * n) as f64
}

/// Features for every generated subject with a stratified train/test split
/// drawn from the same seed.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    let subjects = generate_measurements(cfg)?
        .into_iter()
        .map(|m| {
            let fa: Vec<Option<f64>> = m.fa.iter().zip(&m.nos).map(|(v, &n)| v.map(|v| read_back_fa(v, n))).collect();
            SubjectFeatures::from_measurements(m.subject_id, m.label, &fa, &m.nos)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, cfg.train_fraction, cfg.seed)?;
    Cohort::new(subjects, split)
}

/// Clusters of one subject reproducing a measurement: `nos[c]` two-point
/// streamlines along the atlas cluster's first streamline, FA constant at
/// `fa[c]`. Absent clusters are omitted.
pub fn subject_clusters(atlas: &[FiberCluster], m: &Measurement) -> Result<Vec<FiberCluster>> {
    let mut out = Vec::new();
    for (c, (fa, &n)) in m.fa.iter().zip(&m.nos).enumerate() {
        let Some(fa) = fa else { continue };
        let template = atlas
            .get(c)
            .and_then(|cl| cl.streamlines.first())
            .ok_or_else(|| Error::InvalidInput(format!("atlas has no streamline for cluster {c}")))?;
        let pts = template.points();
        let ends = vec![pts[0], pts[pts.len() - 1]];
        let s = Streamline::with_fa(ends, vec![*fa, *fa])?;
        out.push(FiberCluster::new(c, vec![s; n as usize]));
    }
    Ok(out)
}
