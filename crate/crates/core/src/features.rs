//! Per-subject cluster features (mean FA and percentage of streamlines),
//! train/test splitting, and min-max normalization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::FiberCluster;
use crate::rng::{self, Stream};

/// Class ids: 0 and 1.
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub label: usize,
    pub fa: Vec<f64>,
    pub pos: Vec<f64>,
    pub present: Vec<bool>,
}

impl SubjectFeatures {
    /// Builds features from per-cluster measurements. `fa[c]` is `None` for
    /// clusters without streamlines; `nos[c]` is the streamline count.
    pub fn from_measurements(
        subject_id: impl Into<String>,
        label: usize,
        fa: &[Option<f64>],
        nos: &[u64],
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if label >= CLASSES {
            return Err(Error::InvalidInput(format!("subject {subject_id}: label {label} is not 0 or 1")));
        }
        if fa.len() != nos.len() {
            return Err(Error::InvalidShape(format!(
                "subject {subject_id}: {} FA values but {} streamline counts",
                fa.len(),
                nos.len()
            )));
        }
        let pos = pos_vector(nos).map_err(|e| match e {
            Error::DegenerateInput(msg) => Error::DegenerateInput(format!("subject {subject_id}: {msg}")),
            other => other,
        })?;
        let present: Vec<bool> = nos.iter().map(|&n| n > 0).collect();
        let mut fa_out = vec![0.0; fa.len()];
        for (c, (value, &here)) in fa.iter().zip(&present).enumerate() {
            match (value, here) {
                (Some(v), true) => fa_out[c] = *v,
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "subject {subject_id}: cluster {c} has inconsistent FA and streamline count"
                    )))
                }
            }
        }
        Ok(Self {
            subject_id,
            label,
            fa: fa_out,
            pos,
            present,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.fa.len()
    }

    /// Network input, row-major C×2 with columns (FA, PoS).
    pub fn input_rows(&self) -> Vec<f64> {
        self.fa.iter().zip(&self.pos).flat_map(|(&f, &p)| [f, p]).collect()
    }
}

/// Mean FA over every point of every streamline in the cluster.
pub fn cluster_fa(cluster: &FiberCluster) -> Result<f64> {
    if cluster.is_empty() {
        return Err(Error::DegenerateInput(format!("cluster {} is empty", cluster.id)));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in &cluster.streamlines {
        let fa = s.fa().ok_or_else(|| {
            Error::InvalidInput(format!("cluster {} has a streamline without FA", cluster.id))
        })?;
        sum += fa.iter().sum::<f64>();
        count += fa.len();
    }
    Ok(sum / count as f64)
}

/// Streamline counts divided by their total.
pub fn pos_vector(nos: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = nos.iter().sum();
    if total == 0 {
        return Err(Error::DegenerateInput("subject has no streamlines".into()));
    }
    let total = total as f64;
    Ok(nos.iter().map(|&n| n as f64 / total).collect())
}

/// Features for one subject from its parcellated clusters. Clusters missing
/// from `clusters` (or present with no streamlines) are zero-filled and
/// masked out.
pub fn assemble(
    subject_id: &str,
    label: usize,
    clusters: &[FiberCluster],
    cluster_count: usize,
) -> Result<SubjectFeatures> {
    let mut fa = vec![None; cluster_count];
    let mut nos = vec![0u64; cluster_count];
    let mut seen = vec![false; cluster_count];
    for cluster in clusters {
        if cluster.id >= cluster_count {
            return Err(Error::InvalidInput(format!(
                "subject {subject_id}: cluster id {} outside 0..{cluster_count}",
                cluster.id
            )));
        }
        if std::mem::replace(&mut seen[cluster.id], true) {
            return Err(Error::InvalidInput(format!(
                "subject {subject_id}: duplicate cluster id {}",
                cluster.id
            )));
        }
        if !cluster.is_empty() {
            fa[cluster.id] = Some(cluster_fa(cluster)?);
            nos[cluster.id] = cluster.streamlines.len() as u64;
        }
    }
    SubjectFeatures::from_measurements(subject_id, label, &fa, &nos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Seeded label-stratified split: within each class, a shuffled
/// `round(train_fraction * n_class)` subjects go to training.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let mut split = vec![Split::Test; labels.len()];
    for class in 0..CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_train] {
            split[i] = Split::Train;
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<SubjectFeatures>,
    pub split: Vec<Split>,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectFeatures>, split: Vec<Split>) -> Result<Self> {
        if subjects.len() != split.len() {
            return Err(Error::InvalidInput(format!(
                "{} subjects but {} split tags",
                subjects.len(),
                split.len()
            )));
        }
        if let Some(first) = subjects.first() {
            let c = first.cluster_count();
            if let Some(s) = subjects.iter().find(|s| s.cluster_count() != c || s.pos.len() != c || s.present.len() != c) {
                return Err(Error::InvalidShape(format!(
                    "subject {} has {} clusters, expected {c}",
                    s.subject_id,
                    s.cluster_count()
                )));
            }
        }
        Ok(Self { subjects, split })
    }

    pub fn cluster_count(&self) -> usize {
        self.subjects.first().map_or(0, SubjectFeatures::cluster_count)
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.subjects.len()).filter(|&i| self.split[i] == which).collect()
    }

    /// Replaces the split with tags looked up by subject id.
    pub fn with_split_map(mut self, map: &HashMap<String, Split>) -> Result<Self> {
        for (i, s) in self.subjects.iter().enumerate() {
            self.split[i] = *map.get(&s.subject_id).ok_or_else(|| {
                Error::InvalidInput(format!("subject {} missing from split file", s.subject_id))
            })?;
        }
        Ok(self)
    }
}

/// Per-channel min and max gathered from the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub fa_min: f64,
    pub fa_max: f64,
    pub pos_min: f64,
    pub pos_max: f64,
}

impl NormStats {
    /// Statistics over every entry (absent-cluster zeros included) of every
    /// training subject.
    pub fn fit(cohort: &Cohort) -> Result<Self> {
        let train = cohort.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::DegenerateInput("training split is empty".into()));
        }
        let range = |values: &dyn Fn(&SubjectFeatures) -> &[f64]| {
            train.iter().flat_map(|&i| values(&cohort.subjects[i]).iter().copied()).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(v), hi.max(v)),
            )
        };
        let (fa_min, fa_max) = range(&|s| &s.fa);
        let (pos_min, pos_max) = range(&|s| &s.pos);
        Ok(Self {
            fa_min,
            fa_max,
            pos_min,
            pos_max,
        })
    }

    /// Maps each channel through `(x - min) / (max - min)` clipped to [0, 1].
    /// A channel with `max == min` becomes all zeros.
    pub fn apply(&self, cohort: &Cohort) -> Cohort {
        let fa_range = channel_range("FA", self.fa_min, self.fa_max);
        let pos_range = channel_range("PoS", self.pos_min, self.pos_max);
        let map = |v: f64, min: f64, range: Option<f64>| match range {
            Some(r) => ((v - min) / r).clamp(0.0, 1.0),
            None => 0.0,
        };
        let subjects = cohort
            .subjects
            .iter()
            .map(|s| SubjectFeatures {
                subject_id: s.subject_id.clone(),
                label: s.label,
                fa: s.fa.iter().map(|&v| map(v, self.fa_min, fa_range)).collect(),
                pos: s.pos.iter().map(|&v| map(v, self.pos_min, pos_range)).collect(),
                present: s.present.clone(),
            })
            .collect();
        Cohort {
            subjects,
            split: cohort.split.clone(),
        }
    }
}

fn channel_range(name: &str, min: f64, max: f64) -> Option<f64> {
    if max > min {
        Some(max - min)
    } else {
        warn!("{name} channel is constant over the training split ({min}); setting it to zero");
        None
    }
}

/// Min-max normalization with statistics from the training split applied to
/// every subject.
pub fn minmax_normalize(cohort: &Cohort) -> Result<(Cohort, NormStats)> {
    let stats = NormStats::fit(cohort)?;
    Ok((stats.apply(cohort), stats))
}

// ---------------------------------------------------------------------------
// File formats

/// Cohort CSV: `subject_id,label,fa_0..fa_{C-1},pos_0..pos_{C-1}`. A cluster
/// counts as present when its PoS is positive.
pub fn write_cohort_csv(path: &Path, subjects: &[SubjectFeatures]) -> Result<()> {
    let c = subjects.first().map_or(0, SubjectFeatures::cluster_count);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string(), "label".to_string()];
    header.extend((0..c).map(|i| format!("fa_{i}")));
    header.extend((0..c).map(|i| format!("pos_{i}")));
    w.write_record(&header)?;
    for s in subjects {
        let mut record = vec![s.subject_id.clone(), s.label.to_string()];
        record.extend(s.fa.iter().chain(&s.pos).map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cohort_csv(path: &Path) -> Result<Vec<SubjectFeatures>> {
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 || (width - 2) % 2 != 0 {
        return Err(Error::parse(path, 1, "expected subject_id,label,fa_*,pos_* columns"));
    }
    let c = (width - 2) / 2;
    let mut subjects = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, "bad label"))?;
        let values = record
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        let (fa, pos) = values.split_at(c);
        let present: Vec<bool> = pos.iter().map(|&p| p > 0.0).collect();
        for k in 0..c {
            if pos[k] < 0.0 || !(0.0..=1.0).contains(&fa[k]) || (!present[k] && fa[k] != 0.0) {
                return Err(Error::parse(path, line, format!("cluster {k} has invalid FA/PoS values")));
            }
        }
        if label >= CLASSES {
            return Err(Error::parse(path, line, format!("label {label} is not 0 or 1")));
        }
        subjects.push(SubjectFeatures {
            subject_id: record[0].to_string(),
            label,
            fa: fa.to_vec(),
            pos: pos.to_vec(),
            present,
        });
    }
    Ok(subjects)
}

pub fn write_split_csv(path: &Path, subjects: &[SubjectFeatures], split: &[Split]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "split"])?;
    for (s, tag) in subjects.iter().zip(split) {
        w.write_record([s.subject_id.as_str(), tag.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_csv(path: &Path) -> Result<HashMap<String, Split>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut map = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let tag = record[1].parse().map_err(|e: String| Error::parse(path, i + 2, e))?;
        if map.insert(record[0].to_string(), tag).is_some() {
            return Err(Error::parse(path, i + 2, format!("duplicate subject {}", &record[0])));
        }
    }
    Ok(map)
}

/// A subjects manifest for on-the-fly assembly: `subject_id,label,dir` where
/// `dir` holds that subject's `cluster_<id>.txt` files with FA.
pub fn read_subject_manifest(path: &Path) -> Result<BTreeMap<String, (usize, std::path::PathBuf)>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let label = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, i + 2, "bad label"))?;
        let dir = std::path::PathBuf::from(record[2].trim());
        let dir = if dir.is_absolute() { dir } else { base.join(dir) };
        out.insert(record[0].to_string(), (label, dir));
    }
    Ok(out)
}
