//! Ranking clusters by mean attention and mapping the top ones to tracts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::fmt_f64;

/// Assignment of every cluster to one named tract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TractMap {
    cluster_to_tract: Vec<usize>,
    tract_names: BTreeMap<usize, String>,
}

impl TractMap {
    pub fn new(cluster_to_tract: Vec<usize>, tract_names: BTreeMap<usize, String>) -> Result<Self> {
        if let Some((c, t)) = cluster_to_tract.iter().enumerate().find(|(_, t)| !tract_names.contains_key(t)) {
            return Err(Error::InvalidInput(format!("cluster {c} maps to unnamed tract {t}")));
        }
        Ok(Self {
            cluster_to_tract,
            tract_names,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_to_tract.len()
    }

    pub fn tract_count(&self) -> usize {
        self.tract_names.len()
    }

    pub fn tract_of(&self, cluster: usize) -> Option<usize> {
        self.cluster_to_tract.get(cluster).copied()
    }

    pub fn tract_name(&self, tract: usize) -> Option<&str> {
        self.tract_names.get(&tract).map(String::as_str)
    }

    pub fn clusters_of(&self, tract: usize) -> Vec<usize> {
        (0..self.cluster_to_tract.len())
            .filter(|&c| self.cluster_to_tract[c] == tract)
            .collect()
    }
}

/// Tract map CSV: `cluster_id,tract_id,tract_name`, cluster ids `0..C` in
/// any order, each exactly once.
pub fn read_tract_map(path: &Path) -> Result<TractMap> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != 3 {
            return Err(Error::parse(path, line, "expected cluster_id,tract_id,tract_name"));
        }
        let cluster: usize = record[0].parse().map_err(|_| Error::parse(path, line, "bad cluster id"))?;
        let tract: usize = record[1].parse().map_err(|_| Error::parse(path, line, "bad tract id"))?;
        let name = record[2].to_string();
        if rows.insert(cluster, tract).is_some() {
            return Err(Error::parse(path, line, format!("duplicate cluster {cluster}")));
        }
        if let Some(prev) = names.insert(tract, name.clone()) {
            if prev != name {
                return Err(Error::parse(path, line, format!("tract {tract} named both `{prev}` and `{name}`")));
            }
        }
    }
    if rows.keys().copied().ne(0..rows.len()) {
        return Err(Error::parse(path, 0, "cluster ids must cover 0..C"));
    }
    TractMap::new(rows.into_values().collect(), names)
}

pub fn write_tract_map(path: &Path, map: &TractMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cluster_id", "tract_id", "tract_name"])?;
    for (c, &t) in map.cluster_to_tract.iter().enumerate() {
        w.write_record([c.to_string(), t.to_string(), map.tract_names[&t].clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Entrywise mean of per-subject attention vectors.
pub fn mean_attention(per_subject: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_subject
        .first()
        .ok_or_else(|| Error::DegenerateInput("no subjects to average attention over".into()))?;
    let c = first.len();
    if per_subject.iter().any(|v| v.len() != c) {
        return Err(Error::InvalidShape("attention vectors differ in length".into()));
    }
    let mut sum = vec![0.0; c];
    for v in per_subject {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = per_subject.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Ids of the `t` largest entries, descending, ties to the lower id. Returns
/// every id when `t` exceeds the length.
pub fn top_clusters(mean_att: &[f64], t: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..mean_att.len()).collect();
    ids.sort_by(|&a, &b| mean_att[b].total_cmp(&mean_att[a]).then(a.cmp(&b)));
    ids.truncate(t);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TractCount {
    pub tract: String,
    pub count: usize,
}

/// Tracts containing at least one of `ids`, by count descending then name.
pub fn clusters_to_tracts(ids: &[usize], map: &TractMap) -> Result<Vec<TractCount>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &c in ids {
        let tract = map
            .tract_of(c)
            .ok_or_else(|| Error::InvalidInput(format!("unknown cluster id {c}")))?;
        *counts.entry(&map.tract_names[&tract]).or_default() += 1;
    }
    let mut out: Vec<TractCount> = counts
        .into_iter()
        .map(|(tract, count)| TractCount {
            tract: tract.to_string(),
            count,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.tract.cmp(&b.tract)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub mean_attention: Vec<f64>,
    pub top_clusters: Vec<usize>,
    pub tracts: Vec<TractCount>,
}

impl AttentionReport {
    pub fn build(per_subject: &[Vec<f64>], t: usize, map: &TractMap) -> Result<Self> {
        let mean_attention = mean_attention(per_subject)?;
        if mean_attention.len() != map.cluster_count() {
            return Err(Error::InvalidShape(format!(
                "attention covers {} clusters, tract map {}",
                mean_attention.len(),
                map.cluster_count()
            )));
        }
        let top_clusters = top_clusters(&mean_attention, t);
        let tracts = clusters_to_tracts(&top_clusters, map)?;
        Ok(Self {
            mean_attention,
            top_clusters,
            tracts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// CSV summary: `rank,cluster_id,mean_attention,tract_name`.
    pub fn write_csv(&self, path: &Path, map: &TractMap) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "cluster_id", "mean_attention", "tract_name"])?;
        for (rank, &c) in self.top_clusters.iter().enumerate() {
            let tract = map.tract_of(c).and_then(|t| map.tract_name(t)).unwrap_or("");
            w.write_record([
                (rank + 1).to_string(),
                c.to_string(),
                fmt_f64(self.mean_attention[c]),
                tract.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn tract_names(&self) -> BTreeSet<&str> {
        self.tracts.iter().map(|t| t.tract.as_str()).collect()
    }
}

/// Tracts reported by both runs.
pub fn tract_intersection<'a>(a: &'a AttentionReport, b: &AttentionReport) -> BTreeSet<&'a str> {
    let other = b.tract_names();
    a.tract_names().into_iter().filter(|t| other.contains(t)).collect()
}

/// Per-cluster attention over all subjects in `split`, written as CSV
/// `subject_id,att_0..att_{C-1}`.
pub fn write_attention_csv(path: &Path, subject_ids: &[&str], attention: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let c = attention.first().map_or(0, Vec::len);
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..c).map(|i| format!("att_{i}")));
    w.write_record(&header)?;
    for (id, row) in subject_ids.iter().zip(attention) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_attention_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        ids.push(record[0].to_string());
        let row = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| Error::parse(path, i + 2, format!("bad number `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}
