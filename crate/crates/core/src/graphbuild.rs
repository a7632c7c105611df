//! Cluster graphs: the white-matter geometry graph (kNN over cluster
//! distances) and the gray-matter connectivity graph (clusters sharing a top
//! intersected region).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;

/// Fixed adjacency over `node_count` clusters. Neighbor lists are sorted
/// ascending and never contain the node itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterGraph {
    neighbors: Vec<Vec<usize>>,
    directed: bool,
}

impl ClusterGraph {
    /// Builds a graph from raw neighbor lists, sorting and deduplicating each
    /// list. Fails on self-loops, out-of-range ids, or (when `directed` is
    /// false) asymmetric adjacency.
    pub fn new(mut neighbors: Vec<Vec<usize>>, directed: bool) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if let Some(&j) = list.iter().find(|&&j| j >= n || j == i) {
                return Err(Error::InvalidInput(format!(
                    "node {i} has invalid neighbor {j} (node count {n})"
                )));
            }
        }
        let g = Self { neighbors, directed };
        if !directed && !g.is_symmetric() {
            return Err(Error::InvalidInput("undirected graph has asymmetric adjacency".into()));
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, list)| list.iter().all(|&j| self.neighbors[j].binary_search(&i).is_ok()))
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ClusterGraph> {
        let n = self.node_count();
        if perm.len() != n {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        let mut neighbors = vec![Vec::new(); n];
        for (i, list) in self.neighbors.iter().enumerate() {
            neighbors[perm[i]] = list.iter().map(|&j| perm[j]).collect();
        }
        ClusterGraph::new(neighbors, self.directed)
    }
}

/// Directed kNN graph: each node points at the `k` other clusters with the
/// smallest distance, ties going to the lower id.
pub fn build_wmg(dist: &DistanceMatrix, k: usize) -> Result<ClusterGraph> {
    let n = dist.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(format!(
            "k must satisfy 0 < k < C; got k = {k}, C = {n}"
        )));
    }
    let neighbors = (0..n)
        .map(|i| {
            let row = dist.row(i);
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.select_nth_unstable_by(k - 1, |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut nearest = order[..k].to_vec();
            nearest.sort_unstable();
            nearest
        })
        .collect();
    ClusterGraph::new(neighbors, true)
}

/// Fraction of each cluster's streamlines that intersect each gray-matter
/// region, C rows by R columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    region_names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl RegionTable {
    pub fn new(region_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = region_names.len();
        for (c, row) in rows.iter().enumerate() {
            if row.len() != r {
                return Err(Error::InvalidInput(format!(
                    "region row {c} has {} entries, expected {r}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!(
                    "region fraction {v} in row {c} is outside [0, 1]"
                )));
            }
        }
        Ok(Self { region_names, rows })
    }

    pub fn cluster_count(&self) -> usize {
        self.rows.len()
    }

    pub fn region_count(&self) -> usize {
        self.region_names.len()
    }

    pub fn region_names(&self) -> &[String] {
        &self.region_names
    }

    pub fn row(&self, cluster: usize) -> &[f64] {
        &self.rows[cluster]
    }
}

/// The `n` regions most intersected by `cluster`, ties to the lower region
/// id. Zero entries are never selected, so a row with fewer than `n`
/// positive entries yields only its positive regions.
pub fn top_regions(table: &RegionTable, cluster: usize, n: usize) -> Result<BTreeSet<usize>> {
    if cluster >= table.cluster_count() {
        return Err(Error::InvalidInput(format!("cluster {cluster} is not in the region table")));
    }
    let row = table.row(cluster);
    let mut positive: Vec<usize> = (0..row.len()).filter(|&r| row[r] > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "cluster {cluster} intersects no region"
        )));
    }
    positive.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    positive.truncate(n);
    Ok(positive.into_iter().collect())
}

/// Number of top regions per cluster used to connect the connectivity graph.
pub const GMG_TOP_REGIONS: usize = 2;

/// Undirected graph joining clusters that share at least one top region.
pub fn build_gmg(table: &RegionTable) -> Result<ClusterGraph> {
    let c = table.cluster_count();
    let tops = (0..c)
        .map(|i| top_regions(table, i, GMG_TOP_REGIONS))
        .collect::<Result<Vec<_>>>()?;
    let mut members = vec![Vec::new(); table.region_count()];
    for (i, regions) in tops.iter().enumerate() {
        for &r in regions {
            members[r].push(i);
        }
    }
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); c];
    for group in &members {
        for &i in group {
            neighbors[i].extend(group.iter().copied().filter(|&j| j != i));
        }
    }
    ClusterGraph::new(neighbors.into_iter().map(|s| s.into_iter().collect()).collect(), false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegreeSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Neighbor-count statistics (out-degree for directed graphs).
pub fn degree_summary(g: &ClusterGraph) -> DegreeSummary {
    let degrees = g.neighbors.iter().map(Vec::len);
    let n = g.node_count();
    DegreeSummary {
        min: degrees.clone().min().unwrap_or(0),
        max: degrees.clone().max().unwrap_or(0),
        mean: if n == 0 { 0.0 } else { degrees.sum::<usize>() as f64 / n as f64 },
    }
}

// ---------------------------------------------------------------------------
// File formats

/// Edge list: `C <n> directed <0|1>`, then `src dst` per line sorted by
/// (src, dst). Undirected graphs list both orientations of every edge.
pub fn write_edge_list(path: &Path, g: &ClusterGraph) -> Result<()> {
    fs::write(path, edge_list_string(g)).map_err(|e| Error::io(path, e))
}

pub fn edge_list_string(g: &ClusterGraph) -> String {
    let mut out = String::with_capacity(g.edge_count() * 10 + 32);
    writeln!(out, "C {} directed {}", g.node_count(), u8::from(g.directed)).unwrap();
    for (i, list) in g.neighbors.iter().enumerate() {
        for j in list {
            writeln!(out, "{i} {j}").unwrap();
        }
    }
    out
}

pub fn read_edge_list(path: &Path) -> Result<ClusterGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (n, directed) = match fields.as_slice() {
        ["C", n, "directed", d] => {
            let n: usize = n.parse().map_err(|_| Error::parse(path, 1, "bad node count"))?;
            let directed = match *d {
                "0" => false,
                "1" => true,
                _ => return Err(Error::parse(path, 1, "directed flag must be 0 or 1")),
            };
            (n, directed)
        }
        _ => return Err(Error::parse(path, 1, "expected `C <n> directed <0|1>`")),
    };
    let mut neighbors = vec![Vec::new(); n];
    let mut last: Option<(usize, usize)> = None;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        let (src, dst) = match (it.next(), it.next(), it.next()) {
            (Some(Ok(s)), Some(Ok(d)), None) => (s, d),
            _ => return Err(Error::parse(path, lineno + 1, "expected `src dst`")),
        };
        if src >= n || dst >= n {
            return Err(Error::parse(path, lineno + 1, "node id out of range"));
        }
        if last.is_some_and(|prev| prev >= (src, dst)) {
            return Err(Error::parse(path, lineno + 1, "edges must be sorted by (src, dst) without duplicates"));
        }
        last = Some((src, dst));
        neighbors[src].push(dst);
    }
    ClusterGraph::new(neighbors, directed).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Region table CSV: header `cluster_id,<region names...>`, one row per
/// cluster in id order.
pub fn read_region_table(path: &Path) -> Result<RegionTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let names: Vec<String> = reader.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let id: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, i + 2, "bad cluster id"))?;
        if id != i {
            return Err(Error::parse(path, i + 2, format!("expected cluster {i}, found {id}")));
        }
        let row = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        rows.push(row);
    }
    RegionTable::new(names, rows).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_region_table(path: &Path, table: &RegionTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cluster_id".to_string()];
    header.extend(table.region_names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in table.rows.iter().enumerate() {
        let mut record = vec![i.to_string()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
