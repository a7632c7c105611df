//! Streamline and fiber-cluster distances.
//!
//! Streamlines are compared with the mean closest point distance over their
//! polyline vertices. The directed form is averaged in both directions so the
//! result is a symmetric dissimilarity, and cluster-to-cluster distance is the
//! mean of that fiber distance over every pair of member streamlines.
//!
//! # Atlas file grammar
//!
//! One text file per cluster, named `cluster_<id>.txt`:
//!
//! ```text
//! # comment lines start with '#', blank lines are ignored
//! @fields xyz          # or `@fields xyzfa`; optional, defaults to xyz
//! x y z x y z ...      # one streamline per line, >= 2 points
//! ```
//!
//! With `@fields xyzfa` every point carries a fourth value, its FA. The
//! directive must appear before the first streamline. An atlas is either a
//! directory of such files with ids `0..C` or a manifest file listing one
//! cluster file path per line (relative paths resolve against the manifest's
//! directory).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    fn dist2(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn translate(&self, by: Point3) -> Point3 {
        Point3::new(self.x + by.x, self.y + by.y, self.z + by.z)
    }

    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Point3::new(x, y, z)
    }
}

/// A polyline in millimeter space with an optional FA value per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Point3>,
    fa: Option<Vec<f64>>,
}

impl Streamline {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        Self::build(points, None)
    }

    pub fn with_fa(points: Vec<Point3>, fa: Vec<f64>) -> Result<Self> {
        Self::build(points, Some(fa))
    }

    fn build(points: Vec<Point3>, fa: Option<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "streamline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(bad) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "streamline point {bad} has a non-finite coordinate"
            )));
        }
        if let Some(fa) = &fa {
            if fa.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "streamline has {} points but {} FA values",
                    points.len(),
                    fa.len()
                )));
            }
            if let Some(v) = fa.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("FA value {v} outside [0, 1]")));
            }
        }
        Ok(Self { points, fa })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn fa(&self) -> Option<&[f64]> {
        self.fa.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> Streamline {
        Streamline {
            points: self.points.iter().map(f).collect(),
            fa: self.fa.clone(),
        }
    }

    /// Resample to `n` points spaced evenly by arc length, interpolating FA
    /// linearly along with the coordinates.
    pub fn resample(&self, n: usize) -> Result<Streamline> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!(
                "resampling needs at least 2 points, got {n}"
            )));
        }
        let mut cumulative = Vec::with_capacity(self.points.len());
        cumulative.push(0.0);
        for w in self.points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + w[0].dist2(&w[1]).sqrt());
        }
        let total = *cumulative.last().unwrap();
        let mut points = Vec::with_capacity(n);
        let mut fa = self.fa.as_ref().map(|_| Vec::with_capacity(n));
        let mut seg = 0;
        for step in 0..n {
            let target = total * step as f64 / (n - 1) as f64;
            while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
                seg += 1;
            }
            let span = cumulative[seg + 1] - cumulative[seg];
            let t = if span > 0.0 {
                ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (self.points[seg], self.points[seg + 1]);
            points.push(Point3::new(
                a.x + t * (b.x - a.x),
                a.y + t * (b.y - a.y),
                a.z + t * (b.z - a.z),
            ));
            if let (Some(out), Some(src)) = (fa.as_mut(), self.fa.as_ref()) {
                out.push(src[seg] + t * (src[seg + 1] - src[seg]));
            }
        }
        Self::build(points, fa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiberCluster {
    pub id: usize,
    pub streamlines: Vec<Streamline>,
}

impl FiberCluster {
    pub fn new(id: usize, streamlines: Vec<Streamline>) -> Self {
        Self { id, streamlines }
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn resample(&self, n: usize) -> Result<FiberCluster> {
        Ok(FiberCluster {
            id: self.id,
            streamlines: self
                .streamlines
                .iter()
                .map(|s| s.resample(n))
                .collect::<Result<_>>()?,
        })
    }
}

/// Symmetric C×C matrix of cluster distances in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a row-major square matrix after checking the invariants
    /// (square, symmetric, zero diagonal, finite and nonnegative).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidInput(format!(
                    "distance row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            values.extend(row);
        }
        let m = Self { n, values };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::InvalidInput(format!("distance diagonal {i} is nonzero")));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "distance ({i}, {j}) = {v} is not a finite nonnegative value"
                    )));
                }
                if v != self.get(j, i) {
                    return Err(Error::InvalidInput(format!(
                        "distance matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Applies `f` to every entry. The caller is responsible for keeping the
    /// result a valid distance (used for monotone-transform checks).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DistanceMatrix {
        DistanceMatrix {
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Mean over the points of `a` of the distance to the closest vertex of `b`.
pub fn directed_mcp_distance(a: &Streamline, b: &Streamline) -> f64 {
    let sum: f64 = a
        .points
        .iter()
        .map(|p| {
            b.points
                .iter()
                .map(|q| p.dist2(q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / a.points.len() as f64
}

/// Symmetrized mean closest point distance. Both directions are computed
/// from one pass over the point-pair table and summed in the same order as
/// [`directed_mcp_distance`], so the result equals
/// `(directed(a, b) + directed(b, a)) / 2` bit for bit.
pub fn fiber_distance(a: &Streamline, b: &Streamline) -> f64 {
    let (n, m) = (a.points.len(), b.points.len());
    let mut col_min = vec![f64::INFINITY; m];
    let mut row_sum = 0.0;
    for p in &a.points {
        let mut row_min = f64::INFINITY;
        for (q, cm) in b.points.iter().zip(col_min.iter_mut()) {
            let d = p.dist2(q);
            row_min = row_min.min(d);
            *cm = cm.min(d);
        }
        row_sum += row_min.sqrt();
    }
    let col_sum: f64 = col_min.iter().map(|d| d.sqrt()).sum();
    let forward = row_sum / n as f64;
    let backward = col_sum / m as f64;
    // Addition commutes exactly in IEEE arithmetic, so swapping a and b
    // gives the same bits.
    (forward + backward) / 2.0
}

/// Mean fiber distance over every streamline pair of the two clusters.
///
/// Pairs are always enumerated from the cluster with the lower id, so
/// swapping the arguments reproduces the same bits.
pub fn cluster_distance(a: &FiberCluster, b: &FiberCluster) -> Result<f64> {
    for c in [a, b] {
        if c.is_empty() {
            return Err(Error::DegenerateInput(format!("cluster {} is empty", c.id)));
        }
    }
    let (first, second) = if b.id < a.id { (b, a) } else { (a, b) };
    let mut sum = 0.0;
    for s in &first.streamlines {
        for t in &second.streamlines {
            sum += fiber_distance(s, t);
        }
    }
    Ok(sum / (first.streamlines.len() * second.streamlines.len()) as f64)
}

fn check_atlas(atlas: &[FiberCluster]) -> Result<()> {
    if atlas.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "an atlas needs at least 2 clusters, got {}",
            atlas.len()
        )));
    }
    if let Some(c) = atlas.iter().find(|c| c.is_empty()) {
        return Err(Error::DegenerateInput(format!("atlas cluster {} is empty", c.id)));
    }
    Ok(())
}

fn fill_mirrored(n: usize, cells: impl IntoIterator<Item = (usize, usize, f64)>) -> DistanceMatrix {
    let mut values = vec![0.0; n * n];
    for (i, j, d) in cells {
        values[i * n + j] = d;
        values[j * n + i] = d;
    }
    DistanceMatrix { n, values }
}

/// All pairwise cluster distances. Matrix indices follow atlas order.
pub fn distance_matrix(atlas: &[FiberCluster]) -> Result<DistanceMatrix> {
    check_atlas(atlas)?;
    let n = atlas.len();
    let mut cells = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            cells.push((i, j, cluster_distance(&atlas[i], &atlas[j])?));
        }
    }
    Ok(fill_mirrored(n, cells))
}

/// Same result as [`distance_matrix`], with rows of the upper triangle dealt
/// round-robin to `workers` threads. Cells are independent, so the output is
/// bit-identical for any worker count.
pub fn distance_matrix_parallel(atlas: &[FiberCluster], workers: usize) -> Result<DistanceMatrix> {
    check_atlas(atlas)?;
    let workers = workers.max(1);
    if workers == 1 {
        return distance_matrix(atlas);
    }
    let n = atlas.len();
    let parts: Vec<Result<Vec<(usize, usize, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut cells = Vec::new();
                    for i in (w..n).step_by(workers) {
                        for j in i + 1..n {
                            cells.push((i, j, cluster_distance(&atlas[i], &atlas[j])?));
                        }
                    }
                    Ok(cells)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("distance worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(n * (n - 1) / 2);
    for part in parts {
        all.extend(part?);
    }
    Ok(fill_mirrored(n, all))
}

// ---------------------------------------------------------------------------
// File formats

fn cluster_id_from_path(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("cluster_")?.strip_suffix(".txt")?.parse().ok()
}

pub fn read_cluster_file(path: &Path) -> Result<FiberCluster> {
    let id = cluster_id_from_path(path).ok_or_else(|| {
        Error::parse(path, 0, "file name must look like cluster_<id>.txt")
    })?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut with_fa = false;
    let mut streamlines = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@fields") {
            if !streamlines.is_empty() {
                return Err(Error::parse(path, lineno + 1, "@fields must precede streamlines"));
            }
            with_fa = match rest.trim() {
                "xyz" => false,
                "xyzfa" => true,
                other => {
                    return Err(Error::parse(path, lineno + 1, format!("unknown field set `{other}`")))
                }
            };
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        let stride = if with_fa { 4 } else { 3 };
        if !values.len().is_multiple_of(stride) {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("{} values is not a multiple of {stride}", values.len()),
            ));
        }
        let points = values
            .chunks_exact(stride)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        let streamline = if with_fa {
            Streamline::with_fa(points, values.chunks_exact(4).map(|c| c[3]).collect())
        } else {
            Streamline::new(points)
        }
        .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        streamlines.push(streamline);
    }
    Ok(FiberCluster::new(id, streamlines))
}

pub fn write_cluster_file(path: &Path, cluster: &FiberCluster) -> Result<()> {
    let with_fa = !cluster.streamlines.is_empty() && cluster.streamlines.iter().all(|s| s.fa.is_some());
    let mut out = String::new();
    out.push_str(if with_fa { "@fields xyzfa\n" } else { "@fields xyz\n" });
    for s in &cluster.streamlines {
        let mut first = true;
        for (k, p) in s.points.iter().enumerate() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
            if with_fa {
                write!(out, " {}", s.fa.as_ref().unwrap()[k]).unwrap();
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn cluster_file_name(id: usize) -> String {
    format!("cluster_{id}.txt")
}

/// Reads every `cluster_<id>.txt` in a directory, sorted by id. Ids may be
/// sparse (subject directories omit absent clusters).
pub fn read_cluster_dir(dir: &Path) -> Result<Vec<FiberCluster>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if cluster_id_from_path(&path).is_some() {
            paths.push(path);
        }
    }
    let mut clusters = paths
        .iter()
        .map(|p| read_cluster_file(p))
        .collect::<Result<Vec<_>>>()?;
    clusters.sort_by_key(|c| c.id);
    Ok(clusters)
}

fn read_manifest(path: &Path) -> Result<Vec<FiberCluster>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut clusters = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let p = PathBuf::from(line);
        let p = if p.is_absolute() { p } else { base.join(p) };
        clusters.push(read_cluster_file(&p)?);
    }
    clusters.sort_by_key(|c| c.id);
    Ok(clusters)
}

/// Loads an atlas from a cluster directory or a manifest file. Cluster ids
/// must cover `0..C` exactly and every cluster must be non-empty.
pub fn read_atlas(path: &Path) -> Result<Vec<FiberCluster>> {
    let clusters = if path.is_dir() {
        read_cluster_dir(path)?
    } else {
        read_manifest(path)?
    };
    for (expected, c) in clusters.iter().enumerate() {
        if c.id != expected {
            return Err(Error::InvalidInput(format!(
                "atlas cluster ids must be 0..C without gaps; expected {expected}, found {}",
                c.id
            )));
        }
        if c.is_empty() {
            return Err(Error::DegenerateInput(format!("atlas cluster {} is empty", c.id)));
        }
    }
    Ok(clusters)
}

pub fn write_atlas_dir(dir: &Path, atlas: &[FiberCluster]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in atlas {
        write_cluster_file(&dir.join(cluster_file_name(c.id)), c)?;
    }
    Ok(())
}

/// Scientific notation with 17 significant digits; parses back to the same
/// bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_distance_csv(path: &Path, m: &DistanceMatrix) -> Result<()> {
    let mut out = String::with_capacity(m.n * m.n * 24);
    out.push_str("cluster");
    for j in 0..m.n {
        write!(out, ",{j}").unwrap();
    }
    out.push('\n');
    for i in 0..m.n {
        write!(out, "{i}").unwrap();
        for v in m.row(i) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_distance_csv(path: &Path) -> Result<DistanceMatrix> {
    let mut reader = csv::Reader::from_path(path)?;
    let n = reader.headers()?.len().saturating_sub(1);
    let mut rows = Vec::with_capacity(n);
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let id: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, i + 2, "bad cluster id"))?;
        if id != i {
            return Err(Error::parse(path, i + 2, format!("expected row {i}, found {id}")));
        }
        let row = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::parse(path, 0, format!("expected {n} rows, found {}", rows.len())));
    }
    DistanceMatrix::from_rows(rows).map_err(|e| Error::parse(path, 0, e.to_string()))
}
