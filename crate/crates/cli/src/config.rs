//! Resolved settings for `run-all`.
//!
//! A config file holds one `key = value` per line; `#` starts a comment.
//! Relative paths are taken from the file's directory. Command-line flags
//! override file values, which override the defaults.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tractgraph_core::model::OptimizerKind;
use tractgraph_core::{Error, Result, Variant};

/// Graph built over the clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// kNN over geometric cluster distances.
    Wmg,
    /// Clusters sharing a top region.
    Gmg,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::Wmg => "wmg",
            GraphKind::Gmg => "gmg",
        })
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wmg" => Ok(GraphKind::Wmg),
            "gmg" => Ok(GraphKind::Gmg),
            other => Err(Error::InvalidConfig(format!("unknown graph type `{other}` (wmg or gmg)"))),
        }
    }
}

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_TOP: usize = 50;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Cluster directory or manifest; needed for `wmg`.
    pub atlas: Option<PathBuf>,
    /// Region table CSV; needed for `gmg`.
    pub regions: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    /// Split CSV. Without one, a stratified split is drawn from the seed.
    pub split: Option<PathBuf>,
    pub tract_map: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub graph: GraphKind,
    pub k: usize,
    pub top: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub variant: Variant,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Resample every atlas streamline to this many points first.
    pub resample: Option<usize>,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            atlas: None,
            regions: None,
            cohort: None,
            split: None,
            tract_map: None,
            out_dir: None,
            graph: GraphKind::Wmg,
            k: DEFAULT_K,
            top: DEFAULT_TOP,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            variant: Variant::TractGraphCnn,
            optimizer: OptimizerKind::Adamax,
            seed: 0,
            resample: None,
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Sets one key from its text form. Relative paths join onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || {
            let p = PathBuf::from(value);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "atlas" => self.atlas = Some(path()),
            "regions" => self.regions = Some(path()),
            "cohort" => self.cohort = Some(path()),
            "split" => self.split = Some(path()),
            "tract_map" => self.tract_map = Some(path()),
            "out_dir" => self.out_dir = Some(path()),
            "graph" => self.graph = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "top" => self.top = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "resample" => self.resample = Some(parse(key, value)?),
            "workers" => self.workers = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.apply_text(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |what: &str| Err(Error::InvalidConfig(format!("`{what}` is required")));
        if self.cohort.is_none() {
            return missing("cohort");
        }
        if self.tract_map.is_none() {
            return missing("tract_map");
        }
        if self.out_dir.is_none() {
            return missing("out_dir");
        }
        if self.variant == Variant::TractGraphCnn {
            match self.graph {
                GraphKind::Wmg if self.atlas.is_none() => return missing("atlas"),
                GraphKind::Gmg if self.regions.is_none() => return missing("regions"),
                _ => {}
            }
        }
        if self.k == 0 || self.top == 0 || self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::InvalidConfig(
                "k, top, epochs, batch_size and workers must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidConfig(format!("train fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }

    /// Every setting in file syntax, one per line in a fixed order. Unset
    /// optional keys are omitted.
    pub fn to_text(&self) -> String {
        self.render(true)
    }

    fn render(&self, with_out_dir: bool) -> String {
        let mut out = String::new();
        let mut path = |key: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                writeln!(out, "{key} = {}", p.display()).unwrap();
            }
        };
        path("atlas", &self.atlas);
        path("regions", &self.regions);
        path("cohort", &self.cohort);
        path("split", &self.split);
        path("tract_map", &self.tract_map);
        if with_out_dir {
            path("out_dir", &self.out_dir);
        }
        writeln!(out, "graph = {}", self.graph).unwrap();
        writeln!(out, "k = {}", self.k).unwrap();
        writeln!(out, "top = {}", self.top).unwrap();
        writeln!(out, "epochs = {}", self.epochs).unwrap();
        writeln!(out, "learning_rate = {:?}", self.learning_rate).unwrap();
        writeln!(out, "batch_size = {}", self.batch_size).unwrap();
        writeln!(out, "train_fraction = {:?}", self.train_fraction).unwrap();
        writeln!(out, "variant = {}", self.variant).unwrap();
        writeln!(out, "optimizer = {}", self.optimizer).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        if let Some(n) = self.resample {
            writeln!(out, "resample = {n}").unwrap();
        }
        writeln!(out, "workers = {}", self.workers).unwrap();
        out
    }

    /// SHA-256 of the rendered settings without `out_dir`, so runs that
    /// differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render(false).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
