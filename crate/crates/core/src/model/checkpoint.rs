//! Versioned plain-text checkpoints.
//!
//! ```text
//! tractgraph-checkpoint 1
//! seed 42
//! config clusters 100
//! config in_channels 2
//! config edgeconv_dims 64 64
//! ...
//! norm <fa_min> <fa_max> <pos_min> <pos_max>      (optional)
//! param edgeconv1.W 2 64 4
//! <row-major values>
//! ...
//! end
//! ```
//!
//! Reals are written with 17 significant digits so a checkpoint reads back
//! to the identical bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams, Variant};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::geometry::fmt_f64;

const MAGIC: &str = "tractgraph-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    /// Normalization fitted on the training split, applied before inference.
    pub norm: Option<NormStats>,
    pub params: ModelParams,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_string(ckpt)).map_err(|e| Error::io(path, e))
}

fn checkpoint_string(ckpt: &Checkpoint) -> String {
    let c = &ckpt.config;
    let mut out = String::new();
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "seed {}", ckpt.seed).unwrap();
    writeln!(out, "config clusters {}", c.clusters).unwrap();
    writeln!(out, "config in_channels {}", c.in_channels).unwrap();
    writeln!(out, "config edgeconv_dims {} {}", c.edgeconv_dims[0], c.edgeconv_dims[1]).unwrap();
    writeln!(out, "config aggregate_dim {}", c.aggregate_dim).unwrap();
    writeln!(out, "config attention_dim {}", c.attention_dim).unwrap();
    writeln!(out, "config head_hidden {}", c.head_hidden).unwrap();
    writeln!(out, "config classes {}", c.classes).unwrap();
    writeln!(out, "config leaky_slope {}", fmt_f64(c.leaky_slope)).unwrap();
    writeln!(out, "config variant {}", c.variant).unwrap();
    if let Some(n) = &ckpt.norm {
        let vals = [n.fa_min, n.fa_max, n.pos_min, n.pos_max].map(fmt_f64);
        writeln!(out, "norm {}", vals.join(" ")).unwrap();
    }
    for (name, t) in ckpt.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "param {name} {} {}", dims.len(), dims.join(" ")).unwrap();
        let values: Vec<String> = t.data().iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text).map_err(|(line, msg)| Error::parse(path, line, msg))
}

fn parse_checkpoint(text: &str) -> std::result::Result<Checkpoint, (usize, String)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = || lines.next().ok_or((0, "unexpected end of file".to_string()));

    let (n, header) = next()?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err((n, format!("expected `{MAGIC} {VERSION}`")));
    }
    let num = |n: usize, s: &str| s.parse::<usize>().map_err(|_| (n, format!("bad integer `{s}`")));
    let real = |n: usize, s: &str| s.parse::<f64>().map_err(|_| (n, format!("bad number `{s}`")));

    let mut seed = None;
    let mut config = ModelConfig::new(0, Variant::TractGraphCnn);
    let mut norm = None;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    loop {
        let (n, line) = next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end"] => break,
            ["seed", v] => seed = Some(v.parse::<u64>().map_err(|_| (n, "bad seed".to_string()))?),
            ["config", "clusters", v] => config.clusters = num(n, v)?,
            ["config", "in_channels", v] => config.in_channels = num(n, v)?,
            ["config", "edgeconv_dims", a, b] => config.edgeconv_dims = [num(n, a)?, num(n, b)?],
            ["config", "aggregate_dim", v] => config.aggregate_dim = num(n, v)?,
            ["config", "attention_dim", v] => config.attention_dim = num(n, v)?,
            ["config", "head_hidden", v] => config.head_hidden = num(n, v)?,
            ["config", "classes", v] => config.classes = num(n, v)?,
            ["config", "leaky_slope", v] => config.leaky_slope = real(n, v)?,
            ["config", "variant", v] => config.variant = v.parse().map_err(|e: Error| (n, e.to_string()))?,
            ["norm", a, b, c, d] => {
                norm = Some(NormStats {
                    fa_min: real(n, a)?,
                    fa_max: real(n, b)?,
                    pos_min: real(n, c)?,
                    pos_max: real(n, d)?,
                })
            }
            ["param", name, ndim, dims @ ..] => {
                if num(n, ndim)? != dims.len() {
                    return Err((n, "dimension count mismatch".into()));
                }
                let shape = dims.iter().map(|d| num(n, d)).collect::<std::result::Result<Vec<_>, _>>()?;
                let (vn, values) = next()?;
                let data = values
                    .split_whitespace()
                    .map(|v| real(vn, v))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let t = Tensor::new(shape, data).map_err(|e| (vn, e.to_string()))?;
                names.push(name.to_string());
                tensors.push(t);
            }
            _ => return Err((n, format!("unrecognized line `{line}`"))),
        }
    }
    let seed = seed.ok_or((0, "missing seed".to_string()))?;
    config.validate().map_err(|e| (0, e.to_string()))?;
    let params = ModelParams::new(names, tensors).map_err(|e| (0, e.to_string()))?;
    params.check(&config).map_err(|e| (0, e.to_string()))?;
    Ok(Checkpoint {
        config,
        seed,
        norm,
        params,
    })
}
