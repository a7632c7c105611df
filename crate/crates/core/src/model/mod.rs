//! The graph CNN, its 1D-CNN baseline, optimizers, and training.

mod checkpoint;
mod network;
mod optim;
mod params;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use network::{edgeconv_layer, predicted_class, Forward, NeighborTable, Network, Prediction};
pub use optim::{AdamState, AdamaxState, Optimizer, OptimizerKind, BETA1, BETA2, EPSILON};
pub use params::{init_params, ModelParams, ParamSpec};
pub use train::{read_training_log, train, train_from, write_training_log, EpochStats, TrainConfig, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// EdgeConv layers over the anatomical graph.
    TractGraphCnn,
    /// Per-cluster (kernel size 1) convolutions; ignores the graph.
    Cnn1d,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TractGraphCnn => "tractgraphcnn",
            Variant::Cnn1d => "cnn1d",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tractgraphcnn" => Ok(Variant::TractGraphCnn),
            "cnn1d" => Ok(Variant::Cnn1d),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

/// Network shape. Defaults follow the published architecture: two feature
/// layers of width 64, a 64-channel kernel-size-1 aggregation over their
/// 128-wide concatenation, and a two-layer classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub clusters: usize,
    pub in_channels: usize,
    pub edgeconv_dims: [usize; 2],
    pub aggregate_dim: usize,
    /// Width of each gated-attention branch.
    pub attention_dim: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub leaky_slope: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(clusters: usize, variant: Variant) -> Self {
        Self {
            clusters,
            in_channels: 2,
            edgeconv_dims: [64, 64],
            aggregate_dim: 64,
            attention_dim: 32,
            head_hidden: 128,
            classes: 2,
            leaky_slope: 0.2,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.clusters,
            self.in_channels,
            self.edgeconv_dims[0],
            self.edgeconv_dims[1],
            self.aggregate_dim,
            self.attention_dim,
            self.head_hidden,
            self.classes,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("model dimensions must be positive: {self:?}")));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad LeakyReLU slope {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Names, shapes and fan-in of every learnable tensor, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let [d1, d2] = self.edgeconv_dims;
        let (prefix, in1, in2) = match self.variant {
            Variant::TractGraphCnn => ("edgeconv", 2 * self.in_channels, 2 * d1),
            Variant::Cnn1d => ("conv", self.in_channels, d1),
        };
        let l = self.attention_dim;
        let flat = self.clusters * self.aggregate_dim;
        let mut specs = Vec::new();
        let mut layer = |name: &str, out: usize, fan_in: usize, bias: &str| {
            specs.push(ParamSpec::weight(format!("{name}.W"), out, fan_in));
            specs.push(ParamSpec::bias(format!("{name}.{bias}"), out));
        };
        layer(&format!("{prefix}1"), d1, in1, "b");
        layer(&format!("{prefix}2"), d2, in2, "b");
        layer("aggregate", self.aggregate_dim, d1 + d2, "b");
        specs.push(ParamSpec::weight("attention.V".into(), l, self.aggregate_dim));
        specs.push(ParamSpec::bias("attention.b_V".into(), l));
        specs.push(ParamSpec::weight("attention.U".into(), l, self.aggregate_dim));
        specs.push(ParamSpec::bias("attention.b_U".into(), l));
        specs.push(ParamSpec::weight("attention.W".into(), 1, 2 * l));
        specs.push(ParamSpec::bias("attention.b_W".into(), 1));
        let mut layer = |name: &str, out: usize, fan_in: usize| {
            specs.push(ParamSpec::weight(format!("{name}.W"), out, fan_in));
            specs.push(ParamSpec::bias(format!("{name}.b"), out));
        };
        layer("head1", self.head_hidden, flat);
        layer("head2", self.classes, self.head_hidden);
        specs
    }
}
