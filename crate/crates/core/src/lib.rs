//! Anatomically informed graph CNN for classification from white-matter
//! fiber cluster features.
//!
//! The pipeline runs in stages, each a module here:
//!
//! 1. [`geometry`]: mean closest point distances between atlas clusters.
//! 2. [`graphbuild`]: the geometry kNN graph or the shared-region graph.
//! 3. [`features`]: per-subject FA / PoS matrices and normalization.
//! 4. [`model`]: EdgeConv network with gated attention, trained with AdaMax
//!    on the reverse-mode engine in [`autodiff`].
//! 5. [`eval`] and [`interpret`]: macro-averaged metrics and the most
//!    attended clusters and tracts.
//!
//! [`synth`] fabricates atlases and cohorts with a planted class signal so the
//! whole pipeline can be exercised without restricted imaging data.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod graphbuild;
pub mod interpret;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use features::{Cohort, Split, SubjectFeatures};
pub use geometry::{DistanceMatrix, FiberCluster, Point3, Streamline};
pub use graphbuild::{ClusterGraph, RegionTable};
pub use model::{ModelConfig, ModelParams, TrainConfig, Variant};
