//! Length-corrected geometry of sampled hidden-state trajectories.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the cohort
//! level analyses run in `f64`. The aliases below name the common
//! instantiations.

pub mod archive;
pub mod behavior;
pub mod calib;
pub mod error;
pub mod geometry;
pub mod lencorr;
pub mod linalg;
pub mod pipeline;
pub mod probes;
pub mod scalar;
pub mod segment;
pub mod stats;
pub mod strat;
pub mod synth;
pub mod table;

pub use archive::{Cohort, CohortManifest, ItemMeta, TraceRecord, Trajectory, TrajectoryKey};
pub use error::{Error, Result};
pub use geometry::{compute_geometry, GeometryConfig, GeometryRecord};
pub use lencorr::{BootstrapSpec, CouplingResult, Family, Metric};
pub use pipeline::{emit_plot_data, run_pipeline, PipelineConfig, PlotKind};
pub use scalar::Scalar;
pub use synth::{synth_cohort, SynthSpec};
pub use table::ResultTable;

pub type Trajectory32 = Trajectory<f32>;
pub type Trajectory64 = Trajectory<f64>;
pub type GeometryRecord32 = GeometryRecord<f32>;
pub type GeometryRecord64 = GeometryRecord<f64>;
pub type Matrix64 = linalg::Matrix<f64>;
