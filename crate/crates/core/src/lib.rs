//! Scene-graph prediction, fusion and layout generation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod io_util;
pub mod metrics;
pub mod pipeline;
pub mod sgp;
pub mod shapes;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use geometry::Obb;
pub use graph::{ClassDistribution, SceneGraph, SceneGraphEdge, SceneGraphNode, Vocab};
