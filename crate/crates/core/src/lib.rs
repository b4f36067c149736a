//! Explanatory graphs: unsupervised part patterns mined from convolutional feature maps.
//!
//! Every filter of every conv layer is modelled as a mixture of a few latent part
//! patterns plus noise. Patterns in one layer are tied to patterns in the layer above
//! by learned spatial displacements, so that a pattern can be located in a new image
//! from both its own filter response and its parents.

pub mod aog;
pub mod error;
pub mod fmap;
pub mod graph;
pub mod inference;
pub mod learner;
pub mod metrics;
pub mod mixture;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
pub use fmap::{project_unit, FeatureMap, FmapError, UnitPosition};
pub use graph::{ExplanatoryGraph, GraphLayer, Hyperparams, NodeId, PatternNode};
pub use inference::{infer_image, InferenceResult, NodeAssignment};
pub use learner::{learn_graph, LearnConfig, LearnReport, UpdateMode};
pub use metrics::LandmarkSet;
