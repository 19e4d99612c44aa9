//! Edge detection under pixel-level label noise.
//!
//! Label corruption is modelled as a displacement field that warps the
//! detector's clean-space prediction into the space of the noisy labels. The
//! crate contains the differentiable sampler and its inverse-image analysis,
//! shift supervision by minimum-distance matching, the density prior, all
//! training objectives, the networks and the three-stage training pipeline,
//! a synthetic data generator with known corruption fields, and the edge
//! benchmark.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the
//! precision used for training (`f32`) and for gradient checks (`f64`).

pub mod container;
pub mod dataset;
pub mod density;
pub mod error;
pub mod eval;
pub mod field;
pub mod losses;
pub mod maps;
pub mod matching;
pub mod models;
pub mod morph;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use field::{DisplacementField, UnmatchedMask};
pub use maps::{BinaryLabelMap, EdgeProbMap};
pub use scalar::Real;

pub type Field32 = DisplacementField<f32>;
pub type Field64 = DisplacementField<f64>;
pub type ProbMap32 = EdgeProbMap<f32>;
pub type ProbMap64 = EdgeProbMap<f64>;
pub type Detector32 = models::EdgeDetectorParams<f32>;
pub type Localizer32 = models::LocalizerParams<f32>;
