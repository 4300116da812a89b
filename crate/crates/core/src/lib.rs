//! Black-box falsification of image segmentation models.
//!
//! The harness searches, with differential evolution, for ordered chains of
//! bounded natural perturbations (blur, noise, fog, rain, geometric
//! distortions, ...) that maximise a model's IoU deterioration on clusters
//! of similar images.

pub mod calibrate;
pub mod cluster;
pub mod error;
pub mod genome;
pub mod harness;
pub mod imgcore;
pub mod optimize;
pub mod perturb;

pub use calibrate::{calibrate_all, calibrate_param, BoundsFile, CalibrationConfig};
pub use cluster::{
    extract_features, kmeans, reduce, ClusterModel, FeatureMatrix, KMeansConfig, KMeansResult,
    PcaBasis,
};
pub use error::{Error, Result};
pub use genome::{apply_chain, decode, Chain, ChainLink, Genome, GenomeLayout};
pub use imgcore::{deterioration, iou, Image, Mask, ProbMap, ThresholdSet};
pub use optimize::{optimize, random_search, DEConfig, OptResult, TracePoint};
pub use perturb::{
    apply, neutral_params, ParamBound, ParamBounds, ParamKind, ParamSpec, PerturbationKind,
    PerturbationSpec, Registry,
};
