//! Dataset ingestion, models under test, the per-cluster falsification loop
//! and reporting.

pub mod campaign;
pub mod dataset;
pub mod falsify;
pub mod io;
pub mod model;
pub mod protocol;
pub mod report;
pub mod scorer;
pub mod synthetic;

pub use campaign::{run_campaign, Campaign, DisableRule};
pub use dataset::{load_dataset, write_dataset, Dataset, Sample};
pub use falsify::{
    falsify_cluster, ClusterEntry, ClusterObjective, ClusterStatus, FalsifyConfig, OptimizerKind,
};
pub use model::{FnModel, ModelHandle, ReferenceModel, SegmentationModel, SubprocessModel};
pub use report::{FalsifyReport, UsageMatrix};
pub use scorer::Scorer;
pub use synthetic::SyntheticConfig;
