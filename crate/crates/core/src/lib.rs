//! Few-shot partial multi-view classification by dense Gaussian anchoring.
//!
//! Pipeline per episode: retrieve similar base classes for each support
//! sample and sample dense anchors from their Gaussian statistics
//! ([`dgai`]), fuse the views into a shared latent space by inverse
//! aggregation ([`aggregator`]), rectify the class means on the unlabeled
//! queries ([`rectify`]) and classify by nearest class mean ([`classify`]).

pub mod aggregator;
pub mod classify;
pub mod dataset;
pub mod dgai;
pub mod episode;
pub mod error;
pub mod harness;
pub mod optim;
pub mod rectify;
pub mod rng;
pub mod stats;

pub use classify::{build_classifier, match_baseline, proto_baseline, Classifier, Prediction};
pub use dataset::{gen_synthetic_dataset, load_features, save_features, Dataset, SyntheticSpec};
pub use dgai::{build_anchor_batch, AnchorBatch, DgaiConfig};
pub use episode::{apply_view_missing, sample_episode, Episode, MultiViewSample, ViewSpec};
pub use error::{Result, UgdError};
pub use harness::{run_episode, run_sweep, ExperimentConfig, Method, SweepResult};
pub use stats::{compute_base_stats, BaseStats};
