//! Three-stage early-exit leaf classifier.
//!
//! A cheap silhouette network decides most inputs; undecided inputs go to a
//! whole-leaf RGB network and finally to a patch-level classifier, with each
//! stage's top candidates gating what later stages may conclude.

pub mod cascade;
pub mod error;
pub mod features;
pub mod netdef;
pub mod network;
pub mod ops;
pub mod preprocess;
pub mod prob;
pub mod stage;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights_io;
pub mod wire;

pub use error::{Error, Result};
pub use netdef::{count_params, LayerSpec, NetworkDef, ParamCount};
pub use network::Weights;
pub use prob::ProbVector;
pub use stage::{CountingStage, FnStage, LocalStage, StageModel};
pub use tensor::{Real, Tensor};
