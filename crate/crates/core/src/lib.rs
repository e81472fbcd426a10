//! FedCET: federated optimization that reaches the exact optimum on
//! heterogeneous data while uploading one `n`-vector per client per round.
//!
//! - [`linalg`]: stacked client matrices and centering-based weighted norms.
//! - [`loss`]: client losses and the federated problem.
//! - [`lr_search`]: learning-rate search and predicted contraction rates.
//! - [`algorithms`]: the FedCET protocol and the FedAvg/SCAFFOLD baselines.
//! - [`oracle`]: matrix-form dynamics, fixed point and Lyapunov monitor.
//! - [`harness`]: round scheduler and telemetry.
//! - [`experiment`]: seeded data, configuration, CSV output and manifests.

pub mod algorithms;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod lr_search;
pub mod oracle;

pub use algorithms::{
    DownlinkMode, FedAvg, FedCet, HyperParams, RoundAlgorithm, Scaffold, Traffic,
};
pub use error::{FedError, Result};
pub use harness::{run_algorithm, RoundRecord, RunOutcome, RunStatus, StopRule};
pub use linalg::{ModelVec, StackedMat, WeightSpec};
pub use loss::{ClientLoss, DiagonalQuadratic, FederatedProblem, LossConstants, QuadraticRisk};
pub use oracle::{FixedPoint, StackedState};
