//! Pointwise-and-pairwise learning: SGD and regularized risk minimization on
//! mixed losses, empirical stability estimation and closed-form
//! generalization bounds.

pub mod bounds;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod risk;
pub mod seed;
pub mod stability;

pub use datasets::{Dataset, FeatureLaw, LabelRule, Provenance, Sample, SampleSource, SyntheticGenerator};
pub use error::{Error, Result};
pub use losses::{DataBounds, LossConstants, MixedLoss, PairwiseLoss, PointwiseLoss};
pub use optim::{IndexStream, RrmOptions, RrmSolution, SgdConfig, SgdTrace, StepSchedule};
pub use risk::{Regularizer, RiskReport};
