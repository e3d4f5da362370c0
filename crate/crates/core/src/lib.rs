//! Empirical uncertain Bayes estimation of area-level means in natural
//! exponential families with quadratic variance (Fay–Herriot, Poisson–gamma,
//! binomial–beta), with EM fitting and conditional MSE estimation.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod family;

pub use family::{AreaRecord, FamilyKind, ModelParams};
pub mod shrinkage;
pub use shrinkage::{AreaPosterior, ProfileRow};
pub mod em;
pub use em::{FitConfig, FitResult, FitSummary, PMode};
pub mod cmse;
pub use cmse::{CmseComponents, DerivativeConfig, UncertaintyEstimates};
pub mod sim;
pub use sim::{CmseEvalDesign, LatentLaw, SimDesign};
