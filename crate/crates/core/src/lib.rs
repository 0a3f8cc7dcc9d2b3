//! Directional Rockafellar–Uryasev regression under Γ-biased sampling.
//!
//! * [`losses`]: squared, RU, dRU and squared pinball losses with subgradients.
//! * [`robustness`]: worst-case distributions over Γ-bounded density ratios,
//!   `η(Γ)`, CVaR and an independent LP oracle.
//! * [`nn`]: a small dense network with manual backprop, Adam and early stopping.
//! * [`sampling`]: synthetic populations and directional Γ-biased samples.
//! * [`poststrat`]: post-stratification over covariate cell tables.
//! * [`eval`]: the bias-removal sweep and its b-score summary.
//!
//! Losses, worst-case sets and post-stratification are generic over
//! [`scalar::Scalar`], which covers `f32`, `f64` and exact rationals; the
//! network needs floating point ([`scalar::Real`]).

pub mod eval;
pub mod losses;
pub mod nn;
pub mod poststrat;
pub mod robustness;
pub mod sampling;
pub mod scalar;
pub mod seed;

pub use num_rational::Rational64;

pub type LossSpecF64 = losses::LossSpec<f64>;
pub type LossSpecF32 = losses::LossSpec<f32>;
pub type MetaInfoF64 = losses::MetaInfo<f64>;
pub type MlpF64 = nn::Mlp<f64>;
pub type MlpF32 = nn::Mlp<f32>;
pub type TrainedModelF64 = nn::TrainedModel<f64>;
pub type Distribution = robustness::DiscreteDistribution<f64>;
pub type ExactDistribution = robustness::DiscreteDistribution<Rational64>;
pub type WorstCaseF64 = robustness::WorstCase<f64>;
pub type ExactWorstCase = robustness::WorstCase<Rational64>;
pub type CellTableF64 = poststrat::CellTable<f64>;
