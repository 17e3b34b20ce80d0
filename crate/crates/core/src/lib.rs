//! Behavioral profiles for IoT devices.
//!
//! The pipeline reads packet traces ([`pcap`]), folds them into per-device
//! flows ([`flow`]), turns flows into whitelist profiles ([`mudgen`],
//! [`mudjson`]), checks those profiles for redundant rules ([`metagraph`]) and
//! against zone policies ([`compliance`]), and identifies devices at run time
//! by scoring observed traffic against a library of profiles ([`runtime`]).
//!
//! Scores are generic over [`scalar::Scalar`]; the aliases below fix the
//! usual choices.

pub mod compliance;
pub mod flow;
pub mod metagraph;
pub mod model;
pub mod mudgen;
pub mod mudjson;
pub mod pcap;
pub mod ports;
pub mod runtime;
pub mod scalar;
pub mod synth;

use num_rational::Ratio;

pub use model::{Channel, Direction, Endpoint, MacAddr, MudAce, MudProfile};

pub type SimilarityScore = runtime::SimilarityScore<f64>;
pub type ChannelScore = runtime::ChannelScore<f64>;
pub type Thresholds = runtime::Thresholds<f64>;
pub type IdentificationState = runtime::IdentificationState<f64>;
pub type Identifier = runtime::Identifier<f64>;

/// Exact rational scores, for checks that must not round.
pub type Exact = Ratio<u64>;
pub type ExactSimilarityScore = runtime::SimilarityScore<Exact>;
pub type ExactThresholds = runtime::Thresholds<Exact>;
pub type ExactIdentifier = runtime::Identifier<Exact>;

pub type SimilarityScoreF32 = runtime::SimilarityScore<f32>;
