//! Discovery and confirmation of effect modification in matched-pair
//! observational studies.
//!
//! The workflow splits the pairs in two. A regression tree grown on the
//! first half proposes subgroups; the second half tests, with
//! randomization-based joint deviates and a sensitivity analysis for
//! unmeasured confounding, whether any node's effect differs from the
//! population effect.

pub mod balance;
pub mod binary;
pub mod confirm;
pub mod conversion;
pub mod discovery;
pub mod ingest;
pub mod joint;
pub mod matching;
pub mod error;
pub mod model;
pub mod mvn;
pub mod normal;
pub mod scan;
pub mod signed_rank;
pub mod simlab;
pub mod tree;

pub use conversion::{build_conversion_matrix, ConversionMatrix};
pub use error::{Error, Result};
pub use model::{CovariateKind, CovariateSpec, MatchedPair, MatchedPairSet, ObservationRecord, OutcomeKind, Schema};
pub use tree::{assign_pairs, EffectTree, SplitRule, TreeBuilder};
