//! Concept-level explanations of layered classifiers.
//!
//! The pipeline fits sparse logistic probes that tie human-named concepts to
//! hidden units, ranks concepts by the indirect effect they carry from a
//! counterfactual input change to the output, and distills the classifier
//! into a shallow decision tree over concept logits. A synthetic benchmark
//! with planted concepts supplies ground truth.

pub mod counterfactual;
pub mod error;
pub mod io;
pub mod lasso;
pub mod mediation;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod probe;
pub mod surrogate;
pub mod synth;
pub mod units;

pub use error::{Error, Result};
pub use net::{Activation, LayeredNetwork, Tensor};
pub use units::{Granularity, UnitSet};
