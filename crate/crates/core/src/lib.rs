//! Group-relative policy optimization with rule-based rewards on an exactly
//! differentiable toy policy, plus the data-curation and evaluation tooling
//! around it.

pub mod dataforge;
pub mod eval;
pub mod objective;
pub mod policy;
pub mod prompting;
pub mod records;
pub mod reward;
pub mod rng;
pub mod tuner;
pub mod vocab;
