//! Embedding of collaborative rating data into low-dimensional Euclidean space.
//!
//! The pipeline: load sparse user/item ratings ([`ratings`]), learn a monotone
//! step function mapping distance to rating ([`rating_function`]), and run a
//! Metropolis-Hastings sampler with optional simulated annealing inside an EM
//! loop to place users and items so that small distances mean high ratings
//! ([`sampler`]). Embeddings are scored with a tie-aware rank correlation
//! against held-out ratings ([`eval`]), and a regression-based densification
//! of the rating matrix is available both as a preprocessing step and as a
//! sampler variant ([`imputation`]).

pub mod eval;
pub mod imputation;
pub mod rating_function;
pub mod ratings;
pub mod sampler;
pub mod stats;
