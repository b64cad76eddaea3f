//! Variance-penalized expected success for entity-ambiguous queries.
//!
//! A query with several plausible target entities gets an intent
//! distribution; a ranked list earns per-intent gains; expected success is
//! their inner product, and the score subtracts `alpha` times the Bernoulli
//! standard deviation. Uncertainty comes from perturbed replicas and a
//! query-level bootstrap.

pub mod error;
pub mod gain;
pub mod intent;
pub mod io;
pub mod metric;
pub mod oracle;
pub mod pipeline;
pub mod replica;
pub mod report;
pub mod tagger;
pub mod uncertainty;
