//! Crowdsourced traffic-incident detection over a hexagonal grid.
//!
//! Reports are grouped into incident hypotheses, each hypothesis is scored
//! with a sequential Bayesian update (is there an incident, and in which
//! cell), and the scores feed per-cell classifiers evaluated against
//! official records.

pub mod fusion;
pub mod geo;
pub mod grouping;
pub mod ingest;
pub mod priors;
pub mod pipeline;
pub mod classify;
pub mod synth;
pub mod eval;
