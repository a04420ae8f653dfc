//! Next location prediction from mobility traces: GPS-derived visit
//! sequences in, a transformer decoder with an auxiliary next-travel-mode
//! task, a Markov baseline, metrics, and a synthetic world with a
//! Bayes-optimal oracle for verification.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embed;
pub mod experiments;
pub mod markov;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
