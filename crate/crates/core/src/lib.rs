//! Leader-follower next-sample prediction for bilateral haptic teleoperation.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`trace_io`] ingests, generates, filters and splits haptic traces.
//! * [`predictor`] holds the ARMA baseline and the leader/follower networks.
//! * [`info_metrics`] provides digamma, the k-NN mutual information estimator
//!   and histogram KL divergence.
//! * [`lefo_game`] runs the alternating leader/follower training loop.
//! * [`bound_analysis`] certifies the second-order loss upper bound between
//!   consecutive checkpoints.
//! * [`sim_harness`] replays traces over a lossy channel and measures
//!   recovery accuracy and inference latency.

pub mod bound_analysis;
pub mod info_metrics;
pub mod lefo_game;
pub mod predictor;
pub mod sim_harness;
pub mod trace_io;

pub use trace_io::{Features, HapticSample, Trace};
