//! Property graph embedding.
//!
//! The pipeline clusters nodes by their property vectors, samples a fixed
//! size two-hop neighborhood per node with a bias towards same-cluster or
//! cross-cluster neighbors, and aggregates neighbor properties through
//! trained weight matrices. Edge clusters (signs, directions) get their own
//! matrices in the edge-aware encoder.

pub mod graph;
pub mod rng;
pub mod clustering;
pub mod sampler;
pub mod encoder;
pub mod trainer;
pub mod synthetic;
pub mod eval;
pub mod experiment;
pub mod analysis;
pub mod config;
pub mod pipeline;
