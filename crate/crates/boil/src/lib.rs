//! Extracting long-horizon multi-agent movement strategies from environment
//! structure.
//!
//! The pipeline: build a grid environment and its directed movement graph
//! ([`environment`]), precompute per-edge visibility vectors ([`visibility`]),
//! optimize the chain's transition probabilities against an entropy-surrogate
//! coverage loss with a gradient-free PageRank loop ([`optimizer`]), then let
//! agent strategies ([`agents`]) sample the learned distribution through a
//! non-reversible Metropolis-Hastings kernel ([`sampler`]) inside the
//! [`simulator`], and evaluate convergence and bounds with [`metrics`].

pub mod agents;
pub mod cli;
pub mod environment;
pub mod markov;
pub mod metrics;
pub mod optimizer;
pub mod sampler;
pub mod simulator;
pub mod visibility;
