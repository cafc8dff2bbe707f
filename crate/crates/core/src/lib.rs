//! Group-based search-bidding engine.
//!
//! The pipeline clusters ads by learned customer-intention embeddings,
//! predicts revenue per click at the cluster level, and assigns bids at a
//! common revenue-per-spend level, either operator-supplied or derived from a
//! spend budget. A synthetic-world simulator reproduces the offline accuracy
//! comparison and the AA/AB bidding experiment at desk scale.

pub mod bid_opt;
pub mod cluster;
pub mod error;
pub mod ingest;
pub mod intent_embed;
pub mod nn;
pub mod rpc_model;
pub mod seed;
pub mod simulate;
pub mod tokenize;

pub use error::{Error, Result};
