//! Knowledge-concept recommendation over a heterogeneous information network.
//!
//! Node representations are learned twice: from one-hop typed edges with a
//! relation-updated GCN ([`explicit`]) and from soft-selected multi-hop
//! adjacency products ([`implicit`]). Each view is enhanced against cluster
//! prototypes with a graph attention layer and a contrastive objective
//! ([`proto`]), the views are fused by dual-head attention ([`fusion`]), and
//! the model is trained with BPR and evaluated under the 1-positive /
//! 99-negative ranking protocol ([`train`], [`eval`]).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod hin;
pub mod rng;
pub mod explicit;
pub mod implicit;
pub mod proto;
pub mod fusion;
pub mod config;
pub mod model;
pub mod train;
pub mod eval;
pub mod pipeline;
pub mod checkpoint;
