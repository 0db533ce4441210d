//! Deterministic simulator for node-capacitated clique protocols, plus the
//! protocol stack built on it: routing, model simulations, multicast and
//! aggregation trees, linear sketches, and graph connectivity / minimum
//! spanning forest algorithms with full round and message accounting.

pub mod bits;
pub mod bsp;
pub mod cc;
pub mod collective;
pub mod comm;
pub mod engine;
pub mod field;
pub mod graph;
pub mod group;
pub mod hash;
pub mod oracle;
pub mod pram;
pub mod route;
pub mod sketch;
pub mod sort;

pub use engine::{ceil_log2, Engine, Message, NodeId, RoundReport, SimConfig, SimError};
