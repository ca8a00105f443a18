//! Sparse self-speculative decoding: a toy transformer, critical-token
//! selection, the draft/verify state machine, a phase-aware batch scheduler,
//! a tiered KV manager, an analytical cost model and a serving simulator.

pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod kv_manager;
pub mod numerics;
pub mod pillar;
pub mod scheduler;
pub mod selftest;
pub mod sim;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/decoding.md")]
    struct Decoding;
    #[doc = include_str!("../../../book/src/critical-tokens.md")]
    struct CriticalTokens;
    #[doc = include_str!("../../../book/src/scheduler.md")]
    struct Scheduling;
    #[doc = include_str!("../../../book/src/kv-memory.md")]
    struct KvMemory;
    #[doc = include_str!("../../../book/src/cost-model.md")]
    struct CostModel;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
}
