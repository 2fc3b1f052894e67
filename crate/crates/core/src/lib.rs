//! Multi-sample speculative decoding on a small deterministic transformer.
//!
//! The engine runs greedy decoding, padded ("vanilla") batched speculative
//! decoding and unpadded (EMS) batched speculative decoding over the same
//! model, records per-step acceptance and padding, and ships a simulator for
//! the padding overhead implied by geometrically distributed acceptance
//! lengths.

pub mod engine;
pub mod kv_cache;
pub mod model;
pub mod padding;
pub mod predictors;
pub mod ragged;

pub use engine::{decode, decode_greedy, decode_speculative, verify, EngineConfig, EngineError, Mode, PredictorKind};
pub use kv_cache::{AlignedGrid, KvCache, UnpadArena, WriteLedger};
pub use model::{Model, ModelConfig, ModelError};
