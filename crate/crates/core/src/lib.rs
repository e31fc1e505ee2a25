//! Persona-aware conversation models trained with multi-task learning.
//!
//! A conversational Seq2Seq task and an autoencoder task over a speaker's
//! non-conversational posts share one LSTM decoder. The crate covers the whole
//! loop: corpus preparation, a small reverse-mode autodiff engine, the models,
//! Adam training with the alternating multi-task schedule, beam search with
//! MMI reranking and weight tuning, and the evaluation metrics.

pub mod tensor;
pub mod corpus;
pub mod model;
pub mod training;
pub mod eval;
pub mod decoding;
pub mod checkpoint;
pub mod shard;
pub mod synth;
