//! Compressive memory-based retrieval (CMR) for retrieval-augmented event
//! argument extraction.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! compressive memory attention ([`cmr`]), two micro transformer hosts
//! ([`model`]), a similarity retriever ([`retrieval`]), the training and
//! batched-preloading inference loops ([`pipeline`]), a synthetic extraction
//! corpus with its metrics ([`data`]), and the verification checks the `cmr`
//! binary exposes.

pub mod cli;
pub mod experiment;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod cmr;
pub mod data;
pub mod pipeline;
pub mod retrieval;
pub mod verify;
