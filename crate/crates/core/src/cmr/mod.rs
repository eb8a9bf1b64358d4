//! Compressive memory-based retrieval: the memory store, its additive update,
//! the normalized linear-attention read, and the gated fusion with ordinary
//! dot-product attention.

mod attention;
mod memory;

pub use attention::{
    attend, dot_attention, dot_attention_head, gated_combine, gated_combine_values, memory_delta_head,
    memory_retrieve, memory_update,
    retrieve_head, AttentionVars, MemoryRead,
};
pub use memory::{Combine, CompressiveMemory, MemoryError, MemoryShape, MemorySlot};

/// Added to the retrieval denominator. With an empty memory the numerator is
/// exactly zero, so the read is exactly zero rather than 0/0.
pub const RETRIEVAL_EPSILON: f64 = 1e-6;
