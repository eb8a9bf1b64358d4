use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

use super::memory::{CompressiveMemory, MemoryError, MemorySlot};

/// Tape handles for one attention block. The projections are `d_model ×
/// d_model`; head `h` owns columns `h·d_k .. (h+1)·d_k` of each, which is the
/// per-head `W_q`, `W_k`, `W_v` laid side by side. `gamma` is a `1×1` gate
/// shared by every head of the layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gamma: Var,
    pub num_heads: usize,
}

/// Per-head `(M, n)` handles for one layer, `M` as `d_k × d_v` and `n` as a
/// `1 × d_k` row.
#[derive(Debug, Clone)]
pub struct MemoryRead {
    pub heads: Vec<(Var, Var)>,
    pub epsilon: f64,
}

impl MemoryRead {
    /// Places one layer of a stored memory on the tape as constants.
    pub fn constant(tape: &mut Tape, mem: &CompressiveMemory, layer: usize, epsilon: f64) -> Self {
        let s = mem.shape();
        let heads = (0..s.num_heads)
            .map(|h| {
                let slot = mem.slot(layer, h);
                let m = tape.constant(Tensor::matrix(s.d_k, s.d_v, slot.m.clone()).expect("slot shape"));
                let n = tape.constant(Tensor::matrix(1, s.d_k, slot.n.clone()).expect("slot shape"));
                (m, n)
            })
            .collect();
        Self { heads, epsilon }
    }

    /// Builds the memory of a single demonstration `x_demo` directly on the
    /// tape, so gradients can flow from a later read back into the
    /// projections and the demonstration itself.
    pub fn tracked(tape: &mut Tape, x_demo: Var, params: &AttentionVars, epsilon: f64) -> Result<Self> {
        let k = tape.matmul(x_demo, params.w_k)?;
        let v = tape.matmul(x_demo, params.w_v)?;
        let d_k = tape.value(k).cols() / params.num_heads;
        let d_v = tape.value(v).cols() / params.num_heads;
        let mut heads = Vec::with_capacity(params.num_heads);
        for h in 0..params.num_heads {
            let kh = tape.slice_cols(k, h * d_k, d_k)?;
            let vh = tape.slice_cols(v, h * d_v, d_v)?;
            heads.push(memory_delta_head(tape, kh, vh)?);
        }
        Ok(Self { heads, epsilon })
    }
}

/// `(σ(K)ᵀV, Σ_j σ(K_j))` for one head's key and value projections.
pub fn memory_delta_head(tape: &mut Tape, k: Var, v: Var) -> Result<(Var, Var)> {
    let sk = tape.elu_plus_one(k);
    let m = tape.matmul_at(sk, v)?;
    let n = tape.col_sum(sk)?;
    Ok((m, n))
}

/// `σ(Q)M / (σ(Q)n + ε)`, dividing each row by its own normalizer.
pub fn retrieve_head(tape: &mut Tape, q: Var, m: Var, n: Var, epsilon: f64) -> Result<Var> {
    let sq = tape.elu_plus_one(q);
    let num = tape.matmul(sq, m)?;
    let den = tape.matmul_bt(sq, n)?;
    let den = tape.add_scalar(den, epsilon);
    tape.row_divide(num, den)
}

/// `softmax(QKᵀ / √d_model) V`. With `causal`, query `i` only sees keys `≤ i`.
pub fn dot_attention_head(tape: &mut Tape, q: Var, k: Var, v: Var, d_model: usize, causal: bool) -> Result<Var> {
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d_model as f64).sqrt());
    let probs = tape.row_softmax(scores, causal)?;
    tape.matmul(probs, v)
}

pub fn gated_combine(tape: &mut Tape, a_ret: Var, a_dot: Var, gamma: Var) -> Result<Var> {
    tape.gate(a_ret, a_dot, gamma)
}

/// Multi-head attention of `x_q` over `x_kv`, fused with a memory read when
/// `memory` is given. Returns the concatenated head outputs (`Nq × d_model`)
/// before the output projection. Without `memory` the gate is bypassed and
/// the result is plain dot-product attention.
pub fn attend(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    params: &AttentionVars,
    memory: Option<&MemoryRead>,
    causal: bool,
) -> Result<Var> {
    let d_model = tape.value(x_q).cols();
    if tape.value(x_kv).cols() != d_model {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: tape.value(x_q).shape().to_vec(),
            right: tape.value(x_kv).shape().to_vec(),
        });
    }
    let q = tape.matmul(x_q, params.w_q)?;
    let k = tape.matmul(x_kv, params.w_k)?;
    let v = tape.matmul(x_kv, params.w_v)?;
    let d_k = tape.value(q).cols() / params.num_heads;
    let d_v = tape.value(v).cols() / params.num_heads;
    let mut heads = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_v, d_v)?;
        let a_dot = dot_attention_head(tape, qh, kh, vh, d_model, causal)?;
        let out = match memory {
            Some(read) => {
                let (m, n) = read.heads[h];
                let a_ret = retrieve_head(tape, qh, m, n, read.epsilon)?;
                gated_combine(tape, a_ret, a_dot, params.gamma)?
            }
            None => a_dot,
        };
        heads.push(out);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    tape.concat_cols(&heads)
}

/// Adds one demonstration's contribution to every head of `layer`:
/// `M += σ(XW_k)ᵀ(XW_v)` and `n += Σ_j σ(XW_k)_j`. Does not bump the stored
/// count; a demonstration is counted once after all layers are updated.
pub fn memory_update(
    mem: &mut CompressiveMemory,
    layer: usize,
    w_k: &Tensor,
    w_v: &Tensor,
    x: &Tensor,
) -> std::result::Result<(), MemoryError> {
    let shape = mem.shape();
    if layer >= shape.num_layers {
        return Err(MemoryError::LayerOutOfRange(layer));
    }
    let (rows, width) = x.require_matrix("memory_update")?;
    if rows == 0 {
        return Err(MemoryError::EmptyDemonstration);
    }
    if width != w_k.rows() {
        return Err(MemoryError::WidthMismatch {
            expected: w_k.rows(),
            actual: width,
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wk = tape.constant(w_k.clone());
    let wv = tape.constant(w_v.clone());
    let k = tape.matmul(xv, wk)?;
    let v = tape.matmul(xv, wv)?;
    for h in 0..shape.num_heads {
        let kh = tape.slice_cols(k, h * shape.d_k, shape.d_k)?;
        let vh = tape.slice_cols(v, h * shape.d_v, shape.d_v)?;
        let (m, n) = memory_delta_head(&mut tape, kh, vh)?;
        let (md, nd) = (tape.value(m).data().to_vec(), tape.value(n).data().to_vec());
        mem.accumulate(layer, h, &md, &nd);
    }
    Ok(())
}

/// Reads one head's memory with projected queries `q_proj` (`N × d_k`).
pub fn memory_retrieve(slot: &MemorySlot, q_proj: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d_k = slot.n.len();
    let d_v = slot.m.len() / d_k.max(1);
    let (_, width) = q_proj.require_matrix("memory_retrieve")?;
    if width != d_k {
        return Err(TensorError::ShapeMismatch {
            op: "memory_retrieve",
            left: q_proj.shape().to_vec(),
            right: vec![d_k, d_v],
        });
    }
    let mut tape = Tape::new();
    let q = tape.constant(q_proj.clone());
    let m = tape.constant(Tensor::matrix(d_k, d_v, slot.m.clone())?);
    let n = tape.constant(Tensor::matrix(1, d_k, slot.n.clone())?);
    let out = retrieve_head(&mut tape, q, m, n, epsilon)?;
    Ok(tape.value(out).clone())
}

/// Value-level multi-head dot-product attention, one output per head.
#[allow(clippy::too_many_arguments)]
pub fn dot_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    num_heads: usize,
    causal: bool,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let xq = tape.constant(x_q.clone());
    let xkv = tape.constant(x_kv.clone());
    let d_model = x_q.cols();
    if x_kv.cols() != d_model {
        return Err(TensorError::ShapeMismatch {
            op: "dot_attention",
            left: x_q.shape().to_vec(),
            right: x_kv.shape().to_vec(),
        });
    }
    let wq = tape.constant(w_q.clone());
    let wk = tape.constant(w_k.clone());
    let wv = tape.constant(w_v.clone());
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(xkv, wk)?;
    let v = tape.matmul(xkv, wv)?;
    let d_k = w_q.cols() / num_heads;
    let d_v = w_v.cols() / num_heads;
    let mut out = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_v, d_v)?;
        let a = dot_attention_head(&mut tape, qh, kh, vh, d_model, causal)?;
        out.push(tape.value(a).clone());
    }
    Ok(out)
}

/// Value-level gate: `S(γ)·a_ret + (1 − S(γ))·a_dot`.
pub fn gated_combine_values(a_ret: &Tensor, a_dot: &Tensor, gamma: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let r = tape.constant(a_ret.clone());
    let d = tape.constant(a_dot.clone());
    let g = tape.constant(Tensor::scalar(gamma));
    let out = tape.gate(r, d, g)?;
    Ok(tape.value(out).clone())
}
