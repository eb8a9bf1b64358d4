//! The two host models for the memory layer: an encoder-decoder whose decoder
//! cross-attention reads memory, and a decoder-only model whose causal
//! self-attention reads memory. Pre-norm blocks, GELU feed-forward layers,
//! sinusoidal positions.

mod checkpoint;
mod config;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use params::{AttnIdx, DecLayer, EncLayer, FfnIdx, Layout};

use thiserror::Error;

use crate::cmr::{attend, memory_update, AttentionVars, CompressiveMemory, MemoryError, MemoryRead};
use crate::data::Vocab;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("memory shape {actual:?} does not fit model shape {expected:?}")]
    MemoryShape {
        expected: crate::cmr::MemoryShape,
        actual: crate::cmr::MemoryShape,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One supervised example as token ids. `target` carries no end token; the
/// model appends [`Vocab::EOS_ID`] itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

fn sinusoid(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(max_len, d, data).expect("sinusoid shape")
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Tensor>,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let layout = Layout::new(&config);
        let params = layout.init(config.seed);
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let layout = Layout::new(&config);
        if params.len() != layout.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                layout.names.len(),
                params.len()
            )));
        }
        for ((p, shape), name) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if p.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let positions = sinusoid(config.max_seq_len, config.d_model);
        Ok(Self {
            config,
            layout,
            params,
            positions,
        })
    }

    pub fn empty_memory(&self) -> CompressiveMemory {
        CompressiveMemory::empty(self.config.memory_shape())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_memory(&self, mem: &CompressiveMemory) -> Result<()> {
        let expected = self.config.memory_shape();
        if mem.shape() != expected {
            return Err(ModelError::MemoryShape {
                expected,
                actual: mem.shape(),
            });
        }
        Ok(())
    }

    /// Memory reads for every CMR site, as tape constants.
    pub fn memory_reads(&self, tape: &mut Tape, mem: &CompressiveMemory) -> Result<Vec<MemoryRead>> {
        self.check_memory(mem)?;
        Ok((0..self.config.num_layers)
            .map(|l| MemoryRead::constant(tape, mem, l, self.config.epsilon))
            .collect())
    }

    fn embed(&self, tape: &mut Tape, p: &[Var], ids: &[usize]) -> Result<Var> {
        let x = tape.embedding(p[self.layout.embed], ids)?;
        let d = self.config.d_model;
        let pos = Tensor::matrix(ids.len(), d, self.positions.data()[..ids.len() * d].to_vec())?;
        let pos = tape.constant(pos);
        Ok(tape.add(x, pos)?)
    }

    fn attn_vars(tape: &mut Tape, p: &[Var], a: &AttnIdx, heads: usize) -> AttentionVars {
        let gamma = match a.gamma {
            Some(g) => p[g],
            None => tape.constant(Tensor::scalar(0.0)),
        };
        AttentionVars {
            w_q: p[a.wq],
            w_k: p[a.wk],
            w_v: p[a.wv],
            gamma,
            num_heads: heads,
        }
    }

    /// Pre-norm attention with residual. `kv` defaults to the normalized
    /// input. Returns the new stream and the normalized input.
    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &self,
        tape: &mut Tape,
        p: &[Var],
        a: &AttnIdx,
        x: Var,
        kv: Option<Var>,
        read: Option<&MemoryRead>,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let h = tape.layer_norm(x, p[a.ln_g], p[a.ln_b])?;
        let vars = Self::attn_vars(tape, p, a, self.config.num_heads);
        let heads = attend(tape, h, kv.unwrap_or(h), &vars, read, causal)?;
        let o = tape.matmul(heads, p[a.wo])?;
        Ok((tape.add(x, o)?, h))
    }

    fn ffn_block(&self, tape: &mut Tape, p: &[Var], f: &FfnIdx, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, p[f.ln_g], p[f.ln_b])?;
        let u = tape.matmul(h, p[f.w1])?;
        let u = tape.add_row(u, p[f.b1])?;
        let u = tape.gelu(u);
        let o = tape.matmul(u, p[f.w2])?;
        let o = tape.add_row(o, p[f.b2])?;
        Ok(tape.add(x, o)?)
    }

    fn logits(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let (g, b) = self.layout.dec_ln;
        let h = tape.layer_norm(x, p[g], p[b])?;
        Ok(match self.layout.out {
            Some(o) => tape.matmul(h, p[o])?,
            None => tape.matmul_bt(h, p[self.layout.embed])?,
        })
    }

    /// Encoder output sequence (final-normalized), `N × d_model`.
    pub fn encode(&self, tape: &mut Tape, p: &[Var], ids: &[usize]) -> Result<Var> {
        self.check_tokens(ids)?;
        let (g, b) = self
            .layout
            .enc_ln
            .ok_or_else(|| ModelError::Config("decoder-only model has no encoder".into()))?;
        let mut x = self.embed(tape, p, ids)?;
        for layer in &self.layout.enc {
            x = self.attn_block(tape, p, &layer.attn, x, None, None, false)?.0;
            x = self.ffn_block(tape, p, &layer.ffn, x)?;
        }
        Ok(tape.layer_norm(x, p[g], p[b])?)
    }

    /// Decoder logits (`T × V`) over `enc`, reading `reads` in every
    /// cross-attention when given.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &[Var],
        enc: Var,
        dec_ids: &[usize],
        reads: Option<&[MemoryRead]>,
    ) -> Result<Var> {
        self.check_tokens(dec_ids)?;
        let mut x = self.embed(tape, p, dec_ids)?;
        for (l, layer) in self.layout.dec.iter().enumerate() {
            x = self.attn_block(tape, p, &layer.self_attn, x, None, None, true)?.0;
            let cross = layer.cross.as_ref().expect("encoder-decoder layout");
            x = self
                .attn_block(tape, p, cross, x, Some(enc), reads.map(|r| &r[l]), false)?
                .0;
            x = self.ffn_block(tape, p, &layer.ffn, x)?;
        }
        self.logits(tape, p, x)
    }

    /// Decoder-only logits plus the normalized input of every layer's
    /// attention (the sequences the memory stores).
    pub fn decode_only(
        &self,
        tape: &mut Tape,
        p: &[Var],
        ids: &[usize],
        reads: Option<&[MemoryRead]>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_tokens(ids)?;
        let mut x = self.embed(tape, p, ids)?;
        let mut hidden = Vec::with_capacity(self.layout.dec.len());
        for (l, layer) in self.layout.dec.iter().enumerate() {
            let (nx, h) = self.attn_block(tape, p, &layer.self_attn, x, None, reads.map(|r| &r[l]), true)?;
            hidden.push(h);
            x = self.ffn_block(tape, p, &layer.ffn, nx)?;
        }
        Ok((self.logits(tape, p, x)?, hidden))
    }

    /// Encoder-decoder logits for teacher-forced `decoder_tokens`. With
    /// `use_memory` false the gate is bypassed and `mem` is ignored.
    pub fn forward_encdec(
        &self,
        input: &[usize],
        decoder_tokens: &[usize],
        mem: &CompressiveMemory,
        use_memory: bool,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, input)?;
        let reads = if use_memory {
            Some(self.memory_reads(&mut tape, mem)?)
        } else {
            None
        };
        let logits = self.decode(&mut tape, &p, enc, decoder_tokens, reads.as_deref())?;
        Ok(tape.value(logits).clone())
    }

    pub fn forward_deconly(&self, tokens: &[usize], mem: &CompressiveMemory, use_memory: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let reads = if use_memory {
            Some(self.memory_reads(&mut tape, mem)?)
        } else {
            None
        };
        let (logits, _) = self.decode_only(&mut tape, &p, tokens, reads.as_deref())?;
        Ok(tape.value(logits).clone())
    }

    /// The sequences each CMR site stores for a demonstration, computed with
    /// memory reads disabled.
    pub fn memory_sources(&self, tokens: &[usize]) -> Result<Vec<Tensor>> {
        Ok(self.memory_sources_many(&[tokens])?.pop().unwrap_or_default())
    }

    /// [`Model::memory_sources`] for several demonstrations, binding the
    /// parameters once.
    pub fn memory_sources_many(&self, demos: &[&[usize]]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mut out = Vec::with_capacity(demos.len());
        for tokens in demos {
            let mark = tape.len();
            let sources = match self.config.variant {
                Variant::EncDec => {
                    let enc = self.encode(&mut tape, &p, tokens)?;
                    vec![tape.value(enc).clone(); self.config.num_layers]
                }
                Variant::DecOnly => {
                    let (_, hidden) = self.decode_only(&mut tape, &p, tokens, None)?;
                    hidden.into_iter().map(|h| tape.value(h).clone()).collect()
                }
            };
            tape.truncate(mark);
            out.push(sources);
        }
        Ok(out)
    }

    /// Adds already computed memory sources to `mem` and counts one stored
    /// demonstration.
    pub fn store_sources(&self, sources: &[Tensor], mem: &mut CompressiveMemory) -> Result<()> {
        self.check_memory(mem)?;
        for (l, (site, x)) in self.layout.cmr_sites().into_iter().zip(sources).enumerate() {
            memory_update(mem, l, &self.params[site.wk], &self.params[site.wv], x)?;
        }
        mem.mark_stored();
        Ok(())
    }

    /// Runs the demonstration through the model without reading memory and
    /// adds its keys and values to `mem` at every CMR site.
    pub fn store_instance(&self, tokens: &[usize], mem: &mut CompressiveMemory) -> Result<()> {
        self.check_memory(mem)?;
        let sources = self.memory_sources(tokens)?;
        self.store_sources(&sources, mem)
    }

    /// The memory holding only `tokens`: `store_instance` from an empty base.
    pub fn memory_delta(&self, tokens: &[usize]) -> Result<CompressiveMemory> {
        let mut mem = self.empty_memory();
        self.store_instance(tokens, &mut mem)?;
        Ok(mem)
    }

    /// Tokens a demonstration contributes to memory.
    pub fn demo_tokens(&self, ex: &Example) -> Vec<usize> {
        let mut t = ex.input.clone();
        if self.config.store_target {
            t.extend_from_slice(&ex.target);
            t.push(Vocab::EOS_ID);
        }
        t.truncate(self.config.max_seq_len);
        t
    }

    /// Teacher-forced mean token loss of `ex`, reading `reads` when given.
    /// Also returns the encoder output for encoder-decoder models.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &[Var],
        ex: &Example,
        reads: Option<&[MemoryRead]>,
    ) -> Result<(Var, Option<Var>)> {
        let mut labels = ex.target.clone();
        labels.push(Vocab::EOS_ID);
        match self.config.variant {
            Variant::EncDec => {
                let enc = self.encode(tape, p, &ex.input)?;
                let mut dec_in = vec![Vocab::BOS_ID];
                dec_in.extend_from_slice(&ex.target);
                let logits = self.decode(tape, p, enc, &dec_in, reads)?;
                let mask = vec![true; labels.len()];
                Ok((tape.cross_entropy(logits, &labels, &mask)?, Some(enc)))
            }
            Variant::DecOnly => {
                let mut seq = ex.input.clone();
                seq.extend_from_slice(&ex.target);
                let n_in = ex.input.len();
                let (logits, _) = self.decode_only(tape, p, &seq, reads)?;
                // position i predicts token i + 1; only target tokens and the end count
                let mut next = seq[1..].to_vec();
                next.push(Vocab::EOS_ID);
                let mask: Vec<bool> = (0..seq.len()).map(|i| i + 1 >= n_in).collect();
                Ok((tape.cross_entropy(logits, &next, &mask)?, None))
            }
        }
    }

    /// Argmax decoding until the end token or `max_new` tokens. `mem` of
    /// `None` disables memory reads. The end token is not returned.
    pub fn greedy_decode(&self, input: &[usize], mem: Option<&CompressiveMemory>, max_new: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let reads = match mem {
            Some(m) => Some(self.memory_reads(&mut tape, m)?),
            None => None,
        };
        let argmax_last = |tape: &Tape, logits: Var| {
            let t = tape.value(logits);
            let row = t.row(t.rows() - 1);
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        };
        let mut out = Vec::new();
        match self.config.variant {
            Variant::EncDec => {
                let enc = self.encode(&mut tape, &p, input)?;
                let mut dec = vec![Vocab::BOS_ID];
                let mark = tape.len();
                while out.len() < max_new && dec.len() < self.config.max_seq_len {
                    let logits = self.decode(&mut tape, &p, enc, &dec, reads.as_deref())?;
                    let next = argmax_last(&tape, logits);
                    tape.truncate(mark);
                    if next == Vocab::EOS_ID {
                        break;
                    }
                    out.push(next);
                    dec.push(next);
                }
            }
            Variant::DecOnly => {
                let mut seq = input.to_vec();
                self.check_tokens(&seq)?;
                let mark = tape.len();
                while out.len() < max_new && seq.len() < self.config.max_seq_len {
                    let (logits, _) = self.decode_only(&mut tape, &p, &seq, reads.as_deref())?;
                    let next = argmax_last(&tape, logits);
                    tape.truncate(mark);
                    if next == Vocab::EOS_ID {
                        break;
                    }
                    out.push(next);
                    seq.push(next);
                }
            }
        }
        Ok(out)
    }
}
