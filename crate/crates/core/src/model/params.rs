use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use crate::tensor::Tensor;

/// Parameter positions of one attention block.
#[derive(Debug, Clone)]
pub struct AttnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    /// Present only where the block reads memory.
    pub gamma: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FfnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct EncLayer {
    pub attn: AttnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone)]
pub struct DecLayer {
    pub self_attn: AttnIdx,
    pub cross: Option<AttnIdx>,
    pub ffn: FfnIdx,
}

/// Names, shapes and roles of every parameter, in declaration order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub embed: usize,
    pub out: Option<usize>,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Option<(usize, usize)>,
    pub dec: Vec<DecLayer>,
    pub dec_ln: (usize, usize),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize, gated: bool) -> AttnIdx {
        AttnIdx {
            ln_g: self.add(format!("{prefix}.ln.gain"), &[1, d]),
            ln_b: self.add(format!("{prefix}.ln.bias"), &[1, d]),
            wq: self.add(format!("{prefix}.w_q"), &[d, d]),
            wk: self.add(format!("{prefix}.w_k"), &[d, d]),
            wv: self.add(format!("{prefix}.w_v"), &[d, d]),
            wo: self.add(format!("{prefix}.w_o"), &[d, d]),
            gamma: gated.then(|| self.add(format!("{prefix}.gamma"), &[1, 1])),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FfnIdx {
        FfnIdx {
            ln_g: self.add(format!("{prefix}.ln.gain"), &[1, d]),
            ln_b: self.add(format!("{prefix}.ln.bias"), &[1, d]),
            w1: self.add(format!("{prefix}.w1"), &[d, ff]),
            b1: self.add(format!("{prefix}.b1"), &[1, ff]),
            w2: self.add(format!("{prefix}.w2"), &[ff, d]),
            b2: self.add(format!("{prefix}.b2"), &[1, d]),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let embed = b.add("embed".into(), &[cfg.vocab_size, d]);
        let out = (!cfg.tie_embeddings).then(|| b.add("out".into(), &[d, cfg.vocab_size]));
        let mut enc = Vec::new();
        let mut enc_ln = None;
        if cfg.variant == Variant::EncDec {
            for l in 0..cfg.num_layers {
                enc.push(EncLayer {
                    attn: b.attn(&format!("enc{l}.self"), d, false),
                    ffn: b.ffn(&format!("enc{l}.ffn"), d, cfg.ff_dim),
                });
            }
            enc_ln = Some((b.add("enc.ln.gain".into(), &[1, d]), b.add("enc.ln.bias".into(), &[1, d])));
        }
        let mut dec = Vec::new();
        for l in 0..cfg.num_layers {
            let (self_attn, cross) = match cfg.variant {
                Variant::EncDec => (
                    b.attn(&format!("dec{l}.self"), d, false),
                    Some(b.attn(&format!("dec{l}.cross"), d, true)),
                ),
                Variant::DecOnly => (b.attn(&format!("dec{l}.self"), d, true), None),
            };
            dec.push(DecLayer {
                self_attn,
                cross,
                ffn: b.ffn(&format!("dec{l}.ffn"), d, cfg.ff_dim),
            });
        }
        let dec_ln = (b.add("dec.ln.gain".into(), &[1, d]), b.add("dec.ln.bias".into(), &[1, d]));
        Layout {
            names: b.names,
            shapes: b.shapes,
            embed,
            out,
            enc,
            enc_ln,
            dec,
            dec_ln,
        }
    }

    /// The attention block of each layer that reads memory.
    pub fn cmr_sites(&self) -> Vec<&AttnIdx> {
        self.dec
            .iter()
            .map(|l| l.cross.as_ref().unwrap_or(&l.self_attn))
            .collect()
    }

    /// Seeded initial values: uniform Glorot for matrices, unit-range
    /// uniform embeddings, unit layer-norm gains, zero biases and gates.
    pub fn init(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.names
            .iter()
            .zip(&self.shapes)
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with("gain") {
                    vec![1.0; len]
                } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with("gamma") {
                    vec![0.0; len]
                } else {
                    let a = if name == "embed" {
                        1.0
                    } else {
                        (6.0 / (shape[0] + shape[1]) as f64).sqrt()
                    };
                    (0..len).map(|_| rng.gen_range(-a..a)).collect()
                };
                Tensor::new(shape.clone(), data).expect("layout shape")
            })
            .collect()
    }
}
