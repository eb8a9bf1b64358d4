//! A second, loop-only implementation of both model variants. It reads the
//! parameters by name and shares no code with the tape-based forward pass
//! beyond the scalar activations, so agreement between the two checks the
//! whole stack.

use std::collections::HashMap;

use crate::cmr::CompressiveMemory;
use crate::model::{Model, Variant};
use crate::tensor::{elu_plus_one, sigmoid, Tensor};

type Mat = Vec<Vec<f64>>;

/// How each CMR site combines its memory read with dot attention.
#[derive(Debug, Clone, Copy)]
pub enum ReadMode<'a> {
    /// No gate: plain dot attention.
    Off,
    Memory(&'a CompressiveMemory),
    /// `0.5 · A_dot`, what an empty memory with a zero gate must produce.
    HalfDot,
}

struct Params<'a> {
    by_name: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Params<'a> {
    fn get(&self, name: &str) -> &'a Tensor {
        self.by_name.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self.get(name);
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn row(&self, name: &str) -> Vec<f64> {
        self.get(name).data().to_vec()
    }
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|ar| {
            (0..n)
                .map(|j| ar.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn cols(x: &Mat, start: usize, width: usize) -> Mat {
    x.iter().map(|r| r[start..start + width].to_vec()).collect()
}

fn position(pos: usize, i: usize, d: usize) -> f64 {
    let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn embed(p: &Params, ids: &[usize]) -> Mat {
    let e = p.get("embed");
    let d = e.cols();
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| (0..d).map(|i| e.get(id, i) + position(pos, i, d)).collect())
        .collect()
}

fn softmax_head(q: &Mat, k: &Mat, v: &Mat, d_model: usize, causal: bool) -> Mat {
    let scale = 1.0 / (d_model as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let visible = if causal { i + 1 } else { k.len() };
            let s: Vec<f64> = (0..visible)
                .map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| (0..visible).map(|j| e[j] / z * v[j][c]).sum())
                .collect()
        })
        .collect()
}

fn memory_head(q: &Mat, mem: &CompressiveMemory, layer: usize, head: usize, eps: f64) -> Mat {
    let slot = mem.slot(layer, head);
    let d_k = slot.n.len();
    let d_v = slot.m.len() / d_k;
    q.iter()
        .map(|qi| {
            let sq: Vec<f64> = qi.iter().map(|&x| elu_plus_one(x)).collect();
            let den: f64 = sq.iter().zip(&slot.n).map(|(a, b)| a * b).sum::<f64>() + eps;
            (0..d_v)
                .map(|c| (0..d_k).map(|r| sq[r] * slot.m[r * d_v + c]).sum::<f64>() / den)
                .collect()
        })
        .collect()
}

struct Ctx<'a> {
    p: Params<'a>,
    d: usize,
    heads: usize,
    eps: f64,
}

impl Ctx<'_> {
    /// Residual attention block; returns the new stream and its normalized input.
    fn attn(&self, prefix: &str, x: &Mat, kv: Option<&Mat>, causal: bool, read: Option<(ReadMode, usize)>) -> (Mat, Mat) {
        let h = layer_norm(x, &self.p.row(&format!("{prefix}.ln.gain")), &self.p.row(&format!("{prefix}.ln.bias")));
        let src = kv.unwrap_or(&h);
        let q = mm(&h, &self.p.mat(&format!("{prefix}.w_q")));
        let k = mm(src, &self.p.mat(&format!("{prefix}.w_k")));
        let v = mm(src, &self.p.mat(&format!("{prefix}.w_v")));
        let dh = self.d / self.heads;
        let mut joined: Mat = vec![Vec::with_capacity(self.d); h.len()];
        for head in 0..self.heads {
            let (qh, kh, vh) = (cols(&q, head * dh, dh), cols(&k, head * dh, dh), cols(&v, head * dh, dh));
            let a_dot = softmax_head(&qh, &kh, &vh, self.d, causal);
            let out = match read {
                None | Some((ReadMode::Off, _)) => a_dot,
                Some((ReadMode::HalfDot, _)) => a_dot.iter().map(|r| r.iter().map(|x| 0.5 * x).collect()).collect(),
                Some((ReadMode::Memory(mem), layer)) => {
                    let s = sigmoid(self.p.get(&format!("{prefix}.gamma")).item());
                    let a_ret = memory_head(&qh, mem, layer, head, self.eps);
                    a_ret
                        .iter()
                        .zip(&a_dot)
                        .map(|(r, d)| r.iter().zip(d).map(|(x, y)| s * x + (1.0 - s) * y).collect())
                        .collect()
                }
            };
            for (j, row) in out.into_iter().enumerate() {
                joined[j].extend(row);
            }
        }
        let o = mm(&joined, &self.p.mat(&format!("{prefix}.w_o")));
        (add(x, &o), h)
    }

    fn ffn(&self, prefix: &str, x: &Mat) -> Mat {
        let h = layer_norm(x, &self.p.row(&format!("{prefix}.ln.gain")), &self.p.row(&format!("{prefix}.ln.bias")));
        let b1 = self.p.row(&format!("{prefix}.b1"));
        let u: Mat = mm(&h, &self.p.mat(&format!("{prefix}.w1")))
            .into_iter()
            .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
            .collect();
        let b2 = self.p.row(&format!("{prefix}.b2"));
        let o: Mat = mm(&u, &self.p.mat(&format!("{prefix}.w2")))
            .into_iter()
            .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
            .collect();
        add(x, &o)
    }

    fn logits(&self, x: &Mat, tied: bool) -> Mat {
        let h = layer_norm(x, &self.p.row("dec.ln.gain"), &self.p.row("dec.ln.bias"));
        if tied {
            let e = self.p.mat("embed");
            h.iter()
                .map(|r| e.iter().map(|er| r.iter().zip(er).map(|(a, b)| a * b).sum()).collect())
                .collect()
        } else {
            mm(&h, &self.p.mat("out"))
        }
    }
}

fn ctx(model: &Model) -> Ctx<'_> {
    Ctx {
        p: Params {
            by_name: model
                .layout
                .names
                .iter()
                .map(String::as_str)
                .zip(&model.params)
                .collect(),
        },
        d: model.config.d_model,
        heads: model.config.num_heads,
        eps: model.config.epsilon,
    }
}

/// Reference encoder output.
pub fn encode(model: &Model, input: &[usize]) -> Mat {
    let c = ctx(model);
    let mut x = embed(&c.p, input);
    for l in 0..model.config.num_layers {
        x = c.attn(&format!("enc{l}.self"), &x, None, false, None).0;
        x = c.ffn(&format!("enc{l}.ffn"), &x);
    }
    layer_norm(&x, &c.p.row("enc.ln.gain"), &c.p.row("enc.ln.bias"))
}

/// Reference encoder-decoder logits.
pub fn forward_encdec(model: &Model, input: &[usize], decoder: &[usize], mode: ReadMode) -> Mat {
    assert_eq!(model.config.variant, Variant::EncDec);
    let c = ctx(model);
    let enc = encode(model, input);
    let mut x = embed(&c.p, decoder);
    for l in 0..model.config.num_layers {
        x = c.attn(&format!("dec{l}.self"), &x, None, true, None).0;
        x = c.attn(&format!("dec{l}.cross"), &x, Some(&enc), false, Some((mode, l))).0;
        x = c.ffn(&format!("dec{l}.ffn"), &x);
    }
    c.logits(&x, model.config.tie_embeddings)
}

/// Reference decoder-only logits and the normalized attention input of
/// every layer.
pub fn forward_deconly(model: &Model, tokens: &[usize], mode: ReadMode) -> (Mat, Vec<Mat>) {
    assert_eq!(model.config.variant, Variant::DecOnly);
    let c = ctx(model);
    let mut x = embed(&c.p, tokens);
    let mut hidden = Vec::new();
    for l in 0..model.config.num_layers {
        let (nx, h) = c.attn(&format!("dec{l}.self"), &x, None, true, Some((mode, l)));
        hidden.push(h);
        x = c.ffn(&format!("dec{l}.ffn"), &nx);
    }
    (c.logits(&x, model.config.tie_embeddings), hidden)
}
