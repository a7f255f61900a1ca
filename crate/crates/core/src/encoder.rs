//! Post-LN transformer encoder blocks shared by the generator and the
//! discriminator.

use crate::numerics::{Init, Initializer, ParamId, ParamStore, Real, Result, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const MASK_NEG: f64 = -1e9;
pub(crate) const INIT_STD: f64 = 0.02;

/// Transformer width settings shared by both networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights are drawn with std `1/sqrt(d_in)`, so pre-activations start at
    /// unit scale whatever the width.
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &Initializer, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.init(init, &format!("{name}.w"), &[d_in, d_out], Init::Normal(1.0 / (d_in as f64).sqrt()))?,
            b: store.init(init, &format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &Initializer, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.init(init, &format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.init(init, &format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Token + position embeddings followed by layer norm. One instance is shared
/// by every network in a model.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub norm: LayerNorm,
}

impl Embeddings {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &Initializer, vocab: usize, max_len: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            tokens: store.init(init, "embed.tokens", &[vocab, hidden], Init::Normal(INIT_STD))?,
            positions: store.init(init, "embed.positions", &[max_len, hidden], Init::Normal(INIT_STD))?,
            norm: LayerNorm::new(store, init, "embed.norm", hidden)?,
        })
    }

    /// Embeds `ids[batch * seq]`. `noise`, when given, is added to the token
    /// embeddings before positions are mixed in.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        noise: Option<Tensor<T>>,
    ) -> Result<Var> {
        let table = tape.param(store, self.tokens)?;
        let mut x = tape.embedding(table, ids, &[batch, seq])?;
        if let Some(noise) = noise {
            let n = tape.constant(noise)?;
            x = tape.add(x, n)?;
        }
        let pos_table = tape.param(store, self.positions)?;
        let pos_ids: Vec<usize> = (0..seq).collect();
        let pos = tape.embedding(pos_table, &pos_ids, &[seq])?;
        let x = tape.add(x, pos)?;
        self.norm.forward(tape, store, x)
    }
}

/// Additive attention mask, `[batch * heads, seq, seq]`, hiding padded keys.
pub fn attention_mask<T: Real>(lengths: &[usize], seq: usize, heads: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); lengths.len() * heads * seq * seq];
    for (b, &len) in lengths.iter().enumerate() {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for q in 0..seq {
                for k in len..seq {
                    data[base + q * seq + k] = T::lit(MASK_NEG);
                }
            }
        }
    }
    Tensor::new(&[lengths.len() * heads, seq, seq], data).expect("mask shape")
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &Initializer, name: &str, dims: EncoderDims) -> Result<Self> {
        let h = dims.hidden;
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.attn.query"), h, h)?,
            key: Linear::new(store, init, &format!("{name}.attn.key"), h, h)?,
            value: Linear::new(store, init, &format!("{name}.attn.value"), h, h)?,
            attn_out: Linear::new(store, init, &format!("{name}.attn.out"), h, h)?,
            attn_norm: LayerNorm::new(store, init, &format!("{name}.attn.norm"), h)?,
            ffn_in: Linear::new(store, init, &format!("{name}.ffn.in"), h, dims.ffn)?,
            ffn_out: Linear::new(store, init, &format!("{name}.ffn.out"), dims.ffn, h)?,
            ffn_norm: LayerNorm::new(store, init, &format!("{name}.ffn.norm"), h)?,
        })
    }

    /// `x: [batch, seq, hidden]`, `mask` from [`attention_mask`].
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mask: Var, heads: usize) -> Result<Var> {
        let hidden = *tape.shape(x).last().unwrap();
        let dh = hidden / heads;

        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let q = tape.split_heads(q, heads)?;
        let k = tape.split_heads(k, heads)?;
        let v = tape.split_heads(v, heads)?;

        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax(scores)?;
        let ctx = tape.bmm(probs, v)?;
        let ctx = tape.merge_heads(ctx, heads)?;
        let attn = self.attn_out.forward(tape, store, ctx)?;
        let x = tape.add(x, attn)?;
        let x = self.attn_norm.forward(tape, store, x)?;

        let f = self.ffn_in.forward(tape, store, x)?;
        let f = tape.gelu(f)?;
        let f = self.ffn_out.forward(tape, store, f)?;
        let x = tape.add(x, f)?;
        self.ffn_norm.forward(tape, store, x)
    }
}
