//! Post-norm Transformer encoder/decoder. Every encoder layer can carry an
//! extra multi-head attention sub-layer over context features, between
//! self-attention and the feed-forward block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{linear, Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const MASKED_LOGIT: f64 = -1e9;

/// Inverted dropout; a no-op without an RNG or at rate 0.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = g.constant(Tensor::new(shape, data)?);
        g.mul(x, m)
    }
}

/// Projection handles of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Result<Self> {
        let p = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(Self {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

/// Additive attention mask `[B, h, Tq, Tk]`: `MASKED_LOGIT` where the key is
/// padding (`key_mask == 0`) or, with `causal`, lies in the future.
pub fn attention_mask(
    batch: usize,
    heads: usize,
    tq: usize,
    key_mask: &[f64],
    tk: usize,
    causal: bool,
) -> Result<Tensor> {
    if key_mask.len() != batch * tk {
        return Err(Error::Shape(format!(
            "key mask of {} for [{batch}, {tk}]",
            key_mask.len()
        )));
    }
    let mut data = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    let hidden = key_mask[b * tk + j] == 0.0 || (causal && j > i);
                    data.push(if hidden { MASKED_LOGIT } else { 0.0 });
                }
            }
        }
    }
    Tensor::new(vec![batch, heads, tq, tk], data)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// `Concat(H_1..H_h) W^O` with `H_i = softmax(Q W_i^Q (K W_i^K)ᵀ / √d_k + mask) V W_i^V`.
/// Returns the output `[B, Tq, d]` and the attention weights `[B, h, Tq, Tk]`.
pub fn multi_head_attention(
    g: &mut Graph,
    w: &AttentionVars,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 3
        || ks.len() != 3
        || g.shape(v) != ks.as_slice()
        || qs[0] != ks[0]
        || qs[2] != ks[2]
    {
        return Err(Error::Shape(format!(
            "attention wants q [B, Tq, d] and k = v [B, Tk, d], got {qs:?}, {ks:?}, {:?}",
            g.shape(v)
        )));
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let qp = linear(g, q, w.wq, Some(w.bq))?;
    let kp = linear(g, k, w.wk, Some(w.bk))?;
    let vp = linear(g, v, w.wv, Some(w.bv))?;
    let qh = split_heads(g, qp, heads)?;
    let kh = split_heads(g, kp, heads)?;
    let vh = split_heads(g, vp, heads)?;
    let kt = g.transpose(kh)?;
    let logits = g.matmul(qh, kt)?;
    let mut logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
    if let Some(mask) = mask {
        if mask.shape() != g.shape(logits) {
            return Err(Error::Shape(format!(
                "attention mask {:?} for logits {:?}",
                mask.shape(),
                g.shape(logits)
            )));
        }
        let m = g.constant(mask.clone());
        logits = g.add(logits, m)?;
    }
    let weights = g.softmax(logits, 3)?;
    let ctx = g.matmul(weights, vh)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, tq, d])?;
    let out = linear(g, ctx, w.wo, Some(w.bo))?;
    Ok((out, weights))
}

fn layer_norm(g: &mut Graph, b: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let n = g.layer_norm(x, eps);
    let gain = b.get(&format!("{prefix}.g"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

fn feed_forward(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let p = |s: &str| b.get(&format!("{prefix}.{s}"));
    let h = linear(g, x, p("w1")?, Some(p("b1")?))?;
    let h = g.relu(h);
    linear(g, h, p("w2")?, Some(p("b2")?))
}

/// `LayerNorm(x + dropout(sublayer))`.
fn residual(
    g: &mut Graph,
    b: &Bound,
    ln: &str,
    x: Var,
    y: Var,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<Var> {
    let y = dropout.apply(g, y)?;
    let s = g.add(x, y)?;
    layer_norm(g, b, ln, s, eps)
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// `table[ids] · √d + PE`, shaped `[B, T, d]`.
pub fn embed(g: &mut Graph, table: Var, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
    let d = g.shape(table)[1];
    let e = g.index_select(table, ids)?;
    let e = g.reshape(e, &[batch, len, d])?;
    let e = g.scale(e, (d as f64).sqrt());
    let pe = g.constant(positional_encoding(len, d));
    g.add(e, pe)
}

/// Context features and their row mask for the context sub-layer.
#[derive(Debug, Clone, Copy)]
pub struct ContextInput<'a> {
    /// `[B, R, d_model]`.
    pub features: Var,
    /// `[B, R]`.
    pub mask: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderState {
    /// Output of every layer, `[B, T, d]`; the last is the encoder output.
    pub layers: Vec<Var>,
    pub mask: Vec<f64>,
    pub batch: usize,
    pub len: usize,
    /// Context attention weights per layer when the sub-layer is active.
    pub context_attention: Vec<Var>,
}

impl EncoderState {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// Runs the encoder over already-embedded input `[B, T, d]`. With `context`
/// every layer gets the context-attention sub-layer; without it the layers
/// are plain self-attention + feed-forward.
pub fn encode(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    input: Var,
    mask: &[f64],
    context: Option<ContextInput>,
    dropout: &mut Dropout,
) -> Result<EncoderState> {
    let s = g.shape(input).to_vec();
    let (bsz, t) = (s[0], s[1]);
    let self_mask = attention_mask(bsz, cfg.heads, t, mask, t, false)?;
    let ctx_mask = match context {
        Some(c) => {
            let r = c.mask.shape()[1];
            if g.shape(c.features) != [bsz, r, cfg.d_model] {
                return Err(Error::Shape(format!(
                    "context features {:?}, expected [{bsz}, {r}, {}]",
                    g.shape(c.features),
                    cfg.d_model
                )));
            }
            Some(attention_mask(bsz, cfg.heads, t, c.mask.data(), r, false)?)
        }
        None => None,
    };
    let eps = cfg.layer_norm_eps;
    let mut x = dropout.apply(g, input)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut context_attention = Vec::new();
    for l in 0..cfg.layers {
        let p = format!("enc.{l}");
        let att = AttentionVars::from_bound(b, &format!("{p}.self"))?;
        let (y, _) = multi_head_attention(g, &att, x, x, x, Some(&self_mask), cfg.heads)?;
        x = residual(g, b, &format!("{p}.self_ln"), x, y, eps, dropout)?;
        if let (Some(c), Some(cm)) = (context, &ctx_mask) {
            let att = AttentionVars::from_bound(b, &format!("{p}.ctx"))?;
            let (y, w) =
                multi_head_attention(g, &att, x, c.features, c.features, Some(cm), cfg.heads)?;
            context_attention.push(w);
            x = residual(g, b, &format!("{p}.ctx_ln"), x, y, eps, dropout)?;
        }
        let y = feed_forward(g, b, &format!("{p}.ffn"), x)?;
        x = residual(g, b, &format!("{p}.ffn_ln"), x, y, eps, dropout)?;
        layers.push(x);
    }
    Ok(EncoderState {
        layers,
        mask: mask.to_vec(),
        batch: bsz,
        len: t,
        context_attention,
    })
}

/// Decoder over embedded targets `[B, Tt, d]`; returns logits `[B, Tt, V]`.
pub fn decode(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    input: Var,
    mask: &[f64],
    enc: &EncoderState,
    dropout: &mut Dropout,
) -> Result<Var> {
    let s = g.shape(input).to_vec();
    let (bsz, t) = (s[0], s[1]);
    if bsz != enc.batch {
        return Err(Error::Shape(format!(
            "decoder batch {bsz} vs encoder batch {}",
            enc.batch
        )));
    }
    let self_mask = attention_mask(bsz, cfg.heads, t, mask, t, true)?;
    let cross_mask = attention_mask(bsz, cfg.heads, t, &enc.mask, enc.len, false)?;
    let memory = enc.output();
    let eps = cfg.layer_norm_eps;
    let mut x = dropout.apply(g, input)?;
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        let att = AttentionVars::from_bound(b, &format!("{p}.self"))?;
        let (y, _) = multi_head_attention(g, &att, x, x, x, Some(&self_mask), cfg.heads)?;
        x = residual(g, b, &format!("{p}.self_ln"), x, y, eps, dropout)?;
        let att = AttentionVars::from_bound(b, &format!("{p}.cross"))?;
        let (y, _) =
            multi_head_attention(g, &att, x, memory, memory, Some(&cross_mask), cfg.heads)?;
        x = residual(g, b, &format!("{p}.cross_ln"), x, y, eps, dropout)?;
        let y = feed_forward(g, b, &format!("{p}.ffn"), x)?;
        x = residual(g, b, &format!("{p}.ffn_ln"), x, y, eps, dropout)?;
    }
    linear(g, x, b.get("out.w")?, Some(b.get("out.b")?))
}

fn init_attention(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for k in ["q", "k", "v", "o"] {
        p.init_linear(&format!("{prefix}.w{k}"), d, d, rng);
        p.init_constant(&format!("{prefix}.b{k}"), &[d], 0.0);
    }
}

fn init_norm(p: &mut ParamStore, prefix: &str, d: usize) {
    p.init_constant(&format!("{prefix}.g"), &[d], 1.0);
    p.init_constant(&format!("{prefix}.b"), &[d], 0.0);
}

fn init_ffn(p: &mut ParamStore, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) {
    p.init_linear(&format!("{prefix}.w1"), d, ff, rng);
    p.init_constant(&format!("{prefix}.b1"), &[ff], 0.0);
    p.init_linear(&format!("{prefix}.w2"), ff, d, rng);
    p.init_constant(&format!("{prefix}.b2"), &[d], 0.0);
}

/// Encoder/decoder/embedding parameters. `context` adds the context
/// sub-layer to every encoder layer.
pub fn init_transformer(
    p: &mut ParamStore,
    cfg: &ModelConfig,
    context: bool,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d_model;
    let std = (d as f64).powf(-0.5);
    p.init_normal("src.emb", &[cfg.src_vocab, d], std, rng);
    p.init_normal("tgt.emb", &[cfg.tgt_vocab, d], std, rng);
    for l in 0..cfg.layers {
        let e = format!("enc.{l}");
        init_attention(p, &format!("{e}.self"), d, rng);
        init_norm(p, &format!("{e}.self_ln"), d);
        if context {
            init_attention(p, &format!("{e}.ctx"), d, rng);
            init_norm(p, &format!("{e}.ctx_ln"), d);
        }
        init_ffn(p, &format!("{e}.ffn"), d, cfg.d_ffn, rng);
        init_norm(p, &format!("{e}.ffn_ln"), d);
    }
    for l in 0..cfg.layers {
        let e = format!("dec.{l}");
        init_attention(p, &format!("{e}.self"), d, rng);
        init_norm(p, &format!("{e}.self_ln"), d);
        init_attention(p, &format!("{e}.cross"), d, rng);
        init_norm(p, &format!("{e}.cross_ln"), d);
        init_ffn(p, &format!("{e}.ffn"), d, cfg.d_ffn, rng);
        init_norm(p, &format!("{e}.ffn_ln"), d);
    }
    p.init_linear("out.w", d, cfg.tgt_vocab, rng);
    p.init_constant("out.b", &[cfg.tgt_vocab], 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_layout() {
        let m = attention_mask(1, 1, 2, &[1.0, 0.0], 2, false).unwrap();
        assert_eq!(m.data(), &[0.0, MASKED_LOGIT, 0.0, MASKED_LOGIT]);
        let m = attention_mask(1, 1, 2, &[1.0, 1.0], 2, true).unwrap();
        assert_eq!(m.data(), &[0.0, MASKED_LOGIT, 0.0, 0.0]);
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(&[1, 3]) - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
