//! Correlation regularizer: two conventional capsule networks, one over the
//! encoder input embeddings and one over the decoder input embeddings. The
//! objective subtracts `λ · PCCs(flat(v_enc), flat(v_dec))` from the NLL.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::routing::{
    pccs, route_conventional_caps, CapsuleLayerParams, CapsuleSet, DynamicRouting, RoutingInput,
    RoutingStrategy,
};

pub const ENC_W: &str = "reg.enc.w";
pub const DEC_W: &str = "reg.dec.w";

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerParams {
    pub enc: CapsuleLayerParams,
    pub dec: CapsuleLayerParams,
    pub lambda: f64,
}

impl RegularizerParams {
    pub fn new(enc: CapsuleLayerParams, dec: CapsuleLayerParams, lambda: f64) -> Result<Self> {
        if enc.outputs() != dec.outputs() || enc.d_out() != dec.d_out() {
            return Err(Error::Dimension(format!(
                "encoder capsules {}x{} vs decoder capsules {}x{}",
                enc.outputs(),
                enc.d_out(),
                dec.outputs(),
                dec.d_out()
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(Self { enc, dec, lambda })
    }
}

fn flat_capsules(g: &mut Graph, emb: Var, mask: &[f64], w: Var, iterations: usize) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    let mask = Tensor::new(vec![s[0], s[1]], mask.to_vec())?;
    let routed = DynamicRouting.route(
        g,
        &RoutingInput {
            capsules: emb,
            mask: Some(mask),
            query: None,
            weights: w,
            iterations,
            squash_inputs: false,
        },
    )?;
    let vs = g.shape(routed.outputs).to_vec();
    g.reshape(routed.outputs, &[vs[0], vs[1] * vs[2]])
}

/// Batch mean of the per-sentence correlation between the two capsule sets.
/// `src: [B, Ts, d]`, `tgt: [B, Tt, d]` with their padding masks.
#[allow(clippy::too_many_arguments)]
pub fn batch_regularization(
    g: &mut Graph,
    enc_w: Var,
    dec_w: Var,
    src: Var,
    src_mask: &[f64],
    tgt: Var,
    tgt_mask: &[f64],
    iterations: usize,
) -> Result<Var> {
    let a = flat_capsules(g, src, src_mask, enc_w, iterations)?;
    let b = flat_capsules(g, tgt, tgt_mask, dec_w, iterations)?;
    if g.shape(a)[1] < 2 {
        return Err(Error::Dimension(
            "correlation needs at least 2 capsule dims".into(),
        ));
    }
    let a = g.center(a);
    let a = g.unit(a);
    let b = g.center(b);
    let b = g.unit(b);
    let prod = g.mul(a, b)?;
    let per = g.sum_last(prod);
    let per = g.clamp(per, -1.0, 1.0);
    Ok(g.mean(per))
}

/// `nll − λ · reg` on the graph.
pub fn graph_total_loss(g: &mut Graph, nll: Var, reg: Option<Var>, lambda: f64) -> Result<Var> {
    match reg {
        Some(r) if lambda != 0.0 => {
            let r = g.scale(r, lambda);
            g.sub(nll, r)
        }
        _ => Ok(nll),
    }
}

/// Correlation between the conventional capsule outputs of one source and
/// one target embedding sequence (`[n, d]` each).
pub fn regularization_term(src: &Tensor, tgt: &Tensor, params: &RegularizerParams) -> Result<f64> {
    let enc = route_conventional_caps(&CapsuleSet::new(&src.to_rows(), 0)?, &params.enc)?;
    let dec = route_conventional_caps(&CapsuleSet::new(&tgt.to_rows(), 0)?, &params.dec)?;
    let a: Vec<f64> = enc.concat();
    let b: Vec<f64> = dec.concat();
    pccs(&a, &b)
}

pub fn total_loss(nll: f64, reg: f64, lambda: f64) -> f64 {
    nll - lambda * reg
}
