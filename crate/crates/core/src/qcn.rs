//! Query-guided capsule network over the history sentences of a document.
//!
//! The current sentence becomes a query `q = g(Σ embedding(x))`; every token
//! of a history sentence at distance `k` becomes a lower-level capsule
//! `u = f([embedding(x); onehot(k)])`. Each history sentence is routed on its
//! own, and its `m` output capsules are projected to the model width and
//! placed in rows `(k-1)·m .. k·m` of the context features.

use crate::corpus::DocumentBatch;
use crate::error::{Error, Result};
use crate::numerics::{linear, Graph, Tensor, Var};
use crate::params::Bound;
use crate::routing::{
    CapsuleLayerParams, CapsuleSet, Routed, RoutingInput, RoutingStrategy, RoutingTrace,
};

pub const QUERY_W: &str = "qcn.query.w";
pub const QUERY_B: &str = "qcn.query.b";
pub const CAPS_W: &str = "qcn.caps.w";
pub const CAPS_B: &str = "qcn.caps.b";
pub const ROUTE_W: &str = "qcn.route.w";
pub const PROJ_W: &str = "qcn.proj.w";
pub const PROJ_B: &str = "qcn.proj.b";

/// Graph handles of the capsule-network parameters.
#[derive(Debug, Clone, Copy)]
pub struct QcnVars {
    pub query_w: Var,
    pub query_b: Option<Var>,
    pub caps_w: Var,
    pub caps_b: Option<Var>,
    /// `[m, d_caps, d_caps]`.
    pub route_w: Var,
    pub proj_w: Var,
    pub proj_b: Option<Var>,
}

impl QcnVars {
    pub fn from_bound(b: &Bound) -> Result<Self> {
        Ok(Self {
            query_w: b.get(QUERY_W)?,
            query_b: b.opt(QUERY_B),
            caps_w: b.get(CAPS_W)?,
            caps_b: b.opt(CAPS_B),
            route_w: b.get(ROUTE_W)?,
            proj_w: b.get(PROJ_W)?,
            proj_b: b.opt(PROJ_B),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoutingOptions {
    pub iterations: usize,
    pub squash_inputs: bool,
    /// History window `K` (width of the distance one-hot).
    pub window: usize,
}

/// `g(Σ_t mask_t · emb_t)` for `emb: [B, T, d]`, giving `[B, d_caps]`.
pub fn query_vectors(
    g: &mut Graph,
    map: (Var, Option<Var>),
    emb: Var,
    mask: &[f64],
) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let m = g.constant(Tensor::new(vec![b, 1, t], mask.to_vec())?);
    let sum = g.matmul(m, emb)?;
    let sum = g.reshape(sum, &[b, d])?;
    linear(g, sum, map.0, map.1)
}

/// One-hot distance slot for `k` in a window of `window`: slot `k - 1`.
pub fn distance_one_hot(k: usize, window: usize) -> Result<Vec<f64>> {
    if k == 0 || k > window {
        return Err(Error::InvalidArgument(format!(
            "history distance {k} outside 1..={window}"
        )));
    }
    let mut v = vec![0.0; window];
    v[k - 1] = 1.0;
    Ok(v)
}

/// `f([emb; onehot(k)])` for `emb: [S, n, d]`, giving `[S, n, d_caps]`.
pub fn input_capsules(
    g: &mut Graph,
    map: (Var, Option<Var>),
    emb: Var,
    distances: &[usize],
    window: usize,
) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    let (sets, n) = (s[0], s[1]);
    if distances.len() != sets {
        return Err(Error::Shape(format!(
            "{} distances for {sets} sets",
            distances.len()
        )));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("history window must be >= 1".into()));
    }
    let mut hot = Vec::with_capacity(sets * n * window);
    for &k in distances {
        let row = distance_one_hot(k, window)?;
        for _ in 0..n {
            hot.extend_from_slice(&row);
        }
    }
    let hot = g.constant(Tensor::new(vec![sets, n, window], hot)?);
    let x = g.concat(&[emb, hot], 2)?;
    linear(g, x, map.0, map.1)
}

/// Routes `S` padded capsule sets with their queries and projects the output
/// capsules to `[S, m, d_model]`.
pub fn route_and_project(
    g: &mut Graph,
    w: &QcnVars,
    strategy: &dyn RoutingStrategy,
    capsules: Var,
    mask: Option<Tensor>,
    queries: Var,
    opts: &RoutingOptions,
) -> Result<(Var, Routed)> {
    let routed = strategy.route(
        g,
        &RoutingInput {
            capsules,
            mask,
            query: Some(queries),
            weights: w.route_w,
            iterations: opts.iterations,
            squash_inputs: opts.squash_inputs,
        },
    )?;
    let vs = g.shape(routed.outputs).to_vec();
    let (sets, m, dc) = (vs[0], vs[1], vs[2]);
    let flat = g.reshape(routed.outputs, &[sets * m, dc])?;
    let proj = linear(g, flat, w.proj_w, w.proj_b)?;
    let dm = g.shape(proj)[1];
    let proj = g.reshape(proj, &[sets, m, dm])?;
    Ok((proj, routed))
}

/// Places projected set capsules `[S, m, d]` into `[batch, K·m, d]` at the
/// slots `(batch_index, k)`; unused rows are zero.
pub fn scatter_features(
    g: &mut Graph,
    projected: Option<Var>,
    slots: &[(usize, usize)],
    batch: usize,
    window: usize,
    m: usize,
    d_model: usize,
) -> Result<Var> {
    let Some(projected) = projected else {
        return Ok(g.constant(Tensor::zeros(&[batch, window * m, d_model])));
    };
    let sets = slots.len();
    let flat = g.reshape(projected, &[sets * m, d_model])?;
    let zero = g.constant(Tensor::zeros(&[1, d_model]));
    let table = g.concat(&[flat, zero], 0)?;
    let zero_row = sets * m;
    let mut rows = vec![zero_row; batch * window * m];
    for (s, &(b, k)) in slots.iter().enumerate() {
        for j in 0..m {
            rows[(b * window + k - 1) * m + j] = s * m + j;
        }
    }
    let picked = g.index_select(table, &rows)?;
    g.reshape(picked, &[batch, window * m, d_model])
}

/// Context features for a batch plus what is needed to read routing traces back.
#[derive(Debug, Clone)]
pub struct ContextVars {
    /// `[B, K·m, d_model]`.
    pub features: Var,
    /// `[B, K·m]` of 1.0 for rows backed by a history sentence.
    pub mask: Tensor,
    pub routed: Option<Routed>,
    /// `(batch index, distance k, sentence length)` per routed set.
    pub sets: Vec<(usize, usize, usize)>,
}

impl ContextVars {
    /// Routing trace of every history sentence of batch row `b`, nearest first.
    pub fn traces(&self, g: &Graph, b: usize) -> Vec<(usize, RoutingTrace)> {
        let Some(routed) = &self.routed else {
            return Vec::new();
        };
        self.sets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.0 == b)
            .map(|(i, &(_, k, n))| (k, RoutingTrace::extract(g, routed, i, n)))
            .collect()
    }
}

/// Full capsule-network pass for a batch; `table` is the source embedding table.
#[allow(clippy::too_many_arguments)]
pub fn batch_context(
    g: &mut Graph,
    w: &QcnVars,
    strategy: &dyn RoutingStrategy,
    opts: &RoutingOptions,
    table: Var,
    batch: &DocumentBatch,
    m: usize,
    d_model: usize,
) -> Result<ContextVars> {
    let (bsz, k) = (batch.size, opts.window);
    let mut sets = Vec::new();
    for (b, ctx) in batch.context.iter().enumerate() {
        for (slot, ids) in ctx.iter().enumerate().take(k) {
            if batch.context_present[b][slot] {
                sets.push((b, slot + 1, ids.len()));
            }
        }
    }
    let mut mask = vec![0.0; bsz * k * m];
    for &(b, dist, _) in &sets {
        for j in 0..m {
            mask[(b * k + dist - 1) * m + j] = 1.0;
        }
    }
    let mask = Tensor::new(vec![bsz, k * m], mask)?;
    if sets.is_empty() {
        let features = scatter_features(g, None, &[], bsz, k, m, d_model)?;
        return Ok(ContextVars {
            features,
            mask,
            routed: None,
            sets,
        });
    }

    let d = g.shape(table)[1];
    let cur = g.index_select(table, &batch.src)?;
    let cur = g.reshape(cur, &[bsz, batch.src_len, d])?;
    let queries = query_vectors(g, (w.query_w, w.query_b), cur, &batch.src_mask)?;
    let set_batch: Vec<usize> = sets.iter().map(|s| s.0).collect();
    let set_queries = g.index_select(queries, &set_batch)?;

    let n = sets.iter().map(|s| s.2).max().unwrap_or(1).max(1);
    let mut ids = vec![crate::corpus::PAD; sets.len() * n];
    let mut set_mask = vec![0.0; sets.len() * n];
    for (s, &(b, dist, len)) in sets.iter().enumerate() {
        let sent = &batch.context[b][dist - 1];
        for t in 0..len {
            ids[s * n + t] = sent[t];
            set_mask[s * n + t] = 1.0;
        }
    }
    let emb = g.index_select(table, &ids)?;
    let emb = g.reshape(emb, &[sets.len(), n, d])?;
    let distances: Vec<usize> = sets.iter().map(|s| s.1).collect();
    let caps = input_capsules(g, (w.caps_w, w.caps_b), emb, &distances, k)?;
    let set_mask = Tensor::new(vec![sets.len(), n], set_mask)?;
    let (proj, routed) =
        route_and_project(g, w, strategy, caps, Some(set_mask), set_queries, opts)?;
    let slots: Vec<(usize, usize)> = sets.iter().map(|s| (s.0, s.1)).collect();
    let features = scatter_features(g, Some(proj), &slots, bsz, k, m, d_model)?;
    Ok(ContextVars {
        features,
        mask,
        routed: Some(routed),
        sets,
    })
}

// ---- value-level API ------------------------------------------------------

/// Token embeddings of one sentence. `distance` is 0 for the sentence being
/// translated and `k >= 1` for the sentence `k` positions before it.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub token_ids: Vec<usize>,
    /// `[n, d_emb]`.
    pub embeddings: Tensor,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearMap {
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::eye(n),
            bias: None,
        }
    }

    fn bind(&self, g: &mut Graph) -> (Var, Option<Var>) {
        let w = g.constant(self.weight.clone());
        let b = self.bias.clone().map(|b| g.constant(b));
        (w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcnParams {
    /// `g`: summed current-sentence embedding → query.
    pub query_map: LinearMap,
    /// `f`: `[embedding; onehot(k)]` → lower-level capsule.
    pub capsule_map: LinearMap,
    pub routing: CapsuleLayerParams,
    /// Output capsule → model width.
    pub projection: LinearMap,
    pub window: usize,
}

/// `[K·m, d_model]` context rows with the distance each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    pub features: Tensor,
    pub origin: Vec<Option<usize>>,
}

fn bind_params(g: &mut Graph, p: &QcnParams) -> QcnVars {
    let (query_w, query_b) = p.query_map.bind(g);
    let (caps_w, caps_b) = p.capsule_map.bind(g);
    let (proj_w, proj_b) = p.projection.bind(g);
    let route_w = g.constant(p.routing.weights.clone());
    QcnVars {
        query_w,
        query_b,
        caps_w,
        caps_b,
        route_w,
        proj_w,
        proj_b,
    }
}

fn check_shape(s: &SentenceEmbedding) -> Result<()> {
    if s.embeddings.ndim() != 2 {
        return Err(Error::Shape(format!(
            "sentence embeddings must be [n, d], got {:?}",
            s.embeddings.shape()
        )));
    }
    Ok(())
}

fn sentence_var(g: &mut Graph, s: &SentenceEmbedding) -> Result<Var> {
    check_shape(s)?;
    let sh = s.embeddings.shape();
    Ok(g.constant(s.embeddings.reshape(&[1, sh[0], sh[1]])?))
}

/// `q = g(Σ_x embedding(x))` for the sentence being translated.
pub fn build_query(current: &SentenceEmbedding, query_map: &LinearMap) -> Result<Vec<f64>> {
    if current.distance != 0 {
        return Err(Error::InvalidArgument(
            "the query sentence must have distance 0".into(),
        ));
    }
    if current.token_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a query from an empty sentence".into(),
        ));
    }
    let mut g = Graph::new();
    let emb = sentence_var(&mut g, current)?;
    let n = current.embeddings.shape()[0];
    let map = query_map.bind(&mut g);
    let q = query_vectors(&mut g, map, emb, &vec![1.0; n])?;
    Ok(g.value(q).data().to_vec())
}

/// `u_i = f([embedding(x_i); onehot(k)])` for a history sentence.
pub fn build_input_capsules(
    hist: &SentenceEmbedding,
    window: usize,
    capsule_map: &LinearMap,
) -> Result<CapsuleSet> {
    distance_one_hot(hist.distance, window)?;
    let mut g = Graph::new();
    let emb = sentence_var(&mut g, hist)?;
    let map = capsule_map.bind(&mut g);
    let caps = input_capsules(&mut g, map, emb, &[hist.distance], window)?;
    let t = g.value(caps);
    let sh = t.shape();
    Ok(CapsuleSet {
        capsules: t.reshape(&[sh[1], sh[2]])?,
        distance: hist.distance,
    })
}

/// Context features of one sentence from its history, with one routing
/// trace per history sentence (nearest first).
pub fn extract_context_features(
    current: &SentenceEmbedding,
    history: &[SentenceEmbedding],
    params: &QcnParams,
    strategy: &dyn RoutingStrategy,
) -> Result<(ContextFeatures, Vec<RoutingTrace>)> {
    let k = params.window;
    let m = params.routing.outputs();
    let d_model = params.projection.weight.shape()[1];
    if history.len() > k {
        return Err(Error::InvalidArgument(format!(
            "{} history sentences for a window of {k}",
            history.len()
        )));
    }
    if history.windows(2).any(|w| w[0].distance >= w[1].distance) {
        return Err(Error::InvalidArgument(
            "history must be sorted by increasing distance".into(),
        ));
    }
    let mut origin = vec![None; k * m];
    if history.is_empty() {
        return Ok((
            ContextFeatures {
                features: Tensor::zeros(&[k * m, d_model]),
                origin,
            },
            Vec::new(),
        ));
    }
    let q = build_query(current, &params.query_map)?;

    let mut g = Graph::new();
    let w = bind_params(&mut g, params);
    let n = history
        .iter()
        .map(|h| h.token_ids.len())
        .max()
        .unwrap_or(0)
        .max(1);
    let d = current.embeddings.shape()[1];
    let mut emb = vec![0.0; history.len() * n * d];
    let mut mask = vec![0.0; history.len() * n];
    for (s, h) in history.iter().enumerate() {
        check_shape(h)?;
        if h.embeddings.shape()[1] != d {
            return Err(Error::Dimension(
                "history and current embedding widths differ".into(),
            ));
        }
        let len = h.embeddings.shape()[0];
        emb[s * n * d..s * n * d + len * d].copy_from_slice(h.embeddings.data());
        mask[s * n..s * n + len].iter_mut().for_each(|x| *x = 1.0);
    }
    let emb = g.constant(Tensor::new(vec![history.len(), n, d], emb)?);
    let distances: Vec<usize> = history.iter().map(|h| h.distance).collect();
    let caps = input_capsules(&mut g, (w.caps_w, w.caps_b), emb, &distances, k)?;
    let queries = g.constant(Tensor::new(
        vec![history.len(), q.len()],
        q.repeat(history.len()),
    )?);
    let opts = RoutingOptions {
        iterations: params.routing.iterations,
        squash_inputs: params.routing.squash_inputs,
        window: k,
    };
    let set_mask = Tensor::new(vec![history.len(), n], mask)?;
    let (proj, routed) =
        route_and_project(&mut g, &w, strategy, caps, Some(set_mask), queries, &opts)?;
    let slots: Vec<(usize, usize)> = distances.iter().map(|&k| (0, k)).collect();
    let feats = scatter_features(&mut g, Some(proj), &slots, 1, k, m, d_model)?;
    for &dist in &distances {
        for j in 0..m {
            origin[(dist - 1) * m + j] = Some(dist);
        }
    }
    let traces = history
        .iter()
        .enumerate()
        .map(|(s, h)| RoutingTrace::extract(&g, &routed, s, h.embeddings.shape()[0]))
        .collect();
    Ok((
        ContextFeatures {
            features: g.value(feats).reshape(&[k * m, d_model])?,
            origin,
        },
        traces,
    ))
}
