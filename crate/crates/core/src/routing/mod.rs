//! Capsule routing: Pearson correlation, squash, classic dynamic routing and
//! query-guided routing.
//!
//! The graph-level entry points live in [`strategy`]; the functions here are
//! value-level wrappers for single capsule sets that also return the full
//! per-iteration trace.

pub mod strategy;

pub use strategy::{
    DynamicRouting, IterationVars, QueryGuidedRouting, Routed, RoutingInput, RoutingRegistry,
    RoutingStrategy,
};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, NORM_GUARD};

/// First `rows` rows of `[S, R, C]` tensor entry `set`.
fn set_rows(t: &Tensor, set: usize, rows: usize) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[1], t.shape()[2]);
    let base = set * r * c;
    (0..rows)
        .map(|i| t.data()[base + i * c..base + (i + 1) * c].to_vec())
        .collect()
}

/// `n` lower-level capsules of one sentence plus its distance from the
/// sentence being translated.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleSet {
    /// `[n, d_in]`.
    pub capsules: Tensor,
    pub distance: usize,
}

impl CapsuleSet {
    pub fn new(rows: &[Vec<f64>], distance: usize) -> Result<Self> {
        Ok(Self {
            capsules: Tensor::from_rows(rows)?,
            distance,
        })
    }

    pub fn len(&self) -> usize {
        self.capsules.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.capsules.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleLayerParams {
    /// `[m, d_in, d_out]`: one transformation per output capsule.
    pub weights: Tensor,
    pub iterations: usize,
    pub squash_inputs: bool,
}

impl CapsuleLayerParams {
    pub fn new(weights: Tensor, iterations: usize) -> Result<Self> {
        if weights.ndim() != 3 {
            return Err(Error::Shape(format!(
                "capsule weights must be [m, d_in, d_out], got {:?}",
                weights.shape()
            )));
        }
        if iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !weights.all_finite() {
            return Err(Error::NonFinite("capsule weights".into()));
        }
        Ok(Self {
            weights,
            iterations,
            squash_inputs: false,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// State of one routing iteration. Matrices indexed `[i][j]` are `n × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub alpha: Vec<Vec<f64>>,
    pub coupling: Vec<Vec<f64>>,
    /// Raw correlations; all zero for routing without a query.
    pub pccs: Vec<Vec<f64>>,
    /// `tanh(pccs)`; all zero for routing without a query.
    pub guidance: Vec<Vec<f64>>,
    /// `m` query vectors; empty for routing without a query.
    pub queries: Vec<Vec<f64>>,
    /// `m` output capsules.
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingTrace {
    pub iterations: Vec<IterationRecord>,
}

impl RoutingTrace {
    /// Reads set `set` (its first `n` capsules) out of a batched routing.
    pub fn extract(g: &Graph, routed: &Routed, set: usize, n: usize) -> Self {
        let m = g.shape(routed.outputs)[1];
        let matrix = |var: Option<Var>| match var {
            Some(var) => set_rows(g.value(var), set, n),
            None => vec![vec![0.0; m]; n],
        };
        let iterations = routed
            .iterations
            .iter()
            .map(|it| IterationRecord {
                alpha: matrix(Some(it.alpha)),
                coupling: matrix(Some(it.coupling)),
                pccs: matrix(it.pccs),
                guidance: matrix(it.guidance),
                queries: it
                    .queries
                    .map(|q| set_rows(g.value(q), set, m))
                    .unwrap_or_default(),
                outputs: set_rows(g.value(it.outputs), set, m),
            })
            .collect();
        Self { iterations }
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.iterations.last().expect("non-empty trace").outputs
    }
}

/// Pearson correlation as a centered cosine. Returns 0 when either centered
/// vector has norm below [`NORM_GUARD`].
pub fn pccs(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "pccs of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "pccs needs at least 2 entries".into(),
        ));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pccs input".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < NORM_GUARD || nb.sqrt() < NORM_GUARD {
        return Ok(0.0);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// `‖t‖²/(1+‖t‖²) · t/(‖t‖+ε)`.
pub fn squash(t: &[f64]) -> Vec<f64> {
    let n2: f64 = t.iter().map(|x| x * x).sum();
    let n = n2.sqrt();
    let s = n2 / (1.0 + n2) / (n + NORM_GUARD);
    t.iter().map(|x| x * s).collect()
}

fn run(
    strategy: &dyn RoutingStrategy,
    u: &CapsuleSet,
    query: Option<&[f64]>,
    params: &CapsuleLayerParams,
) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    if u.is_empty() {
        return Err(Error::InvalidArgument(
            "routing needs at least one input capsule".into(),
        ));
    }
    let mut g = Graph::new();
    let (n, d) = (u.len(), u.dim());
    let capsules = g.constant(u.capsules.reshape(&[1, n, d])?);
    let weights = g.constant(params.weights.clone());
    let query = match query {
        Some(q) => Some(g.constant(Tensor::new(vec![1, q.len()], q.to_vec())?)),
        None => None,
    };
    let input = RoutingInput {
        capsules,
        mask: None,
        query,
        weights,
        iterations: params.iterations,
        squash_inputs: params.squash_inputs,
    };
    let routed = strategy.route(&mut g, &input)?;
    let trace = RoutingTrace::extract(&g, &routed, 0, n);
    Ok((trace.outputs().to_vec(), trace))
}

/// Classic dynamic routing over one capsule set.
pub fn route_original(
    u: &CapsuleSet,
    params: &CapsuleLayerParams,
) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    run(&DynamicRouting, u, None, params)
}

/// Query-guided routing over one capsule set. With `zero_guidance` the
/// correlation term is held at zero.
pub fn route_query_guided(
    u: &CapsuleSet,
    query: &[f64],
    params: &CapsuleLayerParams,
    zero_guidance: bool,
) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    if query.len() != params.d_out() {
        return Err(Error::Dimension(format!(
            "query has {} entries, capsules have {}",
            query.len(),
            params.d_out()
        )));
    }
    run(
        &QueryGuidedRouting { zero_guidance },
        u,
        Some(query),
        params,
    )
}

/// The "conventional" capsule network used by the regularizer: classic
/// dynamic routing, returning only the output capsules.
pub fn route_conventional_caps(
    u: &CapsuleSet,
    params: &CapsuleLayerParams,
) -> Result<Vec<Vec<f64>>> {
    route_original(u, params).map(|(v, _)| v)
}
