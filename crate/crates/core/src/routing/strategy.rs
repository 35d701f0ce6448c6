//! Routing-by-agreement variants behind one trait, looked up by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Graph inputs for routing a batch of `S` capsule sets at once.
///
/// Sets shorter than the padded length `n` carry zeros in `mask`; masked
/// capsules contribute nothing to the output capsules.
pub struct RoutingInput {
    /// Lower-level capsules, `[S, n, d_in]`.
    pub capsules: Var,
    /// `[S, n]` of 1.0 (real capsule) / 0.0 (padding). `None` means all real.
    pub mask: Option<Tensor>,
    /// Per-set query, `[S, d_out]`. Only read by query-aware strategies.
    pub query: Option<Var>,
    /// Transformation, `[m, d_in, d_out]`, shared across input positions.
    pub weights: Var,
    pub iterations: usize,
    /// Squash the lower-level capsules before routing.
    pub squash_inputs: bool,
}

/// Graph handles for one routing iteration, all batched over sets.
#[derive(Debug, Clone)]
pub struct IterationVars {
    /// Agreement logits used for this iteration's couplings, `[S, n, m]`.
    pub alpha: Var,
    /// Couplings, `[S, n, m]`.
    pub coupling: Var,
    /// Raw correlation scores behind `guidance`, `[S, n, m]`.
    pub pccs: Option<Var>,
    /// `tanh(pccs)`, `[S, n, m]`.
    pub guidance: Option<Var>,
    /// Queries the guidance was computed from, `[S, m, d_out]`.
    pub queries: Option<Var>,
    /// Output capsules, `[S, m, d_out]`.
    pub outputs: Var,
}

#[derive(Debug, Clone)]
pub struct Routed {
    /// Final output capsules, `[S, m, d_out]`.
    pub outputs: Var,
    pub iterations: Vec<IterationVars>,
}

pub trait RoutingStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn uses_query(&self) -> bool;

    fn route(&self, g: &mut Graph, input: &RoutingInput) -> Result<Routed>;
}

struct Prepared {
    sets: usize,
    n: usize,
    m: usize,
    d_out: usize,
    capsules: Var,
    /// Predictions `û_{j|i}`, `[S, m, n, d_out]`.
    predictions: Var,
    /// Mask expanded to `[S, n, m]`.
    mask: Option<Var>,
}

fn prepare(g: &mut Graph, input: &RoutingInput) -> Result<Prepared> {
    let us = g.shape(input.capsules).to_vec();
    let ws = g.shape(input.weights).to_vec();
    if us.len() != 3 || ws.len() != 3 {
        return Err(Error::Shape(format!(
            "routing wants capsules [S, n, d_in] and weights [m, d_in, d_out], got {us:?} and {ws:?}"
        )));
    }
    let (sets, n, d_in) = (us[0], us[1], us[2]);
    let (m, w_in, d_out) = (ws[0], ws[1], ws[2]);
    if w_in != d_in {
        return Err(Error::Dimension(format!(
            "capsule dim {d_in} does not match transformation input dim {w_in}"
        )));
    }
    if input.iterations == 0 {
        return Err(Error::InvalidArgument(
            "routing needs at least one iteration".into(),
        ));
    }
    let capsules = if input.squash_inputs {
        g.squash(input.capsules)
    } else {
        input.capsules
    };
    let flat = g.reshape(capsules, &[sets * n, d_in])?;
    let pred = g.matmul(flat, input.weights)?; // [m, S*n, d_out]
    let pred = g.reshape(pred, &[m, sets, n, d_out])?;
    let predictions = g.permute(pred, &[1, 0, 2, 3])?;
    let mask = match &input.mask {
        None => None,
        Some(mk) => {
            if mk.shape() != [sets, n] {
                return Err(Error::Shape(format!(
                    "mask {:?} for {sets} sets of {n}",
                    mk.shape()
                )));
            }
            let data = mk
                .data()
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, m))
                .collect();
            Some(g.constant(Tensor::new(vec![sets, n, m], data)?))
        }
    };
    Ok(Prepared {
        sets,
        n,
        m,
        d_out,
        capsules,
        predictions,
        mask,
    })
}

impl Prepared {
    /// `v_j = squash(Σ_i w_ij û_{j|i})` for weights `[S, n, m]`.
    fn outputs(&self, g: &mut Graph, weights: Var) -> Result<Var> {
        let w = match self.mask {
            Some(mk) => g.mul(weights, mk)?,
            None => weights,
        };
        let w = g.permute(w, &[0, 2, 1])?;
        let w = g.reshape(w, &[self.sets, self.m, 1, self.n])?;
        let s = g.matmul(w, self.predictions)?;
        let s = g.reshape(s, &[self.sets, self.m, self.d_out])?;
        Ok(g.squash(s))
    }

    /// `û_{j|i} · v_j` laid out `[S, n, m]`.
    fn agreement(&self, g: &mut Graph, outputs: Var) -> Result<Var> {
        let v = g.reshape(outputs, &[self.sets, self.m, self.d_out, 1])?;
        let a = g.matmul(self.predictions, v)?;
        let a = g.reshape(a, &[self.sets, self.m, self.n])?;
        g.permute(a, &[0, 2, 1])
    }

    fn zeros(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.sets, self.n, self.m]))
    }
}

/// Classic routing-by-agreement: `c = softmax_j(α)`, `α += û·v`.
#[derive(Debug, Default, Clone, Copy)]
pub struct DynamicRouting;

impl RoutingStrategy for DynamicRouting {
    fn name(&self) -> &str {
        "original"
    }

    fn uses_query(&self) -> bool {
        false
    }

    fn route(&self, g: &mut Graph, input: &RoutingInput) -> Result<Routed> {
        let prep = prepare(g, input)?;
        let mut alpha = prep.zeros(g);
        let mut iterations = Vec::with_capacity(input.iterations);
        for _ in 0..input.iterations {
            let coupling = g.softmax(alpha, 2)?;
            let outputs = prep.outputs(g, coupling)?;
            iterations.push(IterationVars {
                alpha,
                coupling,
                pccs: None,
                guidance: None,
                queries: None,
                outputs,
            });
            let agree = prep.agreement(g, outputs)?;
            alpha = g.add(alpha, agree)?;
        }
        Ok(Routed {
            outputs: iterations.last().expect("iterations >= 1").outputs,
            iterations,
        })
    }
}

/// Query-guided routing: correlation with a per-capsule query both adds
/// `p_ij û_{j|i}` to the capsule sums and scales the agreement update.
/// The queries follow the output capsules, `q_j ← (q_j + v_j) / 2`.
#[derive(Debug, Default, Clone, Copy)]
pub struct QueryGuidedRouting {
    /// Ablation: hold `p ≡ 0`, which freezes `α` at zero.
    pub zero_guidance: bool,
}

impl QueryGuidedRouting {
    /// `PCCs(u_i, q_j)` and `tanh` of it, both `[S, n, m]`.
    fn guidance(&self, g: &mut Graph, centered_u: Var, queries: Var) -> Result<(Var, Var)> {
        let qc = g.center(queries);
        let qc = g.unit(qc);
        let qt = g.transpose(qc)?;
        let r = g.matmul(centered_u, qt)?;
        // the centered cosine can overshoot ±1 by an ulp
        let r = g.clamp(r, -1.0, 1.0);
        let p = g.tanh(r);
        Ok((r, p))
    }
}

impl RoutingStrategy for QueryGuidedRouting {
    fn name(&self) -> &str {
        if self.zero_guidance {
            "query-guided-unguided"
        } else {
            "query-guided"
        }
    }

    fn uses_query(&self) -> bool {
        true
    }

    fn route(&self, g: &mut Graph, input: &RoutingInput) -> Result<Routed> {
        let prep = prepare(g, input)?;
        let Some(query) = input.query else {
            return Err(Error::InvalidArgument(
                "query-guided routing needs a query".into(),
            ));
        };
        let qs = g.shape(query).to_vec();
        let d_in = g.shape(prep.capsules)[2];
        if qs != [prep.sets, prep.d_out] {
            return Err(Error::Dimension(format!(
                "query shape {qs:?}, expected [{}, {}]",
                prep.sets, prep.d_out
            )));
        }
        if d_in != prep.d_out {
            return Err(Error::Dimension(format!(
                "correlating capsules with the query needs d_in == d_out, got {d_in} and {}",
                prep.d_out
            )));
        }
        let q1 = g.reshape(query, &[prep.sets, 1, prep.d_out])?;
        let mut queries = g.concat(&vec![q1; prep.m], 1)?;

        let uc = g.center(prep.capsules);
        let uc = g.unit(uc);
        let (mut pccs, mut guidance) = if self.zero_guidance {
            let z = prep.zeros(g);
            (z, z)
        } else {
            self.guidance(g, uc, queries)?
        };

        let mut alpha = prep.zeros(g);
        let mut iterations = Vec::with_capacity(input.iterations);
        for _ in 0..input.iterations {
            let coupling = g.softmax(alpha, 2)?;
            let weights = g.add(coupling, guidance)?;
            let outputs = prep.outputs(g, weights)?;
            iterations.push(IterationVars {
                alpha,
                coupling,
                pccs: Some(pccs),
                guidance: Some(guidance),
                queries: Some(queries),
                outputs,
            });
            let agree = prep.agreement(g, outputs)?;
            let scaled = g.mul(agree, guidance)?;
            alpha = g.add(alpha, scaled)?;
            let sum = g.add(queries, outputs)?;
            queries = g.scale(sum, 0.5);
            if !self.zero_guidance {
                (pccs, guidance) = self.guidance(g, uc, queries)?;
            }
        }
        Ok(Routed {
            outputs: iterations.last().expect("iterations >= 1").outputs,
            iterations,
        })
    }
}

/// Name → strategy table.
#[derive(Clone)]
pub struct RoutingRegistry {
    entries: BTreeMap<String, Arc<dyn RoutingStrategy>>,
}

impl Default for RoutingRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(DynamicRouting));
        r.register(Arc::new(QueryGuidedRouting::default()));
        r.register(Arc::new(QueryGuidedRouting {
            zero_guidance: true,
        }));
        r
    }
}

impl RoutingRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces the strategy under its own name.
    pub fn register(&mut self, strategy: Arc<dyn RoutingStrategy>) {
        self.entries.insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn RoutingStrategy>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
