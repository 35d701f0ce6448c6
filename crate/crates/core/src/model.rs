//! The full document-level model: capsule context network, context-aware
//! encoder, decoder and (while training) the correlation regularizer.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{DocumentBatch, Example, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::qcn::{self, ContextVars, QcnVars, RoutingOptions};
use crate::regularizer::{self, batch_regularization, graph_total_loss};
use crate::routing::{RoutingRegistry, RoutingStrategy};
use crate::transformer::{self, decode, embed, encode, ContextInput, Dropout, EncoderState};

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    strategy: Arc<dyn RoutingStrategy>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            strategy: Arc::clone(&self.strategy),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("strategy", &self.strategy.name())
            .finish()
    }
}

/// Graph handles produced by one teacher-forced pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: Var,
    pub nll: Var,
    pub reg: Option<Var>,
    /// `[B · Tt, V]`.
    pub logits: Var,
    pub encoder: EncoderState,
    pub context: Option<ContextVars>,
}

fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    transformer::init_transformer(&mut p, cfg, cfg.uses_context(), &mut rng);
    let (d, dc, m, k) = (
        cfg.d_model,
        cfg.capsule_dim,
        cfg.capsules,
        cfg.context_sentences,
    );
    if cfg.uses_context() {
        p.init_linear(qcn::QUERY_W, d, dc, &mut rng);
        p.init_constant(qcn::QUERY_B, &[dc], 0.0);
        p.init_linear(qcn::CAPS_W, d + k, dc, &mut rng);
        p.init_constant(qcn::CAPS_B, &[dc], 0.0);
        init_capsule_weights(&mut p, qcn::ROUTE_W, m, dc, dc, &mut rng);
        p.init_linear(qcn::PROJ_W, dc, d, &mut rng);
        p.init_constant(qcn::PROJ_B, &[d], 0.0);
    }
    if cfg.lambda > 0.0 {
        init_capsule_weights(&mut p, regularizer::ENC_W, m, d, dc, &mut rng);
        init_capsule_weights(&mut p, regularizer::DEC_W, m, d, dc, &mut rng);
    }
    p
}

fn init_capsule_weights(
    p: &mut ParamStore,
    name: &str,
    m: usize,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    p.init_linear(name, d_in, m * d_out, rng);
    let t = p.get(name).expect("just inserted");
    // [d_in, m·d_out] → [m, d_in, d_out]
    let mut data = vec![0.0; m * d_in * d_out];
    for i in 0..d_in {
        for j in 0..m {
            for o in 0..d_out {
                data[(j * d_in + i) * d_out + o] = t.data()[i * m * d_out + j * d_out + o];
            }
        }
    }
    p.insert(name, Tensor::from_parts(vec![m, d_in, d_out], data));
}

/// Index of the largest logit, skipping PAD and BOS.
pub fn argmax_token(logits: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &z) in logits.iter().enumerate() {
        if i != PAD && i != BOS && z > logits[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed);
        Self::new(config, params)
    }

    /// Wraps existing parameters after checking they fit `config`.
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if config.src_vocab <= EOS || config.tgt_vocab <= EOS {
            return Err(Error::Config(format!(
                "vocabularies too small: src {} tgt {}",
                config.src_vocab, config.tgt_vocab
            )));
        }
        let strategy = RoutingRegistry::default().get(&config.routing)?;
        let expected = init_params(&config, 0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(extra) = params
            .names()
            .into_iter()
            .find(|n| expected.get(n).is_none())
        {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            params,
            strategy,
        })
    }

    pub fn strategy(&self) -> &dyn RoutingStrategy {
        self.strategy.as_ref()
    }

    pub fn routing_options(&self) -> RoutingOptions {
        RoutingOptions {
            iterations: self.config.iterations,
            squash_inputs: self.config.squash_inputs,
            window: self.config.context_sentences,
        }
    }

    /// Context features (when enabled) and the encoder pass for `batch`.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &DocumentBatch,
        dropout: &mut Dropout,
    ) -> Result<(EncoderState, Option<ContextVars>)> {
        let cfg = &self.config;
        let table = b.get("src.emb")?;
        let context = if cfg.uses_context() {
            let w = QcnVars::from_bound(b)?;
            Some(qcn::batch_context(
                g,
                &w,
                self.strategy(),
                &self.routing_options(),
                table,
                batch,
                cfg.capsules,
                cfg.d_model,
            )?)
        } else {
            None
        };
        let x = embed(g, table, &batch.src, batch.size, batch.src_len)?;
        let ctx_in = context.as_ref().map(|c| ContextInput {
            features: c.features,
            mask: &c.mask,
        });
        let enc = encode(g, b, cfg, x, &batch.src_mask, ctx_in, dropout)?;
        Ok((enc, context))
    }

    /// Teacher-forced forward pass with loss `nll − λ · reg`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &DocumentBatch,
        dropout: &mut Dropout,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (enc, context) = self.encode(g, b, batch, dropout)?;
        let tgt_table = b.get("tgt.emb")?;
        let y = embed(g, tgt_table, &batch.tgt_in, batch.size, batch.tgt_len)?;
        let logits = decode(g, b, cfg, y, &batch.tgt_mask, &enc, dropout)?;
        let logits = g.reshape(logits, &[batch.size * batch.tgt_len, cfg.tgt_vocab])?;
        let nll = g.cross_entropy(logits, &batch.tgt_out, &batch.tgt_mask)?;
        let reg = if cfg.lambda > 0.0 {
            let d = cfg.d_model;
            let src_table = b.get("src.emb")?;
            let s = g.index_select(src_table, &batch.src)?;
            let s = g.reshape(s, &[batch.size, batch.src_len, d])?;
            let t = g.index_select(tgt_table, &batch.tgt_in)?;
            let t = g.reshape(t, &[batch.size, batch.tgt_len, d])?;
            Some(batch_regularization(
                g,
                b.get(regularizer::ENC_W)?,
                b.get(regularizer::DEC_W)?,
                s,
                &batch.src_mask,
                t,
                &batch.tgt_mask,
                cfg.iterations,
            )?)
        } else {
            None
        };
        let loss = graph_total_loss(g, nll, reg, cfg.lambda)?;
        Ok(ForwardOutput {
            loss,
            nll,
            reg,
            logits,
            encoder: enc,
            context,
        })
    }

    /// Next-token logits after `prefix` (which starts with BOS) for a
    /// single-sentence encoder state.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        b: &Bound,
        enc: &EncoderState,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument(
                "decoder prefix must start with BOS".into(),
            ));
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "prefix of {} tokens exceeds max length {}",
                prefix.len(),
                self.config.max_len
            )));
        }
        if enc.batch != 1 {
            return Err(Error::Shape(format!(
                "decode_step wants one sentence, got {}",
                enc.batch
            )));
        }
        let t = prefix.len();
        let y = embed(g, b.get("tgt.emb")?, prefix, 1, t)?;
        let logits = decode(
            g,
            b,
            &self.config,
            y,
            &vec![1.0; t],
            enc,
            &mut Dropout::off(),
        )?;
        let v = self.config.tgt_vocab;
        Ok(g.value(logits).data()[(t - 1) * v..t * v].to_vec())
    }

    /// Greedy decoding of one source sentence given its history (nearest first).
    pub fn greedy_translate(&self, src: &[usize], history: &[Vec<usize>]) -> Result<Vec<usize>> {
        if src.is_empty() {
            return Ok(Vec::new());
        }
        let ex = Example {
            doc: 0,
            sent: 0,
            src: src.to_vec(),
            tgt: Vec::new(),
            context: history
                .iter()
                .take(self.config.context_sentences)
                .cloned()
                .collect(),
        };
        let batch = DocumentBatch::from_examples(&[ex], self.config.context_sentences);
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let (enc, _) = self.encode(&mut g, &b, &batch, &mut Dropout::off())?;
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < self.config.max_len {
            let logits = self.decode_step(&mut g, &b, &enc, &prefix)?;
            let tok = argmax_token(&logits);
            if tok == EOS {
                break;
            }
            out.push(tok);
            prefix.push(tok);
        }
        Ok(out)
    }

    /// Teacher-forced evaluation pass without dropout or gradients.
    pub fn evaluate(&self, batch: &DocumentBatch) -> Result<Evaluation> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &b, batch, &mut Dropout::off())?;
        Ok(Evaluation::read(&g, &out, batch))
    }
}

/// Scalar results of one teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub nll: f64,
    pub reg: f64,
    /// Argmax prediction per `tgt_out` position (PAD where masked).
    pub predictions: Vec<usize>,
    pub correct: usize,
    pub tokens: usize,
}

impl Evaluation {
    pub fn read(g: &Graph, out: &ForwardOutput, batch: &DocumentBatch) -> Self {
        let logits = g.value(out.logits);
        let mut predictions = vec![PAD; batch.tgt_out.len()];
        let mut correct = 0;
        let mut tokens = 0;
        for (i, row) in logits.rows().enumerate() {
            if batch.tgt_mask[i] == 0.0 {
                continue;
            }
            let p = argmax_token(row);
            predictions[i] = p;
            tokens += 1;
            if p == batch.tgt_out[i] {
                correct += 1;
            }
        }
        Self {
            loss: g.value(out.loss).item(),
            nll: g.value(out.nll).item(),
            reg: out.reg.map(|r| g.value(r).item()).unwrap_or(0.0),
            predictions,
            correct,
            tokens,
        }
    }

    pub fn token_accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

impl Model {
    /// Greedy translation of every sentence of a document, each conditioned
    /// on the preceding source sentences.
    pub fn translate_document(&self, src: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        let k = self.config.context_sentences;
        (0..src.len())
            .map(|j| self.greedy_translate(&src[j], &crate::corpus::context_for(src, j, k)))
            .collect()
    }

    /// Routing traces for sentence `j` of a source document, one per
    /// available history sentence as `(distance, trace)`, nearest first.
    pub fn routing_traces(
        &self,
        src: &[Vec<usize>],
        j: usize,
    ) -> Result<Vec<(usize, crate::routing::RoutingTrace)>> {
        if j >= src.len() {
            return Err(Error::InvalidArgument(format!(
                "sentence {} out of range for a document of {}",
                j + 1,
                src.len()
            )));
        }
        if !self.config.uses_context() {
            return Err(Error::Config("model has no context capsule network".into()));
        }
        let ex = Example {
            doc: 0,
            sent: j,
            src: src[j].clone(),
            tgt: Vec::new(),
            context: crate::corpus::context_for(src, j, self.config.context_sentences),
        };
        let batch = DocumentBatch::from_examples(&[ex], self.config.context_sentences);
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let (_, ctx) = self.encode(&mut g, &b, &batch, &mut Dropout::off())?;
        Ok(ctx.map(|c| c.traces(&g, 0)).unwrap_or_default())
    }
}
