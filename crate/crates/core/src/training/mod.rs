//! Training loop, optimizer, toy task and evaluation.

pub mod adam;
pub mod bleu;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_global_norm, global_norm, OptimizerState};
pub use bleu::bleu;
pub use toy::{gen_toy_corpus, ToyTaskConfig};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainConfig};
use crate::corpus::{
    batch_examples, encode_documents, examples, Document, DocumentBatch, Example, TextDocument,
    Vocab,
};
use crate::error::{Error, Result};
use crate::model::{Evaluation, Model};
use crate::numerics::{Graph, Tensor};
use crate::transformer::Dropout;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const DUMP_FILE: &str = "nonfinite_batch.txt";

/// One metrics log line: `step loss nll pccs_term token_acc`, tab separated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub pccs_term: f64,
    pub token_acc: f64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            self.step, self.loss, self.nll, self.pccs_term, self.token_acc
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        let bad = || Error::InvalidArgument(format!("bad metrics line `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            loss: num(f[1])?,
            nll: num(f[2])?,
            pccs_term: num(f[3])?,
            token_acc: num(f[4])?,
        })
    }
}

/// Optimizer state plus the deterministic batch stream.
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub train: TrainConfig,
    examples: Vec<Example>,
    queue: Vec<DocumentBatch>,
    epoch: u64,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, train: TrainConfig, examples: Vec<Example>) -> Self {
        let optimizer = OptimizerState::new(&model.params, &train);
        let dropout_rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_d809);
        Self {
            model,
            optimizer,
            train,
            examples,
            queue: Vec::new(),
            epoch: 0,
            dropout_rng,
        }
    }

    /// Next batch; the examples are reshuffled every epoch.
    pub fn next_batch(&mut self) -> Result<DocumentBatch> {
        if self.examples.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        if self.queue.is_empty() {
            let seed = self
                .train
                .seed
                .wrapping_add(self.epoch.wrapping_mul(0x9e37_79b9));
            self.queue = batch_examples(
                self.examples.clone(),
                self.model.config.context_sentences,
                self.train.batch_size,
                seed,
            );
            self.queue.reverse();
            self.epoch += 1;
        }
        Ok(self.queue.pop().expect("refilled"))
    }

    /// Forward, backward and one Adam update on `batch`. A non-finite loss or
    /// gradient aborts before the parameters change.
    pub fn step_on(&mut self, batch: &DocumentBatch) -> Result<MetricsRow> {
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let rate = self.model.config.dropout();
        let out = {
            let mut dropout = Dropout::train(rate, &mut self.dropout_rng);
            self.model.forward(&mut g, &bound, batch, &mut dropout)?
        };
        let eval = Evaluation::read(&g, &out, batch);
        let step = self.optimizer.step as usize + 1;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at step {step}",
                eval.loss
            )));
        }
        let grads = g.backward(out.loss)?;
        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, &var) in bound.iter() {
            if let Some(t) = grads.get(var) {
                named.insert(name.clone(), t.clone());
            }
        }
        if let Some((name, _)) = named.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` at step {step}"
            )));
        }
        clip_global_norm(&mut named, self.train.clip_norm);
        self.optimizer.update(&mut self.model.params, &named)?;
        Ok(MetricsRow {
            step,
            loss: eval.loss,
            nll: eval.nll,
            pccs_term: eval.reg,
            token_acc: eval.token_accuracy(),
        })
    }
}

fn dump_batch(path: &Path, batch: &DocumentBatch, step: usize, why: &str) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "step {step}: {why}");
    for i in 0..batch.size {
        let tgt = &batch.tgt_out[i * batch.tgt_len..(i + 1) * batch.tgt_len];
        let _ = writeln!(
            s,
            "doc {} sent {} src {:?} tgt {:?} context {:?}",
            batch.doc_index[i],
            batch.sent_index[i],
            batch.src_row(i),
            tgt,
            batch.context[i]
        );
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub metrics: Vec<MetricsRow>,
    /// Sentence pairs over the length limit.
    pub dropped: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Vocabularies over both sides of `docs`.
pub fn build_vocabs(docs: &[TextDocument], min_count: usize) -> (Vocab, Vocab) {
    let src = Vocab::build(docs.iter().flat_map(|d| d.src.iter()), min_count);
    let tgt = Vocab::build(docs.iter().flat_map(|d| d.tgt.iter()), min_count);
    (src, tgt)
}

/// Builds vocabularies and a fresh model from `config`, then trains for
/// `steps` updates. With `out_dir` the metrics log and checkpoints are
/// written there.
pub fn train(
    config: &Config,
    docs: &[TextDocument],
    steps: usize,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let (src_vocab, tgt_vocab) = build_vocabs(docs, config.train.min_count);
    let mut mcfg = config.model.clone();
    mcfg.src_vocab = src_vocab.len();
    mcfg.tgt_vocab = tgt_vocab.len();
    let model = Model::init(mcfg, config.train.seed)?;
    let encoded = encode_documents(docs, &src_vocab, &tgt_vocab);
    let (ex, dropped) = examples(
        &encoded,
        model.config.context_sentences,
        model.config.max_len,
    );
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} sentence pairs longer than {} tokens",
            model.config.max_len
        );
    }
    if steps > 0 && ex.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus has no usable sentence pairs".into(),
        ));
    }

    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut trainer = Trainer::new(model, config.train.clone(), ex);
    let save = |t: &Trainer, step: usize| -> Result<()> {
        if let Some(p) = &ckpt_path {
            Checkpoint::from_model(&t.model, &t.train, &src_vocab, &tgt_vocab, step as u64)
                .save(p)?;
        }
        Ok(())
    };

    let interval = config.train.log_interval.max(1);
    let mut metrics = Vec::new();
    for step in 1..=steps {
        let batch = trainer.next_batch()?;
        let row = match trainer.step_on(&batch) {
            Ok(r) => r,
            Err(Error::NonFinite(why)) => {
                let mut msg = why.clone();
                if let Some(dir) = out_dir {
                    let p = dir.join(DUMP_FILE);
                    dump_batch(&p, &batch, step, &why)?;
                    msg = format!("{why}; batch written to {}", p.display());
                }
                return Err(Error::NonFinite(msg));
            }
            Err(e) => return Err(e),
        };
        if step % interval == 0 || step == steps {
            log::info!("{}", row.to_line());
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", row.to_line())?;
            }
            metrics.push(row);
        }
        let ci = config.train.checkpoint_interval;
        if ci > 0 && step % ci == 0 && step != steps {
            save(&trainer, step)?;
        }
    }
    save(&trainer, steps)?;
    Ok(TrainReport {
        model: trainer.model,
        src_vocab,
        tgt_vocab,
        metrics,
        dropped,
        checkpoint: ckpt_path,
    })
}

/// Teacher-forced scores over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Token-weighted mean NLL.
    pub nll: f64,
    pub token_acc: f64,
    /// Accuracy on target positions whose gold token is in `focus`.
    pub focus_acc: f64,
    pub tokens: usize,
    pub focus_tokens: usize,
}

/// Evaluates `docs` in order, in batches of `batch_size`. `focus` lists
/// target ids scored separately (e.g. the ambiguous toy targets).
pub fn evaluate_corpus(
    model: &Model,
    docs: &[Document],
    focus: &[usize],
    batch_size: usize,
) -> Result<EvalSummary> {
    let (ex, _) = examples(docs, model.config.context_sentences, model.config.max_len);
    let (mut nll, mut tokens, mut correct) = (0.0, 0usize, 0usize);
    let (mut f_tokens, mut f_correct) = (0usize, 0usize);
    for chunk in ex.chunks(batch_size.max(1)) {
        let batch = DocumentBatch::from_examples(chunk, model.config.context_sentences);
        let e = model.evaluate(&batch)?;
        nll += e.nll * e.tokens as f64;
        tokens += e.tokens;
        correct += e.correct;
        for (i, &gold) in batch.tgt_out.iter().enumerate() {
            if batch.tgt_mask[i] > 0.0 && focus.contains(&gold) {
                f_tokens += 1;
                f_correct += usize::from(e.predictions[i] == gold);
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalSummary {
        nll: if tokens == 0 {
            0.0
        } else {
            nll / tokens as f64
        },
        token_acc: ratio(correct, tokens),
        focus_acc: ratio(f_correct, f_tokens),
        tokens,
        focus_tokens: f_tokens,
    })
}

/// Ids of the ambiguous toy targets in `vocab`.
pub fn ambiguous_ids(vocab: &Vocab) -> Vec<usize> {
    vocab
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| toy::is_ambiguous_target(t))
        .map(|(i, _)| i)
        .collect()
}
