//! `qcn` command line: training, translation, routing inspection and toy
//! corpus generation. Every command is a thin wrapper over `qcn_core`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use qcn_core::corpus::{self, CorpusFormat};
use qcn_core::routing::RoutingTrace;
use qcn_core::training::{self, ToyTaskConfig};
use qcn_core::{Checkpoint, Config};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "qcn",
    version,
    about = "Document-level translation with query-guided capsule networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus metrics log.
    Train(TrainArgs),
    /// Greedy-translate a doc-text source file.
    Translate(TranslateArgs),
    /// Dump per-iteration coupling and correlation heatmaps as CSV.
    InspectRouting(InspectArgs),
    /// Write a synthetic doc-text corpus pair.
    GenToy(GenToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus prefix (`<prefix>.src`/`<prefix>.tgt`) or a `.jsonl` file.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain sentence-level Transformer: no capsule context, no regularizer.
    #[arg(long, conflicts_with_all = ["lambda", "no_qcn"])]
    pub context_agnostic: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Drop the context capsule network (the regularizer stays unless `--lambda 0`).
    #[arg(long)]
    pub no_qcn: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Doc-text source file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Doc-text reference file; prints `BLEU=<value>`.
    #[arg(long)]
    pub bleu_ref: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Doc-text source file holding the document.
    #[arg(long)]
    pub doc: PathBuf,
    /// 1-based sentence index within the document.
    #[arg(long)]
    pub sentence: usize,
    /// 1-based document index when the file holds several.
    #[arg(long, default_value_t = 1)]
    pub doc_index: usize,
    /// Output directory for the CSV files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// Output prefix; writes `<prefix>.src` and `<prefix>.tgt`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2)]
    pub markers: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    #[arg(long, default_value_t = 4)]
    pub doc_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub docs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl GenToyArgs {
    pub fn task(&self) -> ToyTaskConfig {
        ToyTaskConfig {
            vocab_size: self.vocab,
            markers: self.markers,
            min_len: self.min_len,
            max_len: self.max_len,
            doc_len: self.doc_len,
            docs: self.docs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    Coupling,
    Pccs,
}

impl HeatmapKind {
    pub fn name(self) -> &'static str {
        match self {
            HeatmapKind::Coupling => "coupling",
            HeatmapKind::Pccs => "pccs",
        }
    }
}

/// One `n × m` matrix per routing iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapDump {
    pub kind: HeatmapKind,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl HeatmapDump {
    pub fn from_trace(trace: &RoutingTrace, kind: HeatmapKind) -> Self {
        let values = trace
            .iterations
            .iter()
            .map(|it| match kind {
                HeatmapKind::Coupling => it.coupling.clone(),
                HeatmapKind::Pccs => it.pccs.clone(),
            })
            .collect();
        Self { kind, values }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,i,j,value\n");
        for (t, mat) in self.values.iter().enumerate() {
            for (i, row) in mat.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(s, "{t},{i},{j},{v}");
                }
            }
        }
        s
    }

    /// Parses `iter,i,j,value` rows back into matrices.
    pub fn parse_csv(kind: HeatmapKind, text: &str) -> anyhow::Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("iter,i,j,value") {
            bail!("missing heatmap header");
        }
        let mut values: Vec<Vec<Vec<f64>>> = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                bail!("bad heatmap row `{line}`");
            }
            let (t, i, j): (usize, usize, usize) = (f[0].parse()?, f[1].parse()?, f[2].parse()?);
            let v: f64 = f[3].parse()?;
            if values.len() <= t {
                values.resize(t + 1, Vec::new());
            }
            let mat = &mut values[t];
            if mat.len() <= i {
                mat.resize(i + 1, Vec::new());
            }
            if mat[i].len() != j {
                bail!("heatmap rows out of order at `{line}`");
            }
            mat[i].push(v);
        }
        Ok(Self { kind, values })
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<qcn_core::Error> for Failure {
    fn from(e: qcn_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `qcn --help` for usage");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::InspectRouting(a) => cmd_inspect_routing(&a),
        Command::GenToy(a) => cmd_gen_toy(&a),
    }
}

/// The effective training config for `args`: file, then flags.
pub fn train_config(args: &TrainArgs) -> anyhow::Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.context_agnostic {
        cfg.model.use_qcn = false;
        cfg.model.lambda = 0.0;
    }
    if args.no_qcn {
        cfg.model.use_qcn = false;
    }
    if let Some(l) = args.lambda {
        cfg.model.lambda = l;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn corpus_format(path: &Path) -> Result<CorpusFormat, Failure> {
    let format = CorpusFormat::detect(path);
    let missing: Vec<PathBuf> = match format {
        CorpusFormat::Jsonl => vec![path.to_path_buf()],
        CorpusFormat::DocText => vec![
            corpus::with_suffix(path, ".src"),
            corpus::with_suffix(path, ".tgt"),
        ],
    }
    .into_iter()
    .filter(|p| !p.is_file())
    .collect();
    if let Some(p) = missing.first() {
        return Err(Failure::Usage(format!(
            "corpus file {} not found",
            p.display()
        )));
    }
    Ok(format)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = train_config(args).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let format = corpus_format(&args.corpus)?;
    let docs = corpus::load_corpus(&args.corpus, format)?;
    let report = training::train(&cfg, &docs, args.steps, Some(&args.out))?;
    if let Some(last) = report.metrics.last() {
        println!("{}", last.to_line());
    }
    if let Some(p) = &report.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} not found", p.display())))
    }
}

/// Greedy translation of every document in `input` with the checkpointed model.
pub fn translate_file(ckpt: &Checkpoint, input: &Path) -> anyhow::Result<Vec<Vec<Vec<String>>>> {
    let model = ckpt
        .model()
        .context("checkpoint does not match its config")?;
    let docs = corpus::load_source_documents(input)?;
    docs.iter()
        .map(|d| {
            let ids: Vec<Vec<usize>> = d.iter().map(|s| ckpt.src_vocab.encode(s)).collect();
            let out = model.translate_document(&ids)?;
            Ok(out.iter().map(|s| ckpt.tgt_vocab.decode(s)).collect())
        })
        .collect()
}

fn cmd_translate(args: &TranslateArgs) -> Result<(), Failure> {
    require_file(&args.input, "input")?;
    if let Some(r) = &args.bleu_ref {
        require_file(r, "reference")?;
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let hyps = translate_file(&ckpt, &args.input)?;
    corpus::write_doc_text_side(&args.output, &hyps)?;
    if let Some(r) = &args.bleu_ref {
        let refs = corpus::load_source_documents(r)?;
        let h: Vec<Vec<String>> = hyps.into_iter().flatten().collect();
        let rf: Vec<Vec<String>> = refs.into_iter().flatten().collect();
        if h.is_empty() && rf.is_empty() {
            return Err(Failure::Runtime(anyhow!("nothing to score")));
        }
        let b = training::bleu(&h, &rf, 4)?;
        println!("BLEU={b:.4}");
    }
    Ok(())
}

/// Heatmaps for sentence `sentence` (1-based) of document `doc_index`
/// (1-based): `(distance, coupling, pccs)` per history sentence.
pub fn inspect_routing(
    ckpt: &Checkpoint,
    doc: &Path,
    doc_index: usize,
    sentence: usize,
) -> anyhow::Result<Vec<(usize, HeatmapDump, HeatmapDump)>> {
    let model = ckpt
        .model()
        .context("checkpoint does not match its config")?;
    let docs = corpus::load_source_documents(doc)?;
    let d = docs
        .get(doc_index.wrapping_sub(1))
        .ok_or_else(|| anyhow!("document {doc_index} out of range ({} in file)", docs.len()))?;
    if sentence == 0 || sentence > d.len() {
        bail!(
            "sentence {sentence} out of range for a document of {}",
            d.len()
        );
    }
    let ids: Vec<Vec<usize>> = d.iter().map(|s| ckpt.src_vocab.encode(s)).collect();
    let traces = model.routing_traces(&ids, sentence - 1)?;
    Ok(traces
        .iter()
        .map(|(k, t)| {
            (
                *k,
                HeatmapDump::from_trace(t, HeatmapKind::Coupling),
                HeatmapDump::from_trace(t, HeatmapKind::Pccs),
            )
        })
        .collect())
}

pub fn heatmap_path(dir: &Path, kind: HeatmapKind, distance: usize) -> PathBuf {
    dir.join(format!("{}_k{distance}.csv", kind.name()))
}

fn cmd_inspect_routing(args: &InspectArgs) -> Result<(), Failure> {
    require_file(&args.doc, "document")?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let dumps = inspect_routing(&ckpt, &args.doc, args.doc_index, args.sentence)?;
    fs::create_dir_all(&args.out).map_err(anyhow::Error::from)?;
    if dumps.is_empty() {
        println!("sentence {} has no history; nothing routed", args.sentence);
    }
    for (k, c, p) in &dumps {
        for d in [c, p] {
            let path = heatmap_path(&args.out, d.kind, *k);
            fs::write(&path, d.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_gen_toy(args: &GenToyArgs) -> Result<(), Failure> {
    let task = args.task();
    task.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let docs = training::gen_toy_corpus(&task)?;
    corpus::write_corpus(&args.out, CorpusFormat::DocText, &docs)
        .with_context(|| format!("writing corpus {}", args.out.display()))?;
    let sentences: usize = docs.iter().map(|d| d.len()).sum();
    println!("{} documents, {sentences} sentence pairs", docs.len());
    Ok(())
}
