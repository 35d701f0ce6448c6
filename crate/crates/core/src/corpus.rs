//! Document-delimited parallel corpora: parsing, vocabularies and batching.
//!
//! Two on-disk formats are read and written:
//!
//! * doc-text: parallel `<prefix>.src` / `<prefix>.tgt` files, one
//!   whitespace-tokenized sentence per line, with documents separated by a
//!   line containing exactly `<d>` at the same line index in both files.
//! * jsonl: one document per line, `{"src": [...], "tgt": [...]}`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DOC_BOUNDARY: &str = "<d>";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    DocText,
    Jsonl,
}

impl CorpusFormat {
    /// `.jsonl` paths are jsonl; anything else is a doc-text prefix.
    pub fn detect(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e == "jsonl") {
            Self::Jsonl
        } else {
            Self::DocText
        }
    }
}

/// A tokenized sentence-aligned document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextDocument {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
}

impl TextDocument {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// A document as id sequences (no BOS/EOS framing).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Classifies a doc-text line. `Ok(None)` is a boundary.
fn doc_text_line<'a>(path: &Path, n: usize, line: &'a str) -> Result<Option<&'a str>> {
    if line == DOC_BOUNDARY {
        return Ok(None);
    }
    if line.split_whitespace().any(|t| t == DOC_BOUNDARY) {
        return Err(parse_err(
            path,
            n,
            "malformed document boundary (must be alone on its line)",
        ));
    }
    if line.trim().is_empty() {
        return Err(parse_err(path, n, "empty sentence"));
    }
    Ok(Some(line))
}

/// Splits a monolingual doc-text file into documents of tokenized sentences.
pub fn parse_doc_text_side(path: &Path, text: &str) -> Result<Vec<Vec<Vec<String>>>> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match doc_text_line(path, i + 1, line)? {
            None => {
                if !cur.is_empty() {
                    docs.push(std::mem::take(&mut cur));
                }
            }
            Some(s) => cur.push(tokenize(s)),
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

pub fn load_source_documents(path: &Path) -> Result<Vec<Vec<Vec<String>>>> {
    let text = fs::read_to_string(path)?;
    parse_doc_text_side(path, &text)
}

fn parse_doc_text(
    src_path: &Path,
    src: &str,
    tgt_path: &Path,
    tgt: &str,
) -> Result<Vec<TextDocument>> {
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        let n = src_lines.len().min(tgt_lines.len()) + 1;
        return Err(parse_err(
            tgt_path,
            n,
            format!(
                "{} source lines but {} target lines",
                src_lines.len(),
                tgt_lines.len()
            ),
        ));
    }
    let mut docs = Vec::new();
    let mut cur = TextDocument::default();
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let n = i + 1;
        match (
            doc_text_line(src_path, n, s)?,
            doc_text_line(tgt_path, n, t)?,
        ) {
            (None, None) => {
                if !cur.is_empty() {
                    docs.push(std::mem::take(&mut cur));
                }
            }
            (Some(s), Some(t)) => {
                cur.src.push(tokenize(s));
                cur.tgt.push(tokenize(t));
            }
            _ => {
                return Err(parse_err(
                    src_path,
                    n,
                    "document boundary present in only one of the parallel files",
                ))
            }
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<TextDocument>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| parse_err(path, n, format!("invalid json: {e}")))?;
        let side = |key: &str| -> Result<Vec<Vec<String>>> {
            let arr = v
                .get(key)
                .and_then(|x| x.as_array())
                .ok_or_else(|| parse_err(path, n, format!("missing `{key}` array")))?;
            arr.iter()
                .map(|s| {
                    let s = s.as_str().ok_or_else(|| {
                        parse_err(path, n, format!("`{key}` entries must be strings"))
                    })?;
                    let toks = tokenize(s);
                    if toks.is_empty() {
                        return Err(parse_err(path, n, "empty sentence"));
                    }
                    Ok(toks)
                })
                .collect()
        };
        let (src, tgt) = (side("src")?, side("tgt")?);
        if src.len() != tgt.len() {
            return Err(parse_err(
                path,
                n,
                format!(
                    "{} source sentences but {} target sentences",
                    src.len(),
                    tgt.len()
                ),
            ));
        }
        if !src.is_empty() {
            docs.push(TextDocument { src, tgt });
        }
    }
    Ok(docs)
}

/// Loads a corpus. For doc-text, `path` is the prefix of the `.src`/`.tgt` pair.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<TextDocument>> {
    match format {
        CorpusFormat::DocText => {
            let (sp, tp) = (with_suffix(path, ".src"), with_suffix(path, ".tgt"));
            let src = fs::read_to_string(&sp)?;
            let tgt = fs::read_to_string(&tp)?;
            parse_doc_text(&sp, &src, &tp, &tgt)
        }
        CorpusFormat::Jsonl => parse_jsonl(path, &fs::read_to_string(path)?),
    }
}

fn doc_text_side<'a>(docs: impl Iterator<Item = &'a Vec<Vec<String>>>) -> String {
    let mut out = String::new();
    for (i, d) in docs.enumerate() {
        if i > 0 {
            out.push_str(DOC_BOUNDARY);
            out.push('\n');
        }
        for s in d {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn write_corpus(path: &Path, format: CorpusFormat, docs: &[TextDocument]) -> Result<()> {
    match format {
        CorpusFormat::DocText => {
            fs::write(
                with_suffix(path, ".src"),
                doc_text_side(docs.iter().map(|d| &d.src)),
            )?;
            fs::write(
                with_suffix(path, ".tgt"),
                doc_text_side(docs.iter().map(|d| &d.tgt)),
            )?;
        }
        CorpusFormat::Jsonl => {
            let mut f = fs::File::create(path)?;
            for d in docs {
                let join = |side: &Vec<Vec<String>>| -> Vec<String> {
                    side.iter().map(|s| s.join(" ")).collect()
                };
                let v = serde_json::json!({ "src": join(&d.src), "tgt": join(&d.tgt) });
                writeln!(f, "{v}")?;
            }
        }
    }
    Ok(())
}

/// Writes one side of documents as doc-text.
pub fn write_doc_text_side(path: &Path, docs: &[Vec<Vec<String>>]) -> Result<()> {
    fs::write(path, doc_text_side(docs.iter()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Ids 0..4 are `<pad> <s> </s> <unk>`; the rest are tokens seen at
    /// least `min_count` times, ordered by descending count then token.
    pub fn build<'a>(
        sentences: impl IntoIterator<Item = &'a Vec<String>>,
        min_count: usize,
    ) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !SPECIALS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

pub fn encode_documents(docs: &[TextDocument], src: &Vocab, tgt: &Vocab) -> Vec<Document> {
    docs.iter()
        .map(|d| Document {
            pairs: d
                .src
                .iter()
                .zip(&d.tgt)
                .map(|(s, t)| (src.encode(s), tgt.encode(t)))
                .collect(),
        })
        .collect()
}

/// One training sentence with its document context.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub doc: usize,
    pub sent: usize,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// `context[k - 1]` is the source sentence at distance `k`; at most `K`
    /// entries, fewer at the start of a document.
    pub context: Vec<Vec<usize>>,
}

/// Up to `K` preceding source sentences of `doc`, nearest first.
pub fn context_for(doc: &[Vec<usize>], j: usize, k: usize) -> Vec<Vec<usize>> {
    (1..=k.min(j)).map(|d| doc[j - d].clone()).collect()
}

/// Builds examples in document order. Pairs with more than `max_len` tokens
/// on either side are dropped (they still serve as context); the second
/// value is the dropped count.
pub fn examples(docs: &[Document], k: usize, max_len: usize) -> (Vec<Example>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for (di, d) in docs.iter().enumerate() {
        let srcs: Vec<Vec<usize>> = d.pairs.iter().map(|p| p.0.clone()).collect();
        for (j, (s, t)) in d.pairs.iter().enumerate() {
            if s.len() > max_len || t.len() > max_len {
                dropped += 1;
                continue;
            }
            out.push(Example {
                doc: di,
                sent: j,
                src: s.clone(),
                tgt: t.clone(),
                context: context_for(&srcs, j, k),
            });
        }
    }
    (out, dropped)
}

/// A padded batch of sentences with their document context.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentBatch {
    pub size: usize,
    /// Configured history window `K`.
    pub window: usize,
    /// `[size, src_len]`, PAD-filled.
    pub src: Vec<usize>,
    pub src_len: usize,
    /// `[size, src_len]` of 1.0 / 0.0.
    pub src_mask: Vec<f64>,
    /// `BOS y`, `[size, tgt_len]`.
    pub tgt_in: Vec<usize>,
    /// `y EOS`, `[size, tgt_len]`.
    pub tgt_out: Vec<usize>,
    pub tgt_len: usize,
    pub tgt_mask: Vec<f64>,
    /// `[size][k - 1]`: context source sentence at distance `k`, or empty.
    pub context: Vec<Vec<Vec<usize>>>,
    pub context_present: Vec<Vec<bool>>,
    pub doc_index: Vec<usize>,
    pub sent_index: Vec<usize>,
}

impl DocumentBatch {
    pub fn from_examples(examples: &[Example], k: usize) -> Self {
        let size = examples.len();
        let src_len = examples
            .iter()
            .map(|e| e.src.len())
            .max()
            .unwrap_or(0)
            .max(1);
        let tgt_len = examples.iter().map(|e| e.tgt.len() + 1).max().unwrap_or(1);
        let mut b = DocumentBatch {
            size,
            window: k,
            src: vec![PAD; size * src_len],
            src_len,
            src_mask: vec![0.0; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_len,
            tgt_mask: vec![0.0; size * tgt_len],
            context: Vec::with_capacity(size),
            context_present: Vec::with_capacity(size),
            doc_index: examples.iter().map(|e| e.doc).collect(),
            sent_index: examples.iter().map(|e| e.sent).collect(),
        };
        for (i, e) in examples.iter().enumerate() {
            for (t, &id) in e.src.iter().enumerate() {
                b.src[i * src_len + t] = id;
                b.src_mask[i * src_len + t] = 1.0;
            }
            let framed_in = std::iter::once(BOS).chain(e.tgt.iter().copied());
            let framed_out = e.tgt.iter().copied().chain(std::iter::once(EOS));
            for (t, (a, o)) in framed_in.zip(framed_out).enumerate() {
                b.tgt_in[i * tgt_len + t] = a;
                b.tgt_out[i * tgt_len + t] = o;
                b.tgt_mask[i * tgt_len + t] = 1.0;
            }
            let mut ctx = vec![Vec::new(); k];
            let mut present = vec![false; k];
            for (slot, s) in e.context.iter().take(k).enumerate() {
                if !s.is_empty() {
                    ctx[slot] = s.clone();
                    present[slot] = true;
                }
            }
            b.context.push(ctx);
            b.context_present.push(present);
        }
        b
    }

    pub fn src_row(&self, i: usize) -> &[usize] {
        &self.src[i * self.src_len..(i + 1) * self.src_len]
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Shuffles examples with `seed` and groups them into batches.
pub fn batch_examples(
    mut examples: Vec<Example>,
    k: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<DocumentBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    examples
        .chunks(batch_size.max(1))
        .map(|c| DocumentBatch::from_examples(c, k))
        .collect()
}

/// Examples → shuffled batches. Returns the batches and the number of
/// over-long pairs dropped.
pub fn make_batches(
    docs: &[Document],
    k: usize,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> (Vec<DocumentBatch>, usize) {
    let (ex, dropped) = examples(docs, k, max_len);
    if dropped > 0 {
        log::warn!("dropped {dropped} sentence pairs longer than {max_len} tokens");
    }
    (batch_examples(ex, k, batch_size, seed), dropped)
}
