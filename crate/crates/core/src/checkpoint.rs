//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `QCNCKPT\0`, `u32` version, `u64` step, config text, source
//! and target vocabularies, then every parameter as name, shape and raw
//! `f64` values. Strings are `u32` length + UTF-8 bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"QCNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: Config,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub params: ParamStore,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_vocab(buf: &mut Vec<u8>, v: &Vocab) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for t in v.tokens() {
        put_str(buf, t);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| self.err("length overflow"))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }

    fn vocab(&mut self) -> Result<Vocab> {
        let n = self.len()?;
        let tokens = (0..n).map(|_| self.string()).collect::<Result<Vec<_>>>()?;
        Ok(Vocab::from_tokens(tokens))
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        train: &crate::config::TrainConfig,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        step: u64,
    ) -> Self {
        Self {
            step,
            config: Config {
                model: model.config.clone(),
                train: train.clone(),
            },
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut buf, &self.config.to_text());
        put_vocab(&mut buf, &self.src_vocab);
        put_vocab(&mut buf, &self.tgt_vocab);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { data, pos: 0, path };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(r.err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let config = Config::parse(&r.string()?).map_err(|e| r.err(e.to_string()))?;
        let src_vocab = r.vocab()?;
        let tgt_vocab = r.vocab()?;
        let count = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_bits(r.u64()?));
            }
            let t = Tensor::new(shape, values).map_err(|e| r.err(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        if r.pos != data.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            step,
            config,
            src_vocab,
            tgt_vocab,
            params,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&data, path)
    }

    /// Rebuilds the model, checking the stored parameters against the stored
    /// config and vocabularies.
    pub fn model(&self) -> Result<Model> {
        let m = &self.config.model;
        if m.src_vocab != self.src_vocab.len() || m.tgt_vocab != self.tgt_vocab.len() {
            return Err(Error::Config(format!(
                "config vocab sizes {}/{} do not match stored vocabularies {}/{}",
                m.src_vocab,
                m.tgt_vocab,
                self.src_vocab.len(),
                self.tgt_vocab.len()
            )));
        }
        Model::new(m.clone(), self.params.clone())
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
