//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RNMTCKPT" | u32 version | u64 step
//! str config (key = value lines)
//! u32 n, n × str   source vocabulary
//! u32 n, n × str   target vocabulary
//! u32 n, n × { str name | u32 ndim | ndim × u64 dim | Π dim × f64 }
//! ```
//! where `str` is a `u32` byte length followed by UTF-8.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RNMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub params: ParamStore,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

fn write_vocab(w: &mut impl Write, v: &Vocab) -> Result<()> {
    w.write_u32::<LittleEndian>(v.len() as u32)?;
    v.tokens().iter().try_for_each(|t| write_str(w, t))
}

fn read_vocab(r: &mut impl Read) -> Result<Vocab> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let tokens = (0..n).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
    let v = Vocab::from_tokens(tokens);
    if v.len() != n {
        return Err(Error::Checkpoint("vocabulary has duplicate or missing reserved tokens".into()));
    }
    Ok(v)
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Self {
        Checkpoint {
            config: model.config().clone(),
            step,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            params: model.params().clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        let cfg = RunConfig { model: self.config.clone(), ..Default::default() };
        write_str(&mut w, &cfg.to_text())?;
        write_vocab(&mut w, &self.src_vocab)?;
        write_vocab(&mut w, &self.tgt_vocab)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            write_str(&mut w, name)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in t.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let config = RunConfig::parse(&read_str(&mut r)?)?.model;
        let src_vocab = read_vocab(&mut r)?;
        let tgt_vocab = read_vocab(&mut r)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len > bytes.len() / 8 {
                return Err(Error::Checkpoint(format!("tensor {name} larger than the file")));
            }
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Checkpoint { config, step, src_vocab, tgt_vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Element-wise mean of parameters; metadata comes from the last checkpoint.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let last = checkpoints
        .last()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let mut out = last.clone();
    let k = checkpoints.len() as f64;
    for id in last.params.ids() {
        let name = last.params.name(id).to_owned();
        let shape = last.params.get(id).shape().to_vec();
        let mut acc = vec![0.0; last.params.get(id).len()];
        for c in checkpoints {
            let pid = c
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from a checkpoint")))?;
            let t = c.params.get(pid);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += x;
            }
        }
        for (dst, a) in out.params.get_mut(id).data_mut().iter_mut().zip(acc) {
            *dst = a / k;
        }
    }
    for c in checkpoints {
        if c.params.len() != last.params.len() {
            return Err(Error::Checkpoint("checkpoints hold different parameter sets".into()));
        }
    }
    Ok(out)
}

pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.model()?, ck))
}
