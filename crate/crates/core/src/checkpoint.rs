//! GMWT checkpoint format (little-endian):
//!
//! ```text
//! "GMWT" | version u32 | model_dim u32 | n_heads u32 | eps f64
//! | graph_mode u32 | dropout f64 | max_seq_len u32 | param_count u32
//! | param_count × (name_len u32 | name | rank u32 | dims u32[rank] | f64[numel])
//! ```
//!
//! Parameters appear in [`Params`] traversal order of [`ModelParams`]. A
//! `text_proj` entry is present exactly when `model_dim` differs from the
//! text encoder width.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::GraphMode;
use crate::error::{Error, Result};
use crate::mlstm::HeadConfig;
use crate::model::{GateMabsaModel, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::params::{named, Params};

pub const GMWT_MAGIC: [u8; 4] = *b"GMWT";
pub const GMWT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &GateMabsaModel, sink: &mut W) -> Result<()> {
    let cfg = &model.config;
    let mut out = Vec::new();
    let u32_of = |v: usize, what: &str| -> Result<[u8; 4]> {
        u32::try_from(v).map(u32::to_le_bytes).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
    };
    out.extend_from_slice(&GMWT_MAGIC);
    out.extend_from_slice(&GMWT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(cfg.head.model_dim, "model_dim")?);
    out.extend_from_slice(&u32_of(cfg.head.n_heads, "n_heads")?);
    out.extend_from_slice(&cfg.head.eps.to_le_bytes());
    out.extend_from_slice(&cfg.graph_mode.code().to_le_bytes());
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&u32_of(cfg.max_seq_len, "max_seq_len")?);
    let params = named(&model.params);
    out.extend_from_slice(&u32_of(params.len(), "parameter count")?);
    for (name, t) in &params {
        out.extend_from_slice(&u32_of(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape().len(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&out)?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &'static str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated { offset: self.offset, what },
            _ => e.into(),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        let b = self.bytes(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(source: &mut R) -> Result<GateMabsaModel> {
    let mut rd = Cursor { inner: source, offset: 0 };
    let magic = rd.bytes(4, "magic")?;
    if magic != GMWT_MAGIC {
        return Err(Error::BadMagic { expected: GMWT_MAGIC, found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = rd.u32("version")?;
    if version != GMWT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let model_dim = rd.u32("model_dim")? as usize;
    let n_heads = rd.u32("n_heads")? as usize;
    let eps = rd.f64("eps")?;
    let mode_code = rd.u32("graph_mode")?;
    let graph_mode =
        GraphMode::from_code(mode_code).ok_or_else(|| Error::Checkpoint(format!("unknown graph mode {mode_code}")))?;
    let dropout = rd.f64("dropout")?;
    let max_seq_len = rd.u32("max_seq_len")? as usize;
    let config = ModelConfig { head: HeadConfig { model_dim, n_heads, eps }, graph_mode, dropout, max_seq_len };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    // Shapes and names come from a freshly initialized skeleton; the file
    // must list exactly the same leaves in the same order.
    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
    let expected = named(&params);
    let count = rd.u32("param_count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, file has {count}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want) in &expected {
        let name_len = rd.u32("name_len")? as usize;
        let name = String::from_utf8(rd.bytes(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if &name != want_name {
            return Err(Error::Checkpoint(format!("expected parameter {want_name}, found {name}")));
        }
        let rank = rd.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(rd.u32("dims")? as usize);
        }
        if dims != want.shape() {
            return Err(Error::Checkpoint(format!("{name} has shape {dims:?}, expected {:?}", want.shape())));
        }
        let raw = rd.bytes(8 * want.len(), "data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{name} has a non-finite value at index {i}")));
        }
        loaded.push(Tensor::new(dims, data)?);
    }
    let mut it = loaded.into_iter();
    params.visit_mut("", &mut |_, t| *t = it.next().expect("count checked"));
    Ok(GateMabsaModel { config, params })
}

pub fn save_checkpoint(model: &GateMabsaModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GateMabsaModel> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
