//! Binary checkpoint format.
//!
//! Magic `L2GC`, u32 version, u32 header length and a JSON header (model
//! config, epoch, rng state, optimizer name, training settings), then a u32
//! block count and named blocks: u32 name length, UTF-8 name, u32 rank,
//! u64 extents, little-endian f64 values. Optimizer state blocks are
//! prefixed with `opt.`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::segmodel::ModelConfig;

pub const MAGIC: [u8; 4] = *b"L2GC";
pub const FORMAT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub optimizer: String,
    /// Free-form training settings for resuming.
    #[serde(default)]
    pub train: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
    pub optimizer_state: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} too large for the format")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_block(out: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len(), "name")?;
    out.write_all(name.as_bytes())?;
    put_u32(out, t.shape().len(), "rank")?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(&MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        put_u32(out, header.len(), "header")?;
        out.write_all(&header)?;
        put_u32(out, self.params.len() + self.optimizer_state.len(), "block count")?;
        for (name, t) in &self.params {
            write_block(out, name, t)?;
        }
        for (name, t) in &self.optimizer_state {
            write_block(out, &format!("{OPT_PREFIX}{name}"), t)?;
        }
        Ok(())
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let mut r = Reader { input };
        let magic: [u8; 4] = r.bytes(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&r.bytes(len, "header")?)?;
        let blocks = r.u32("block count")?;
        let mut params = Vec::new();
        let mut optimizer_state = Vec::new();
        for b in 0..blocks {
            let what = format!("block {b}");
            let n = r.u32(&what)? as usize;
            let name = String::from_utf8(r.bytes(n, &what)?)
                .map_err(|_| Error::Corrupt(format!("{what}: name is not UTF-8")))?;
            let rank = r.u32(&what)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&what)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.bytes(numel * 8, &format!("block `{name}`"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            match name.strip_prefix(OPT_PREFIX) {
                Some(rest) => optimizer_state.push((rest.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        Ok(Self {
            header,
            params,
            optimizer_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

struct Reader<'a, R> {
    input: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut *self.input).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::Truncated { what: what.to_string() });
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }
}
