//! Binary checkpoint container.
//!
//! Layout (little endian): 8-byte magic, `u32` format version, `u64` step,
//! `u32`-prefixed JSON config, `u32` branch count, then per branch a tag
//! byte, `u64` parameter count, parameters, Adam first and second moments
//! (all `f32`) and the Adam step counter (`u64`).

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{BranchTag, Config};
use crate::error::{Error, Result};
use crate::model::BranchNetwork;
use crate::nn::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"MDEPTHCK";
pub const FORMAT_VERSION: u32 = 1;

/// One network with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub tag: BranchTag,
    pub net: BranchNetwork,
    pub adam: Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: Config,
    pub branches: Vec<BranchState>,
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn branch(&self, tag: BranchTag) -> Option<&BranchState> {
        self.branches.iter().find(|b| b.tag == tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.branches.len() as u32).to_le_bytes());
        for b in &self.branches {
            out.push(b.tag.code());
            out.extend_from_slice(&(b.net.params.len() as u64).to_le_bytes());
            put_f32s(&mut out, &b.net.params);
            put_f32s(&mut out, &b.adam.m);
            put_f32s(&mut out, &b.adam.v);
            out.extend_from_slice(&b.adam.t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let step = r.u64()? as usize;
        let json_len = r.u32()? as usize;
        let config: Config = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let count = r.u32()?;
        let mut branches = Vec::new();
        for _ in 0..count {
            let code = r.take(1)?[0];
            let tag = BranchTag::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown branch tag {code}")))?;
            let n = r.u64()? as usize;
            let mut net = BranchNetwork::new(config.model.clone(), 0)?;
            net.set_params(r.f32s(n)?)?;
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            let t = r.u64()?;
            let adam = Adam {
                config: AdamConfig {
                    lr: config.train.lr,
                    ..Default::default()
                },
                m,
                v,
                t,
            };
            branches.push(BranchState { tag, net, adam });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { step, config, branches })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// leaves the previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
