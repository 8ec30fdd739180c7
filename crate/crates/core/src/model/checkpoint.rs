//! Binary model container. All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "MOECKPT1"
//! header_len   u32
//! header       JSON      {"kind": "moe" | "single", "topology" | "arch": ...}
//! param_count  u32
//! per parameter:
//!   name_len   u32
//!   name       UTF-8     e.g. "expert0.fc1.weight", "gate.w_q"
//!   frozen     u8        0 or 1
//!   ndim       u32
//!   dims       ndim × u64
//!   data       prod(dims) × f64
//! ```
//!
//! Loading rebuilds the network from the header and then overwrites every
//! parameter, so names and shapes must match the header's layout exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertArch, ExpertNet, MoeModel, Network, Topology};
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 8] = b"MOECKPT1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Moe { topology: Topology },
    Single { arch: ExpertArch },
}

pub fn write_checkpoint<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    let header = match net {
        Network::Moe(m) => Header::Moe {
            topology: *m.topology(),
        },
        Network::Single(e) => Header::Single { arch: e.arch() },
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = net.named_params();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&len_u32(params.len())?.to_le_bytes());
    for (name, p) in params {
        buf.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(u8::from(p.is_frozen()));
        buf.extend_from_slice(&len_u32(p.shape().len())?.to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Network> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let header_len = cur.u32()? as usize;
    let header: Header =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    // Values are overwritten below; the seed only fixes the layout.
    let mut net = match header {
        Header::Moe { topology } => Network::Moe(MoeModel::new(topology, 0)?),
        Header::Single { arch } => Network::Single(ExpertNet::new(arch, &mut Rng::new(0))),
    };
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();

    let count = cur.u32()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            names.len()
        )));
    }
    let mut params = net.params_mut();
    for (expected, p) in names.iter().zip(params.iter_mut()) {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "expected parameter '{expected}', found '{name}'"
            )));
        }
        let frozen = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("{name}: bad frozen flag {b}"))),
        };
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != p.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {dims:?} does not match {:?}",
                p.shape()
            )));
        }
        let data = (0..p.value().len())
            .map(|_| cur.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        *p.value_mut() = Tensor::new(dims, data)?;
        p.set_frozen(frozen);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(&mut f, net)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
