//! Binary weight files.
//!
//! Layout, all integers little-endian:
//! `OCWT` magic, `u32` version, `u32` record count, then per record a `u32`
//! name length, the UTF-8 name, `u32` rank, `u32` dims, and the values as
//! `f64`. Records are written in name order, so equal parameters give
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use ocean_core::network::{ModelParams, NetConfig};
use ocean_core::{Real, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"OCWT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::Artifact(format!("weights truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> CliResult<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(CliError::Artifact("not a weight file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Artifact(format!("weight file version {} is not supported (expected {})", version, VERSION)));
    }
    let count = r.u32()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CliError::Artifact("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= buf.len() / 8).ok_or_else(|| CliError::Artifact(format!("{}: implausible shape {:?}", name, shape)))?;
        let data = (0..n).map(|_| r.f64().map(|v| v as Real)).collect::<CliResult<Vec<_>>>()?;
        let t = Tensor::from_vec(&shape, data).map_err(|e| CliError::Artifact(e.to_string()))?;
        if map.insert(name.clone(), t).is_some() {
            return Err(CliError::Artifact(format!("{}: duplicate parameter", name)));
        }
    }
    if r.pos != buf.len() {
        return Err(CliError::Artifact(format!("{} trailing bytes after weights", buf.len() - r.pos)));
    }
    Ok(ModelParams::from_map(map))
}

pub fn save(path: &Path, params: &ModelParams) -> CliResult<()> {
    std::fs::write(path, encode(params)).map_err(|e| CliError::io(path, e))
}

/// Loads weights and checks them against the network they are used with.
pub fn load(path: &Path, net: &NetConfig) -> CliResult<ModelParams> {
    let buf = std::fs::read(path).map_err(|e| CliError::Artifact(format!("{}: {}", path.display(), e)))?;
    let params = decode(&buf)?;
    params
        .check_against(net)
        .map_err(|e| CliError::Artifact(format!("{}: weights do not match the network: {}", path.display(), e)))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ocean_core::gradsuite::tiny_net;

    #[test]
    fn round_trip_is_exact() {
        let p = ModelParams::init(&tiny_net(), 3).unwrap();
        let bytes = encode(&p);
        let q = decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode(&q), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let p = ModelParams::init(&tiny_net(), 3).unwrap();
        let mut bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert_eq!(decode(&bytes).unwrap_err().exit_code(), 4);
        bytes[0] = b'X';
        assert_eq!(decode(&bytes).unwrap_err().exit_code(), 4);
    }
}
