//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TYCOCKPT"
//! version  u32
//! header   u64 length + UTF-8 JSON
//! count    u32
//! per parameter:
//!   name   u32 length + UTF-8
//!   group  u32 length + UTF-8
//!   rank   u32, then rank × u64 extents
//!   data   f64 × product of extents
//! ```
//!
//! The header of a training checkpoint is a [`Header`]: the resolved run
//! config plus the registry and templates it used, so evaluation needs no
//! other file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tyco_core::model::Model;
use tyco_core::params::Group;
use tyco_core::prompting::PromptTemplates;
use tyco_core::Array;

use crate::config::{RegistryFile, RunConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TYCOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: String,
    pub value: Array,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: RunConfig,
    pub registry: RegistryFile,
    pub templates: PromptTemplates,
}

pub fn encode(header: &str, params: &[NamedParam]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    for p in params {
        put_str(&mut out, &p.name);
        put_str(&mut out, &p.group);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Incompatible(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(n).map_err(|_| Error::Incompatible(format!("length {n} too large")))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Incompatible(e.to_string()))
    }
}

/// Splits a container into its header text and parameters.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<NamedParam>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Incompatible("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let header = r.string(true)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string(false)?;
        let group = r.string(false)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len(true)).collect::<Result<Vec<usize>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Incompatible(format!("`{name}`: shape overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Incompatible("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let value = Array::new(&shape, data)?;
        params.push(NamedParam { name, group, value });
    }
    if r.pos != bytes.len() {
        return Err(Error::Incompatible(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

/// Parameters of `model`, optionally only one group, in store order.
pub fn model_params(model: &Model, only: Option<Group>) -> Vec<NamedParam> {
    model
        .store
        .iter()
        .filter(|(_, p)| only.is_none_or(|g| p.group == g))
        .map(|(_, p)| NamedParam { name: p.name.clone(), group: p.group.name().to_string(), value: p.value.clone() })
        .collect()
}

/// Overwrites `model`'s parameters. With `exact`, the two name sets must
/// coincide; otherwise every given name must exist in the model.
pub fn apply(model: &mut Model, params: &[NamedParam], exact: bool) -> Result<()> {
    if exact {
        let want: Vec<&str> = model.store.iter().map(|(_, p)| p.name.as_str()).collect();
        let have: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let mut a = want.clone();
        let mut b = have.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            let missing: Vec<&str> = a.iter().filter(|n| !b.contains(n)).copied().collect();
            let extra: Vec<&str> = b.iter().filter(|n| !a.contains(n)).copied().collect();
            return Err(Error::Incompatible(format!("parameter sets differ; missing {missing:?}, unexpected {extra:?}")));
        }
    }
    for p in params {
        let id = model.store.id(&p.name).ok_or_else(|| Error::Incompatible(format!("unknown parameter `{}`", p.name)))?;
        let expect = model.store.get(id).shape();
        if expect != p.value.shape() {
            return Err(Error::Incompatible(format!("`{}`: model shape {:?}, checkpoint shape {:?}", p.name, expect, p.value.shape())));
        }
        model.store.load_values(&p.name, p.value.shape(), p.value.data().to_vec())?;
    }
    Ok(())
}

pub fn write(path: &Path, header: &str, params: &[NamedParam]) -> Result<()> {
    fs::write(path, encode(header, params)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<(String, Vec<NamedParam>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedParam> {
        vec![
            NamedParam { name: "a.w".into(), group: "adapter".into(), value: Array::new(&[2, 3], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, -0.0]).unwrap() },
            NamedParam { name: "b".into(), group: "lora".into(), value: Array::new(&[1], vec![3.25]).unwrap() },
        ]
    }

    #[test]
    fn encode_decode_is_bitwise_identity() {
        let bytes = encode("{\"k\":1}", &sample());
        let (h, p) = decode(&bytes).unwrap();
        assert_eq!(h, "{\"k\":1}");
        assert_eq!(p.len(), 2);
        for (x, y) in p.iter().zip(sample()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.shape(), y.value.shape());
            let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.value), bits(&y.value));
        }
    }

    #[test]
    fn other_version_is_a_version_error() {
        let mut bytes = encode("{}", &sample());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 7, expected: VERSION })));
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = encode("{}", &sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Incompatible(_))));
        assert!(matches!(decode(b"NOTACKPTxxxxxxxxxxxx"), Err(Error::Incompatible(_))));
    }
}
