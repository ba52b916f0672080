//! Single-file tensor archive used for model checkpoints and weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "RTRPCKPT"
//! 8 bytes   u64 header length L
//! L bytes   UTF-8 JSON header: {"meta": <any>, "tensors": [{"name", "shape", "offset"}]}
//! rest      f64 little-endian payload; `offset` counts elements from its start
//! ```
//!
//! Values round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RTRPCKPT";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| bad(&format!("tensor `{}` runs past end of file", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Archive {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in prop::collection::vec(any::<f64>(), 1..40), step in 0u64..1000) {
            let n = vals.len();
            let a = Archive {
                meta: serde_json::json!({"step": step}),
                tensors: vec![
                    ("w".into(), Tensor::from_vec(&[n], vals.clone()).unwrap()),
                    ("b".into(), Tensor::from_vec(&[1, n], vals).unwrap()),
                ],
            };
            let b = Archive::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(a.meta, b.meta);
            for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"hello world, not an archive", Path::new("x")).is_err());
    }
}
