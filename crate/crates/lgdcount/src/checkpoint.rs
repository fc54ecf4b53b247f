//! `LGDC` checkpoint files: named little-endian f64 tensors.

use std::fs;
use std::path::Path;

use lgd_core::mldl::PrototypeSet;
use lgd_core::model::Model;
use lgd_core::tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LGDC";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not an LGDC checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write_entries(path, &model.to_entries())
}

/// A model checkpoint extended with the prototypes fitted on a support.
pub fn save_adapted(path: &Path, model: &Model, prototypes: &PrototypeSet) -> Result<()> {
    let mut entries = model.to_entries();
    entries.retain(|(k, _)| k != "mldl.r");
    entries.push(("mldl.mu".to_string(), prototypes.mu().clone()));
    entries.push(("mldl.r".to_string(), Tensor::scalar(prototypes.concentration())));
    write_entries(path, &entries)
}

pub fn write_entries(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn load(path: &Path) -> Result<Model> {
    Model::from_entries(&read_entries(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Content hash in the style of git object ids, over
/// `blob <len>\0<bytes>`, using SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lgd_core::model::ModelConfig;

    #[test]
    fn model_round_trip_is_exact() {
        let m = Model::new(ModelConfig::default(), 7).unwrap();
        let bytes = encode(&m.to_entries());
        let back = Model::from_entries(&decode(&bytes, Path::new("m")).unwrap()).unwrap();
        assert_eq!(encode(&back.to_entries()), bytes);
    }

    #[test]
    fn layout_of_one_entry() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode(&[("ab".to_string(), t)]);
        let mut want = b"LGDC".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("c");
        assert!(decode(b"NOPE\x01\0\0\0", p).is_err());
        let mut b = encode(&[("x".to_string(), Tensor::scalar(1.0))]);
        b[4] = 9;
        assert!(decode(&b, p).is_err());
        let b = encode(&[("x".to_string(), Tensor::scalar(1.0))]);
        assert!(decode(&b[..b.len() - 1], p).is_err());
    }

    #[test]
    fn hash_matches_git_blob_convention() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
