use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{encode_tensor, read_tensor, write_atomic};
use crate::numerics::Tensor;

const MAGIC: &str = "LSWP-CONCEPT";

/// A concept to place into the prompt: one embedding row, or a sequence
/// of token rows, starting at `token`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpec {
    pub name: String,
    pub token: usize,
    /// `[dim]` or `[n, dim]`.
    pub rows: Tensor,
}

impl ConceptSpec {
    pub fn new(name: impl Into<String>, token: usize, rows: Tensor) -> Result<Self> {
        let name = name.into();
        if name.chars().any(char::is_whitespace) {
            return Err(Error::invalid("concept name must not contain whitespace"));
        }
        if !matches!(rows.rank(), 1 | 2) || rows.is_empty() {
            return Err(Error::InvalidShape {
                shape: rows.shape().to_vec(),
                reason: "concept rows must be rank 1 or 2".into(),
            });
        }
        rows.ensure_finite("concept")?;
        Ok(Self { name, token, rows })
    }

    pub fn span(&self) -> usize {
        if self.rows.rank() == 1 {
            1
        } else {
            self.rows.shape()[0]
        }
    }

    pub fn dim(&self) -> usize {
        *self.rows.shape().last().expect("rank checked")
    }

    /// Header line `LSWP-CONCEPT <token> [name]` followed by a tensor container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {}", self.token);
        if !self.name.is_empty() {
            out.push(' ');
            out.push_str(&self.name);
        }
        out.push('\n');
        let mut bytes = out.into_bytes();
        bytes.extend(encode_tensor(&self.rows));
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("concept", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("concept", "header is not UTF-8"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::format("concept", format!("header must start with {MAGIC}")));
        }
        let token = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("concept", "header lacks a token index"))?;
        let name = parts.next().unwrap_or("").to_string();
        if parts.next().is_some() {
            return Err(Error::format("concept", "unexpected fields in header"));
        }
        let mut rest = &bytes[nl + 1..];
        let rows = read_tensor(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("concept", "trailing bytes after tensor"));
        }
        Self::new(name, token, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let c = ConceptSpec::new("dog", 2, rows).unwrap();
        assert_eq!(c.span(), 2);
        assert_eq!(ConceptSpec::from_bytes(&c.to_bytes()).unwrap(), c);
        let v = ConceptSpec::new("", 0, Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
        assert_eq!(ConceptSpec::from_bytes(&v.to_bytes()).unwrap(), v);
    }

    #[test]
    fn rejects_malformed() {
        assert!(ConceptSpec::from_bytes(b"nonsense").is_err());
        assert!(ConceptSpec::from_bytes(b"LSWP-CONCEPT x\n").is_err());
        let c = ConceptSpec::new("a", 1, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut b = c.to_bytes();
        b.push(0);
        assert!(ConceptSpec::from_bytes(&b).is_err());
        assert!(ConceptSpec::new("two words", 0, c.rows.clone()).is_err());
    }
}
