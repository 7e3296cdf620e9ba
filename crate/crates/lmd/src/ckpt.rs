//! Structured-text checkpoint format shared by the ASV and mask models.
//!
//! Layout: a version line, `meta key value` header lines, then one
//! `tensor name dim0 dim1 ...` line per parameter followed by its row-major
//! values on a single line. Floats are printed with 17 significant digits so
//! a save/load round-trip is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::diffgraph::Tensor;

const MAGIC: &str = "lmd-checkpoint v1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("malformed line {0}: {1}")]
    Malformed(usize, String),
    #[error("tensor {name}: expected {expect} values, got {got}")]
    BadTensor { name: String, expect: usize, got: usize },
    #[error("missing meta key {0}")]
    MissingMeta(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Result<&str, CkptError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CkptError::MissingMeta(key.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CkptError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CkptError::MissingTensor(name.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            write!(out, "tensor {name}").unwrap();
            for d in &t.shape {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let mut first = true;
            for v in &t.data {
                if !first {
                    out.push(' ');
                }
                write!(out, "{v:.16e}").unwrap();
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CkptError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            other => {
                return Err(CkptError::BadHeader(
                    other.map(|(_, l)| l.to_string()).unwrap_or_default(),
                ))
            }
        }
        let mut ckpt = Checkpoint::default();
        while let Some((no, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts
                        .next()
                        .ok_or_else(|| CkptError::Malformed(no + 1, line.into()))?;
                    let v = parts.next().unwrap_or("");
                    ckpt.meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let mut fields = line.split_whitespace().skip(1);
                    let name = fields
                        .next()
                        .ok_or_else(|| CkptError::Malformed(no + 1, line.into()))?
                        .to_string();
                    let shape: Vec<usize> = fields
                        .map(|f| {
                            f.parse()
                                .map_err(|_| CkptError::Malformed(no + 1, line.into()))
                        })
                        .collect::<Result<_, _>>()?;
                    let expect: usize = shape.iter().product();
                    let (dno, dline) = lines
                        .next()
                        .ok_or_else(|| CkptError::Malformed(no + 1, "missing data".into()))?;
                    let data: Vec<f64> = dline
                        .split_whitespace()
                        .map(|f| {
                            f.parse()
                                .map_err(|_| CkptError::Malformed(dno + 1, f.to_string()))
                        })
                        .collect::<Result<_, _>>()?;
                    if data.len() != expect {
                        return Err(CkptError::BadTensor { name, expect, got: data.len() });
                    }
                    ckpt.tensors.push((name, Tensor::new(shape, data)));
                }
                _ => return Err(CkptError::Malformed(no + 1, line.into())),
            }
        }
        Ok(ckpt)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), CkptError> {
        std::fs::write(path, self.to_text()).map_err(|source| CkptError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self, CkptError> {
        let text = std::fs::read_to_string(path).map_err(|source| CkptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::default();
        ckpt.meta.push(("seed".into(), "42".into()));
        ckpt.meta.push(("kind".into(), "asv".into()));
        // Values chosen to stress the decimal round-trip.
        ckpt.tensors.push((
            "w".into(),
            Tensor::new(
                vec![2, 3],
                vec![
                    0.1,
                    -1.0 / 3.0,
                    std::f64::consts::PI,
                    1e-300,
                    -2.2250738585072014e-308,
                    123456789.123456789,
                ],
            ),
        ));
        let parsed = Checkpoint::from_text(&ckpt.to_text()).unwrap();
        assert_eq!(parsed.meta, ckpt.meta);
        assert_eq!(parsed.tensors, ckpt.tensors);
        assert_eq!(parsed.meta_value("seed").unwrap(), "42");
        assert!(parsed.tensor("nope").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Checkpoint::from_text("junk"), Err(CkptError::BadHeader(_))));
        let text = "lmd-checkpoint v1\ntensor w 2 2\n1.0 2.0 3.0\n";
        assert!(matches!(Checkpoint::from_text(text), Err(CkptError::BadTensor { .. })));
    }
}
