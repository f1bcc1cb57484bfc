//! The `PKIR1` container: a line-oriented text header followed by one
//! contiguous little-endian `f32` blob per tensor.
//!
//! ```text
//! PKIR1
//! kind model
//! meta name toy
//! layer conv1 conv2d in=1 out=8 k=3 s=1 p=1 bias=1
//! tensor conv1.weight 8,1,3,3 0 288
//! tensor conv1.bias 8 288 8
//! end
//! <blob>
//! ```
//!
//! Tensor lines carry `name dims offset count`, where `offset` and `count`
//! are in elements relative to the start of the blob. Tensors are stored
//! back to back in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &str = "PKIR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PKIR file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(String),
    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("shape mismatch for `{name}`: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("blob length mismatch: header declares {expected} bytes, file holds {actual}")]
    BlobLength { expected: usize, actual: usize },
    #[error("archive kind `{actual}` where `{expected}` was expected")]
    WrongKind { expected: String, actual: String },
    #[error("missing entry `{0}`")]
    Missing(String),
}

/// In-memory form of a `PKIR1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    /// Raw `layer` lines (everything after the `layer ` keyword).
    pub layers: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Vec::new(),
            layers: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, FormatError> {
        self.meta(key)
            .ok_or_else(|| FormatError::Missing(format!("meta {key}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor, FormatError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| FormatError::Missing(format!("tensor {name}")))?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), FormatError> {
        if self.kind != kind {
            return Err(FormatError::WrongKind {
                expected: kind.to_string(),
                actual: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}{VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(char::is_whitespace) && !v.contains('\n'));
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for l in &self.layers {
            header.push_str(&format!("layer {l}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims = t
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let dims = if dims.is_empty() { "-".to_string() } else { dims };
            header.push_str(&format!("tensor {name} {dims} {offset} {}\n", t.len()));
            offset += t.len();
        }
        header.push_str("end\n");

        let mut out = header.into_bytes();
        out.reserve(offset * 4);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut pos = 0usize;
        let mut lineno = 0usize;
        let next_line = |pos: &mut usize, lineno: &mut usize| -> Option<(usize, String)> {
            let rest = &bytes[*pos..];
            let nl = rest.iter().position(|&b| b == b'\n')?;
            let line = String::from_utf8_lossy(&rest[..nl]).into_owned();
            *pos += nl + 1;
            *lineno += 1;
            Some((*lineno, line))
        };

        let (_, first) = next_line(&mut pos, &mut lineno).ok_or(FormatError::BadMagic)?;
        let version = first.strip_prefix(MAGIC).ok_or(FormatError::BadMagic)?;
        if version != VERSION.to_string() {
            return Err(FormatError::UnsupportedVersion(version.to_string()));
        }

        let malformed = |line: usize, reason: &str| FormatError::MalformedHeader {
            line,
            reason: reason.to_string(),
        };

        let mut kind = None;
        let mut meta = Vec::new();
        let mut layers = Vec::new();
        let mut decls: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut expected_offset = 0usize;
        loop {
            let (ln, line) = next_line(&mut pos, &mut lineno).ok_or_else(|| malformed(lineno + 1, "missing `end`"))?;
            let (keyword, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match keyword {
                "end" if rest.is_empty() => break,
                "kind" => kind = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    if k.is_empty() {
                        return Err(malformed(ln, "empty meta key"));
                    }
                    meta.push((k.to_string(), v.to_string()));
                }
                "layer" => layers.push(rest.to_string()),
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset, count] = fields[..] else {
                        return Err(malformed(ln, "tensor line needs `name dims offset count`"));
                    };
                    let shape = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|_| malformed(ln, "bad tensor dims"))?
                    };
                    let offset: usize = offset.parse().map_err(|_| malformed(ln, "bad offset"))?;
                    let count: usize = count.parse().map_err(|_| malformed(ln, "bad count"))?;
                    if offset != expected_offset {
                        return Err(malformed(ln, "tensor offsets must be contiguous"));
                    }
                    let elems = shape.iter().product::<usize>();
                    if elems != count {
                        return Err(FormatError::ShapeMismatch {
                            name: name.to_string(),
                            reason: format!("dims {dims} hold {elems} values but count is {count}"),
                        });
                    }
                    expected_offset += count;
                    decls.push((name.to_string(), shape, count));
                }
                _ => return Err(malformed(ln, &format!("unknown keyword `{keyword}`"))),
            }
        }
        let kind = kind.ok_or_else(|| malformed(1, "missing `kind`"))?;

        let blob = &bytes[pos..];
        let expected = expected_offset * 4;
        if blob.len() != expected {
            return Err(FormatError::BlobLength {
                expected,
                actual: blob.len(),
            });
        }
        let mut tensors = Vec::with_capacity(decls.len());
        let mut cursor = 0usize;
        for (name, shape, count) in decls {
            let data = blob[cursor * 4..(cursor + count) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cursor += count;
            let t = Tensor::new(shape, data).expect("count checked against dims");
            tensors.push((name, t));
        }
        Ok(Self {
            kind,
            meta,
            layers,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("features");
        a.meta.push(("source".into(), "conv 2".into()));
        a.tensors.push(("x".into(), Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5)));
        a.tensors.push(("s".into(), Tensor::new(vec![], vec![7.0]).unwrap()));
        a
    }

    #[test]
    fn round_trips() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta("source"), Some("conv 2"));
    }

    #[test]
    fn error_classes() {
        let bytes = sample().to_bytes();

        assert!(matches!(
            Archive::from_bytes(b"GGUF\n"),
            Err(FormatError::BadMagic)
        ));
        let mut v2 = bytes.clone();
        v2[4] = b'2';
        assert!(matches!(
            Archive::from_bytes(&v2),
            Err(FormatError::UnsupportedVersion(v)) if v == "2"
        ));
        assert!(matches!(
            Archive::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::BlobLength { .. })
        ));
        let text = String::from_utf8_lossy(&bytes).replace("tensor x 2,3 0 6", "tensor x 2,2 0 6");
        assert!(matches!(
            Archive::from_bytes(text.as_bytes()),
            Err(FormatError::ShapeMismatch { .. })
        ));
        let text = String::from_utf8_lossy(&bytes).replace("kind features", "kynd features");
        assert!(matches!(
            Archive::from_bytes(text.as_bytes()),
            Err(FormatError::MalformedHeader { line: 2, .. })
        ));
    }
}
