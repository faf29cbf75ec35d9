//! Tensor files: a text manifest followed by little-endian `f32` payloads.
//!
//! ```text
//! editlab-tensors 1
//! meta <key> <value>
//! tensor <name> <dim>x<dim>...
//! end
//! <payload of every tensor, manifest order>
//! ```
//!
//! Values are widened to `f64` on load, so a save/load/save cycle is
//! byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC: &str = "editlab-tensors 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: manifest line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}: payload has {found} bytes, manifest requires {expected}")]
    Payload { path: PathBuf, expected: usize, found: usize },
    #[error("invalid tensor {name}: {msg}")]
    Invalid { name: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn plain(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(Tensor { name: name.into(), shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if !plain(k) || v.contains('\n') {
                return Err(CheckpointError::Invalid { name: k.clone(), msg: "bad meta entry".into() });
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            if !plain(&t.name) {
                return Err(CheckpointError::Invalid { name: t.name.clone(), msg: "name must be non-empty without whitespace".into() });
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(CheckpointError::Invalid {
                    name: t.name.clone(),
                    msg: format!("shape {:?} does not match {} values", t.shape, t.data.len()),
                });
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(CheckpointError::Invalid { name: t.name.clone(), msg: "non-finite value".into() });
            }
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor {} {}\n", t.name, dims.join("x")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| CheckpointError::Manifest {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut file = TensorFile::default();
        let mut pos = 0;
        let mut line_no = 0;
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            line_no += 1;
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad(line_no, "manifest not terminated by 'end'"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad(line_no, "not UTF-8"))?;
            pos += nl + 1;
            if line_no == 1 {
                if line != MAGIC {
                    return Err(bad(1, "not a tensor file"));
                }
                continue;
            }
            if line == "end" {
                break;
            }
            let (kind, body) = line.split_once(' ').ok_or_else(|| bad(line_no, "malformed record"))?;
            match kind {
                "meta" => {
                    let (k, v) = body.split_once(' ').unwrap_or((body, ""));
                    file.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let (name, dims) = body.split_once(' ').ok_or_else(|| bad(line_no, "tensor record needs name and shape"))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(line_no, "bad shape"))?;
                    specs.push((name.to_string(), shape));
                }
                _ => return Err(bad(line_no, "unknown record kind")),
            }
        }
        let expected: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
        let payload = &bytes[pos..];
        if payload.len() != expected {
            return Err(CheckpointError::Payload { path: path.to_path_buf(), expected, found: payload.len() });
        }
        let mut off = 0;
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data = payload[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            off += 4 * n;
            file.tensors.push(Tensor { name, shape, data });
        }
        Ok(file)
    }

    /// Writes atomically: a temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }
}

/// Whole-file atomic write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
