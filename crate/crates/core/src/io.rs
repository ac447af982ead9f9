//! File formats shared by the pipeline stages.
//!
//! * binary PGM (P5) for masks and risk maps,
//! * tensor bundles: a flat little-endian `f64` blob plus a JSON sidecar that
//!   names each tensor, its shape and its offset into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("failed to access {path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed {what} in {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
    #[error("tensor `{0}` not found in bundle")]
    MissingTensor(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

pub(crate) fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| IoError::Fs {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, bytes).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Encode an 8-bit grayscale image as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_bytes(path, &encode_pgm(width, height, pixels))
}

/// Decode a binary PGM with maxval 255. Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        ));
    }
    Ok((width, height, raster.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleSidecar {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// Named `f64` tensors stored as one flat blob.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    pub sidecar: BundleSidecar,
    pub data: Vec<f64>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self {
            sidecar: BundleSidecar {
                dtype: "f64-le".to_string(),
                ..Default::default()
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: impl IntoIterator<Item = f64>) {
        let offset = self.data.len();
        self.data.extend(values);
        let expected: usize = shape.iter().product();
        assert_eq!(
            self.data.len() - offset,
            expected,
            "tensor `{name}` length does not match shape {shape:?}"
        );
        self.sidecar.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.sidecar.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.sidecar.meta.get(key)
    }

    /// Returns the shape and values of a named tensor.
    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let entry = self
            .sidecar
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| IoError::MissingTensor(name.to_string()))?;
        let len: usize = entry.shape.iter().product();
        Ok((&entry.shape, &self.data[entry.offset..entry.offset + len]))
    }

    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    pub fn write(&self, bin: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_bytes(bin, &bytes)?;
        write_json(&Self::sidecar_path(bin), &self.sidecar)
    }

    pub fn read(bin: &Path) -> Result<Self> {
        let sidecar: BundleSidecar = read_json(&Self::sidecar_path(bin))?;
        let bytes = fs::read(bin).map_err(|source| IoError::Fs {
            path: bin.to_path_buf(),
            source,
        })?;
        let format_err = |detail: String| IoError::Format {
            what: "tensor bundle",
            path: bin.to_path_buf(),
            detail,
        };
        if sidecar.dtype != "f64-le" {
            return Err(format_err(format!("unsupported dtype {}", sidecar.dtype)));
        }
        if bytes.len() % 8 != 0 {
            return Err(format_err(format!("{} bytes is not a multiple of 8", bytes.len())));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        for t in &sidecar.tensors {
            let len: usize = t.shape.iter().product();
            if t.offset + len > data.len() {
                return Err(format_err(format!(
                    "tensor `{}` overruns the blob ({} + {} > {})",
                    t.name,
                    t.offset,
                    len,
                    data.len()
                )));
            }
        }
        Ok(Self { sidecar, data })
    }
}
