//! On-disk formats: `KSE1` tensor files, `KSM1` selection masks and the
//! tab-separated corpus manifest.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! b"KSE1" | rank: u8 | shape: rank x u32 | payload: prod(shape) x f32
//! ```
//!
//! Mask file layout:
//!
//! ```text
//! b"KSM1" | original_dim: u32 | count: u32 | indices: count x u32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"KSE1";
pub const MASK_MAGIC: &[u8; 4] = b"KSM1";
pub const MEL_BANDS: usize = 80;

/// Dense row-major `f32` matrix, time-major for sequences (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Contents of a tensor file: rank 1 or rank 2.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Vector(Vec<f32>),
    Matrix(Matrix),
}

impl TensorData {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorData::Vector(v) => vec![v.len()],
            TensorData::Matrix(m) => vec![m.rows, m.cols],
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            TensorData::Vector(v) => v,
            TensorData::Matrix(m) => &m.data,
        }
    }
}

pub fn encode_tensor(data: &TensorData) -> Vec<u8> {
    let shape = data.shape();
    let values = data.values();
    let mut out = Vec::with_capacity(5 + 4 * shape.len() + 4 * values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(shape.len() as u8);
    for d in &shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<TensorData> {
    if bytes.len() < 5 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let rank = bytes[4] as usize;
    if !(1..=2).contains(&rank) {
        return Err(Error::UnsupportedRank {
            path: path.into(),
            rank,
        });
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(match rank {
        1 => TensorData::Vector(values),
        _ => TensorData::Matrix(Matrix {
            rows: shape[0],
            cols: shape[1],
            data: values,
        }),
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn write_tensor(path: impl AsRef<Path>, data: &TensorData) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(data)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    match read_tensor(path)? {
        TensorData::Matrix(m) => Ok(m),
        other => Err(Error::UnsupportedRank {
            path: path.into(),
            rank: other.shape().len(),
        }),
    }
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    match read_tensor(path)? {
        TensorData::Vector(v) => Ok(v),
        other => Err(Error::UnsupportedRank {
            path: path.into(),
            rank: other.shape().len(),
        }),
    }
}

/// Ordered subset of retained embedding dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    original_dim: usize,
    indices: Vec<usize>,
}

impl SelectionMask {
    pub fn new(original_dim: usize, indices: Vec<usize>) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidMask(format!(
                    "indices not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= original_dim {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    dim: original_dim,
                });
            }
        }
        Ok(Self {
            original_dim,
            indices,
        })
    }

    pub fn full(dim: usize) -> Self {
        Self {
            original_dim: dim,
            indices: (0..dim).collect(),
        }
    }

    pub fn original_dim(&self) -> usize {
        self.original_dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.indices.len());
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.original_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for &i in &self.indices {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MASK_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let original_dim = word(4);
        let count = word(8);
        let expected = 12 + 4 * count;
        if bytes.len() != expected {
            return Err(Error::TruncatedPayload {
                path: path.into(),
                expected,
                found: bytes.len(),
            });
        }
        let indices = (0..count).map(|i| word(12 + 4 * i)).collect();
        Self::new(original_dim, indices)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEntry {
    pub speaker_id: String,
    pub text: String,
    pub mel_path: PathBuf,
    pub pitch_path: PathBuf,
    pub embedding_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPair {
    pub speaker_id: String,
    pub speech_embedding_path: PathBuf,
    pub singing_embedding_path: PathBuf,
}

/// Corpus listing. One record per line, tab-separated, `#` starts a comment:
///
/// ```text
/// utt   <speaker>  <text>  <mel.kse>  <pitch.kse>  <embedding.kse>
/// pair  <speaker>  <speech_embedding.kse>  <singing_embedding.kse>
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<UtteranceEntry>,
    pub parallel_pairs: Vec<ParallelPair>,
}

impl CorpusManifest {
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut manifest = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Manifest {
                path: origin.into(),
                line: lineno + 1,
                msg,
            };
            let resolve = |p: &str| base.join(p);
            match fields[0] {
                "utt" => {
                    if fields.len() != 6 {
                        return Err(bad(format!("utt record needs 6 fields, got {}", fields.len())));
                    }
                    manifest.entries.push(UtteranceEntry {
                        speaker_id: fields[1].to_string(),
                        text: fields[2].to_string(),
                        mel_path: resolve(fields[3]),
                        pitch_path: resolve(fields[4]),
                        embedding_path: resolve(fields[5]),
                    });
                }
                "pair" => {
                    if fields.len() != 4 {
                        return Err(bad(format!("pair record needs 4 fields, got {}", fields.len())));
                    }
                    manifest.parallel_pairs.push(ParallelPair {
                        speaker_id: fields[1].to_string(),
                        speech_embedding_path: resolve(fields[2]),
                        singing_embedding_path: resolve(fields[3]),
                    });
                }
                other => return Err(bad(format!("unknown record type {other:?}"))),
            }
        }
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Serializes with paths written as given (callers choose relative or absolute).
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "utt\t{}\t{}\t{}\t{}\t{}\n",
                e.speaker_id,
                e.text,
                e.mel_path.display(),
                e.pitch_path.display(),
                e.embedding_path.display()
            ));
        }
        for p in &self.parallel_pairs {
            out.push_str(&format!(
                "pair\t{}\t{}\t{}\n",
                p.speaker_id,
                p.speech_embedding_path.display(),
                p.singing_embedding_path.display()
            ));
        }
        out
    }

    /// Loads every referenced tensor and checks ranks and shapes.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let mel = read_matrix(&e.mel_path)?;
            if mel.cols() != MEL_BANDS {
                return Err(wrong_shape(&e.mel_path, format!("mel needs {MEL_BANDS} bands, has {}", mel.cols())));
            }
            let pitch = read_vector(&e.pitch_path)?;
            if pitch.len() != mel.rows() {
                return Err(wrong_shape(
                    &e.pitch_path,
                    format!("pitch has {} frames, mel has {}", pitch.len(), mel.rows()),
                ));
            }
            read_matrix(&e.embedding_path)?;
        }
        for p in &self.parallel_pairs {
            let a = read_matrix(&p.speech_embedding_path)?;
            let b = read_matrix(&p.singing_embedding_path)?;
            if a.cols() != b.cols() {
                return Err(wrong_shape(
                    &p.singing_embedding_path,
                    format!("embedding dim {} differs from speech side {}", b.cols(), a.cols()),
                ));
            }
        }
        Ok(())
    }
}

fn wrong_shape(path: &Path, msg: String) -> Error {
    Error::ShapeMismatch(format!("{}: {msg}", path.display()))
}
