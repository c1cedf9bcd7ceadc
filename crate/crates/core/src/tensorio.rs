//! `ISO1` tensor files and JSON dataset manifests.
//!
//! Layout of a tensor file (all integers little-endian):
//!
//! | bytes        | field                                         |
//! |--------------|-----------------------------------------------|
//! | 4            | magic `ISO1`                                  |
//! | 1            | version (`1`)                                 |
//! | 1            | dtype (`0` f32, `1` f64, `2` i64)             |
//! | 4            | ndim (`1` or `2`)                             |
//! | 8 × ndim     | dims                                          |
//! | rest         | row-major payload, densely packed             |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::EmbeddingDataset;
use crate::Matrix;

pub const MAGIC: [u8; 4] = *b"ISO1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::I64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "binary32",
            DType::F64 => "binary64",
            DType::I64 => "int64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }
}

/// A 1-D or 2-D tensor exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u64>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        if !(1..=2).contains(&dims.len()) {
            return Err(Error::InvalidRank(dims.len() as u32));
        }
        let expected = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("dims {dims:?} overflow")))?;
        if expected != data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Converts a matrix to the requested on-disk dtype. Narrowing to
    /// binary32 rejects finite values outside its range; int64 rejects
    /// anything that is not an exactly representable integer.
    pub fn from_matrix(m: &Matrix, dtype: DType) -> Result<Self> {
        let values = row_major(m);
        let dims = vec![m.nrows() as u64, m.ncols() as u64];
        Self::new(dims, narrow(&values, dtype)?)
    }

    pub fn from_vector(v: &[f64], dtype: DType) -> Result<Self> {
        Self::new(vec![v.len() as u64], narrow(v, dtype)?)
    }

    pub fn from_labels(labels: &[i64]) -> Self {
        Self {
            dims: vec![labels.len() as u64],
            data: TensorData::I64(labels.to_vec()),
        }
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    /// Elements widened to f64, in row-major order.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// 2-D tensors map to their shape; 1-D tensors become a column.
    pub fn to_matrix(&self) -> Matrix {
        let (rows, cols) = match self.dims[..] {
            [n] => (n as usize, 1),
            [r, c] => (r as usize, c as usize),
            _ => unreachable!("rank checked at construction"),
        };
        Matrix::from_row_slice(rows, cols, &self.to_f64_vec())
    }

    pub fn to_i64_vec(&self) -> Result<Vec<i64>> {
        match &self.data {
            TensorData::I64(v) => Ok(v.clone()),
            _ => Err(Error::ShapeMismatch(format!(
                "expected an int64 tensor, found {}",
                self.dtype().name()
            ))),
        }
    }

    pub fn header_len(&self) -> usize {
        10 + 8 * self.dims.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected: u64| Error::Truncated {
            expected,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(10));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < 10 {
            return Err(truncated(10));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5])?;
        let ndim = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if !(1..=2).contains(&ndim) {
            return Err(Error::InvalidRank(ndim));
        }
        let header = 10 + 8 * ndim as usize;
        if bytes.len() < header {
            return Err(truncated(header as u64));
        }
        let dims: Vec<u64> = bytes[10..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .ok_or_else(|| Error::ShapeMismatch(format!("dims {dims:?} overflow")))?;
        let expected = header as u64 + count;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(truncated(expected));
        }
        if found > expected {
            return Err(Error::TrailingBytes(found - expected));
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

fn row_major(m: &Matrix) -> Vec<f64> {
    // nalgebra stores column-major; the transpose's storage is our row order.
    m.transpose().as_slice().to_vec()
}

fn narrow(values: &[f64], dtype: DType) -> Result<TensorData> {
    match dtype {
        DType::F64 => Ok(TensorData::F64(values.to_vec())),
        DType::F32 => values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                let x = value as f32;
                if value.is_finite() && !x.is_finite() {
                    Err(Error::LossyCast {
                        index,
                        value,
                        dtype: dtype.name(),
                    })
                } else {
                    Ok(x)
                }
            })
            .collect::<Result<_>>()
            .map(TensorData::F32),
        DType::I64 => values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                // 2^63 is exactly representable; anything at or above it overflows.
                let limit = -(i64::MIN as f64);
                let in_range = (-limit..limit).contains(&value);
                if value.fract() == 0.0 && in_range {
                    Ok(value as i64)
                } else {
                    Err(Error::LossyCast {
                        index,
                        value,
                        dtype: dtype.name(),
                    })
                }
            })
            .collect::<Result<_>>()
            .map(TensorData::I64),
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix, dtype: DType) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m, dtype)?)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    Ok(read_tensor(path)?.to_matrix())
}

/// Dataset description stored as JSON next to its tensor files. Relative
/// paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub features_path: String,
    pub labels_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_indices_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery_indices_path: Option<String>,
    #[serde(default)]
    pub exclude_self: bool,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_indices(path: &Path, n: usize) -> Result<Vec<usize>> {
    let raw = read_tensor(path)?;
    if raw.dims().len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "index file {} must be 1-D",
            path.display()
        )));
    }
    raw.to_i64_vec()?
        .into_iter()
        .map(|i| {
            if i >= 0 && (i as u64) < n as u64 {
                Ok(i as usize)
            } else {
                Err(Error::IndexOutOfRange { index: i, len: n })
            }
        })
        .collect()
}

/// Loads a dataset manifest and the tensors it references.
///
/// Without split files every row is both a query and a gallery item and
/// self-matches are excluded.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: manifest_path.display().to_string(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let features = read_tensor(resolve(base, &manifest.features_path))?;
    if features.dims().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "features must be 2-D, got dims {:?}",
            features.dims()
        )));
    }
    let labels_tensor = read_tensor(resolve(base, &manifest.labels_path))?;
    if labels_tensor.dims().len() != 1 {
        return Err(Error::ShapeMismatch("labels must be 1-D".into()));
    }
    let labels = labels_tensor.to_i64_vec()?;
    let features = features.to_matrix();
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            n
        )));
    }

    let split = |p: &Option<String>| -> Result<Option<Vec<usize>>> {
        p.as_deref()
            .map(|p| read_indices(&resolve(base, p), n))
            .transpose()
    };
    let query = split(&manifest.query_indices_path)?;
    let gallery = split(&manifest.gallery_indices_path)?;
    let exclude_self = manifest.exclude_self || (query.is_none() && gallery.is_none());
    let all = || (0..n).collect::<Vec<_>>();

    EmbeddingDataset::new(
        manifest.name,
        features,
        labels,
        query.unwrap_or_else(all),
        gallery.unwrap_or_else(all),
        exclude_self,
    )
}

/// Writes `dataset` as `<stem>.features.iso`, `<stem>.labels.iso`, optional
/// split files and `<stem>.json` inside `dir`. Returns the manifest path.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    stem: &str,
    dataset: &EmbeddingDataset,
    dtype: DType,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let features_path = format!("{stem}.features.iso");
    let labels_path = format!("{stem}.labels.iso");
    write_matrix(dir.join(&features_path), &dataset.features, dtype)?;
    write_tensor(
        dir.join(&labels_path),
        &Tensor::from_labels(&dataset.labels),
    )?;

    let n = dataset.len();
    let is_full = |idx: &[usize]| idx.len() == n && idx.iter().enumerate().all(|(i, &j)| i == j);
    let mut manifest = DatasetManifest {
        name: dataset.name.clone(),
        features_path,
        labels_path,
        query_indices_path: None,
        gallery_indices_path: None,
        exclude_self: dataset.exclude_self,
    };
    if !(is_full(&dataset.query_idx) && is_full(&dataset.gallery_idx) && dataset.exclude_self) {
        let q = format!("{stem}.query.iso");
        let g = format!("{stem}.gallery.iso");
        let as_i64 = |idx: &[usize]| idx.iter().map(|&i| i as i64).collect::<Vec<_>>();
        write_tensor(
            dir.join(&q),
            &Tensor::from_labels(&as_i64(&dataset.query_idx)),
        )?;
        write_tensor(
            dir.join(&g),
            &Tensor::from_labels(&as_i64(&dataset.gallery_idx)),
        )?;
        manifest.query_indices_path = Some(q);
        manifest.gallery_indices_path = Some(g);
    }
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: manifest_path.display().to_string(),
        source,
    })?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
