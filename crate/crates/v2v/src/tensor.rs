//! Dense f32 tensor type and the binary tensor/checkpoint file formats.
//!
//! Video data uses the dimension order (channels C, frames L, height H,
//! width W), row-major with the last dimension fastest. There is no batch
//! dimension; every pass works on a single clip.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Maximum element count accepted by constructors and readers.
pub const MAX_ELEMS: usize = 1 << 31;

const TENSOR_MAGIC: &[u8; 4] = b"V2VT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"V2VC";
const FORMAT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor dims must be non-empty")]
    EmptyDims,
    #[error("tensor dims {0:?} invalid: every dim must be >= 1 and at most 5 dims")]
    BadDims(Vec<usize>),
    #[error("tensor element count {0} exceeds limit {MAX_ELEMS}")]
    DimOverflow(usize),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("dims {dims:?} imply {expected} elements but payload holds {found}")]
    PayloadMismatch {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("duplicate checkpoint entry name {0:?}")]
    DuplicateName(String),
    #[error("checkpoint entry name is not valid UTF-8")]
    BadEntryName,
    #[error("shape mismatch for {name:?}: file has {file_dims:?}, expected {expected_dims:?}")]
    ShapeMismatch {
        name: String,
        file_dims: Vec<usize>,
        expected_dims: Vec<usize>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense rank-<=5 array of f32, row-major, last dim fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: &[usize], fill: f32) -> Result<Tensor, TensorError> {
        Self::validate_dims(dims)?;
        let n = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![fill; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Tensor, TensorError> {
        Self::new(dims, 0.0)
    }

    /// Wraps an existing buffer; data length must match the dims product.
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Tensor, TensorError> {
        Self::validate_dims(dims)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(TensorError::PayloadMismatch {
                dims: dims.to_vec(),
                expected: n,
                found: data.len(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    fn validate_dims(dims: &[usize]) -> Result<(), TensorError> {
        if dims.is_empty() {
            return Err(TensorError::EmptyDims);
        }
        if dims.len() > 5 || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::BadDims(dims.to_vec()));
        }
        let mut n: usize = 1;
        for &d in dims {
            n = n
                .checked_mul(d)
                .ok_or(TensorError::DimOverflow(usize::MAX))?;
        }
        if n > MAX_ELEMS {
            return Err(TensorError::DimOverflow(n));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of a multi-index; index length must match the rank.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            debug_assert!(ix < d, "index {ix} out of range for dim {i} ({d})");
            off = off * d + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f32) {
        let off = self.offset(index);
        self.data[off] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor in the binary tensor-file format.
    pub fn write(&self, path: &Path) -> Result<(), TensorError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor_body(&mut w, self, TENSOR_MAGIC)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Tensor, TensorError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut magic, 4)?;
        if &magic != TENSOR_MAGIC {
            return Err(TensorError::BadMagic {
                expected: *TENSOR_MAGIC,
                found: magic,
            });
        }
        let mut hdr = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut hdr, 4)?;
        let (version, dtype, ndim) = (hdr[0], hdr[1], hdr[2]);
        if version != FORMAT_VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        if dtype != DTYPE_F32 {
            return Err(TensorError::UnsupportedDtype(dtype));
        }
        let dims = read_dims(&mut r, ndim as usize)?;
        read_payload(&mut r, &dims)
    }
}

fn write_tensor_body<W: Write>(
    w: &mut W,
    t: &Tensor,
    magic: &[u8; 4],
) -> Result<(), TensorError> {
    w.write_all(magic)?;
    w.write_all(&[FORMAT_VERSION, DTYPE_F32, t.dims.len() as u8, 0u8])?;
    for &d in &t.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_f32_payload(w, &t.data)?;
    Ok(())
}

fn write_f32_payload<W: Write>(w: &mut W, data: &[f32]) -> Result<(), TensorError> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    expected: usize,
) -> Result<(), TensorError> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(TensorError::TruncatedPayload {
                expected,
                found: got,
            });
        }
        got += n;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut R, ndim: usize) -> Result<Vec<usize>, TensorError> {
    if ndim == 0 || ndim > 5 {
        return Err(TensorError::BadDims(vec![ndim]));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        read_exact_or_truncated(r, &mut b, 4)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    Tensor::validate_dims(&dims)?;
    Ok(dims)
}

fn read_payload<R: Read>(r: &mut R, dims: &[usize]) -> Result<Tensor, TensorError> {
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    let mut got = 0;
    while got < bytes.len() {
        let k = r.read(&mut bytes[got..])?;
        if k == 0 {
            return Err(TensorError::TruncatedPayload {
                expected: n * 4,
                found: got,
            });
        }
        got += k;
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(dims, data)
}

/// Saves a named-parameter map; entries are written sorted by name so the
/// byte output is deterministic.
pub fn checkpoint_save(
    entries: &BTreeMap<String, Tensor>,
    path: &Path,
) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[t.dims.len() as u8])?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f32_payload(&mut w, &t.data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<BTreeMap<String, Tensor>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::BadMagic {
            expected: *CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let mut hdr = [0u8; 5];
    read_exact_or_truncated(&mut r, &mut hdr, 5)?;
    if hdr[0] != FORMAT_VERSION {
        return Err(TensorError::UnsupportedVersion(hdr[0]));
    }
    let count = u32::from_le_bytes([hdr[1], hdr[2], hdr[3], hdr[4]]) as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let mut len_b = [0u8; 2];
        read_exact_or_truncated(&mut r, &mut len_b, 2)?;
        let name_len = u16::from_le_bytes(len_b) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name_buf, name_len)?;
        let name = String::from_utf8(name_buf).map_err(|_| TensorError::BadEntryName)?;
        let mut ndim_b = [0u8; 1];
        read_exact_or_truncated(&mut r, &mut ndim_b, 1)?;
        let dims = read_dims(&mut r, ndim_b[0] as usize)?;
        let t = read_payload(&mut r, &dims)?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(TensorError::DuplicateName(name));
        }
    }
    Ok(entries)
}
