//! Dense row-major `f64` tensor and the `LGCT` binary container.
//!
//! Layout on disk: magic `LGCT`, `u32` version (1), `u8` dtype (0 = f64,
//! 1 = f32), `u8` ndim, `ndim` x `u64` dims, then the row-major payload.
//! Every integer and float is little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LGCT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(
                ix < dim,
                "index {ix} out of bounds for axis {i} of size {dim}"
            );
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Contiguous slice of the sub-tensor addressed by a leading index prefix.
    pub fn slab(&self, prefix: &[usize]) -> &[f64] {
        let (start, len) = self.slab_range(prefix);
        &self.data[start..start + len]
    }

    pub fn slab_mut(&mut self, prefix: &[usize]) -> &mut [f64] {
        let (start, len) = self.slab_range(prefix);
        &mut self.data[start..start + len]
    }

    fn slab_range(&self, prefix: &[usize]) -> (usize, usize) {
        assert!(prefix.len() <= self.shape.len());
        let len: usize = self.shape[prefix.len()..].iter().product();
        let mut off = 0;
        for (&ix, &dim) in prefix.iter().zip(&self.shape) {
            assert!(ix < dim);
            off = off * dim + ix;
        }
        (off * len, len)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::MalformedHeader("too many dimensions".into()));
        }
        let mut out =
            Vec::with_capacity(10 + 8 * self.shape.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F64 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |msg: &str| Error::MalformedHeader(msg.to_string());
        if bytes.len() < 10 {
            return Err(header("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(header("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let dtype = match bytes[8] {
            0 => DType::F64,
            1 => DType::F32,
            other => return Err(Error::MalformedHeader(format!("unknown dtype {other}"))),
        };
        let ndim = bytes[9] as usize;
        let dims_end = 10 + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(header("truncated dimension list"));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for i in 0..ndim {
            let s = 10 + 8 * i;
            let d = u64::from_le_bytes(bytes[s..s + 8].try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| header("dimension overflows usize"))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| header("element count overflows usize"))?;
            shape.push(d);
        }
        let payload = &bytes[dims_end..];
        let expected = count
            .checked_mul(dtype.width())
            .ok_or_else(|| header("payload size overflows usize"))?;
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let data: Vec<f64> = match dtype {
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Tensor { shape, data })
    }
}

pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    save_tensor_as(tensor, path, DType::F64)
}

pub fn save_tensor_as(tensor: &Tensor, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.to_bytes(dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}
