//! Dense f64 tensors with shape metadata, plus the `TSR1` binary format.
//!
//! Images use the canonical channels x height x width layout with values
//! in [0, 1]. Tensors are plain value types; once an op has produced one
//! it is never mutated in place.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TSR1_MAGIC: &[u8; 4] = b"TSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} values for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rank-3 channel/row/col accessor for image-layout tensors.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    // ── TSR1 serialization ──────────────────────────────────────────

    /// Encode as TSR1: magic, u32 rank, u32 extents, f64 payload, all
    /// little-endian, payload row-major.
    pub fn write_tsr<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TSR1_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tsr<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::bad_format("TSR1", "file shorter than header"))?;
        if &magic != TSR1_MAGIC {
            return Err(Error::bad_format("TSR1", format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::bad_format("TSR1", "truncated rank"))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::bad_format("TSR1", format!("unreasonable rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)
                .map_err(|_| Error::bad_format("TSR1", "truncated extents"))?;
            let e = u32::from_le_bytes(u32buf) as usize;
            if e == 0 {
                return Err(Error::bad_format("TSR1", "zero extent"));
            }
            shape.push(e);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut f64buf)
                .map_err(|_| Error::bad_format("TSR1", "truncated payload"))?;
            data.push(f64::from_le_bytes(f64buf));
        }
        Ok(Tensor { shape, data })
    }

    pub fn save_tsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tsr(&mut f)?;
        Ok(())
    }

    pub fn load_tsr(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let t = Self::read_tsr(&mut f)?;
        Ok(t)
    }
}

/// Elementwise maximum absolute difference; tensors must share a shape.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert!(a.same_shape(b));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
