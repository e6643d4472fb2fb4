//! Dense row-major tensors.
//!
//! Network activations use the channel-last convention `(N, X, Y, Z, C)`, so
//! the channels of one voxel are contiguous in memory.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{arg_err, shape_err, Result};

pub const MAX_RANK: usize = 5;

/// On-disk element type codes shared by the volume and weight formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Flat offset of a multi-index. The caller guarantees `index` is in bounds.
pub fn ravel(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &extent)| acc * extent + i)
}

/// Inverse of [`ravel`].
pub fn unravel(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut index = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        index[d] = flat % shape[d];
        flat /= shape[d];
    }
    index
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(shape_err!(
                "buffer of {} elements does not fit shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("valid shape");
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        check_shape(shape).expect("valid shape");
        let len: usize = shape.iter().product();
        let mut index = vec![0; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&index));
            for d in (0..shape.len()).rev() {
                index[d] += 1;
                if index[d] < shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[ravel(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let at = ravel(&self.shape, index);
        self.data[at] = value;
    }

    /// Extent of the last (channel) dimension.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).expect("len fits")
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("expected shape {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor selecting indices `[start, start+count)` of the leading dimension.
    pub fn slice_leading(&self, start: usize, count: usize) -> Result<Self> {
        let lead = self.shape[0];
        if start + count > lead || count == 0 {
            return Err(shape_err!("leading slice {}..{} out of 0..{}", start, start + count, lead));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor { shape, data: self.data[start * inner..(start + count) * inner].to_vec() })
    }

    /// Stack equally shaped tensors along a new leading dimension.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| arg_err!("cannot stack an empty list"))?;
        if first.rank() + 1 > MAX_RANK {
            return Err(shape_err!("stacking rank {} tensors exceeds rank {}", first.rank(), MAX_RANK));
        }
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            p.expect_shape(first.shape())?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        Ok(Tensor { shape, data })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(shape_err!("rank must be 1..={}, got {}", MAX_RANK, shape.len()));
    }
    if shape.contains(&0) {
        return Err(shape_err!("extents must be positive, got {:?}", shape));
    }
    Ok(())
}

/// Zero padding with per-dimension `(before, after)` amounts.
pub fn zero_pad<T: Scalar>(t: &Tensor<T>, pad: &[(usize, usize)]) -> Result<Tensor<T>> {
    if pad.len() != t.rank() {
        return Err(shape_err!("pad list has {} entries for a rank {} tensor", pad.len(), t.rank()));
    }
    let out_shape: Vec<usize> = t.shape().iter().zip(pad).map(|(&e, &(b, a))| e + b + a).collect();
    let mut out = Tensor::zeros(&out_shape);
    let origin: Vec<usize> = pad.iter().map(|&(b, _)| b).collect();
    copy_box(t, &vec![0; t.rank()], &mut out, &origin, t.shape());
    Ok(out)
}

/// Copy the box `src[src_origin .. src_origin+extent]` into `dst` at `dst_origin`.
/// Both boxes must be in bounds.
pub(crate) fn copy_box<T: Scalar>(
    src: &Tensor<T>,
    src_origin: &[usize],
    dst: &mut Tensor<T>,
    dst_origin: &[usize],
    extent: &[usize],
) {
    let rank = src.rank();
    let src_strides = src.strides();
    let dst_strides = dst.strides();
    let run = extent[rank - 1];
    let outer: usize = extent[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    for _ in 0..outer {
        let mut s = src_origin[rank - 1];
        let mut d = dst_origin[rank - 1];
        for k in 0..rank - 1 {
            s += (src_origin[k] + idx[k]) * src_strides[k];
            d += (dst_origin[k] + idx[k]) * dst_strides[k];
        }
        dst.data[d..d + run].copy_from_slice(&src.data[s..s + run]);
        for k in (0..rank - 1).rev() {
            idx[k] += 1;
            if idx[k] < extent[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Extract the box starting at `origin` with the given `extent`.
pub fn slice_box<T: Scalar>(t: &Tensor<T>, origin: &[usize], extent: &[usize]) -> Result<Tensor<T>> {
    if origin.len() != t.rank() || extent.len() != t.rank() {
        return Err(shape_err!("box rank does not match tensor rank {}", t.rank()));
    }
    for d in 0..t.rank() {
        if extent[d] == 0 || origin[d] + extent[d] > t.shape()[d] {
            return Err(shape_err!(
                "box origin {:?} extent {:?} is out of bounds for shape {:?}",
                origin,
                extent,
                t.shape()
            ));
        }
    }
    let mut out = Tensor::zeros(extent);
    copy_box(t, origin, &mut out, &vec![0; t.rank()], extent);
    Ok(out)
}

/// Concatenate along the last (channel) dimension.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| arg_err!("cannot concatenate an empty list"))?;
    let rank = first.rank();
    let lead = &first.shape()[..rank - 1];
    for p in parts {
        if p.rank() != rank || &p.shape()[..rank - 1] != lead {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?} along channels",
                first.shape(),
                p.shape()
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let voxels: usize = lead.iter().product();
    let mut data = Vec::with_capacity(voxels * total);
    for v in 0..voxels {
        for p in parts {
            let c = p.channels();
            data.extend_from_slice(&p.data[v * c..(v + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor { shape, data })
}
