//! Dense row-major tensors.
//!
//! Image tensors use NCHW layout (batch, channels, height, width). The element
//! type defaults to `f32`; gradient checks instantiate the same code with
//! `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type usable by every layer operation.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn from_count(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {len} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        check_dims(dims).expect("tensor extents must be positive");
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as NCHW, promoting a rank-3 CHW tensor to a batch of one.
    pub fn nchw(&self) -> Result<[usize; 4]> {
        match *self.dims.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            [c, h, w] => Ok([1, c, h, w]),
            _ => Err(Error::shape(format!(
                "expected an NCHW tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Slices item `index` out of the leading (batch) dimension.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        if self.rank() < 2 || index >= self.dims[0] {
            return Err(Error::shape(format!(
                "batch index {index} out of range for dims {:?}",
                self.dims
            )));
        }
        let stride = self.len() / self.dims[0];
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Ok(Tensor {
            dims,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Concatenates tensors of identical dims along a new leading axis, or
    /// along the existing leading axis when every item has a batch of one.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        if items.iter().any(|t| t.dims != first.dims) {
            return Err(Error::shape("stacked tensors must share dims"));
        }
        let mut dims = first.dims.clone();
        if dims.len() == 4 && dims[0] == 1 {
            dims[0] = items.len();
        } else {
            dims.insert(0, items.len());
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { dims, data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::shape(format!(
            "tensor extents must be non-empty and positive, got {dims:?}"
        )));
    }
    Ok(())
}
