//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A contiguous row-major buffer with a shape.
///
/// A rank-0 tensor (empty shape) holds exactly one value and is how scalars
/// (losses, uncertainty weights) are represented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("buffer holds {} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without validating finiteness; shape is still checked
    /// with a debug assertion. Used by kernels whose outputs are checked by the
    /// graph.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::from_raw(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat indices of a broadcast output back to flat indices of one input.
pub(crate) struct BroadcastMap {
    out_shape: Vec<usize>,
    // stride of each output axis inside the input, 0 where broadcast
    in_strides: Vec<usize>,
    kind: MapKind,
}

enum MapKind {
    Same,
    // the input is a trailing block repeated over leading axes
    Repeat(usize),
    General,
}

impl BroadcastMap {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let n = out.len();
        let offset = n - input.len();
        let mut in_strides = vec![0; n];
        let mut stride = 1;
        for i in (0..n).rev() {
            if i >= offset && input[i - offset] == out[i] {
                in_strides[i] = stride;
                stride *= out[i];
            }
        }
        let kind = if input == out {
            MapKind::Same
        } else if out[offset..] == *input {
            MapKind::Repeat(input.iter().product())
        } else {
            MapKind::General
        };
        BroadcastMap {
            out_shape: out.to_vec(),
            in_strides,
            kind,
        }
    }

    #[inline]
    pub(crate) fn index(&self, mut flat: usize) -> usize {
        match self.kind {
            MapKind::Same => flat,
            MapKind::Repeat(m) => flat % m,
            MapKind::General => {
                let mut idx = 0;
                for ax in (0..self.out_shape.len()).rev() {
                    let d = self.out_shape[ax];
                    idx += (flat % d) * self.in_strides[ax];
                    flat /= d;
                }
                idx
            }
        }
    }
}
