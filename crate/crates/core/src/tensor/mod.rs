//! Dense tensors with a define-by-run reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain row-major value (up to 4-D, N x C x H x W layout).
//! [`Graph`] records operations on tensors and replays them backwards.
//! Storage is `f32` unless the `f64` feature is enabled; reductions always
//! accumulate in `f64`.

mod graph;
pub mod io;
mod kernels;
#[cfg(test)]
mod tests;

pub use graph::{CustomOp, Graph, NodeId};
pub(crate) use kernels::in_bounds;
pub use kernels::{conv_output_size, gemm};

use crate::error::{Error, Result};

/// Storage scalar.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
/// Storage scalar.
#[cfg(feature = "f64")]
pub type Real = f64;

pub const MAX_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if dims.len() > MAX_DIMS {
            return Err(Error::shape(
                "tensor",
                format!("at most {MAX_DIMS} dims supported, got {dims:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: Real) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<Real>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.dims.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Interprets a 3-D tensor as `(C, H, W)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "chw",
                format!("expected C x H x W, got {:?}", self.dims),
            )),
        }
    }

    /// Element at `(c, y, x)` of a 3-D tensor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> Real {
        let h = self.dims[1];
        let w = self.dims[2];
        self.data[(c * h + y) * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Sums a slice with an `f64` accumulator.
pub fn sum_f64(xs: &[Real]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

/// Bilinear sampling outside any graph; see [`Graph::grid_sample_bilinear`].
pub fn sample_bilinear(map: &Tensor, coords: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let (c, h, w) = map.chw()?;
    let (hg, wg) = match coords.dims()[..] {
        [2, hg, wg] => (hg, wg),
        _ => {
            return Err(Error::shape(
                "sample_bilinear",
                format!("coords must be 2 x Hg x Wg, got {:?}", coords.dims()),
            ))
        }
    };
    let (out, valid) = kernels::grid_sample_forward(map.data(), c, h, w, coords.data(), hg * wg);
    Ok((Tensor::new(vec![c, hg, wg], out)?, valid))
}
