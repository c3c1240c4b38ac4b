//! Dense row-major tensors of 64-bit reals.
//!
//! Activations use the h×w×c convention (a flattened activation is just `c`),
//! weights are kh×kw×cin×cout (dense weights are cin×cout). In both cases the
//! channel axis is the last one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// h×w×c feature map, or a length-c vector.
    Activation,
    /// kh×kw×cin×cout convolution kernel or cin×cout dense matrix.
    Weight,
    /// Plain array with no channel semantics.
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Min,
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    layout: Layout,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>, layout: Layout) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { dims, data, layout })
    }

    pub fn zeros(dims: Vec<usize>, layout: Layout) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
            layout,
        }
    }

    /// A rank-1 activation tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
            layout: Layout::Activation,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the channel (last) axis.
    pub fn channels(&self) -> Result<usize> {
        match self.layout {
            Layout::Flat => Err(Error::NoChannelAxis(self.layout)),
            _ => self.dims.last().copied().ok_or(Error::EmptyInput),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            layout: self.layout,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute value.
    pub fn max_abs(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
    }

    /// Per-channel reduction over every other axis.
    pub fn channel_reduce(&self, which: Reduce) -> Result<Vec<f64>> {
        let c = self.channels()?;
        let mut out = match which {
            Reduce::Min => vec![f64::INFINITY; c],
            Reduce::Max => vec![f64::NEG_INFINITY; c],
            Reduce::Mean => vec![0.0; c],
        };
        for row in self.data.chunks_exact(c) {
            for (acc, &x) in out.iter_mut().zip(row) {
                match which {
                    Reduce::Min => *acc = acc.min(x),
                    Reduce::Max => *acc = acc.max(x),
                    Reduce::Mean => *acc += x,
                }
            }
        }
        if which == Reduce::Mean {
            let positions = (self.data.len() / c) as f64;
            out.iter_mut().for_each(|v| *v /= positions);
        }
        Ok(out)
    }
}
