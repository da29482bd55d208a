//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine
//! covering the layer vocabulary of the counting network: same-padded
//! convolution, 2x2 max pooling, ReLU, bilinear upsampling, block-sum
//! pooling, channel concatenation and the squared-error loss.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense array with an optional gradient buffer.
///
/// Feature maps use `[channels, height, width]`; convolution weights use
/// `[out_channels, in_channels, kh, kw]`; biases are rank one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero extent in shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "zero extent in shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of {} elements",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets a rank-3 tensor as `(channels, height, width)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C, H, W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Copy of channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        Tensor::new(
            vec![len, h, w],
            self.data[start * plane..(start + len) * plane].to_vec(),
        )
    }

    /// Copy of the window `[top..top + height, left..left + width]` of every channel.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
            )));
        }
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for i in top..top + height {
                let row = ch * h * w + i * w;
                out.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Tensor::new(vec![c, height, width], out)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}
