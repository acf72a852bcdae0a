//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Differentiable
//! computation happens on a [`Tape`], which records primitive operations over
//! [`Var`] handles and replays them backwards to populate gradients.

mod gradcheck;
mod kernels;
mod rng;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{causal_conv_forward, gemm, selective_scan_forward, ScanInputs};
pub use rng::Rng;
pub use tape::{BackwardStats, Tape, Var, MASK_SENTINEL};

use crate::error::{Error, Result};

/// Initialisation rule for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(format!("{shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { mean, std, seed } => {
                if !(std >= 0.0) {
                    return Err(Error::InvalidShape(format!("normal init with std {std}")));
                }
                let mut rng = Rng::new(seed);
                (0..n).map(|_| mean + std * rng.standard_normal()).collect()
            }
        };
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Init::Zeros).expect("zeros: invalid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::create(shape, Init::Ones).expect("ones: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Draws `N(mean, std²)` samples from an existing generator, in flat index order.
    pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = mean + std * rng.standard_normal());
        t
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.uniform(low, high));
        t
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    /// Product of all dimensions except the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `[start, end)` of the tensor viewed as `[rows, cols]`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        assert!(start < end && end <= self.rows(), "row slice out of range");
        Self { shape: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    /// Non-differentiable matrix product; same kernel as [`Tape::matmul`].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (out_shape, plan) = kernels::matmul_plan(&self.shape, &other.shape)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::batched_gemm(&plan, &self.data, &other.data, &mut out, false, false, 1.0, 0.0);
        Tensor::new(&out_shape, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
