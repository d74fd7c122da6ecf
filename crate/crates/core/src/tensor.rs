use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// A `Tensor` is a plain value; gradient bookkeeping lives in
/// [`Graph`](crate::Graph), which wraps tensors in nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeIncompatible(shape.to_vec(), vec![data.len()]));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor (or the first element otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeIncompatible(self.shape, shape.to_vec()));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 tensor, or a rank-2 map as one channel.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [h, w] => Ok((1, h, w)),
            _ => Err(Error::ShapeIncompatible(self.shape.clone(), vec![0, 0, 0])),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel `c` of a rank-3 tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }

    /// FNV-1a over the raw bit patterns; used for cheap bit-exact comparisons.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &d in &self.shape {
            h = (h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in &self.data {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
