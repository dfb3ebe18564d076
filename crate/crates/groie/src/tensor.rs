//! Dense rank-<=4 tensor of 64-bit floats in row-major (N, C, H, W) order,
//! with an optional gradient slot of the same shape.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.len() > 4 {
            return Err(Error::Dim(format!("rank {} exceeds 4", shape.len())));
        }
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Uniform values in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Uniform(+-sqrt(6/(fan_in+fan_out))) initialization for weights.
    pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::rand_uniform(shape, -bound, bound, rng)
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

    /// Accumulate `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the flat data under a new shape of the same length.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Input(format!("{what} contains a non-finite value")))
        }
    }
}

/// Shapes interpreted as (N, C, H, W); lower-rank tensors pad with leading 1s.
pub fn as_nchw(shape: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let off = 4 - shape.len();
    for (i, &s) in shape.iter().enumerate() {
        out[off + i] = s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rank_above_four_rejected() {
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
