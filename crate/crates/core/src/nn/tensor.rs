use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[self.shape.len() - 1];
        &self.data[i * w..(i + 1) * w]
    }
}
