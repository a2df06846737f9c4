//! Reverse-mode differentiable tensor kernel.
//!
//! The tape works on row-major matrices. Vectors are `1 x n` rows and scalars
//! are `1 x 1`. Binary elementwise ops broadcast any operand dimension of size 1.

mod io;
mod params;
mod tape;

pub use io::{read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use params::{xavier_init, AdamConfig, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("tensor shape {shape:?} has a zero dimension"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![1, n], data).expect("non-empty row")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1, 1], vec![v]).expect("scalar shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// The tensor viewed as a matrix: rank 1 is a single row, higher ranks
    /// fold all leading dimensions into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }
}
