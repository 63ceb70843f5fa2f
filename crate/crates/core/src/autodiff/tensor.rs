use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix. Scalars are `1×1`, row vectors `1×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Array2<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("tensor shape {rows}x{cols} has a zero extent")));
        }
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Tensor { data })
    }

    pub fn from_array(data: Array2<f64>) -> Self {
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Tensor { data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            data: Array2::from_elem((1, 1), x),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            data: Array2::zeros((rows, cols)),
        }
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_array(Array2::from_shape_vec((n, 1), values).expect("column shape"))
    }

    /// Row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_array(Array2::from_shape_vec((1, n), values).expect("row shape"))
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.data.nrows(), self.data.ncols()]
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn row_values(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values()[r * c..(r + 1) * c]
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// The single entry of a `1×1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != [1, 1] {
            return Err(Error::shape(format!(
                "item() needs a 1x1 tensor, got {:?}",
                self.shape()
            )));
        }
        Ok(self.data[[0, 0]])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Array2<f64>> for Tensor {
    fn from(a: Array2<f64>) -> Self {
        Tensor::from_array(a)
    }
}
