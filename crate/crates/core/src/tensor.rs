//! Dense row-major f64 matrices.
//!
//! The single value type of the differentiation engine. Vectors are stored as
//! single-row matrices; scalars as 1x1. All arithmetic is 64-bit and there is
//! no broadcasting beyond explicit row-vector bias addition in the tape ops.

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: format!("{rows}x{cols}"),
                right: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Single-row matrix from a plain vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Validation(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product; dispatches to the parallel kernel on large shapes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        kernels::matmul(
            &self.data,
            self.rows,
            self.cols,
            &other.data,
            other.cols,
            &mut out.data,
        );
        Ok(out)
    }

    /// self^T * other without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        let mut out = Tensor::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let left = self.row(r);
            let right = other.row(r);
            for (i, &l) in left.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &v) in out_row.iter_mut().zip(right) {
                    *o += l * v;
                }
            }
        }
        Ok(out)
    }

    /// self * other^T without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let left = self.row(r);
            for j in 0..other.rows {
                let mut acc = 0.0;
                for (l, v) in left.iter().zip(other.row(j)) {
                    acc += l * v;
                }
                out.data[r * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Nested-array JSON value used by every on-disk format.
    pub fn to_json_rows(&self) -> serde_json::Value {
        serde_json::Value::Array(
            (0..self.rows)
                .map(|r| {
                    serde_json::Value::Array(
                        self.row(r)
                            .iter()
                            .map(|&v| {
                                serde_json::Number::from_f64(v)
                                    .map(serde_json::Value::Number)
                                    .unwrap_or(serde_json::Value::Null)
                            })
                            .collect(),
                    )
                })
                .collect(),
        )
    }

    pub fn from_json_rows(value: &serde_json::Value, field: &str) -> Result<Tensor> {
        let rows = value
            .as_array()
            .ok_or_else(|| Error::Validation(format!("{field} must be an array of arrays")))?;
        let mut parsed: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .ok_or_else(|| Error::Validation(format!("{field}[{i}] must be an array")))?;
            let mut out = Vec::with_capacity(row.len());
            for (j, v) in row.iter().enumerate() {
                let v = v.as_f64().ok_or_else(|| {
                    Error::Validation(format!("{field}[{i}][{j}] must be a number"))
                })?;
                if !v.is_finite() {
                    return Err(Error::Validation(format!("{field}[{i}][{j}] is not finite")));
                }
                out.push(v);
            }
            parsed.push(out);
        }
        Tensor::from_rows(&parsed)
    }
}
