//! Dense vector and matrix kernels.
//!
//! Vectors are plain `f32` slices. Every reduction accumulates in `f64`
//! in left-to-right order and rounds once at the end, so results are
//! reproducible bit-for-bit across runs.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DernError, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const ZERO_NORM: f64 = 1e-12;

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

pub(crate) fn norm_f64(a: &[f32]) -> f64 {
    dot_f64(a, a).sqrt()
}

pub(crate) fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let na = norm_f64(a);
    let nb = norm_f64(b);
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn dot(a: &[f32], b: &[f32]) -> Result<f32> {
    check_dim(a.len(), b.len())?;
    Ok(dot_f64(a, b) as f32)
}

pub fn l2_norm(a: &[f32]) -> f32 {
    norm_f64(a) as f32
}

pub fn linf_norm(a: &[f32]) -> f32 {
    a.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

/// Cosine similarity clamped to `[-1, 1]`. Returns 0 when either input has
/// (near) zero norm, so a degenerate vector matches nothing.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    check_dim(a.len(), b.len())?;
    Ok(cosine_f64(a, b) as f32)
}

pub fn all_finite(a: &[f32]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DernError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f32>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            check_dim(rows, c.len())?;
            for (i, &v) in c.iter().enumerate() {
                m.data[i * cols + j] = v;
            }
        }
        Ok(m)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub(crate) fn matvec_f64(&self, x: &[f32]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot_f64(self.row(i), x)).collect())
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.matvec_f64(x)?.into_iter().map(|v| v as f32).collect())
    }
}
