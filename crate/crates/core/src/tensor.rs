//! Dense containers: the 4-D activation tensor and a row-major matrix.

use crate::error::{invalid, shape, Error, Result};

/// Dense `[batch, channel, height, width]` array, row-major with width innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(shape_err(shape, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length matches and the values come from finite arithmetic.
    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements in one `(sample, channel)` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    /// The contiguous spatial plane of one `(sample, channel)` pair.
    pub fn channel_plane(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub(crate) fn channel_plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Gathers the listed samples into a new tensor, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.batch(),
                });
            }
            data.extend_from_slice(self.sample(i));
        }
        let [_, c, h, w] = self.shape;
        Ok(Self::from_raw([indices.len(), c, h, w], data))
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat(parts: &[Tensor4]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("tensor list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut b = 0;
        for t in parts {
            if t.shape[1..] != first.shape[1..] {
                return Err(shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            b += t.batch();
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_raw([b, c, h, w], data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Writes a `C x (H*W)` matrix back into sample `b`; inverse of
    /// [`reshape_channels`].
    pub fn set_sample_from_matrix(&mut self, b: usize, m: &Matrix) -> Result<()> {
        if b >= self.batch() {
            return Err(Error::IndexOutOfRange {
                index: b,
                len: self.batch(),
            });
        }
        if m.rows() != self.channels() || m.cols() != self.plane() {
            return Err(shape(format!(
                "matrix {}x{} does not fit sample of {:?}",
                m.rows(),
                m.cols(),
                self.shape
            )));
        }
        let n = self.sample_len();
        self.data[b * n..(b + 1) * n].copy_from_slice(m.data());
        Ok(())
    }
}

fn shape_err(shape: [usize; 4], got: usize) -> Error {
    Error::Shape(format!(
        "shape {:?} needs {} elements, got {}",
        shape,
        shape.iter().product::<usize>(),
        got
    ))
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape("frobenius distance of differently shaped matrices"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// The `C x (H*W)` view of one sample: element `(c, h*W + w)` is `x[sample, c, h, w]`.
pub fn reshape_channels(x: &Tensor4, sample_index: usize) -> Result<Matrix> {
    if sample_index >= x.batch() {
        return Err(Error::IndexOutOfRange {
            index: sample_index,
            len: x.batch(),
        });
    }
    Ok(Matrix {
        rows: x.channels(),
        cols: x.plane(),
        data: x.sample(sample_index).to_vec(),
    })
}
