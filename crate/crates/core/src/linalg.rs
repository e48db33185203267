//! Dense row-major matrices and the handful of kernels the MoE layer needs.
//!
//! Every reduction runs in `f32`, in ascending index order, as a plain
//! multiply followed by an add. Results are therefore bit-reproducible across
//! runs and thread counts.

use std::ops::AddAssign;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Size of the raw `f32` payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

/// Which projection a multiply-accumulate is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacCategory {
    Gate,
    Up,
    Down,
    /// Router logits and the shared expert.
    Other,
}

/// Exact multiply-accumulate tally for one forward call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub gate_macs: u64,
    pub up_macs: u64,
    pub down_macs: u64,
    pub other_macs: u64,
}

impl MacCounter {
    pub fn add(&mut self, category: MacCategory, n: u64) {
        match category {
            MacCategory::Gate => self.gate_macs += n,
            MacCategory::Up => self.up_macs += n,
            MacCategory::Down => self.down_macs += n,
            MacCategory::Other => self.other_macs += n,
        }
    }

    /// Gate + up + down: the routed-expert projections.
    pub fn expert_macs(&self) -> u64 {
        self.gate_macs + self.up_macs + self.down_macs
    }

    pub fn total(&self) -> u64 {
        self.expert_macs() + self.other_macs
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

impl AddAssign for MacCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.gate_macs += rhs.gate_macs;
        self.up_macs += rhs.up_macs;
        self.down_macs += rhs.down_macs;
        self.other_macs += rhs.other_macs;
    }
}

impl std::iter::Sum for MacCounter {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |mut acc, c| {
            acc += c;
            acc
        })
    }
}

/// Ascending-order dot product with no fused multiply-add.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y = W x`, charging `rows * cols` MACs to `category`.
pub fn matvec(
    w: &Matrix,
    x: &[f32],
    counter: &mut MacCounter,
    category: MacCategory,
) -> Result<Vec<f32>> {
    if x.len() != w.cols {
        return Err(Error::shape(format!(
            "matvec: matrix has {} columns, vector has {} entries",
            w.cols,
            x.len()
        )));
    }
    let y = (0..w.rows).map(|i| dot(w.row(i), x)).collect();
    counter.add(category, (w.rows * w.cols) as u64);
    Ok(y)
}

/// Copies rows `idx[k]` of `w` into a packed `idx.len() x cols` matrix.
pub fn gather_rows(w: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * w.cols);
    for &i in idx {
        if i >= w.rows {
            return Err(Error::Index {
                index: i,
                len: w.rows,
            });
        }
        data.extend_from_slice(w.row(i));
    }
    Ok(Matrix {
        rows: idx.len(),
        cols: w.cols,
        data,
    })
}

/// Down projection over a subset of neurons.
///
/// `down_t` is the `N x D` transposed down matrix, so `down_t.row(n)` is
/// column `n` of the `D x N` projection. Computes
/// `y[d] = sum_k down_t[idx[k], d] * h[k]` with `k` ascending and charges
/// `idx.len() * D` MACs.
pub fn gathered_matvec_t(
    down_t: &Matrix,
    idx: &[usize],
    h: &[f32],
    counter: &mut MacCounter,
    category: MacCategory,
) -> Result<Vec<f32>> {
    if idx.len() != h.len() {
        return Err(Error::shape(format!(
            "gathered_matvec_t: {} indices but {} activations",
            idx.len(),
            h.len()
        )));
    }
    let mut y = vec![0.0f32; down_t.cols];
    for (&n, &hk) in idx.iter().zip(h) {
        if n >= down_t.rows {
            return Err(Error::Index {
                index: n,
                len: down_t.rows,
            });
        }
        axpy(hk, down_t.row(n), &mut y);
    }
    counter.add(category, (idx.len() * down_t.cols) as u64);
    Ok(y)
}

/// `y = W^T h` for `W` stored `N x D`: accumulates `h[n] * W.row(n)` with
/// `n` ascending and charges `N * D` MACs.
pub fn matvec_t(
    w: &Matrix,
    h: &[f32],
    counter: &mut MacCounter,
    category: MacCategory,
) -> Result<Vec<f32>> {
    if h.len() != w.rows {
        return Err(Error::shape(format!(
            "matvec_t: matrix has {} rows, vector has {} entries",
            w.rows,
            h.len()
        )));
    }
    let mut y = vec![0.0f32; w.cols];
    for (n, &hn) in h.iter().enumerate() {
        axpy(hn, w.row(n), &mut y);
    }
    counter.add(category, (w.rows * w.cols) as u64);
    Ok(y)
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matvec_examples() {
        let mut c = MacCounter::default();
        let y = matvec(&Matrix::identity(2), &[3.0, 4.0], &mut c, MacCategory::Gate).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
        let y = matvec(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &[1.0, 1.0], &mut c, MacCategory::Up)
            .unwrap();
        assert_eq!(y, vec![3.0, 7.0]);
        let y = matvec(&Matrix::zeros(1, 3), &[5.0, 6.0, 7.0], &mut c, MacCategory::Other).unwrap();
        assert_eq!(y, vec![0.0]);
        assert_eq!(c.gate_macs, 4);
        assert_eq!(c.up_macs, 4);
        assert_eq!(c.other_macs, 3);
    }

    #[test]
    fn matvec_rejects_bad_length() {
        let mut c = MacCounter::default();
        let err = matvec(&Matrix::identity(2), &[1.0], &mut c, MacCategory::Gate).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert_eq!(c, MacCounter::default());
    }

    #[test]
    fn gather_rows_examples() {
        let w = m(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 5.0], &[6.0, 7.0]]);
        let g = gather_rows(&w, &[2, 0]).unwrap();
        assert_eq!(g, m(&[&[4.0, 5.0], &[0.0, 1.0]]));

        let empty = gather_rows(&w, &[]).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (0, 2));

        let dup = gather_rows(&w, &[1, 1]).unwrap();
        assert_eq!(dup, m(&[&[2.0, 3.0], &[2.0, 3.0]]));

        assert!(matches!(
            gather_rows(&w, &[4]),
            Err(Error::Index { index: 4, len: 4 })
        ));
    }

    #[test]
    fn gathered_matvec_t_examples() {
        let mut c = MacCounter::default();
        let wd = Matrix::identity(2);
        let y = gathered_matvec_t(&wd.transpose(), &[], &[], &mut c, MacCategory::Down).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let y = gathered_matvec_t(&wd.transpose(), &[1], &[5.0], &mut c, MacCategory::Down).unwrap();
        assert_eq!(y, vec![0.0, 5.0]);

        // D x N down projection [[1,2],[3,4]], stored transposed.
        let wd = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = gathered_matvec_t(&wd.transpose(), &[0, 1], &[1.0, 1.0], &mut c, MacCategory::Down)
            .unwrap();
        assert_eq!(y, vec![3.0, 7.0]);
        assert_eq!(c.down_macs, 2 + 4);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn counter_sum_and_reset() {
        let mut a = MacCounter::default();
        a.add(MacCategory::Gate, 3);
        a.add(MacCategory::Down, 2);
        let total: MacCounter = [a, a].into_iter().sum();
        assert_eq!(total.expert_macs(), 10);
        a.reset();
        assert_eq!(a.total(), 0);
    }
}
