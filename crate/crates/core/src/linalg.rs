//! Minimal deterministic dense linear algebra.
//!
//! Every matrix is row-major `f64`. Products accumulate each output entry
//! left-to-right over the shared index, starting from `0.0`, so results are
//! bit-reproducible for identical inputs on the same platform.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use crate::error::Shape;
use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. Zero-sized shapes are rejected.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "matrix shape {rows}x{cols} has a zero dimension"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn random_normal<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        std_dev: f64,
        rng: &mut R,
    ) -> Self {
        let dist = Normal::new(0.0, std_dev).expect("standard deviation must be finite and >= 0");
        Self::from_fn(rows, cols, |_, _| dist.sample(rng))
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let dist = Uniform::new(lo, hi).expect("empty uniform range");
        Self::from_fn(rows, cols, |_, _| dist.sample(rng))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Maximum absolute row sum (the induced infinity norm).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Column sums, accumulated top to bottom.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    /// Mean of the rows as a 1 x cols matrix.
    pub fn col_means(&self) -> Matrix {
        let n = self.rows as f64;
        let data = self.col_sums().into_iter().map(|s| s / n).collect();
        Matrix {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self -= lr * other`.
    pub fn axpy_sub(&mut self, lr: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension("axpy", self.shape(), other.shape()));
        }
        for (p, g) in self.data.iter_mut().zip(&other.data) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                "max_abs_diff",
                self.shape(),
                other.shape(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Copies the sub-block starting at `(r0, c0)` with the given extent.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(
            r0 + rows <= self.rows && c0 + cols <= self.cols,
            "block out of range"
        );
        Matrix::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j))
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.rows);
        self.select_rows(perm)
    }

    /// Stacks rows `idx[0], idx[1], ...` (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        assert!(!idx.is_empty(), "empty row selection");
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &p in idx {
            data.extend_from_slice(self.row(p));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_transposed_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dimension(
            "matmul_transposed_b",
            a.shape(),
            b.shape(),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_transposed_a(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dimension(
            "matmul_transposed_a",
            a.shape(),
            b.shape(),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

pub fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols, m.rows);
    for i in 0..m.rows {
        for j in 0..m.cols {
            out.data[j * m.rows + i] = m.data[i * m.cols + j];
        }
    }
    out
}

/// Row-wise softmax of `scale * m`, stabilized by subtracting the row max
/// before scaling: `exp((x - max) * scale) / sum`.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::NumericInput(format!(
            "softmax scale must be finite and > 0, got {scale}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NumericInput(
            "softmax input contains NaN or Inf".into(),
        ));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) * scale).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// Divides row `i` of `m` by `mass[i]`, i.e. `diag(mass)^-1 * m`.
pub fn scale_rows_by_inverse(m: &Matrix, mass: &[f64]) -> Result<Matrix> {
    if mass.len() != m.rows {
        return Err(Error::dimension(
            "scale_rows_by_inverse",
            m.shape(),
            Shape::new(mass.len(), 1),
        ));
    }
    check_mass(mass)?;
    let mut out = m.clone();
    for (i, &w) in mass.iter().enumerate() {
        for x in out.row_mut(i) {
            *x /= w;
        }
    }
    Ok(out)
}

pub(crate) fn check_mass(mass: &[f64]) -> Result<()> {
    match mass.iter().position(|&w| !(w.is_finite() && w > 0.0)) {
        Some(index) => Err(Error::SingularMass {
            index,
            value: mass[index],
        }),
        None => Ok(()),
    }
}

/// Column-wise concatenation `[m_1, m_2, ...]`.
pub fn concat_cols(parts: &[Matrix]) -> Result<Matrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of zero matrices".into()))?;
    let rows = first.rows;
    if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
        return Err(Error::dimension("concat_cols", first.shape(), bad.shape()));
    }
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Matrix::new(rows, cols, data)
}

/// Splits columns into consecutive blocks of `width`.
pub fn split_cols(m: &Matrix, width: usize) -> Result<Vec<Matrix>> {
    if width == 0 || !m.cols.is_multiple_of(width) {
        return Err(Error::Argument(format!(
            "cannot split {} columns into blocks of {width}",
            m.cols
        )));
    }
    Ok((0..m.cols / width)
        .map(|b| m.block(0, b * width, m.rows, width))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    // Independent triple loop, j outermost, i middle, k innermost.
    fn matmul_reversed(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for j in 0..b.cols() {
            for i in 0..a.rows() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        Matrix::new(a.rows(), b.cols(), out).unwrap()
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = mat(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let r = matmul(&mat(&[&[1.0, 2.0]]), &mat(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r, mat(&[&[11.0]]));
    }

    #[test]
    fn matmul_matches_reversed_nesting() {
        let mut rng = seeded_rng(7);
        let a = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let diff = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&matmul_reversed(&a, &b))
            .unwrap();
        assert!(diff <= 1e-12, "diff {diff}");
        // both variants of the transposed products agree with the plain product
        let bt = transpose(&b);
        let at = transpose(&a);
        assert!(
            matmul_transposed_b(&a, &bt)
                .unwrap()
                .max_abs_diff(&matmul(&a, &b).unwrap())
                .unwrap()
                <= 1e-12
        );
        let c = Matrix::random_normal(7, 4, 1.0, &mut rng);
        assert!(
            matmul_transposed_a(&a, &c)
                .unwrap()
                .max_abs_diff(&matmul(&at, &c).unwrap())
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = seeded_rng(11);
        for _ in 0..20 {
            let a = Matrix::random_normal(8, 8, 1.0, &mut rng);
            let b = Matrix::random_normal(8, 8, 1.0, &mut rng);
            let c = Matrix::random_normal(8, 8, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let bound = 1e-9 * a.norm_inf() * b.norm_inf() * c.norm_inf();
            assert!(left.sub(&right).unwrap().norm_inf() <= bound);
        }
    }

    #[test]
    fn softmax_uniform_and_extreme() {
        let s = softmax_rows(&mat(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&mat(&[&[1000.0, 0.0]]), 1.0).unwrap();
        assert!(s.is_finite());
        assert_eq!(s.get(0, 0), 1.0);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // mpmath at 40 significant digits
        let expected = [
            0.090_030_573_170_380_457_998_022_1,
            0.244_728_471_054_797_652_472_959_6,
            0.665_240_955_774_821_889_529_018_3,
        ];
        let s = softmax_rows(&mat(&[&[1.0, 2.0, 3.0]]), 1.0).unwrap();
        for (got, want) in s.data().iter().zip(expected) {
            assert!(((got - want) / want).abs() <= 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax_rows(&mat(&[&[f64::NAN, 0.0]]), 1.0),
            Err(Error::NumericInput(_))
        ));
        assert!(softmax_rows(&mat(&[&[1.0]]), 0.0).is_err());
    }

    #[test]
    fn transpose_cases() {
        assert_eq!(
            transpose(&mat(&[&[1.0, 2.0], &[3.0, 4.0]])),
            mat(&[&[1.0, 3.0], &[2.0, 4.0]])
        );
        let row = mat(&[&[1.0, 2.0, 3.0]]);
        assert_eq!(transpose(&row).shape(), Shape::new(3, 1));
        let mut rng = seeded_rng(3);
        let m = Matrix::random_normal(9, 4, 1.0, &mut rng);
        assert_eq!(transpose(&transpose(&m)), m);
    }

    #[test]
    fn scale_rows_cases() {
        let m = mat(&[&[2.0, 4.0], &[9.0, 3.0]]);
        assert_eq!(
            scale_rows_by_inverse(&m, &[2.0, 3.0]).unwrap(),
            mat(&[&[1.0, 2.0], &[3.0, 1.0]])
        );
        assert_eq!(scale_rows_by_inverse(&m, &[1.0, 1.0]).unwrap(), m);
        assert!(matches!(
            scale_rows_by_inverse(&m, &[1.0, 0.0]),
            Err(Error::SingularMass { index: 1, .. })
        ));
        assert!(scale_rows_by_inverse(&m, &[1.0, f64::NAN]).is_err());
        assert!(scale_rows_by_inverse(&m, &[1.0]).is_err());
    }

    #[test]
    fn scale_rows_matches_diagonal_matmul() {
        let mut rng = seeded_rng(5);
        let m = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let mass: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..5.0)).collect();
        let diag = Matrix::from_fn(6, 6, |i, j| if i == j { 1.0 / mass[i] } else { 0.0 });
        let via_matmul = matmul(&diag, &m).unwrap();
        let diff = scale_rows_by_inverse(&m, &mass)
            .unwrap()
            .max_abs_diff(&via_matmul)
            .unwrap();
        assert!(diff <= 1e-15, "{diff}");
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = seeded_rng(9);
        let a = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let b = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let c = concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(split_cols(&c, 2).unwrap(), vec![a, b]);
    }

    #[test]
    fn deterministic_repeat() {
        let mut rng = seeded_rng(1);
        let a = Matrix::random_normal(16, 9, 3.0, &mut rng);
        let b = Matrix::random_normal(9, 12, 3.0, &mut rng);
        let first = softmax_rows(&matmul(&a, &b).unwrap(), 0.3).unwrap();
        for _ in 0..3 {
            let again = softmax_rows(&matmul(&a, &b).unwrap(), 0.3).unwrap();
            assert!(first
                .data()
                .iter()
                .zip(again.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_stochastic_and_shift_invariant(
            rows in prop::collection::vec(prop::collection::vec(-200i32..200, 5), 1..6),
            shift in -400i32..400,
            scale in 0.01f64..4.0,
        ) {
            // quarter-integer grid keeps `x + shift` exact
            let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64 / 4.0).collect()).collect();
            let shift = shift as f64 / 4.0;
            let m = Matrix::from_rows(&rows).unwrap();
            let s = softmax_rows(&m, scale).unwrap();
            for r in s.row_sums() {
                prop_assert!((r - 1.0).abs() <= 1e-12);
            }
            prop_assert!(s.data().iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted = softmax_rows(&m.map(|x| x + shift), scale).unwrap();
            prop_assert!(s.max_abs_diff(&shifted).unwrap() <= 1e-14);
        }
    }
}
