use std::fmt::Write as _;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed-sparse-row matrix in canonical form: column indices sorted
/// within each row, no duplicates, no stored zeros. Two matrices with the
/// same entries are therefore `==` bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Canonicalizes arbitrary triplets: duplicates are summed, zeros dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::shape(format!(
                    "entry ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite entry at ({r}, {c})")));
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let m = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        Ok(if m.values.iter().any(|&v| v == 0.0) {
            m.drop_zeros()
        } else {
            m
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    fn drop_zeros(self) -> Self {
        let mut out = Self::empty(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                if v != 0.0 {
                    out.col_idx.push(c);
                    out.values.push(v);
                }
            }
            out.row_ptr[r + 1] = out.col_idx.len();
        }
        out
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
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// All entries in canonical (row, col) order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_entries(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            m.set(r, c, v);
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for (r, c, v) in self.triplets() {
            let slot = next[c];
            col_idx[slot] = r;
            values[slot] = v;
            next[c] += 1;
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.values[self.row_ptr[r]..self.row_ptr[r + 1]].iter().sum())
            .collect()
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.rows {
            return Err(Error::shape(format!(
                "{} row factors for {} rows",
                factors.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for v in &mut out.values[self.row_ptr[r]..self.row_ptr[r + 1]] {
                *v *= factors[r];
            }
        }
        Ok(out.drop_zeros())
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out.drop_zeros()
    }

    /// Sparse × dense.
    pub fn matmul_dense(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != x.rows() {
            return Err(Error::shape(format!(
                "sparse {}x{} by dense {}x{}",
                self.rows,
                self.cols,
                x.rows(),
                x.cols()
            )));
        }
        Ok(self.matmul_dense_unchecked(x))
    }

    pub(crate) fn matmul_dense_unchecked(&self, x: &DenseMatrix) -> DenseMatrix {
        let n = x.cols();
        let mut out = DenseMatrix::zeros(self.rows, n);
        for r in 0..self.rows {
            let out_row = out.row_mut(r);
            for (c, v) in self.row_entries(r) {
                for (o, &b) in out_row.iter_mut().zip(x.row(c)) {
                    *o += v * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · x` without materializing the transpose.
    pub(crate) fn matmul_dense_transposed(&self, x: &DenseMatrix) -> DenseMatrix {
        let n = x.cols();
        let mut out = DenseMatrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let x_row = x.row(r);
            for (c, v) in self.row_entries(r) {
                for (o, &b) in out.row_mut(c).iter_mut().zip(x_row) {
                    *o += v * b;
                }
            }
        }
        out
    }

    /// Sparse × sparse (row-wise accumulation).
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "sparse {}x{} by sparse {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut acc = vec![0.0; other.cols];
        let mut touched = vec![false; other.cols];
        let mut marks: Vec<usize> = Vec::new();
        let mut out = Self::empty(self.rows, other.cols);
        for r in 0..self.rows {
            for (k, a) in self.row_entries(r) {
                for (c, b) in other.row_entries(k) {
                    if !touched[c] {
                        touched[c] = true;
                        marks.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            marks.sort_unstable();
            for &c in &marks {
                if acc[c] != 0.0 {
                    out.col_idx.push(c);
                    out.values.push(acc[c]);
                }
                acc[c] = 0.0;
                touched[c] = false;
            }
            marks.clear();
            out.row_ptr[r + 1] = out.col_idx.len();
        }
        Ok(out)
    }

    /// `Σ weights[i] · mats[i]`
    pub fn linear_combination(mats: &[&SparseMatrix], weights: &[f64]) -> Result<SparseMatrix> {
        let first = mats
            .first()
            .ok_or_else(|| Error::shape("empty matrix collection"))?;
        if mats.len() != weights.len() {
            return Err(Error::shape(format!(
                "{} weights for {} matrices",
                weights.len(),
                mats.len()
            )));
        }
        let (rows, cols) = (first.rows, first.cols);
        if mats.iter().any(|m| m.rows != rows || m.cols != cols) {
            return Err(Error::shape("matrices differ in shape"));
        }
        let entries = mats
            .iter()
            .zip(weights)
            .flat_map(|(m, &w)| m.triplets().map(move |(r, c, v)| (r, c, w * v)))
            .collect();
        Self::from_triplets(rows, cols, entries)
    }

    /// Text form: a header line `sparse <rows> <cols> <nnz>` followed by one
    /// `row col value` line per entry in canonical order. Values use the
    /// shortest representation that parses back to the same bits.
    pub fn serialize(&self) -> String {
        let mut s = format!("sparse {} {} {}\n", self.rows, self.cols, self.nnz());
        for (r, c, v) in self.triplets() {
            let _ = writeln!(s, "{r} {c} {v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<SparseMatrix> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Format {
            offset: line,
            msg: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(0, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "sparse" {
            return Err(bad(0, "expected `sparse <rows> <cols> <nnz>`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(0, "bad header count"));
        let (rows, cols, nnz) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        let mut entries = Vec::with_capacity(nnz);
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(i, "expected `row col value`"));
            }
            let r = f[0].parse().map_err(|_| bad(i, "bad row"))?;
            let c = f[1].parse().map_err(|_| bad(i, "bad col"))?;
            let v = f[2].parse().map_err(|_| bad(i, "bad value"))?;
            entries.push((r, c, v));
        }
        if entries.len() != nnz {
            return Err(bad(0, "entry count disagrees with header"));
        }
        Self::from_triplets(rows, cols, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> SparseMatrix {
        SparseMatrix::from_triplets(
            3,
            4,
            vec![(2, 1, 0.5), (0, 3, -1.0), (0, 0, 2.0), (2, 1, 0.25), (1, 2, 0.0)],
        )
        .unwrap()
    }

    #[test]
    fn canonical_form() {
        let m = sample();
        assert_eq!(m.nnz(), 3);
        let t: Vec<_> = m.triplets().collect();
        assert_eq!(t, vec![(0, 0, 2.0), (0, 3, -1.0), (2, 1, 0.75)]);
    }

    #[test]
    fn transpose_matches_dense() {
        let m = sample();
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn products_match_dense() {
        let a = sample();
        let x = DenseMatrix::from_fn(4, 2, |r, c| r as f64 + 0.5 * c as f64);
        let dense = a.to_dense().matmul(&x).unwrap();
        assert!(a.matmul_dense(&x).unwrap().max_abs_diff(&dense) < 1e-15);
        let y = DenseMatrix::from_fn(3, 2, |r, c| r as f64 - c as f64);
        let dense_t = a.to_dense().transpose().matmul(&y).unwrap();
        assert!(a.matmul_dense_transposed(&y).max_abs_diff(&dense_t) < 1e-15);
        let b = a.transpose();
        let ss = a.matmul(&b).unwrap().to_dense();
        let dd = a.to_dense().matmul(&b.to_dense()).unwrap();
        assert!(ss.max_abs_diff(&dd) < 1e-15);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(SparseMatrix::parse("dense 1 1 0\n").is_err());
        assert!(SparseMatrix::parse("sparse 1 1 1\n0 0\n").is_err());
        assert!(SparseMatrix::parse("sparse 1 1 2\n0 0 1\n").is_err());
    }

    proptest! {
        #[test]
        fn serialize_parse_serialize_is_byte_identical(
            entries in proptest::collection::vec((0usize..6, 0usize..5, -1e3f64..1e3), 0..30)
        ) {
            let m = SparseMatrix::from_triplets(6, 5, entries).unwrap();
            let text = m.serialize();
            let back = SparseMatrix::parse(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.serialize(), text);
        }
    }
}
