use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Batches are stored one sample per row.
///
/// Every constructor and public operation either yields finite entries or
/// returns an error.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    ArgmaxPerRow,
    SqNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reduced {
    Value(f64),
    Indices(Vec<usize>),
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "{what} produced a non-finite value at flat index {i}"
        ))),
    }
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Crate-internal constructor for results whose finiteness is checked by the caller.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub(crate) fn checked(self, what: &str) -> Result<Self> {
        check_finite(&self.data, what)?;
        Ok(self)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "index ({r}, {c}) out of bounds");
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if r >= self.rows || c >= self.cols {
            return Err(Error::Shape(format!(
                "index ({r}, {c}) out of bounds for {}x{}",
                self.rows, self.cols
            )));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("cannot store non-finite value {value}")));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor2D::from_parts(self.cols, self.rows, out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul of {} by {}",
                self.shape_str(),
                other.shape_str()
            )));
        }
        let (m, n) = (self.rows, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                // Zero rows of the left operand are common (ReLU outputs, masks, blank pixels).
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor2D::from_parts(m, n, out).checked("matmul")
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "transposed matmul of {}ᵀ by {}",
                self.shape_str(),
                other.shape_str()
            )));
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor2D::from_parts(m, n, out).checked("transposed matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul of {} by {}ᵀ",
                self.shape_str(),
                other.shape_str()
            )));
        }
        self.matmul(&other.transpose())
    }

    pub fn elementwise(&self, other: &Tensor2D, op: ElementwiseOp) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "elementwise {op:?} of {} and {}",
                self.shape_str(),
                other.shape_str()
            )));
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |a, b| a + b,
            ElementwiseOp::Sub => |a, b| a - b,
            ElementwiseOp::Mul => |a, b| a * b,
        };
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor2D::from_parts(self.rows, self.cols, data).checked("elementwise op")
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.elementwise(other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor2D> {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor2D> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor2D::from_parts(self.rows, self.cols, data).checked("map")
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&self, row: &Tensor2D) -> Result<Tensor2D> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot broadcast {} over rows of {}",
                row.shape_str(),
                self.shape_str()
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        out.checked("row broadcast")
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor2D> {
        if factors.len() != self.rows {
            return Err(Error::Shape(format!(
                "{} row factors for {}",
                factors.len(),
                self.shape_str()
            )));
        }
        let mut out = self.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        out.checked("row scaling")
    }

    /// Column sums as a `1 x cols` tensor, accumulated in row order.
    pub fn sum_rows(&self) -> Tensor2D {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor2D::from_parts(1, self.cols, out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor2D> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!(
                    "row {i} out of bounds for {}",
                    self.shape_str()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor2D::from_parts(indices.len(), self.cols, data))
    }

    pub fn vstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut rows = 0;
        let mut data = Vec::new();
        for t in parts {
            if t.cols != cols {
                return Err(Error::Shape(format!(
                    "cannot stack {} under {cols} columns",
                    t.shape_str()
                )));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor2D::from_parts(rows, cols, data))
    }

    pub fn reduce(&self, kind: Reduction) -> Result<Reduced> {
        if self.is_empty() {
            return Err(Error::Domain(format!("cannot reduce empty tensor ({kind:?})")));
        }
        Ok(match kind {
            Reduction::Sum => Reduced::Value(self.data.iter().sum()),
            Reduction::Mean => Reduced::Value(self.data.iter().sum::<f64>() / self.len() as f64),
            Reduction::Max => {
                Reduced::Value(self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            }
            Reduction::SqNorm => Reduced::Value(self.data.iter().map(|v| v * v).sum()),
            Reduction::ArgmaxPerRow => Reduced::Indices(
                (0..self.rows)
                    .map(|r| {
                        let row = self.row(r);
                        let mut best = 0;
                        for (c, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = c;
                            }
                        }
                        best
                    })
                    .collect(),
            ),
        })
    }

    fn reduce_value(&self, kind: Reduction) -> Result<f64> {
        match self.reduce(kind)? {
            Reduced::Value(v) => Ok(v),
            Reduced::Indices(_) => unreachable!("scalar reduction"),
        }
    }

    pub fn sum(&self) -> Result<f64> {
        self.reduce_value(Reduction::Sum)
    }

    pub fn mean(&self) -> Result<f64> {
        self.reduce_value(Reduction::Mean)
    }

    pub fn max(&self) -> Result<f64> {
        self.reduce_value(Reduction::Max)
    }

    pub fn sq_norm(&self) -> Result<f64> {
        self.reduce_value(Reduction::SqNorm)
    }

    /// Per-row argmax; ties go to the lowest index.
    pub fn argmax_per_row(&self) -> Result<Vec<usize>> {
        match self.reduce(Reduction::ArgmaxPerRow)? {
            Reduced::Indices(i) => Ok(i),
            Reduced::Value(_) => unreachable!("index reduction"),
        }
    }

    /// Squared L2 norm of every row.
    pub fn row_sq_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v * v).sum())
            .collect()
    }
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{}) ", self.rows, self.cols)?;
        let rows: Vec<&[f64]> = (0..self.rows.min(8)).map(|r| self.row(r)).collect();
        f.debug_list().entries(rows).finish()
    }
}
