//! Late-interaction relevance: the sum over query rows of the maximum dot
//! product against any passage row.
//!
//! All dot products accumulate in `f64` in dimension order and the per-row
//! maxima are summed in query-row order, so a score is bit-stable no matter
//! which code path or thread computes it.

use crate::error::{Error, Result};

/// Borrowed row-major matrix of token vectors.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRef<'a, T> {
    data: &'a [T],
    dim: usize,
}

impl<'a, T: Copy + Into<f64>> MatrixRef<'a, T> {
    pub fn new(data: &'a [T], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len(),
            });
        }
        Ok(Self { data, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &'a [T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &'a [T] {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Score(pub f64);

impl Score {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[inline]
pub fn dot<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.into() * y.into();
    }
    acc
}

fn check_shapes<T: Copy + Into<f64>>(q: &MatrixRef<'_, T>, d: &MatrixRef<'_, T>) -> Result<()> {
    if q.dim() != d.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: d.dim(),
        });
    }
    if d.rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(())
}

/// Index of the best passage row for one query row; ties go to the lowest index.
fn best_row<T: Copy + Into<f64>>(q_row: &[T], d: &MatrixRef<'_, T>) -> (usize, f64) {
    let mut best = (0, dot(q_row, d.row(0)));
    for j in 1..d.rows() {
        let s = dot(q_row, d.row(j));
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

pub fn maxsim<T: Copy + Into<f64>>(q: MatrixRef<'_, T>, d: MatrixRef<'_, T>) -> Result<Score> {
    check_shapes(&q, &d)?;
    let mut total = 0.0f64;
    for i in 0..q.rows() {
        total += best_row(q.row(i), &d).1;
    }
    Ok(Score(total))
}

/// Subgradient of [`maxsim`] with respect to both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxSimGrad {
    pub score: Score,
    /// Same shape as the query: row `i` equals the passage row it matched.
    pub query: Vec<f64>,
    /// Same shape as the passage: row `j` sums the query rows that chose it.
    pub doc: Vec<f64>,
    /// Chosen passage row for every query row.
    pub argmax: Vec<usize>,
}

pub fn maxsim_grad<T: Copy + Into<f64>>(
    q: MatrixRef<'_, T>,
    d: MatrixRef<'_, T>,
) -> Result<MaxSimGrad> {
    check_shapes(&q, &d)?;
    let dim = q.dim();
    let mut grad_q = vec![0.0; q.rows() * dim];
    let mut grad_d = vec![0.0; d.rows() * dim];
    let mut argmax = Vec::with_capacity(q.rows());
    let mut total = 0.0;
    for i in 0..q.rows() {
        let (j, s) = best_row(q.row(i), &d);
        total += s;
        argmax.push(j);
        for (g, &v) in grad_q[i * dim..(i + 1) * dim].iter_mut().zip(d.row(j)) {
            *g = v.into();
        }
        for (g, &v) in grad_d[j * dim..(j + 1) * dim].iter_mut().zip(q.row(i)) {
            *g += v.into();
        }
    }
    Ok(MaxSimGrad {
        score: Score(total),
        query: grad_q,
        doc: grad_d,
        argmax,
    })
}

/// A query prepared for scanning many passages.
///
/// The query is stored transposed so the inner loop runs across query rows
/// while each row's dot product still accumulates in dimension order; scores
/// are bit-identical to [`maxsim`].
#[derive(Debug, Clone)]
pub struct QueryKernel {
    rows: usize,
    dim: usize,
    transposed: Vec<f64>,
}

impl QueryKernel {
    pub fn new(q: MatrixRef<'_, f32>) -> Self {
        let (rows, dim) = (q.rows(), q.dim());
        let mut transposed = vec![0.0; rows * dim];
        for i in 0..rows {
            for (k, &v) in q.row(i).iter().enumerate() {
                transposed[k * rows + i] = f64::from(v);
            }
        }
        Self {
            rows,
            dim,
            transposed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dot products of every query row with `vector`, written into `out`.
    #[inline]
    pub fn row_dots(&self, vector: &[f32], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &x) in vector.iter().enumerate() {
            let x = f64::from(x);
            let col = &self.transposed[k * self.rows..(k + 1) * self.rows];
            for (acc, &c) in out.iter_mut().zip(col) {
                *acc += c * x;
            }
        }
    }

    /// Score against a row-major passage matrix of this kernel's dimension.
    /// `doc` must hold at least one row.
    pub fn score(&self, doc: &[f32]) -> f64 {
        debug_assert!(!doc.is_empty() && doc.len().is_multiple_of(self.dim));
        let mut best = vec![f64::NEG_INFINITY; self.rows];
        let mut dots = vec![0.0; self.rows];
        for row in doc.chunks_exact(self.dim) {
            self.row_dots(row, &mut dots);
            for (b, &s) in best.iter_mut().zip(&dots) {
                if s > *b {
                    *b = s;
                }
            }
        }
        best.iter().sum::<f64>()
    }
}
