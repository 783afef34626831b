//! Dense matrices, flattened gradient vectors and rank-r factorization by
//! subspace (power) iteration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CongradError, Result};
use crate::seed;

/// Cosines against vectors shorter than this are reported as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Columns whose residual drops below this during orthonormalization are
/// replaced by fresh random directions.
const ORTHO_TOL: f64 = 1e-10;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CongradError::invalid(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CongradError::ShapeMismatch {
                expected: format!("{} entries for {rows}x{cols}", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CongradError::invalid("matrix contains non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Standard normal entries from a seeded generator.
    pub fn random_normal(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(x, y)| *x += a * y);
    }

    pub fn transpose(&self) -> DenseMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out.data,
        );
        out
    }
}

/// `c = a · b` where `a` is m×k and `b` is k×n, each given with (row, col) strides.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m×k) and `b` (k×n),
    // and `c` is an exclusively borrowed row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Whole-model gradient: matrices concatenated row-major in parameter
/// registration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CongradError::invalid("flat vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CongradError::invalid("flat vector contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0);
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &FlatVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, s: f64) -> FlatVector {
        FlatVector(self.0.iter().map(|v| v * s).collect())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &FlatVector) {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter_mut().zip(&other.0).for_each(|(x, y)| *x += a * y);
    }
}

impl std::ops::Index<usize> for FlatVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with an explicit degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the inputs had norm below [`DEGENERATE_NORM`]; `value` is 0.
    pub degenerate: bool,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Cosine {
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub fn cosine_flat(a: &FlatVector, b: &FlatVector) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(CongradError::ShapeMismatch {
            expected: format!("length {}", a.len()),
            got: format!("length {}", b.len()),
        });
    }
    Ok(cosine(a.as_slice(), b.as_slice()))
}

pub fn flatten_concat(matrices: &[DenseMatrix]) -> Result<FlatVector> {
    if matrices.is_empty() {
        return Err(CongradError::invalid("cannot flatten an empty matrix list"));
    }
    let total = matrices.iter().map(DenseMatrix::len).sum();
    let mut out = Vec::with_capacity(total);
    for m in matrices {
        out.extend_from_slice(m.as_slice());
    }
    Ok(FlatVector(out))
}

/// Split a flat vector back into matrices of the given shapes.
pub fn unflatten(flat: &FlatVector, shapes: &[(usize, usize)]) -> Result<Vec<DenseMatrix>> {
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if total != flat.len() {
        return Err(CongradError::ShapeMismatch {
            expected: format!("length {total}"),
            got: format!("length {}", flat.len()),
        });
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = DenseMatrix::new(r, c, flat.as_slice()[offset..offset + r * c].to_vec());
            offset += r * c;
            m
        })
        .collect()
}

/// Rank-r factor pair approximating a matrix as `P · Qᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    p: DenseMatrix,
    q: DenseMatrix,
}

impl LowRankFactors {
    pub fn new(p: DenseMatrix, q: DenseMatrix) -> Result<Self> {
        let rank = p.cols();
        if q.cols() != rank {
            return Err(CongradError::ShapeMismatch {
                expected: format!("Q with {rank} columns"),
                got: format!("{} columns", q.cols()),
            });
        }
        if rank > p.rows().min(q.rows()) {
            return Err(CongradError::InvalidRank {
                rank,
                rows: p.rows(),
                cols: q.rows(),
            });
        }
        if !p.is_finite() || !q.is_finite() {
            return Err(CongradError::invalid("factors contain non-finite entries"));
        }
        Ok(Self { p, q })
    }

    /// Factors of the n×m zero matrix.
    pub fn zeros(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        check_rank(rank, rows, cols)?;
        Ok(Self {
            p: DenseMatrix::zeros(rows, rank),
            q: DenseMatrix::zeros(cols, rank),
        })
    }

    pub fn p(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn q(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn rank(&self) -> usize {
        self.p.cols()
    }

    /// Shape of the reconstructed matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.p.rows(), self.q.rows())
    }

    /// Number of stored scalars.
    pub fn storage_len(&self) -> usize {
        self.p.len() + self.q.len()
    }
}

fn check_rank(rank: usize, rows: usize, cols: usize) -> Result<()> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(CongradError::InvalidRank { rank, rows, cols });
    }
    Ok(())
}

pub fn reconstruct(f: &LowRankFactors) -> DenseMatrix {
    f.p.matmul_t(&f.q)
}

/// Rank-`rank` factors of `m` by subspace iteration.
///
/// `Q` starts as a seeded standard normal m×r matrix; each iteration computes
/// `P ← orth(M Q)` then `Q ← orth(Mᵀ P)`. The returned `P` is `M Q`, so the
/// reconstruction `P Qᵀ` is the projection of `M` onto the span of `Q`.
pub fn power_iterate(m: &DenseMatrix, rank: usize, iters: usize, seed: u64) -> Result<LowRankFactors> {
    check_rank(rank, m.rows(), m.cols())?;
    if iters == 0 {
        return Err(CongradError::invalid("power iteration needs at least one iteration"));
    }
    if !m.is_finite() {
        return Err(CongradError::invalid("matrix contains non-finite entries"));
    }
    let mut rng = seed::rng(seed);
    let mut q = DenseMatrix::from_fn(m.cols(), rank, |_, _| rng.sample(StandardNormal));
    for _ in 0..iters {
        let mut p = m.matmul(&q);
        orthonormalize_columns(&mut p, &mut rng);
        q = m.t_matmul(&p);
        orthonormalize_columns(&mut q, &mut rng);
    }
    let p = m.matmul(&q);
    Ok(LowRankFactors { p, q })
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Columns that
/// collapse below [`ORTHO_TOL`] are replaced with random directions.
fn orthonormalize_columns<R: Rng>(mat: &mut DenseMatrix, rng: &mut R) {
    let (n, r) = mat.shape();
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| (0..n).map(|i| mat.get(i, j)).collect()).collect();

    for j in 0..r {
        let mut attempts = 0;
        loop {
            let before = norm(&cols[j]);
            let (done, rest) = cols.split_at_mut(j);
            let col = &mut rest[0];
            for _ in 0..2 {
                for prev in done.iter() {
                    let d = dot(prev, col);
                    col.iter_mut().zip(prev).for_each(|(c, p)| *c -= d * p);
                }
            }
            let nrm = norm(col);
            if nrm >= ORTHO_TOL && nrm >= ORTHO_TOL * before {
                col.iter_mut().for_each(|c| *c /= nrm);
                break;
            }
            attempts += 1;
            assert!(attempts < 64, "failed to complete an orthonormal basis");
            col.iter_mut().for_each(|c| *c = rng.sample(StandardNormal));
        }
    }

    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            mat.set(i, j, *v);
        }
    }
}
