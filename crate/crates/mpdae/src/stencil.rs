//! Periodic finite-difference stencils and their circulant matrix form.
//!
//! The fast time scale lives on the unit interval with lines
//! `t_{2,i} = (i-1)h`, `i = 1..m`, `h = 1/m`. A difference formula
//! `D_i(v) = (1/h) * sum_j alpha_j v_{i+j}` approximates the first derivative
//! at line `i`, with indices wrapped by the 1-periodicity `v_{j+m} = v_j`.
//! Applied to all lines simultaneously it is a circulant matrix `S`; for
//! vector-valued lines stacked line-major the lifted operator is the
//! Kronecker product `S (x) I_n`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Coefficients `alpha_{-q}..alpha_p` of a periodic difference formula.
///
/// The `1/h` factor is applied at evaluation time, so a stencil is
/// independent of the line count.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceStencil {
    coeffs: Vec<f64>,
    q: usize,
    p: usize,
    order: usize,
}

impl DifferenceStencil {
    /// Backward differentiation formula of order one:
    /// `D_i = (1/h)(v_i - v_{i-1})`.
    pub fn bdf1() -> Self {
        Self {
            coeffs: vec![-1.0, 1.0],
            q: 1,
            p: 0,
            order: 1,
        }
    }

    /// Backward differentiation formula of order two:
    /// `D_i = (1/h)(3/2 v_i - 2 v_{i-1} + 1/2 v_{i-2})`.
    pub fn bdf2() -> Self {
        Self {
            coeffs: vec![0.5, -2.0, 1.5],
            q: 2,
            p: 0,
            order: 2,
        }
    }

    /// Coefficients in offset order `alpha_{-q}, ..., alpha_p`.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Number of trailing lines entering the formula.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of leading lines entering the formula.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Convergence order on smooth 1-periodic functions.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Stencil width `q + p + 1`.
    pub fn width(&self) -> usize {
        self.q + self.p + 1
    }

    /// Offsets and coefficients `(j, alpha_j)` for `j = -q..=p`.
    pub fn terms(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        let q = self.q as isize;
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(idx, &a)| (idx as isize - q, a))
    }

    /// Applies the formula at line `line` (0-based) to `values`, an `m x n`
    /// array whose rows are the per-line vectors. Returns the length-`n`
    /// difference `D(values)` at that line, with `h = 1/m` and periodic
    /// wrap-around of the line index.
    pub fn apply(&self, values: ArrayView2<'_, f64>, line: usize) -> Array1<f64> {
        let m = values.nrows();
        assert!(line < m, "line index {line} out of range for m = {m}");
        let inv_h = m as f64;
        let mut out = Array1::zeros(values.ncols());
        for (offset, alpha) in self.terms() {
            let row = wrap(line as isize + offset, m);
            out.scaled_add(alpha * inv_h, &values.row(row));
        }
        out
    }

    /// Materialises the `m x m` circulant matrix `S` with
    /// `S[i][(i+j) mod m] = alpha_j / h`.
    ///
    /// Requires `m > q + p` so that distinct offsets hit distinct columns.
    pub fn build_matrix(&self, m: usize) -> Result<CirculantOperator> {
        if m <= self.q + self.p {
            return Err(Error::InvalidParameter(format!(
                "m = {m} too small for stencil width {} (need m > q + p = {})",
                self.width(),
                self.q + self.p
            )));
        }
        let inv_h = m as f64;
        let mut s = Array2::zeros((m, m));
        for i in 0..m {
            for (offset, alpha) in self.terms() {
                s[[i, wrap(i as isize + offset, m)]] = alpha * inv_h;
            }
        }
        Ok(CirculantOperator {
            stencil: self.clone(),
            m,
            matrix: s,
        })
    }
}

fn wrap(index: isize, m: usize) -> usize {
    index.rem_euclid(m as isize) as usize
}

/// A difference stencil instantiated on `m` lines: the circulant matrix `S`
/// plus the action of its Kronecker lifts `S (x) I_n` on stacked vectors.
///
/// The lifts act on the project-wide line-major layout: entry `(i, c)` of an
/// `m`-line grid with `n` components sits at flat position `i*n + c`. Lifted
/// matrices are materialised on demand; most consumers use [`apply_lifted`]
/// (matrix-free).
///
/// [`apply_lifted`]: CirculantOperator::apply_lifted
#[derive(Debug, Clone)]
pub struct CirculantOperator {
    stencil: DifferenceStencil,
    m: usize,
    matrix: Array2<f64>,
}

impl CirculantOperator {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn stencil(&self) -> &DifferenceStencil {
        &self.stencil
    }

    /// The dense `m x m` matrix `S` (the `1/h` factor included).
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Action of `S (x) I_n` on a stacked vector of length `m*n`.
    pub fn apply_lifted(&self, stacked: &[f64], n: usize) -> Array1<f64> {
        assert_eq!(
            stacked.len(),
            self.m * n,
            "stacked vector length {} does not match m*n = {}",
            stacked.len(),
            self.m * n
        );
        let inv_h = self.m as f64;
        let mut out = Array1::zeros(self.m * n);
        for i in 0..self.m {
            for (offset, alpha) in self.stencil.terms() {
                let src = wrap(i as isize + offset, self.m) * n;
                let scale = alpha * inv_h;
                for c in 0..n {
                    out[i * n + c] += scale * stacked[src + c];
                }
            }
        }
        out
    }

    /// Action of `S^T (x) I_n` on a stacked vector of length `m*n`.
    pub fn apply_lifted_transposed(&self, stacked: &[f64], n: usize) -> Array1<f64> {
        assert_eq!(
            stacked.len(),
            self.m * n,
            "stacked vector length {} does not match m*n = {}",
            stacked.len(),
            self.m * n
        );
        let inv_h = self.m as f64;
        let mut out = Array1::zeros(self.m * n);
        for i in 0..self.m {
            for (offset, alpha) in self.stencil.terms() {
                let src = wrap(i as isize - offset, self.m) * n;
                let scale = alpha * inv_h;
                for c in 0..n {
                    out[i * n + c] += scale * stacked[src + c];
                }
            }
        }
        out
    }

    /// Materialises `S (x) I_n` as a dense `(m*n) x (m*n)` matrix.
    pub fn lifted_matrix(&self, n: usize) -> Array2<f64> {
        let dim = self.m * n;
        let mut out = Array2::zeros((dim, dim));
        for i in 0..self.m {
            for (offset, alpha) in self.stencil.terms() {
                let jcol = wrap(i as isize + offset, self.m);
                let scale = alpha * self.m as f64;
                for c in 0..n {
                    out[[i * n + c, jcol * n + c]] = scale;
                }
            }
        }
        out
    }
}
