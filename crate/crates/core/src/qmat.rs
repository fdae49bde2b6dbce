//! Small dense complex matrices (2x2 and 4x4) and the density-matrix type.
//!
//! The two-qubit basis is ordered `HH, HV, VH, VV` everywhere in the crate,
//! with `H` the first (index 0) single-qubit basis state.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tol;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Largest dimension used anywhere in the crate.
pub const MAX_DIM: usize = 4;

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:>10.6}{:+.6}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: format!("{} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a square real matrix from row-major entries. Panics on a non-square length.
    pub fn from_real(n: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), n * n, "from_real needs n*n entries");
        Self {
            rows: n,
            cols: n,
            data: data.iter().map(|&x| C64::new(x, 0.0)).collect(),
        }
    }

    pub fn diag(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn diag_real(values: &[f64]) -> Self {
        let v: Vec<C64> = values.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::diag(&v)
    }

    /// `|ket><bra|`.
    pub fn outer(ket: &[C64], bra: &[C64]) -> Self {
        let mut m = Self::zeros(ket.len(), bra.len());
        for (r, k) in ket.iter().enumerate() {
            for (c, b) in bra.iter().enumerate() {
                m[(r, c)] = k * b.conj();
            }
        }
        m
    }

    /// Single basis element `|row><col|` of an `n`-dimensional space.
    pub fn unit(n: usize, row: usize, col: usize) -> Self {
        let mut m = Self::zeros(n, n);
        m[(row, col)] = ONE;
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn entries(&self) -> &[C64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m[(c, r)] = self[(r, c)].conj();
            }
        }
        m
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m[(c, r)] = self[(r, c)];
            }
        }
        m
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `max |M - M^dagger|` over entries.
    pub fn hermiticity_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    /// `(M + M^dagger) / 2`.
    pub fn hermitian_part(&self) -> Self {
        (self + &self.adjoint()).scale_real(0.5)
    }

    /// Largest entry-wise deviation from another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `U M U^dagger`.
    pub fn conjugate_by(&self, u: &Self) -> Self {
        &(u * self) * &u.adjoint()
    }

    /// Column `c` as a vector.
    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)] * v[c]).sum())
            .collect()
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                expected: "square matrix".into(),
                found: format!("{}x{}", self.rows, self.cols),
            });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].norm().total_cmp(&a[(j, col)].norm()))
                .unwrap_or(col);
            if a[(pivot, col)].norm() <= 1e-14 * scale {
                return Err(Error::Unphysical(
                    "singular matrix cannot be inverted".into(),
                ));
            }
            if pivot != col {
                for k in 0..n {
                    a.data.swap(pivot * n + k, col * n + k);
                    inv.data.swap(pivot * n + k, col * n + k);
                }
            }
            let p = a[(col, col)];
            for k in 0..n {
                a[(col, k)] /= p;
                inv[(col, k)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[(r, col)];
                    if f != ZERO {
                        for k in 0..n {
                            let (ack, ick) = (a[(col, k)], inv[(col, k)]);
                            a[(r, k)] -= f * ack;
                            inv[(r, k)] -= f * ick;
                        }
                    }
                }
            }
        }
        Ok(inv)
    }

    fn check_same_shape(&self, other: &Self) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "matrix shapes differ"
        );
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut m = ComplexMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == ZERO {
                    continue;
                }
                for c in 0..rhs.cols {
                    m[(r, c)] += a * rhs[(k, c)];
                }
            }
        }
        m
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.check_same_shape(rhs);
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.check_same_shape(rhs);
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

pub fn pauli_x() -> ComplexMatrix {
    ComplexMatrix::from_real(2, &[0.0, 1.0, 1.0, 0.0])
}

pub fn pauli_y() -> ComplexMatrix {
    ComplexMatrix::from_vec(2, 2, vec![ZERO, -I, I, ZERO]).expect("2x2")
}

pub fn pauli_z() -> ComplexMatrix {
    ComplexMatrix::from_real(2, &[1.0, 0.0, 0.0, -1.0])
}

/// `sigma_y (x) sigma_y`, the spin-flip used by the Wootters construction.
pub fn spin_flip() -> ComplexMatrix {
    let y = pauli_y();
    kron(&y, &y).expect("4x4")
}

/// Kronecker product, restricted to results no larger than 4x4.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    if rows > MAX_DIM || cols > MAX_DIM {
        return Err(Error::DimensionOverflow { rows, cols });
    }
    let mut m = ComplexMatrix::zeros(rows, cols);
    for ar in 0..a.rows {
        for ac in 0..a.cols {
            let x = a[(ar, ac)];
            for br in 0..b.rows {
                for bc in 0..b.cols {
                    m[(ar * b.rows + br, ac * b.cols + bc)] = x * b[(br, bc)];
                }
            }
        }
    }
    Ok(m)
}

/// Eigen-decomposition of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct HermEig {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in the order of `values`.
    pub vectors: ComplexMatrix,
}

impl HermEig {
    /// `V f(diag) V^dagger`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ComplexMatrix {
        let d: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        let mid = ComplexMatrix::diag_real(&d);
        &(&self.vectors * &mid) * &self.vectors.adjoint()
    }
}

/// Cyclic complex Jacobi eigensolver for Hermitian matrices.
pub fn herm_eig(m: &ComplexMatrix) -> Result<HermEig> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: "square matrix".into(),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let herm_err = m.hermiticity_error();
    if herm_err > tol::HERMITIAN_INPUT {
        return Err(Error::NotHermitian { norm: herm_err });
    }
    let n = m.rows();
    let mut a = m.hermitian_part();
    let mut v = ComplexMatrix::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-16 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let mag = apq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let phase = apq / mag;
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let theta = (aqq - app) / (2.0 * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // U = diag-phase on q followed by a real rotation in (p, q).
                let mut u = ComplexMatrix::identity(n);
                u[(p, p)] = C64::new(c, 0.0);
                u[(p, q)] = C64::new(s, 0.0);
                u[(q, p)] = -s * phase.conj();
                u[(q, q)] = c * phase.conj();
                a = &(&u.adjoint() * &a) * &u;
                v = &v * &u;
                a[(p, q)] = ZERO;
                a[(q, p)] = ZERO;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.total_cmp(&a[(i, i)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let mut vectors = ComplexMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)];
        }
    }
    Ok(HermEig { values, vectors })
}

/// Principal square root of a Hermitian PSD matrix.
pub fn psd_sqrt(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    let eig = herm_eig(m)?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min < -tol::PSD_SLACK {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    // Eigenvalues within roundoff of zero would otherwise leak ~1e-8 into the root.
    let floor = 1e-14 * eig.values[0].abs().max(f64::MIN_POSITIVE);
    Ok(eig.map(|x| if x <= floor { 0.0 } else { x.sqrt() }))
}

/// Two-qubit density matrix: 4x4, Hermitian, PSD, trace in (0, 1].
///
/// A trace below one marks the output of a trace-decreasing (post-selected) channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ComplexMatrix", into = "ComplexMatrix")]
pub struct DensityMatrix {
    m: ComplexMatrix,
}

impl DensityMatrix {
    /// Validates and wraps a 4x4 matrix. Tiny anti-Hermitian noise is removed.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if m.rows() != 4 || m.cols() != 4 {
            return Err(Error::DimensionMismatch {
                expected: "4x4".into(),
                found: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        let herm_err = m.hermiticity_error();
        if herm_err > tol::ALGEBRAIC {
            return Err(Error::NotHermitian { norm: herm_err });
        }
        let m = m.hermitian_part();
        let trace = m.trace().re;
        if !(trace > 0.0 && trace <= 1.0 + tol::ALGEBRAIC) {
            return Err(Error::InvalidTrace { trace });
        }
        let eig = herm_eig(&m)?;
        let min = eig.values[3];
        if min < -tol::PSD_SLACK {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
            });
        }
        Ok(Self { m })
    }

    /// Projector onto a (not necessarily normalized) state vector.
    pub fn from_pure(psi: &[C64]) -> Result<Self> {
        if psi.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: "4 amplitudes".into(),
                found: format!("{}", psi.len()),
            });
        }
        Self::new(ComplexMatrix::outer(psi, psi))
    }

    pub fn maximally_mixed() -> Self {
        Self {
            m: ComplexMatrix::identity(4).scale_real(0.25),
        }
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn is_normalized(&self) -> bool {
        (self.trace() - 1.0).abs() <= 1e-10
    }

    /// Entry `<row| rho |col>`.
    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.m[(row, col)]
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        herm_eig(&self.m).map(|e| e.values).unwrap_or_default()
    }

    /// `U rho U^dagger` for a unitary `U`.
    pub fn unitary(&self, u: &ComplexMatrix) -> Result<Self> {
        Self::new(self.m.conjugate_by(u))
    }
}

impl TryFrom<ComplexMatrix> for DensityMatrix {
    type Error = Error;
    fn try_from(m: ComplexMatrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<DensityMatrix> for ComplexMatrix {
    fn from(d: DensityMatrix) -> Self {
        d.m
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random_matrix(rng: &mut impl Rng, n: usize) -> ComplexMatrix {
        let data = (0..n * n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexMatrix::from_vec(n, n, data).unwrap()
    }

    pub fn random_hermitian(rng: &mut impl Rng, n: usize) -> ComplexMatrix {
        random_matrix(rng, n).hermitian_part()
    }

    /// `A A^dagger / tr`, a full-rank random density matrix.
    pub fn random_density(rng: &mut impl Rng) -> DensityMatrix {
        let a = random_matrix(rng, 4);
        let m = &a * &a.adjoint();
        let t = m.trace().re;
        DensityMatrix::new(m.scale_real(1.0 / t)).unwrap()
    }

    pub fn random_unitary_2(rng: &mut impl Rng) -> ComplexMatrix {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let b: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let c: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let t: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
        let e = |x: f64| C64::from_polar(1.0, x);
        ComplexMatrix::from_vec(
            2,
            2,
            vec![
                e(a) * t.cos(),
                e(b) * t.sin(),
                -e(c - b + a) * t.sin(),
                e(c) * t.cos(),
            ],
        )
        .unwrap()
    }
}
