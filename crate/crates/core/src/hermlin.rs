//! Hermitian block-matrix utilities: eigenvalue ratios, rank-1 factors, the
//! rank-1 extension results used by the recovery step and the real embedding
//! consumed by real-valued conic solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HermError {
    #[error("matrix is not Hermitian (asymmetry {0:.3e})")]
    NotHermitian(f64),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("rank exceeds one: eigenvalue ratio {ratio:.3e} > tolerance {tol:.1e}")]
    RankTooHigh { ratio: f64, tol: f64 },
    #[error("zero vector where a nonzero one is required")]
    ZeroVector,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Relative asymmetry accepted as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-9;
/// Leading eigenvalues closer than this (relative) count as a tie.
pub const TIE_TOL: f64 = 1e-12;

fn frob(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn check_hermitian(m: &DMatrix<C64>) -> Result<(), HermError> {
    if m.nrows() != m.ncols() {
        return Err(HermError::NotSquare(m.nrows(), m.ncols()));
    }
    let asym = frob(&(m - m.adjoint()));
    let scale = frob(m);
    if asym > HERMITIAN_TOL * scale {
        return Err(HermError::NotHermitian(asym / scale.max(f64::MIN_POSITIVE)));
    }
    Ok(())
}

/// Eigenvalues in descending order with matching unit eigenvectors.
pub fn hermitian_eig(m: &DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>), HermError> {
    check_hermitian(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((vals, vecs))
}

pub fn min_eig(m: &DMatrix<C64>) -> Result<f64, HermError> {
    Ok(hermitian_eig(m)?.0.last().copied().unwrap_or(0.0))
}

/// `lambda_2 / lambda_1` of a PSD Hermitian matrix; 0 for the zero matrix and
/// for 1x1 inputs, 1 when the two leading eigenvalues tie.
pub fn eig_ratio(m: &DMatrix<C64>) -> Result<f64, HermError> {
    let (vals, _) = hermitian_eig(m)?;
    if vals.len() < 2 || vals[0] <= 0.0 {
        return Ok(0.0);
    }
    if vals[0] - vals[1] <= TIE_TOL * vals[0].abs() {
        return Ok(1.0);
    }
    Ok(vals[1].max(0.0) / vals[0])
}

/// `x` with `m = x x^H`, scaled by the square root of the top eigenvalue.
pub fn rank1_factor(m: &DMatrix<C64>, rank_tol: f64) -> Result<DVector<C64>, HermError> {
    let ratio = eig_ratio(m)?;
    if ratio > rank_tol {
        return Err(HermError::RankTooHigh { ratio, tol: rank_tol });
    }
    let (vals, vecs) = hermitian_eig(m)?;
    if vals.is_empty() || vals[0] <= 0.0 {
        return Ok(DVector::zeros(m.nrows()));
    }
    Ok(vecs.column(0) * C64::new(vals[0].sqrt(), 0.0))
}

/// The unique `y` with `B = x y^H` when `[[x x^H, B], [B^H, C]]` is PSD:
/// `y = B^H x / (x^H x)`.
pub fn lemma1_extract(x: &DVector<C64>, b: &DMatrix<C64>) -> Result<DVector<C64>, HermError> {
    if b.nrows() != x.len() {
        return Err(HermError::Dimension(format!("x has {} rows, B has {}", x.len(), b.nrows())));
    }
    let nx = x.norm_squared();
    if nx == 0.0 {
        return Err(HermError::ZeroVector);
    }
    Ok(b.adjoint() * x / C64::new(nx, 0.0))
}

/// Minimum-trace `C` making `[[x x^H, x y^H], [y x^H, C]]` PSD, namely `y y^H`.
pub fn min_trace_completion(x: &DVector<C64>, y: &DVector<C64>) -> DMatrix<C64> {
    debug_assert!(x.norm_squared() > 0.0);
    y * y.adjoint()
}

/// Pseudo-inverse of a Hermitian PSD matrix, dropping eigenvalues below
/// `rtol * lambda_max`.
pub fn pinv_hermitian(m: &DMatrix<C64>, rtol: f64) -> Result<DMatrix<C64>, HermError> {
    let (vals, vecs) = hermitian_eig(m)?;
    let n = m.nrows();
    let top = vals.first().copied().unwrap_or(0.0).abs();
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in vals.iter().enumerate() {
        if l.abs() > rtol * top && l.abs() > 0.0 {
            let u = vecs.column(k);
            out += u * u.adjoint() / C64::new(l, 0.0);
        }
    }
    Ok(out)
}

/// Real symmetric embedding `[[Re M, -Im M], [Im M, Re M]]`.
///
/// Each eigenvalue of `M` appears twice; `M` is PSD iff the embedding is.
pub fn herm_to_real(m: &DMatrix<C64>) -> Result<DMatrix<f64>, HermError> {
    check_hermitian(m)?;
    let n = m.nrows();
    Ok(DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let v = m[(r % n, c % n)];
        match (r < n, c < n) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    }))
}

/// Hermitian matrix in 2x2 block form `[[A, B], [B^H, C]]`.
#[derive(Clone, Debug)]
pub struct HermBlockMatrix {
    pub a: DMatrix<C64>,
    pub b: DMatrix<C64>,
    pub c: DMatrix<C64>,
}

impl HermBlockMatrix {
    pub fn new(a: DMatrix<C64>, b: DMatrix<C64>, c: DMatrix<C64>) -> Result<Self, HermError> {
        if a.nrows() != b.nrows() || c.nrows() != b.ncols() {
            return Err(HermError::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        check_hermitian(&a)?;
        check_hermitian(&c)?;
        Ok(HermBlockMatrix { a, b, c })
    }

    pub fn assemble(&self) -> DMatrix<C64> {
        let (n, k) = (self.a.nrows(), self.c.nrows());
        let mut m = DMatrix::zeros(n + k, n + k);
        m.view_mut((0, 0), (n, n)).copy_from(&self.a);
        m.view_mut((0, n), (n, k)).copy_from(&self.b);
        m.view_mut((n, 0), (k, n)).copy_from(&self.b.adjoint());
        m.view_mut((n, n), (k, k)).copy_from(&self.c);
        m
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        let m = self.assemble();
        let scale = frob(&m).max(1.0);
        min_eig(&m).map(|l| l >= -tol * scale).unwrap_or(false)
    }
}

/// Singular values of a complex matrix, descending.
pub fn singular_values(m: &DMatrix<C64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// A PSD block matrix whose `A` block is nearly rank-1 (eigenvalue ratio
/// `1e-8`) while `B` is far from rank-1 (singular values all 1).
///
/// `M1 = [x, e1, e2]` and `M2 = [y, z1, z2]` have orthogonal columns with norms
/// `(1, 1e-4, 1e-5)` and `(1, 1e4, 1e5)`; the matrix is `[M1; M2][M1; M2]^H`.
pub fn remark1_example() -> HermBlockMatrix {
    let u = dft_unitary(3);
    let v = {
        // A second unitary, unrelated to the first.
        let phases = [0.3, -1.1, 2.0];
        let d = DMatrix::from_fn(3, 3, |r, c| if r == c { C64::from_polar(1.0, phases[r]) } else { C64::new(0.0, 0.0) });
        d * dft_unitary(3).adjoint()
    };
    let scale = |q: &DMatrix<C64>, norms: [f64; 3]| {
        DMatrix::from_fn(3, 3, |r, c| q[(r, c)] * norms[c])
    };
    let m1 = scale(&u, [1.0, 1e-4, 1e-5]);
    let m2 = scale(&v, [1.0, 1e4, 1e5]);
    HermBlockMatrix {
        a: &m1 * m1.adjoint(),
        b: &m1 * m2.adjoint(),
        c: &m2 * m2.adjoint(),
    }
}

fn dft_unitary(n: usize) -> DMatrix<C64> {
    let w = 2.0 * std::f64::consts::PI / n as f64;
    DMatrix::from_fn(n, n, |r, c| C64::from_polar(1.0 / (n as f64).sqrt(), w * (r * c) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn diag(v: &[f64]) -> DMatrix<C64> {
        DMatrix::from_fn(v.len(), v.len(), |r, k| if r == k { c(v[r], 0.0) } else { c(0.0, 0.0) })
    }

    #[test]
    fn eig_ratio_examples() {
        assert!((eig_ratio(&diag(&[1.0, 1e-8, 0.0])).unwrap() - 1e-8).abs() < 1e-20);
        assert_eq!(eig_ratio(&diag(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(eig_ratio(&diag(&[2.0, 2.0, 1.0])).unwrap(), 1.0);
        assert_eq!(eig_ratio(&diag(&[3.0])).unwrap(), 0.0);
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = diag(&[1.0, 1.0]);
        m[(0, 1)] = c(0.0, 1.0);
        assert!(matches!(eig_ratio(&m), Err(HermError::NotHermitian(_))));
        assert!(matches!(herm_to_real(&m), Err(HermError::NotHermitian(_))));
    }

    #[test]
    fn rank1_factor_reproduces() {
        let x = DVector::from_vec(vec![c(1.0, 0.5), c(-0.3, 0.2), c(0.0, -2.0)]);
        let m = &x * x.adjoint();
        let f = rank1_factor(&m, 1e-9).unwrap();
        assert!((&f * f.adjoint() - &m).norm() < 1e-12);
        let bad = diag(&[1.0, 0.5]);
        assert!(matches!(rank1_factor(&bad, 1e-5), Err(HermError::RankTooHigh { .. })));
    }

    #[test]
    fn lemma1_zero_vector() {
        let x = DVector::from_vec(vec![c(0.0, 0.0), c(0.0, 0.0)]);
        let b = DMatrix::from_element(2, 1, c(1.0, 0.0));
        assert_eq!(lemma1_extract(&x, &b), Err(HermError::ZeroVector));
    }

    #[test]
    fn remark1_values() {
        let m = remark1_example();
        let r = eig_ratio(&m.a).unwrap();
        assert!((r - 1e-8).abs() < 1e-12);
        for s in singular_values(&m.b) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pinv_of_rank1() {
        let x = DVector::from_vec(vec![c(1.0, 1.0), c(2.0, 0.0)]);
        let m = &x * x.adjoint();
        let p = pinv_hermitian(&m, 1e-12).unwrap();
        assert!((&m * &p * &m - &m).norm() < 1e-12);
    }

    fn cplx_vec(n: usize) -> impl Strategy<Value = DVector<C64>> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n)
            .prop_map(|v| DVector::from_iterator(v.len(), v.into_iter().map(|(a, b)| c(a, b))))
    }

    fn herm(n: usize) -> impl Strategy<Value = DMatrix<C64>> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n).prop_map(move |v| {
            let g = DMatrix::from_iterator(n, n, v.into_iter().map(|(a, b)| c(a, b)));
            &g * g.adjoint()
        })
    }

    proptest! {
        #[test]
        fn real_embedding_doubles_spectrum(m in herm(3)) {
            let (vals, _) = hermitian_eig(&m).unwrap();
            let r = herm_to_real(&m).unwrap();
            let mut rv: Vec<f64> = r.symmetric_eigen().eigenvalues.iter().copied().collect();
            rv.sort_by(|a, b| b.total_cmp(a));
            for (k, v) in vals.iter().enumerate() {
                prop_assert!((rv[2 * k] - v).abs() < 1e-10);
                prop_assert!((rv[2 * k + 1] - v).abs() < 1e-10);
            }
        }

        #[test]
        fn completion_is_psd_and_rank1(x in cplx_vec(3), y in cplx_vec(2)) {
            prop_assume!(x.norm() > 1e-3);
            let blk = HermBlockMatrix::new(&x * x.adjoint(), &x * y.adjoint(), min_trace_completion(&x, &y)).unwrap();
            let m = blk.assemble();
            prop_assert!(blk.is_psd(1e-12));
            prop_assert!(eig_ratio(&m).unwrap() < 1e-12);
        }

        #[test]
        fn lemma1_recovers_the_off_diagonal_factor(x in cplx_vec(3), y in cplx_vec(3), k in herm(3)) {
            prop_assume!(x.norm() > 1e-2);
            let blk = HermBlockMatrix::new(&x * x.adjoint(), &x * y.adjoint(), &y * y.adjoint() + &k * k.adjoint()).unwrap();
            prop_assert!(blk.is_psd(1e-12));
            let got = lemma1_extract(&x, &blk.b).unwrap();
            prop_assert!((&got - &y).norm() < 1e-9 * (1.0 + y.norm()) / x.norm());
        }

        #[test]
        fn psd_completions_cost_at_least_the_minimum(x in cplx_vec(3), y in cplx_vec(2), h in herm(2)) {
            prop_assume!(x.norm() > 1e-2);
            let c0 = min_trace_completion(&x, &y);
            let blk = HermBlockMatrix::new(&x * x.adjoint(), &x * y.adjoint(), &c0 + &h).unwrap();
            if blk.is_psd(0.0) {
                prop_assert!(h.trace().re >= -1e-12);
            }
        }

        #[test]
        fn eig_ratio_in_unit_interval(m in herm(4)) {
            let r = eig_ratio(&m).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
