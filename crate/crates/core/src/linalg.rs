//! Dense complex linear algebra helpers on top of nalgebra.
//!
//! Everything here works on `DMatrix<Complex<f64>>`. Hermitian routines
//! symmetrize their input first so that rounding-level asymmetry never
//! leaks into an eigen solve or a Cholesky factorization.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type RMat = DMatrix<f64>;

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(rows: usize, cols: usize) -> CMat {
    CMat::zeros(rows, cols)
}

/// `(M + Mᴴ) / 2`.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()) * c64(0.5, 0.0)
}

/// Relative asymmetry `‖M − Mᴴ‖_F / max(1, ‖M‖_F)`.
pub fn asymmetry(m: &CMat) -> f64 {
    (m - m.adjoint()).norm() / m.norm().max(1.0)
}

pub fn ensure_hermitian(m: &CMat, tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let a = asymmetry(m);
    if a > tol || !a.is_finite() {
        return Err(Error::NotHermitian(a));
    }
    Ok(())
}

pub fn trace_re(m: &CMat) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Real matrix lifted to complex.
pub fn complexify(m: &RMat) -> CMat {
    m.map(|x| c64(x, 0.0))
}

/// `diag(d)` as a complex matrix.
pub fn diag(d: &[f64]) -> CMat {
    let mut out = zeros(d.len(), d.len());
    for (i, &x) in d.iter().enumerate() {
        out[(i, i)] = c64(x, 0.0);
    }
    out
}

/// `Q · diag(d) · Qᴴ`.
pub fn sandwich_diag(q: &CMat, d: &[f64]) -> CMat {
    let mut scaled = q.clone();
    for (j, &x) in d.iter().enumerate() {
        scaled.column_mut(j).scale_mut(x);
    }
    hermitian_part(&(scaled * q.adjoint()))
}

/// `diag(Qᴴ · C · Q)`, real part; `C` is assumed Hermitian.
pub fn quadratic_diag(q: &CMat, c: &CMat) -> Vec<f64> {
    let cq = c * q;
    (0..q.ncols())
        .map(|j| {
            q.column(j)
                .iter()
                .zip(cq.column(j).iter())
                .map(|(a, b)| (a.conj() * b).re)
                .sum()
        })
        .collect()
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues in
/// ascending order.
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

pub fn hermitian_eigen(m: &CMat) -> HermitianEigen {
    let h = hermitian_part(m);
    let eig = h.symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n = m.nrows();
    let mut vectors = zeros(n, n);
    for (dst, &src) in idx.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    HermitianEigen {
        values: idx.iter().map(|&i| eig.eigenvalues[i]).collect(),
        vectors,
    }
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_part(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a Hermitian positive definite matrix (Cholesky), Hermitian on
/// output.
pub fn hpd_inverse(m: &CMat) -> Result<CMat> {
    let chol = hermitian_part(m)
        .cholesky()
        .ok_or(Error::Singular("Hermitian inverse"))?;
    Ok(hermitian_part(&chol.inverse()))
}

/// `log det` of a Hermitian positive definite matrix.
pub fn hpd_logdet(m: &CMat) -> Result<f64> {
    let chol = hermitian_part(m)
        .cholesky()
        .ok_or(Error::Singular("log-determinant"))?;
    let l = chol.l_dirty();
    Ok((0..m.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum())
}

/// General square inverse via LU.
pub fn inverse(m: &CMat) -> Result<CMat> {
    m.clone()
        .try_inverse()
        .ok_or(Error::Singular("general inverse"))
}

/// Solve `A X = B` for general square `A`.
pub fn solve(a: &CMat, b: &CMat) -> Result<CMat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::Singular("linear solve"))
}

/// Hermitian positive definite inverse square root. Eigenvalues are floored
/// at `1e-14 · tr(M) / n` before inversion.
pub fn hpd_inverse_sqrt(m: &CMat) -> CMat {
    let n = m.nrows();
    let floor = 1e-14 * trace_re(m).abs() / n.max(1) as f64;
    let eig = hermitian_eigen(m);
    let d: Vec<f64> = eig
        .values
        .iter()
        .map(|&x| 1.0 / x.max(floor).max(f64::MIN_POSITIVE).sqrt())
        .collect();
    sandwich_diag(&eig.vectors, &d)
}

/// Entries i.i.d. CN(0, 1): independent real and imaginary parts with
/// variance 1/2 each.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c64(s * re, s * im)
    })
}

/// Unitary DFT matrix, entry `(p, q) = exp(−i·2π·p·q/n)/√n`, zero-based.
pub fn dft_matrix(n: usize) -> CMat {
    let scale = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |p, q| {
        // reduce p*q mod n first to keep the phase argument small
        let k = (p * q) % n;
        let theta = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
        c64(scale * theta.cos(), scale * theta.sin())
    })
}

/// Haar-distributed unitary matrix: QR of a complex Gaussian matrix with
/// the phases of `R`'s diagonal moved into `Q`.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let g = complex_gaussian(n, n, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        let d = r[(j, j)];
        let norm = d.norm();
        if norm > 0.0 {
            let phase = d / norm;
            for i in 0..n {
                q[(i, j)] *= phase;
            }
        }
    }
    q
}

/// `‖UᴴU − I‖_F`.
pub fn unitarity_defect(u: &CMat) -> f64 {
    (u.adjoint() * u - eye(u.ncols())).norm()
}

/// Relative Frobenius distance `‖A − B‖_F / max(‖B‖_F, tiny)`.
pub fn rel_frobenius(a: &CMat, b: &CMat) -> f64 {
    let nb = b.norm();
    let d = (a - b).norm();
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

pub fn real_vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dft_is_unitary() {
        for n in [1, 2, 5, 16, 33] {
            let v = dft_matrix(n);
            assert!(unitarity_defect(&v) < 1e-12, "n={n}");
            assert!((&v * v.adjoint() - eye(n)).norm() < 1e-12);
        }
    }

    #[test]
    fn dft_sign_convention() {
        let v = dft_matrix(4);
        // (1,1) entry: exp(-i pi/2)/2 = -i/2
        assert!((v[(1, 1)] - c64(0.0, -0.5)).norm() < 1e-15);
    }

    #[test]
    fn random_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 4, 9] {
            let u = random_unitary(n, &mut rng);
            assert!(unitarity_defect(&u) < 1e-12);
        }
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = complex_gaussian(5, 5, &mut rng);
        let m = &a * a.adjoint() + eye(5);
        let s = hpd_inverse_sqrt(&m);
        let inv = hpd_inverse(&m).unwrap();
        assert!(rel_frobenius(&(&s * &s), &inv) < 1e-12);
    }

    #[test]
    fn logdet_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = complex_gaussian(4, 4, &mut rng);
        let m = &a * a.adjoint() + eye(4) * c64(0.5, 0.0);
        let eig = hermitian_eigen(&m);
        let expect: f64 = eig.values.iter().map(|x| x.ln()).sum();
        assert!((hpd_logdet(&m).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn quadratic_diag_matches_full_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = complex_gaussian(6, 6, &mut rng);
        let c = hermitian_part(&a);
        let q = dft_matrix(6);
        let full = q.adjoint() * &c * &q;
        let d = quadratic_diag(&q, &c);
        for j in 0..6 {
            assert!((full[(j, j)].re - d[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_entries_have_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = complex_gaussian(200, 500, &mut rng);
        let n = (200 * 500) as f64;
        let var: f64 = g.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        let re_var: f64 = g.iter().map(|z| z.re * z.re).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.01);
        assert!((re_var - 0.5).abs() < 0.01);
    }
}
