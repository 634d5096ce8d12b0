//! Closed-form quadratic expectations of the random channel part.
//!
//! For `H̃ = U (S^{1/2} ⊙ W) Vᴴ` with `W` i.i.d. CN(0, 1):
//! `E[H̃ C̃ H̃ᴴ] = U diag(S · d̃) Uᴴ` with `d̃ = diag(Vᴴ C̃ V)` and
//! `E[H̃ᴴ C H̃] = V diag(Sᵀ · d) Vᴴ` with `d = diag(Uᴴ C U)`.

use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat, RMat};
use crate::posterior::{BlockPosterior, UserPosterior};

const HERMITIAN_TOL: f64 = 1e-8;

/// Bases and variance profile that define one user's operators.
#[derive(Debug, Clone, Copy)]
pub struct OperatorKernel<'a> {
    pub u: &'a CMat,
    pub v: &'a CMat,
    pub s: &'a RMat,
}

impl<'a> OperatorKernel<'a> {
    pub fn new(u: &'a CMat, v: &'a CMat, s: &'a RMat) -> Result<Self> {
        if u.nrows() != s.nrows() || v.nrows() != s.ncols() {
            return Err(Error::Shape(format!(
                "kernel is {}x{} but U is {} and V is {}",
                s.nrows(),
                s.ncols(),
                u.nrows(),
                v.nrows()
            )));
        }
        if s.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidConfig(
                "kernel entries must be nonnegative".into(),
            ));
        }
        Ok(OperatorKernel { u, v, s })
    }

    /// Kernel of a posterior: `S = Ξ²`.
    pub fn posterior(user: &'a UserPosterior, v: &'a CMat) -> Self {
        OperatorKernel {
            u: &user.u,
            v,
            s: &user.xi2,
        }
    }

    pub fn of(block: &'a BlockPosterior, k: usize) -> Self {
        Self::posterior(&block.users[k], &block.v)
    }

    pub fn rx(&self) -> usize {
        self.s.nrows()
    }

    pub fn tx(&self) -> usize {
        self.s.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.s.iter().all(|&x| x == 0.0)
    }

    /// `Λ(C̃)`, without input validation.
    pub(crate) fn lambda_raw(&self, ct: &CMat) -> Vec<f64> {
        if self.is_zero() {
            return vec![0.0; self.rx()];
        }
        let d = linalg::quadratic_diag(self.v, ct);
        (0..self.rx())
            .map(|i| self.s.row(i).iter().zip(&d).map(|(s, x)| s * x).sum())
            .collect()
    }

    /// `Λ̃(C)`, without input validation.
    pub(crate) fn lambda_tilde_raw(&self, c: &CMat) -> Vec<f64> {
        if self.is_zero() {
            return vec![0.0; self.tx()];
        }
        let d = linalg::quadratic_diag(self.u, c);
        (0..self.tx())
            .map(|j| self.s.column(j).iter().zip(&d).map(|(s, x)| s * x).sum())
            .collect()
    }

    pub(crate) fn eta_raw(&self, ct: &CMat) -> CMat {
        if self.is_zero() {
            return linalg::zeros(self.rx(), self.rx());
        }
        linalg::sandwich_diag(self.u, &self.lambda_raw(ct))
    }

    pub(crate) fn eta_tilde_raw(&self, c: &CMat) -> CMat {
        if self.is_zero() {
            return linalg::zeros(self.tx(), self.tx());
        }
        linalg::sandwich_diag(self.v, &self.lambda_tilde_raw(c))
    }
}

fn checked(m: &CMat, n: usize) -> Result<CMat> {
    if m.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "expected {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    linalg::ensure_hermitian(m, HERMITIAN_TOL)?;
    Ok(linalg::hermitian_part(m))
}

/// Diagonal of `Λ(C̃)`: `Λ_ii = Σ_j S_ij [Vᴴ C̃ V]_jj`.
pub fn lambda(kernel: &OperatorKernel, ct: &CMat) -> Result<Vec<f64>> {
    let ct = checked(ct, kernel.tx())?;
    Ok(kernel.lambda_raw(&ct))
}

/// Diagonal of `Λ̃(C)`: `Λ̃_jj = Σ_i S_ij [Uᴴ C U]_ii`.
pub fn lambda_tilde(kernel: &OperatorKernel, c: &CMat) -> Result<Vec<f64>> {
    let c = checked(c, kernel.rx())?;
    Ok(kernel.lambda_tilde_raw(&c))
}

/// `η(C̃) = E[H̃ C̃ H̃ᴴ] = U Λ(C̃) Uᴴ`.
pub fn eta(kernel: &OperatorKernel, ct: &CMat) -> Result<CMat> {
    let ct = checked(ct, kernel.tx())?;
    Ok(kernel.eta_raw(&ct))
}

/// `η̃(C) = E[H̃ᴴ C H̃] = V Λ̃(C) Vᴴ`.
pub fn eta_tilde(kernel: &OperatorKernel, c: &CMat) -> Result<CMat> {
    let c = checked(c, kernel.rx())?;
    Ok(kernel.eta_tilde_raw(&c))
}

/// `Σ_l P_l P_lᴴ` over all users.
pub fn transmit_covariance(precoders: &[CMat]) -> CMat {
    let mt = precoders.first().map_or(0, |p| p.nrows());
    precoders
        .iter()
        .fold(linalg::zeros(mt, mt), |acc, p| acc + p * p.adjoint())
}

/// Interference-plus-noise covariance seen by user `k`:
/// `σ² I + Ĥ Q Ĥᴴ + η(Q)` with `Q = Σ_{l≠k} P_l P_lᴴ`.
pub fn interference_covariance(
    block: &BlockPosterior,
    precoders: &[CMat],
    k: usize,
    sigma2_z: f64,
) -> Result<CMat> {
    if precoders.len() != block.users() {
        return Err(Error::Shape("one precoder per user".into()));
    }
    let total = transmit_covariance(precoders);
    let own = &precoders[k] * precoders[k].adjoint();
    Ok(interference_from_total(block, &total, &own, k, sigma2_z))
}

pub(crate) fn interference_from_total(
    block: &BlockPosterior,
    total: &CMat,
    own: &CMat,
    k: usize,
    sigma2_z: f64,
) -> CMat {
    let q = linalg::hermitian_part(&(total - own));
    let user = &block.users[k];
    let kernel = OperatorKernel::posterior(user, &block.v);
    let mut r = &user.hhat * &q * user.hhat.adjoint() + kernel.eta_raw(&q);
    for i in 0..r.nrows() {
        r[(i, i)] += c64(sigma2_z, 0.0);
    }
    linalg::hermitian_part(&r)
}

/// `E[Hᴴ C H] = Ĥᴴ C Ĥ + η̃(C)` under user `k`'s posterior.
pub fn expected_gram(block: &BlockPosterior, k: usize, c: &CMat) -> Result<CMat> {
    let user = &block.users[k];
    let c = checked(c, user.rx())?;
    let kernel = OperatorKernel::posterior(user, &block.v);
    Ok(linalg::hermitian_part(
        &(user.hhat.adjoint() * &c * &user.hhat + kernel.eta_tilde_raw(&c)),
    ))
}
