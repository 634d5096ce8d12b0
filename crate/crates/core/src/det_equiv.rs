//! Deterministic equivalent of the ergodic rate under the posterior model.
//!
//! The channel seen by user `k` is whitened by `R^{-1/2}`; the coupled
//! matrices `Φ, Φ̃, G, G̃, Γ, Γ̃` are found by fixed-point sweeps starting
//! from `G = I, G̃ = I`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::operators::{self, OperatorKernel};
use crate::posterior::BlockPosterior;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed damping factor from the first sweep. `None` starts undamped
    /// and switches to `0.5` after the first residual increase.
    pub damping: Option<f64>,
    /// Record the per-sweep residuals in the returned state.
    pub trace: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-9,
            max_iter: 500,
            damping: None,
            trace: false,
        }
    }
}

const AUTO_DAMPING: f64 = 0.5;

/// Converged deterministic-equivalent quantities for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct DeState {
    pub r: CMat,
    pub r_inv_sqrt: CMat,
    pub gamma: CMat,
    pub gamma_tilde: CMat,
    pub phi: CMat,
    pub phi_tilde: CMat,
    pub g: CMat,
    pub g_tilde: CMat,
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

fn rel_change(new: &CMat, old: &CMat) -> f64 {
    let scale = new.norm().max(old.norm());
    if scale == 0.0 {
        0.0
    } else {
        (new - old).norm() / scale
    }
}

fn plus_identity(m: CMat) -> CMat {
    let n = m.nrows();
    m + linalg::eye(n)
}

struct Sweep {
    gamma: CMat,
    gamma_tilde: CMat,
    phi: CMat,
    phi_tilde: CMat,
    g: CMat,
    g_tilde: CMat,
}

fn sweep(
    kernel: &OperatorKernel,
    hhat: &CMat,
    p: &CMat,
    rm: &CMat,
    g: &CMat,
    g_tilde: &CMat,
) -> Result<Sweep> {
    let ph = p.adjoint();
    let et = kernel.eta_tilde_raw(&linalg::hermitian_part(&(rm * g_tilde * rm)));
    let phi = linalg::hermitian_part(&plus_identity(&ph * &et * p));
    let e = kernel.eta_raw(&linalg::hermitian_part(&(p * g * &ph)));
    let phi_tilde = linalg::hermitian_part(&plus_identity(rm * &e * rm));

    let wh = rm * hhat;
    let gamma =
        linalg::hermitian_part(&(&et + wh.adjoint() * linalg::hpd_inverse(&phi_tilde)? * &wh));
    let hp = hhat * p;
    let gamma_tilde =
        linalg::hermitian_part(&(&e + &hp * linalg::hpd_inverse(&phi)? * hp.adjoint()));

    let g_new = linalg::hpd_inverse(&plus_identity(&ph * &gamma * p))?;
    let g_tilde_new = linalg::hpd_inverse(&plus_identity(rm * &gamma_tilde * rm))?;
    Ok(Sweep {
        gamma,
        gamma_tilde,
        phi,
        phi_tilde,
        g: g_new,
        g_tilde: g_tilde_new,
    })
}

/// Solve the fixed point for user `k` with precoder `p` and
/// interference-plus-noise covariance `r`.
///
/// `warm` seeds `G, G̃` from an earlier state of matching shape.
pub fn solve_fixed_point(
    block: &BlockPosterior,
    p: &CMat,
    r: &CMat,
    k: usize,
    opts: &FixedPointOptions,
    warm: Option<&DeState>,
) -> Result<DeState> {
    let user = block
        .users
        .get(k)
        .ok_or_else(|| Error::Shape(format!("no user {k}")))?;
    let (mk, mt) = (user.rx(), block.tx());
    if p.nrows() != mt || r.shape() != (mk, mk) {
        return Err(Error::Shape(format!(
            "precoder {}x{} / covariance {}x{} do not fit a {mk}x{mt} channel",
            p.nrows(),
            p.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig(
            "fixed-point tolerance must be positive".into(),
        ));
    }
    if !linalg::is_finite(p) || !linalg::is_finite(r) {
        return Err(Error::NonFinite("fixed-point inputs".into()));
    }
    let d = p.ncols();
    let kernel = OperatorKernel::posterior(user, &block.v);
    let rm = linalg::hpd_inverse_sqrt(r);

    let (mut g, mut g_tilde) = match warm {
        Some(s) if s.g.nrows() == d && s.g_tilde.nrows() == mk => (s.g.clone(), s.g_tilde.clone()),
        _ => (linalg::eye(d), linalg::eye(mk)),
    };
    let mut prev: Option<(CMat, CMat)> = None;
    let mut damping = opts.damping;
    let mut last_residual = f64::INFINITY;
    let mut trace = Vec::new();

    for it in 1..=opts.max_iter {
        let s = sweep(&kernel, &user.hhat, p, &rm, &g, &g_tilde)?;
        let mut residual = rel_change(&s.g, &g).max(rel_change(&s.g_tilde, &g_tilde));
        if let Some((gm, gtm)) = &prev {
            residual = residual
                .max(rel_change(&s.gamma, gm))
                .max(rel_change(&s.gamma_tilde, gtm));
        }
        if !residual.is_finite() {
            return Err(Error::NonFinite("fixed-point sweep".into()));
        }
        if opts.trace {
            trace.push(residual);
        }
        if residual > last_residual && damping.is_none() {
            damping = Some(AUTO_DAMPING);
        }
        last_residual = residual;

        let (g_next, g_tilde_next) = match damping {
            Some(beta) if residual > opts.tol => (
                linalg::hermitian_part(
                    &(&g * linalg::c64(1.0 - beta, 0.0) + &s.g * linalg::c64(beta, 0.0)),
                ),
                linalg::hermitian_part(
                    &(&g_tilde * linalg::c64(1.0 - beta, 0.0)
                        + &s.g_tilde * linalg::c64(beta, 0.0)),
                ),
            ),
            _ => (s.g.clone(), s.g_tilde.clone()),
        };

        if residual <= opts.tol {
            return Ok(DeState {
                r: linalg::hermitian_part(r),
                r_inv_sqrt: rm,
                gamma: s.gamma,
                gamma_tilde: s.gamma_tilde,
                phi: s.phi,
                phi_tilde: s.phi_tilde,
                g: g_next,
                g_tilde: g_tilde_next,
                iterations: it,
                residual,
                trace,
            });
        }
        g = g_next;
        g_tilde = g_tilde_next;
        prev = Some((s.gamma, s.gamma_tilde));
    }
    Err(Error::FixedPoint {
        iterations: opts.max_iter,
        residual: last_residual,
    })
}

/// `solve_fixed_point`, retried with damping from the first sweep and a
/// doubled budget when the plain run fails to converge.
pub fn solve_fixed_point_damped_retry(
    block: &BlockPosterior,
    p: &CMat,
    r: &CMat,
    k: usize,
    opts: &FixedPointOptions,
    warm: Option<&DeState>,
) -> Result<DeState> {
    match solve_fixed_point(block, p, r, k, opts, warm) {
        Err(Error::FixedPoint { .. }) => {
            let retry = FixedPointOptions {
                damping: Some(opts.damping.unwrap_or(AUTO_DAMPING)),
                max_iter: 2 * opts.max_iter,
                ..*opts
            };
            solve_fixed_point(block, p, r, k, &retry, None)
        }
        other => other,
    }
}

/// Fixed points of all users for a precoder set; users are solved in
/// parallel.
pub fn solve_all(
    block: &BlockPosterior,
    precoders: &[CMat],
    sigma2_z: f64,
    opts: &FixedPointOptions,
    warm: Option<&[DeState]>,
) -> Result<Vec<DeState>> {
    if precoders.len() != block.users() {
        return Err(Error::Shape("one precoder per user".into()));
    }
    let total = operators::transmit_covariance(precoders);
    (0..block.users())
        .into_par_iter()
        .map(|k| {
            let own = &precoders[k] * precoders[k].adjoint();
            let r = operators::interference_from_total(block, &total, &own, k, sigma2_z);
            let w = warm.and_then(|s| s.get(k));
            solve_fixed_point_damped_retry(block, &precoders[k], &r, k, opts, w)
        })
        .collect()
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x.max(0.0))
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// `logdet(I + Pᴴ Γ P) + logdet Φ̃ − tr(η(P G Pᴴ) R^{-1/2} G̃ R^{-1/2})`,
/// clamped at zero.
pub fn de_rate_form1(state: &DeState, p: &CMat) -> Result<f64> {
    let a = linalg::hpd_logdet(&plus_identity(p.adjoint() * &state.gamma * p))?;
    let b = linalg::hpd_logdet(&state.phi_tilde)?;
    // R^{-1/2} η(PGPᴴ) R^{-1/2} = Φ̃ − I
    let c = ((&state.phi_tilde - linalg::eye(state.phi_tilde.nrows())) * &state.g_tilde)
        .trace()
        .re;
    finite(a + b - c, "deterministic-equivalent rate")
}

/// `logdet(I + R^{-1/2} Γ̃ R^{-1/2}) + logdet Φ − tr(P G Pᴴ η̃(R^{-1/2} G̃ R^{-1/2}))`,
/// clamped at zero.
pub fn de_rate_form2(state: &DeState) -> Result<f64> {
    let rm = &state.r_inv_sqrt;
    let a = linalg::hpd_logdet(&plus_identity(rm * &state.gamma_tilde * rm))?;
    let b = linalg::hpd_logdet(&state.phi)?;
    // Pᴴ η̃(R^{-1/2} G̃ R^{-1/2}) P = Φ − I
    let c = (&state.g * (&state.phi - linalg::eye(state.phi.nrows())))
        .trace()
        .re;
    finite(a + b - c, "deterministic-equivalent rate")
}

/// `Σ_k w_k R̄_k` from per-user states.
pub fn de_weighted_sum_rate(
    states: &[DeState],
    precoders: &[CMat],
    weights: &[f64],
) -> Result<f64> {
    if states.len() != precoders.len() || weights.len() != precoders.len() {
        return Err(Error::Shape(
            "one state, precoder and weight per user".into(),
        ));
    }
    states
        .iter()
        .zip(precoders)
        .zip(weights)
        .map(|((s, p), w)| Ok(w * de_rate_form1(s, p)?))
        .sum()
}

/// DE weighted sum-rate of a precoder set, solving all fixed points.
pub fn de_objective(
    block: &BlockPosterior,
    precoders: &[CMat],
    weights: &[f64],
    sigma2_z: f64,
    opts: &FixedPointOptions,
) -> Result<f64> {
    let states = solve_all(block, precoders, sigma2_z, opts, None)?;
    de_weighted_sum_rate(&states, precoders, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c64, RMat};
    use crate::posterior::UserPosterior;
    use crate::rng::seeded;
    use rand::Rng;

    fn block(
        users: usize,
        mk: usize,
        mt: usize,
        seed: u64,
        mean_scale: f64,
        var_scale: f64,
    ) -> BlockPosterior {
        let mut rng = seeded(seed);
        BlockPosterior {
            block: 2,
            v: linalg::dft_matrix(mt),
            users: (0..users)
                .map(|_| UserPosterior {
                    hhat: linalg::complex_gaussian(mk, mt, &mut rng) * c64(mean_scale, 0.0),
                    xi2: RMat::from_fn(mk, mt, |_, _| var_scale * rng.random_range(0.0..2.0)),
                    u: linalg::random_unitary(mk, &mut rng),
                })
                .collect(),
        }
    }

    fn precoders(users: usize, mt: usize, d: usize, power: f64, seed: u64) -> Vec<CMat> {
        let mut rng = seeded(seed);
        let p: Vec<CMat> = (0..users)
            .map(|_| linalg::complex_gaussian(mt, d, &mut rng))
            .collect();
        let total: f64 = p.iter().map(|x| x.norm_squared()).sum();
        p.into_iter()
            .map(|x| x * c64((power / total).sqrt(), 0.0))
            .collect()
    }

    fn tight() -> FixedPointOptions {
        FixedPointOptions {
            tol: 1e-12,
            max_iter: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn null_channel_converges_in_one_sweep() {
        let b = block(1, 2, 8, 1, 0.0, 0.0);
        let p = precoders(1, 8, 2, 1.0, 2);
        let s =
            solve_fixed_point(&b, &p[0], &linalg::eye(2), 0, &Default::default(), None).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.gamma.norm(), 0.0);
        assert_eq!(s.gamma_tilde.norm(), 0.0);
        assert_eq!(s.phi, linalg::eye(2));
        assert_eq!(s.phi_tilde, linalg::eye(2));
        assert_eq!(s.g, linalg::eye(2));
        assert_eq!(s.g_tilde, linalg::eye(2));
    }

    #[test]
    fn zero_precoder_collapses() {
        let b = block(1, 2, 8, 3, 1.0, 0.5);
        let p = linalg::zeros(8, 2);
        let r = linalg::eye(2) * c64(0.4, 0.0);
        let s = solve_fixed_point(&b, &p, &r, 0, &Default::default(), None).unwrap();
        let rinv = linalg::hpd_inverse(&r).unwrap();
        let kernel = OperatorKernel::of(&b, 0);
        let h = &b.users[0].hhat;
        let expect = kernel.eta_tilde_raw(&rinv) + h.adjoint() * &rinv * h;
        assert!((&s.gamma - expect).norm() < 1e-12);
        assert!(s.gamma_tilde.norm() < 1e-15);
        assert!((&s.phi - linalg::eye(2)).norm() < 1e-15);
        assert!((&s.g_tilde - linalg::eye(2)).norm() < 1e-15);
        assert_eq!(de_rate_form1(&s, &p).unwrap(), 0.0);
        assert_eq!(de_rate_form2(&s).unwrap(), 0.0);
    }

    /// Independent oracle: damped Picard iteration directly on `(Γ, Γ̃)`.
    fn picard_oracle(b: &BlockPosterior, p: &CMat, r: &CMat, k: usize) -> (CMat, CMat) {
        let user = &b.users[k];
        let h = &user.hhat;
        let kernel = OperatorKernel::of(b, k);
        let rm = linalg::hpd_inverse_sqrt(r);
        let (d, mk, mt) = (p.ncols(), h.nrows(), h.ncols());
        let mut gamma = linalg::zeros(mt, mt);
        let mut gamma_t = linalg::zeros(mk, mk);
        for _ in 0..20_000 {
            let g = (linalg::eye(d) + p.adjoint() * &gamma * p)
                .try_inverse()
                .unwrap();
            let gt = (linalg::eye(mk) + &rm * &gamma_t * &rm)
                .try_inverse()
                .unwrap();
            let whitened_gt = &rm * &gt * &rm;
            let et = kernel.eta_tilde_raw(&linalg::hermitian_part(&whitened_gt));
            let e = kernel.eta_raw(&linalg::hermitian_part(&(p * &g * p.adjoint())));
            let phi = linalg::eye(d) + p.adjoint() * &et * p;
            // R^{-1/2} Φ̃⁻¹ R^{-1/2} = (R + η(PGPᴴ))⁻¹
            let inner = (r + &e).try_inverse().unwrap();
            let new_gamma = &et + h.adjoint() * inner * h;
            let new_gamma_t = &e + h * p * phi.try_inverse().unwrap() * p.adjoint() * h.adjoint();
            let change = (&new_gamma - &gamma).norm() + (&new_gamma_t - &gamma_t).norm();
            gamma = &gamma * c64(0.3, 0.0) + new_gamma * c64(0.7, 0.0);
            gamma_t = &gamma_t * c64(0.3, 0.0) + new_gamma_t * c64(0.7, 0.0);
            if change < 1e-14 {
                break;
            }
        }
        (gamma, gamma_t)
    }

    #[test]
    fn matches_independent_picard_oracle() {
        let b = block(3, 2, 8, 4, 0.7, 0.6);
        let p = precoders(3, 8, 2, 1.0, 5);
        let k = 1;
        let r = operators::interference_covariance(&b, &p, k, 0.1).unwrap();
        let s = solve_fixed_point(&b, &p[k], &r, k, &tight(), None).unwrap();
        let (gamma, gamma_t) = picard_oracle(&b, &p[k], &r, k);
        assert!((&s.gamma - gamma).norm() < 1e-6);
        assert!((&s.gamma_tilde - gamma_t).norm() < 1e-6);
    }

    #[test]
    fn state_invariants_at_convergence() {
        let b = block(2, 2, 8, 6, 1.0, 0.4);
        let p = precoders(2, 8, 2, 1.0, 7);
        let opts = FixedPointOptions::default();
        for k in 0..2 {
            let r = operators::interference_covariance(&b, &p, k, 0.1).unwrap();
            let s = solve_fixed_point(&b, &p[k], &r, k, &opts, None).unwrap();
            let g = linalg::hpd_inverse(&plus_identity(p[k].adjoint() * &s.gamma * &p[k])).unwrap();
            let rm = &s.r_inv_sqrt;
            let gt = linalg::hpd_inverse(&plus_identity(rm * &s.gamma_tilde * rm)).unwrap();
            assert!(linalg::rel_frobenius(&s.g, &g) <= 10.0 * opts.tol);
            assert!(linalg::rel_frobenius(&s.g_tilde, &gt) <= 10.0 * opts.tol);
            for m in [
                &s.gamma,
                &s.gamma_tilde,
                &s.phi,
                &s.phi_tilde,
                &s.g,
                &s.g_tilde,
            ] {
                assert!(linalg::asymmetry(m) < 1e-10);
            }
        }
    }

    #[test]
    fn forms_agree() {
        for seed in 0..5 {
            let b = block(3, 2, 16, 10 + seed, 0.8, 0.5);
            let p = precoders(3, 16, 2, 1.0, 20 + seed);
            for k in 0..3 {
                let r = operators::interference_covariance(&b, &p, k, 0.1).unwrap();
                let opts = FixedPointOptions {
                    tol: 1e-10,
                    ..Default::default()
                };
                let s = solve_fixed_point(&b, &p[k], &r, k, &opts, None).unwrap();
                let f1 = de_rate_form1(&s, &p[k]).unwrap();
                let f2 = de_rate_form2(&s).unwrap();
                assert!(
                    (f1 - f2).abs() <= 1e-6 * f1.abs().max(1e-12),
                    "{f1} vs {f2}"
                );
            }
        }
    }

    #[test]
    fn exact_on_deterministic_channels() {
        let b = block(3, 2, 8, 30, 1.0, 0.0);
        let p = precoders(3, 8, 2, 1.0, 31);
        for k in 0..3 {
            let r = operators::interference_covariance(&b, &p, k, 0.2).unwrap();
            let s = solve_fixed_point(&b, &p[k], &r, k, &Default::default(), None).unwrap();
            let hp = &b.users[k].hhat * &p[k];
            let rm = linalg::hpd_inverse_sqrt(&r);
            let exact_sym =
                linalg::hpd_logdet(&(linalg::eye(2) + &rm * &hp * hp.adjoint() * &rm)).unwrap();
            assert!((de_rate_form1(&s, &p[k]).unwrap() - exact_sym).abs() < 1e-8);
            assert!((de_rate_form2(&s).unwrap() - exact_sym).abs() < 1e-8);
        }
    }

    #[test]
    fn single_user_deterministic_sum_rate() {
        let b = block(1, 2, 8, 32, 1.0, 0.0);
        let p = precoders(1, 8, 2, 1.0, 33);
        let states = solve_all(&b, &p, 0.1, &Default::default(), None).unwrap();
        let got = de_weighted_sum_rate(&states, &p, &[2.0]).unwrap();
        let hp = &b.users[0].hhat * &p[0];
        let expect = 2.0
            * linalg::hpd_logdet(&(linalg::eye(2) + &hp * hp.adjoint() * c64(10.0, 0.0))).unwrap();
        assert!((got - expect).abs() < 1e-9);
        let zero = vec![linalg::zeros(8, 2)];
        let states = solve_all(&b, &zero, 0.1, &Default::default(), None).unwrap();
        assert_eq!(de_weighted_sum_rate(&states, &zero, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn warm_start_needs_fewer_sweeps() {
        let b = block(2, 2, 8, 40, 0.5, 1.0);
        let p = precoders(2, 8, 2, 1.0, 41);
        let r = operators::interference_covariance(&b, &p, 0, 0.1).unwrap();
        let cold = solve_fixed_point(&b, &p[0], &r, 0, &Default::default(), None).unwrap();
        let warm = solve_fixed_point(&b, &p[0], &r, 0, &Default::default(), Some(&cold)).unwrap();
        assert!(warm.iterations <= 2);
        assert!(
            (de_rate_form1(&warm, &p[0]).unwrap() - de_rate_form1(&cold, &p[0]).unwrap()).abs()
                < 1e-8
        );
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let b = block(2, 2, 8, 42, 0.5, 1.0);
        let p = precoders(2, 8, 2, 10.0, 43);
        let r = operators::interference_covariance(&b, &p, 0, 0.01).unwrap();
        let opts = FixedPointOptions {
            tol: 1e-15,
            max_iter: 2,
            ..Default::default()
        };
        assert!(matches!(
            solve_fixed_point(&b, &p[0], &r, 0, &opts, None),
            Err(Error::FixedPoint { iterations: 2, .. })
        ));
    }

    #[test]
    fn trace_records_residuals() {
        let b = block(1, 2, 8, 44, 0.5, 1.0);
        let p = precoders(1, 8, 2, 1.0, 45);
        let r = linalg::eye(2) * c64(0.1, 0.0);
        let opts = FixedPointOptions {
            trace: true,
            ..Default::default()
        };
        let s = solve_fixed_point(&b, &p[0], &r, 0, &opts, None).unwrap();
        assert_eq!(s.trace.len(), s.iterations);
        assert!(*s.trace.last().unwrap() <= opts.tol);
    }
}
