//! Comparison precoders: regularized zero forcing, leakage-based eigenbeams,
//! iterative weighted MMSE and an error-aware RZF.

use std::time::{Duration, Instant};

use crate::config::DesignParams;
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat};
use crate::mm::{self, MmOptions, PrecoderSet, Shaping, StepOutput};
use crate::operators::OperatorKernel;
use crate::posterior::BlockPosterior;

fn check_channels(channels: &[CMat], params: &DesignParams) -> Result<usize> {
    let mt = channels
        .first()
        .map(|h| h.ncols())
        .ok_or_else(|| Error::Shape("no users".into()))?;
    if channels.iter().any(|h| h.ncols() != mt || h.nrows() == 0) {
        return Err(Error::Shape(
            "channels disagree on the transmit dimension".into(),
        ));
    }
    if params.weights.len() != channels.len() {
        return Err(Error::Shape("one weight per user".into()));
    }
    if !(params.sigma2_z > 0.0) || !(params.power > 0.0) {
        return Err(Error::InvalidConfig(
            "noise variance and power must be positive".into(),
        ));
    }
    Ok(mt)
}

fn stack(channels: &[CMat]) -> CMat {
    let rows: usize = channels.iter().map(|h| h.nrows()).sum();
    let mut all = linalg::zeros(rows, channels[0].ncols());
    let mut r = 0;
    for h in channels {
        all.rows_mut(r, h.nrows()).copy_from(h);
        r += h.nrows();
    }
    all
}

/// Splits the columns of `p` into consecutive per-user blocks.
fn split_columns(p: &CMat, sizes: impl Iterator<Item = usize>) -> Vec<CMat> {
    let mut c = 0;
    sizes
        .map(|n| {
            let block = p.columns(c, n).into_owned();
            c += n;
            block
        })
        .collect()
}

/// `ξ Hᴴ (H Hᴴ + load + (K σ²/P) I)⁻¹` split per user with `ξ` fixing the
/// total power at the budget.
fn regularized_inverse(
    channels: &[CMat],
    load: Option<&CMat>,
    params: &DesignParams,
) -> Result<PrecoderSet> {
    let h = stack(channels);
    let k = channels.len() as f64;
    let mut gram = &h * h.adjoint();
    if let Some(l) = load {
        gram += l;
    }
    let reg = k * params.sigma2_z / params.power;
    for i in 0..gram.nrows() {
        gram[(i, i)] += c64(reg, 0.0);
    }
    let inv = linalg::hpd_inverse(&gram)?;
    let p = h.adjoint() * inv;
    let total = p.norm_squared();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonFinite("regularized inverse direction".into()));
    }
    let p = p * c64((params.power / total).sqrt(), 0.0);
    Ok(PrecoderSet(split_columns(
        &p,
        channels.iter().map(|h| h.nrows()),
    )))
}

/// Regularized zero forcing with regularizer `K σ² / P`; user `k` gets one
/// column per receive antenna.
pub fn rzf(channels: &[CMat], params: &DesignParams) -> Result<PrecoderSet> {
    check_channels(channels, params)?;
    regularized_inverse(channels, None, params)
}

/// Generalized eigenpairs `(λ, x)` of the pencil `(A, B)` with `B` positive
/// definite, in descending order of `λ`. Eigenvectors are normalized so
/// that `xᴴ B x = 1`.
pub fn generalized_eigen(a: &CMat, b: &CMat) -> Result<(Vec<f64>, CMat)> {
    let chol = linalg::hermitian_part(b)
        .cholesky()
        .ok_or(Error::Singular("generalized eigen pencil"))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("generalized eigen pencil"))?;
    let c = &l_inv * a * l_inv.adjoint();
    let e = linalg::hermitian_eigen(&c);
    let n = a.nrows();
    let mut vecs = linalg::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, src) in (0..n).rev().enumerate() {
        vals.push(e.values[src]);
        vecs.set_column(dst, &(l_inv.adjoint() * e.vectors.column(src)));
    }
    Ok((vals, vecs))
}

/// Leakage-based eigenbeams: the top `d_k` generalized eigenvectors of
/// `(H_kᴴH_k, σ² M_k K / P · I + Σ_{l≠k} H_lᴴH_l)` at power `P/K` per user.
pub fn slnr(channels: &[CMat], streams: &[usize], params: &DesignParams) -> Result<PrecoderSet> {
    let mt = check_channels(channels, params)?;
    if streams.len() != channels.len() || streams.iter().any(|&d| d == 0 || d > mt) {
        return Err(Error::Shape(
            "stream counts must lie in 1..=M_t, one per user".into(),
        ));
    }
    let k = channels.len();
    let grams: Vec<CMat> = channels.iter().map(|h| h.adjoint() * h).collect();
    let total = grams.iter().fold(linalg::zeros(mt, mt), |acc, g| acc + g);
    let per_user = params.power / k as f64;
    let out = (0..k)
        .map(|i| {
            let load = params.sigma2_z * (channels[i].nrows() * k) as f64 / params.power;
            let mut b = &total - &grams[i];
            for j in 0..mt {
                b[(j, j)] += c64(load, 0.0);
            }
            let (_, x) = generalized_eigen(&grams[i], &b)?;
            let mut p = x.columns(0, streams[i]).into_owned();
            for mut col in p.column_iter_mut() {
                let n = col.norm();
                col /= c64(n, 0.0);
            }
            Ok(p * c64((per_user / streams[i] as f64).sqrt(), 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrecoderSet(out))
}

/// Exact weighted sum-rate `Σ w_k log det(I + R_k⁻¹ H_k P_k P_kᴴ H_kᴴ)` on
/// known channels, in nats.
pub fn weighted_sum_rate(
    channels: &[CMat],
    precoders: &[CMat],
    params: &DesignParams,
) -> Result<f64> {
    let mt = check_channels(channels, params)?;
    let total = precoders
        .iter()
        .fold(linalg::zeros(mt, mt), |acc, p| acc + p * p.adjoint());
    let mut sum = 0.0;
    for (k, h) in channels.iter().enumerate() {
        let own = &precoders[k] * precoders[k].adjoint();
        let mut r = h * (&total - &own) * h.adjoint();
        for i in 0..r.nrows() {
            r[(i, i)] += c64(params.sigma2_z, 0.0);
        }
        let s = &r + h * &own * h.adjoint();
        sum += params.weights[k] * (linalg::hpd_logdet(&s)? - linalg::hpd_logdet(&r)?);
    }
    Ok(sum)
}

/// One WMMSE sweep: MMSE receivers `G_k`, MSE weights `W_k = E_k⁻¹`, then
/// `P_k = (Σ_l w_l H_lᴴ G_l W_l G_lᴴ H_l + μ I)⁻¹ w_k H_kᴴ G_k W_k`.
pub fn wmmse_step(
    channels: &[CMat],
    params: &DesignParams,
    precoders: &[CMat],
    tol_power: f64,
) -> Result<StepOutput> {
    let mt = check_channels(channels, params)?;
    if precoders.len() != channels.len() {
        return Err(Error::Shape("one precoder per user".into()));
    }
    let total = precoders
        .iter()
        .fold(linalg::zeros(mt, mt), |acc, p| acc + p * p.adjoint());
    let mut shared = linalg::zeros(mt, mt);
    let mut rhs = Vec::with_capacity(channels.len());
    for (k, h) in channels.iter().enumerate() {
        let mut cov = h * &total * h.adjoint();
        for i in 0..cov.nrows() {
            cov[(i, i)] += c64(params.sigma2_z, 0.0);
        }
        let hp = h * &precoders[k];
        let g = linalg::solve(&cov, &hp)?;
        let e = linalg::eye(hp.ncols()) - g.adjoint() * &hp;
        let w = linalg::inverse(&linalg::hermitian_part(&e))?;
        let hg = h.adjoint() * &g;
        let wk = c64(params.weights[k], 0.0);
        shared += &hg * &w * hg.adjoint() * wk;
        rhs.push(&hg * &w * wk);
    }
    let shared = linalg::hermitian_part(&shared);
    let (mu, precoders) =
        mm::mu_bisection(&rhs, Shaping::Shared(&shared), params.power, tol_power)?;
    Ok(StepOutput { precoders, mu })
}

/// Trace of a WMMSE run; `rate[i]` is the exact weighted sum-rate after `i`
/// sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseReport {
    pub rate: Vec<f64>,
    pub mu: Vec<f64>,
    pub power: Vec<f64>,
    pub precoders: PrecoderSet,
    pub iterations: usize,
    pub wall_time: Duration,
}

/// Iterated WMMSE with the same stopping rule as the MM algorithms.
pub fn wmmse(
    channels: &[CMat],
    params: &DesignParams,
    init: &PrecoderSet,
    opts: &MmOptions,
) -> Result<WmmseReport> {
    let start = Instant::now();
    let mut precoders = init.clone();
    let mut rate = vec![weighted_sum_rate(channels, precoders.as_slice(), params)?];
    let mut mu = vec![0.0];
    let mut power = vec![precoders.power()];
    let mut iterations = 0;
    for it in 1..=opts.iterations {
        let out = wmmse_step(channels, params, precoders.as_slice(), opts.tol_power)
            .map_err(|e| e.at_iteration(it))?;
        let value = weighted_sum_rate(channels, out.precoders.as_slice(), params)
            .map_err(|e| e.at_iteration(it))?;
        let prev = *rate.last().unwrap_or(&0.0);
        precoders = out.precoders;
        rate.push(value);
        mu.push(out.mu);
        power.push(precoders.power());
        iterations = it;
        if (value - prev).abs() <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(WmmseReport {
        rate,
        mu,
        power,
        precoders,
        iterations,
        wall_time: start.elapsed(),
    })
}

/// RZF on the posterior mean with the expected error Gram `η_k(I)` added on
/// each user's diagonal block, scaled by `load_scale`. A user whose mean is
/// zero is represented by the square root of its expected transmit Gram
/// restricted to its strongest `M_k` beams.
pub fn robust_rzf(
    block: &BlockPosterior,
    params: &DesignParams,
    load_scale: f64,
) -> Result<PrecoderSet> {
    if !(load_scale >= 0.0) {
        return Err(Error::InvalidConfig(
            "error load scale must be nonnegative".into(),
        ));
    }
    let mt = block.tx();
    let channels: Vec<CMat> = block
        .users
        .iter()
        .map(|u| {
            if u.hhat.norm_squared() > 0.0 {
                return u.hhat.clone();
            }
            let col: Vec<f64> = (0..mt).map(|b| u.xi2.column(b).sum()).collect();
            let order = crate::beam::order_by_power(&col);
            let mut h = linalg::zeros(u.rx(), mt);
            for (i, &b) in order.iter().take(u.rx()).enumerate() {
                let row = block.v.column(b).adjoint() * c64(col[b].sqrt(), 0.0);
                h.set_row(i, &row);
            }
            h
        })
        .collect();
    check_channels(&channels, params)?;
    let rows: usize = channels.iter().map(|h| h.nrows()).sum();
    let mut load = linalg::zeros(rows, rows);
    let mut r = 0;
    let identity = linalg::eye(mt);
    for k in 0..block.users() {
        let m = block.users[k].rx();
        let e = OperatorKernel::of(block, k).eta_raw(&identity) * c64(load_scale, 0.0);
        load.view_mut((r, r), (m, m)).copy_from(&e);
        r += m;
    }
    regularized_inverse(&channels, Some(&load), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::det_equiv::{self, FixedPointOptions};
    use crate::linalg::RMat;
    use crate::posterior::UserPosterior;
    use crate::rng::seeded;
    use rand::Rng;

    fn channels(users: usize, mk: usize, mt: usize, seed: u64) -> Vec<CMat> {
        let mut rng = seeded(seed);
        (0..users)
            .map(|_| linalg::complex_gaussian(mk, mt, &mut rng))
            .collect()
    }

    fn params(users: usize, sigma2: f64) -> DesignParams {
        DesignParams::new(vec![1.0; users], sigma2, 1.0)
    }

    #[test]
    fn rzf_power_is_exact() {
        for seed in 0..10 {
            let h = channels(3, 2, 8, seed);
            let p = rzf(&h, &params(3, 0.3)).unwrap();
            assert!((p.power() - 1.0).abs() < 1e-10);
            assert_eq!(p.as_slice()[1].ncols(), 2);
        }
    }

    #[test]
    fn rzf_zero_forcing_limit() {
        let h = channels(4, 1, 4, 1);
        let p = rzf(&h, &params(4, 1e-14)).unwrap();
        let all = stack(&h) * CMat::from_fn(4, 4, |i, j| p.as_slice()[j][(i, 0)]);
        let scale = all.diagonal().iter().map(|z| z.norm()).fold(0.0, f64::max);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(all[(i, j)].norm() < 1e-8 * scale);
                }
            }
        }
    }

    #[test]
    fn rzf_matched_filter_limit() {
        let h = channels(2, 2, 6, 2);
        let p = rzf(&h, &params(2, 1e10)).unwrap();
        let got = CMat::from_fn(6, 4, |i, j| p.as_slice()[j / 2][(i, j % 2)]);
        let mf = stack(&h).adjoint();
        let cos = (got.adjoint() * &mf).trace().norm() / (got.norm() * mf.norm());
        assert!(cos > 1.0 - 1e-8);
    }

    #[test]
    fn slnr_single_user_is_dominant_singular_space() {
        let h = channels(1, 3, 6, 3);
        let p = slnr(&h, &[2], &params(1, 0.1)).unwrap();
        let svd = h[0].clone().svd(false, true);
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let vt = svd.v_t.unwrap();
        for (j, &i) in idx.iter().take(2).enumerate() {
            let v = vt.row(i).adjoint();
            let c = (v.adjoint() * p.as_slice()[0].column(j))[(0, 0)].norm()
                / p.as_slice()[0].column(j).norm();
            assert!((c - 1.0).abs() < 1e-8);
        }
        assert!((p.power() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn slnr_orthogonal_users_get_matched_eigenbeams() {
        let v = linalg::dft_matrix(8);
        let mut rng = seeded(4);
        let h: Vec<CMat> = (0..2)
            .map(|k| {
                let g = linalg::complex_gaussian(2, 4, &mut rng);
                let mut full = linalg::zeros(2, 8);
                for j in 0..4 {
                    full.set_column(4 * k + j, &g.column(j));
                }
                full * v.adjoint()
            })
            .collect();
        let p = slnr(&h, &[1, 1], &params(2, 0.1)).unwrap();
        for k in 0..2 {
            let e = linalg::hermitian_eigen(&(h[k].adjoint() * &h[k]));
            let top = e.vectors.column(7);
            let c = (top.adjoint() * p.as_slice()[k].column(0))[(0, 0)].norm()
                / p.as_slice()[k].column(0).norm();
            assert!((c - 1.0).abs() < 1e-8, "user {k}: {c}");
            assert!((p.as_slice()[k].norm_squared() - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn generalized_eigen_residual() {
        let mut rng = seeded(5);
        let x = linalg::complex_gaussian(6, 6, &mut rng);
        let y = linalg::complex_gaussian(6, 6, &mut rng);
        let a = &x * x.adjoint();
        let b = &y * y.adjoint() + linalg::eye(6);
        let (vals, vecs) = generalized_eigen(&a, &b).unwrap();
        for (j, &l) in vals.iter().enumerate() {
            let v = vecs.column(j);
            let res = (&a * v - &b * v * c64(l, 0.0)).norm();
            assert!(res <= 1e-8 * (1.0 + a.norm()), "{res}");
        }
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wmmse_is_monotone_and_feasible() {
        let h = channels(4, 2, 8, 6);
        let prm = params(4, 0.1);
        let init = PrecoderSet::random(8, &[2; 4], 1.0, &mut seeded(7));
        let rep = wmmse(&h, &prm, &init, &MmOptions::exhaustive(40)).unwrap();
        for w in rep.rate.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()));
        }
        for (&mu, &pw) in rep.mu.iter().zip(&rep.power) {
            assert!(pw <= 1.0 + 1e-9);
            if mu > 0.0 {
                assert!((pw - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn wmmse_single_user_is_waterfilling() {
        let h = channels(1, 3, 5, 8);
        let sigma2 = 0.3;
        let prm = params(1, sigma2);
        let init = PrecoderSet::random(5, &[3], 1.0, &mut seeded(9));
        let rep = wmmse(
            &h,
            &prm,
            &init,
            &MmOptions {
                rel_tol: 1e-14,
                ..MmOptions::with_iterations(3000)
            },
        )
        .unwrap();
        let gains: Vec<f64> = h[0].singular_values().iter().map(|s| s * s).collect();
        let oracle = crate::mm::tests::waterfilling_rate(&gains, 1.0, sigma2);
        assert!(
            (rep.rate.last().unwrap() - oracle).abs() < 1e-6,
            "{:?} vs {oracle}",
            rep.rate.last()
        );
    }

    /// With known channels the MM step and the WMMSE step coincide.
    #[test]
    fn wmmse_matches_algorithm1_step_for_step() {
        for seed in 0..3 {
            let h = channels(3, 2, 8, 20 + seed);
            let v = linalg::dft_matrix(8);
            let block = BlockPosterior::deterministic(&h, &v);
            let prm = params(3, 0.2);
            let mut a = PrecoderSet::random(8, &[2; 3], 1.0, &mut seeded(30 + seed));
            let mut b = a.clone();
            let fp = FixedPointOptions::default();
            for _ in 0..10 {
                let states =
                    det_equiv::solve_all(&block, a.as_slice(), prm.sigma2_z, &fp, None).unwrap();
                a = mm::algorithm1_step(&block, &prm, a.as_slice(), &states, 1e-6)
                    .unwrap()
                    .precoders;
                b = wmmse_step(&h, &prm, b.as_slice(), 1e-6).unwrap().precoders;
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!((x - y).norm() < 1e-8, "{}", (x - y).norm());
                }
            }
        }
    }

    fn posterior(
        users: usize,
        mk: usize,
        mt: usize,
        seed: u64,
        mean: f64,
        var: f64,
    ) -> BlockPosterior {
        let mut rng = seeded(seed);
        BlockPosterior {
            block: 2,
            v: linalg::dft_matrix(mt),
            users: (0..users)
                .map(|_| UserPosterior {
                    hhat: linalg::complex_gaussian(mk, mt, &mut rng) * c64(mean, 0.0),
                    xi2: RMat::from_fn(mk, mt, |_, _| var * rng.random_range(0.0..2.0)),
                    u: linalg::random_unitary(mk, &mut rng),
                })
                .collect(),
        }
    }

    #[test]
    fn robust_rzf_without_error_is_rzf() {
        let b = posterior(3, 2, 8, 10, 1.0, 0.0);
        let prm = params(3, 0.1);
        let h: Vec<CMat> = b.users.iter().map(|u| u.hhat.clone()).collect();
        let x = robust_rzf(&b, &prm, 1.0).unwrap();
        let y = rzf(&h, &prm).unwrap();
        for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn robust_rzf_with_zero_mean_is_finite() {
        let b = posterior(3, 2, 8, 11, 0.0, 1.0);
        let x = robust_rzf(&b, &params(3, 0.1), 1.0).unwrap();
        assert!(x.as_slice().iter().all(linalg::is_finite));
        assert!((x.power() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn robust_rzf_power_is_exact() {
        for seed in 0..5 {
            let b = posterior(4, 2, 8, 12 + seed, 0.7, 0.5);
            let x = robust_rzf(&b, &params(4, 0.1), 1.0).unwrap();
            assert!((x.power() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(rzf(&[], &params(0, 0.1)).is_err());
        let h = channels(2, 2, 4, 13);
        assert!(rzf(&h, &params(2, 0.0)).is_err());
        assert!(slnr(&h, &[5, 1], &params(2, 0.1)).is_err());
        assert!(robust_rzf(&posterior(2, 2, 4, 14, 1.0, 1.0), &params(2, 0.1), -1.0).is_err());
    }
}
