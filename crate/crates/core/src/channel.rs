//! A priori channel statistics, channel sampling, block-to-block aging and
//! the uplink pilot observation.
//!
//! Channels follow the jointly correlated form `H = U (M ⊙ W) Vᴴ` with `V`
//! the unitary DFT matrix, `M ⊙ M = Ω` the coupling matrix and `W` i.i.d.
//! CN(0, 1). Across the blocks of a slot the channel evolves as a first
//! order Gauss-Markov process with coefficient `α`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat, RMat};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Bessel function of the first kind, order zero.
///
/// Uses `J0(x) = (1/2π) ∫₀^{2π} cos(x sin θ) dθ` with the trapezoidal rule,
/// which converges exponentially for this periodic integrand once the node
/// count exceeds `|x|` by a margin.
pub fn bessel_j0(x: f64) -> f64 {
    let x = x.abs();
    let n = (2.0 * x).ceil() as usize + 64;
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let sum: f64 = (0..n).map(|m| (x * (m as f64 * step).sin()).cos()).sum();
    sum / n as f64
}

/// Jakes temporal correlation `J0(2π v f_c T / c)`, clamped to `[0, 1]`.
pub fn jakes_alpha(speed_mps: f64, carrier_hz: f64, block_s: f64) -> Result<f64> {
    if !(speed_mps >= 0.0) || !(carrier_hz > 0.0) || !(block_s > 0.0) {
        return Err(Error::InvalidConfig(
            "Jakes model needs v >= 0, f_c > 0 and T > 0".into(),
        ));
    }
    let arg = 2.0 * std::f64::consts::PI * speed_mps * carrier_hz * block_s / SPEED_OF_LIGHT;
    Ok(bessel_j0(arg).clamp(0.0, 1.0))
}

/// Per-user a priori statistical CSI: eigenbasis `U`, coupling matrix `Ω`
/// and aging coefficient `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserStatistics {
    u: CMat,
    omega: RMat,
    mask: RMat,
    alpha: f64,
}

impl UserStatistics {
    pub fn new(u: CMat, omega: RMat, alpha: f64) -> Result<Self> {
        if u.nrows() != u.ncols() || u.nrows() != omega.nrows() {
            return Err(Error::Shape(format!(
                "U is {}x{} but Omega has {} rows",
                u.nrows(),
                u.ncols(),
                omega.nrows()
            )));
        }
        if linalg::unitarity_defect(&u) > 1e-10 {
            return Err(Error::InvalidConfig("U is not unitary".into()));
        }
        if omega.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig(
                "Omega entries must be finite and nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        let mask = omega.map(f64::sqrt);
        let omega = mask.component_mul(&mask);
        Ok(UserStatistics {
            u,
            omega,
            mask,
            alpha,
        })
    }

    pub fn u(&self) -> &CMat {
        &self.u
    }

    pub fn omega(&self) -> &RMat {
        &self.omega
    }

    /// Elementwise square root of `Ω`.
    pub fn mask(&self) -> &RMat {
        &self.mask
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rx(&self) -> usize {
        self.omega.nrows()
    }

    pub fn tx(&self) -> usize {
        self.omega.ncols()
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        let mut out = self.clone();
        out.alpha = alpha;
        Ok(out)
    }

    /// Column sums of `Ω`: the average power each transmit beam carries to
    /// this user.
    pub fn beam_powers(&self) -> Vec<f64> {
        (0..self.tx()).map(|j| self.omega.column(j).sum()).collect()
    }
}

/// Parameters of the synthetic ray-cluster statistics generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProfile {
    /// Number of contiguous active transmit beams per user.
    pub band_width: Vec<usize>,
    /// Center beam index per user; drawn uniformly when absent.
    #[serde(default)]
    pub centers: Option<Vec<usize>>,
    /// Power decay away from the band center, dB per beam.
    #[serde(default)]
    pub decay_db_per_beam: f64,
    /// Standard deviation of the per-entry log-normal perturbation, dB.
    #[serde(default)]
    pub lognormal_sigma_db: f64,
}

impl GeneratorProfile {
    pub fn uniform(users: usize, band_width: usize) -> Self {
        GeneratorProfile {
            band_width: vec![band_width; users],
            centers: None,
            decay_db_per_beam: 0.0,
            lognormal_sigma_db: 0.0,
        }
    }

    /// Bands of `width` beams with evenly spaced centers around the array.
    pub fn spread(users: usize, tx: usize, width: usize) -> Self {
        GeneratorProfile {
            band_width: vec![width; users],
            centers: Some((0..users).map(|k| k * tx / users + width / 2).collect()),
            decay_db_per_beam: 1.0,
            lognormal_sigma_db: 2.0,
        }
    }
}

/// Beam indices covered by a band of `width` beams centered on `center`.
pub fn band_beams(center: usize, width: usize, tx: usize) -> Vec<usize> {
    let start = center as isize - (width / 2) as isize;
    (0..width)
        .map(|j| (start + j as isize).rem_euclid(tx as isize) as usize)
        .collect()
}

/// Draw per-user statistics from the synthetic generator.
///
/// Each user receives a Haar unitary `U_k` and an `Ω_k` supported on a
/// contiguous (wrapping) band of transmit beams with exponentially decaying
/// and log-normally perturbed powers, rescaled so the entries sum to
/// `M_k · M_t`.
pub fn generate_synthetic_stats<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    profile: &GeneratorProfile,
    rng: &mut R,
) -> Result<Vec<UserStatistics>> {
    let k = cfg.users();
    let mt = cfg.tx_antennas;
    if profile.band_width.len() != k {
        return Err(Error::InvalidProfile(format!(
            "band_width has {} entries for {k} users",
            profile.band_width.len()
        )));
    }
    if let Some(c) = &profile.centers {
        if c.len() != k {
            return Err(Error::InvalidProfile(format!(
                "centers has {} entries for {k} users",
                c.len()
            )));
        }
    }
    if !(profile.lognormal_sigma_db >= 0.0) || !profile.decay_db_per_beam.is_finite() {
        return Err(Error::InvalidProfile(
            "negative or non-finite spread".into(),
        ));
    }
    let ln_sigma = profile.lognormal_sigma_db * std::f64::consts::LN_10 / 10.0;

    let mut out = Vec::with_capacity(k);
    for user in 0..k {
        let width = profile.band_width[user];
        if width == 0 || width > mt {
            return Err(Error::InvalidProfile(format!(
                "band width {width} for user {user} must lie in 1..={mt}"
            )));
        }
        let mk = cfg.rx_antennas[user];
        let u = linalg::random_unitary(mk, rng);
        let center = match &profile.centers {
            Some(c) => c[user] % mt,
            None => rng.random_range(0..mt),
        };
        let mut omega = RMat::zeros(mk, mt);
        for (offset, beam) in band_beams(center, width, mt).into_iter().enumerate() {
            let dist = (offset as f64 - (width / 2) as f64).abs();
            let base = 10f64.powf(-profile.decay_db_per_beam * dist / 10.0);
            for i in 0..mk {
                let z: f64 = if ln_sigma > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                omega[(i, beam)] = base * (ln_sigma * z).exp();
            }
        }
        let total: f64 = omega.sum();
        omega *= (mk * mt) as f64 / total;
        out.push(UserStatistics::new(u, omega, cfg.alphas[user])?);
    }
    Ok(out)
}

/// Estimate `U_k` and `Ω_k` from zero-mean channel samples.
///
/// `U_k` holds the eigenvectors of the sample covariance `(1/S) Σ H Hᴴ` in
/// descending eigenvalue order (stable for ties) and
/// `Ω_k = (1/S) Σ |U_kᴴ H V|²` entrywise.
pub fn estimate_stats_from_samples(
    samples: &[CMat],
    v: &CMat,
    alpha: f64,
) -> Result<UserStatistics> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("at least one sample is required".into()))?;
    let (mk, mt) = first.shape();
    if v.shape() != (mt, mt) {
        return Err(Error::Shape(format!("V must be {mt}x{mt}")));
    }
    let mut cov = linalg::zeros(mk, mk);
    for h in samples {
        if h.shape() != (mk, mt) {
            return Err(Error::Shape("samples differ in shape".into()));
        }
        if !linalg::is_finite(h) {
            return Err(Error::NonFinite("channel sample".into()));
        }
        cov += h * h.adjoint();
    }
    let s = samples.len() as f64;
    cov /= c64(s, 0.0);

    let u = if cov.iter().all(|z| *z == c64(0.0, 0.0)) {
        linalg::eye(mk)
    } else {
        let eig = linalg::hermitian_eigen(&cov);
        // hermitian_eigen sorts ascending; reverse keeping tie order stable
        let mut order: Vec<usize> = (0..mk).collect();
        order.sort_by(|&a, &b| eig.values[b].total_cmp(&eig.values[a]));
        let mut u = linalg::zeros(mk, mk);
        for (dst, &src) in order.iter().enumerate() {
            u.set_column(dst, &eig.vectors.column(src));
        }
        u
    };

    let uh = u.adjoint();
    let mut omega = RMat::zeros(mk, mt);
    for h in samples {
        let beam = &uh * h * v;
        omega += beam.map(|z| z.norm_sqr());
    }
    omega /= s;
    omega.apply(|x| *x = x.max(0.0));
    UserStatistics::new(u, omega, alpha)
}

/// One draw `U (M ⊙ W) Vᴴ`.
pub fn sample_channel<R: Rng + ?Sized>(stats: &UserStatistics, v: &CMat, rng: &mut R) -> CMat {
    let w = linalg::complex_gaussian(stats.rx(), stats.tx(), rng);
    let core = w.zip_map(stats.mask(), |z, m| z * m);
    stats.u() * core * v.adjoint()
}

/// True channels of one user over the `N_b` blocks of a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueChannelSlot {
    /// `blocks[n - 1]` is the channel in block `n`.
    pub blocks: Vec<CMat>,
}

/// Gauss-Markov evolution `H_{n+1} = α H_n + √(1−α²) U (M ⊙ W_{n+1}) Vᴴ`.
pub fn evolve_slot<R: Rng + ?Sized>(
    stats: &UserStatistics,
    v: &CMat,
    blocks: usize,
    rng: &mut R,
) -> Result<TrueChannelSlot> {
    if blocks == 0 {
        return Err(Error::InvalidConfig(
            "a slot needs at least one block".into(),
        ));
    }
    let a = stats.alpha();
    let innovation = (1.0 - a * a).max(0.0).sqrt();
    let mut out = Vec::with_capacity(blocks);
    out.push(sample_channel(stats, v, rng));
    for n in 1..blocks {
        let fresh = sample_channel(stats, v, rng);
        let next = &out[n - 1] * c64(a, 0.0) + fresh * c64(innovation, 0.0);
        out.push(next);
    }
    Ok(TrueChannelSlot { blocks: out })
}

/// Rows of the `T × T` unitary DFT assigned to users in order; user `k`
/// receives an `M_k × T` pilot with `X_k X_kᴴ = I` and `X_l X_kᴴ = 0`.
pub fn build_orthogonal_pilots(cfg: &SystemConfig) -> Result<Vec<CMat>> {
    let needed = cfg.total_rx();
    if needed > cfg.block_len {
        return Err(Error::PilotCapacity {
            needed,
            available: cfg.block_len,
        });
    }
    let f = linalg::dft_matrix(cfg.block_len);
    let mut row = 0;
    Ok(cfg
        .rx_antennas
        .iter()
        .map(|&m| {
            let x = f.rows(row, m).into_owned();
            row += m;
            x
        })
        .collect())
}

/// Received block-1 pilot matrix `Y = Σ_k H_{k,1}ᵀ X_k + Z` with
/// `Z` i.i.d. CN(0, σ_BS²).
pub fn simulate_uplink_observation<R: Rng + ?Sized>(
    first_block: &[CMat],
    pilots: &[CMat],
    sigma2_bs: f64,
    rng: &mut R,
) -> Result<CMat> {
    if first_block.len() != pilots.len() || first_block.is_empty() {
        return Err(Error::Shape("one channel and one pilot per user".into()));
    }
    let mt = first_block[0].ncols();
    let t = pilots[0].ncols();
    let mut y = linalg::zeros(mt, t);
    for (h, x) in first_block.iter().zip(pilots) {
        if h.ncols() != mt || h.nrows() != x.nrows() || x.ncols() != t {
            return Err(Error::Shape("channel and pilot shapes disagree".into()));
        }
        y += h.transpose() * x;
    }
    let noise = linalg::complex_gaussian(mt, t, rng);
    y += noise * c64(sigma2_bs.max(0.0).sqrt(), 0.0);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Power-series oracle for J0, independent of the quadrature path.
    fn j0_series(x: f64) -> f64 {
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for m in 1..80 {
            term *= -q / (m as f64 * m as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn bessel_matches_series() {
        for &x in &[0.0, 0.1, 0.6288, 1.0, 2.404825557695773, 3.7, 5.0, 8.0] {
            assert!((bessel_j0(x) - j0_series(x)).abs() < 1e-12, "x={x}");
        }
        // first zero
        assert!(bessel_j0(2.404825557695773).abs() < 1e-14);
    }

    #[test]
    fn jakes_examples() {
        assert_eq!(jakes_alpha(0.0, 2e9, 0.5e-3).unwrap(), 1.0);
        // argument equal to the first Bessel zero (slightly past it)
        let arg = 2.404826;
        let v = arg * SPEED_OF_LIGHT / (2.0 * std::f64::consts::PI * 2e9 * 1e-3);
        assert_eq!(jakes_alpha(v, 2e9, 1e-3).unwrap(), 0.0);
        let x = 2.0 * std::f64::consts::PI * 30.0 * 2e9 * 0.5e-3 / SPEED_OF_LIGHT;
        let a = jakes_alpha(30.0, 2e9, 0.5e-3).unwrap();
        assert!((a - j0_series(x)).abs() < 1e-12);
        // frozen from the series oracle: J0(0.628753506...)
        assert!((a - 0.903_582_583_381).abs() < 1e-11, "{a}");
        assert!(jakes_alpha(-1.0, 2e9, 1e-3).is_err());
    }

    #[test]
    fn uniform_profile_gives_unit_omega() {
        let cfg = SystemConfig::desk(3);
        let profile = GeneratorProfile::uniform(3, cfg.tx_antennas);
        let stats = generate_synthetic_stats(&cfg, &profile, &mut seeded(1)).unwrap();
        for s in &stats {
            assert!(s.omega().iter().all(|&x| (x - 1.0).abs() < 1e-14));
            assert!(linalg::unitarity_defect(s.u()) < 1e-10);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SystemConfig::desk(4);
        let profile = GeneratorProfile::spread(4, cfg.tx_antennas, 5);
        let a = generate_synthetic_stats(&cfg, &profile, &mut seeded(42)).unwrap();
        let b = generate_synthetic_stats(&cfg, &profile, &mut seeded(42)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let total: f64 = s.omega().sum();
            assert!((total - (s.rx() * s.tx()) as f64).abs() < 1e-9);
            assert!(s.mask().zip_map(s.mask(), |x, y| x * y) == *s.omega());
        }
    }

    #[test]
    fn disjoint_bands_have_disjoint_support() {
        let cfg = SystemConfig::desk(2);
        let profile = GeneratorProfile {
            band_width: vec![4, 4],
            centers: Some(vec![2, 10]),
            decay_db_per_beam: 0.5,
            lognormal_sigma_db: 3.0,
        };
        let stats = generate_synthetic_stats(&cfg, &profile, &mut seeded(3)).unwrap();
        let a = stats[0].beam_powers();
        let b = stats[1].beam_powers();
        assert!(a.iter().zip(&b).all(|(x, y)| x * y == 0.0));
    }

    #[test]
    fn band_wraps_around() {
        assert_eq!(band_beams(0, 3, 8), vec![7, 0, 1]);
        assert_eq!(band_beams(7, 4, 8), vec![5, 6, 7, 0]);
    }

    #[test]
    fn invalid_band_width() {
        let cfg = SystemConfig::desk(1);
        let profile = GeneratorProfile::uniform(1, cfg.tx_antennas + 1);
        assert!(matches!(
            generate_synthetic_stats(&cfg, &profile, &mut seeded(0)),
            Err(Error::InvalidProfile(_))
        ));
    }

    #[test]
    fn estimate_from_zero_sample() {
        let v = linalg::dft_matrix(4);
        let s = estimate_stats_from_samples(&[linalg::zeros(2, 4)], &v, 1.0).unwrap();
        assert_eq!(s.u(), &linalg::eye(2));
        assert!(s.omega().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn estimate_from_rank_one_sample() {
        // H = e_1 v_3ᴴ: dominant eigenvector e_1 goes to row 0 of U.
        let mt = 8;
        let v = linalg::dft_matrix(mt);
        let mut u_col = linalg::zeros(3, 1);
        u_col[(1, 0)] = c64(1.0, 0.0);
        let h = &u_col * v.column(3).adjoint();
        let s = estimate_stats_from_samples(&[h], &v, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..mt {
                let expect = if (i, j) == (0, 3) { 1.0 } else { 0.0 };
                assert!((s.omega()[(i, j)] - expect).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn estimate_rejects_non_finite() {
        let v = linalg::dft_matrix(2);
        let mut h = linalg::zeros(1, 2);
        h[(0, 0)] = c64(f64::NAN, 0.0);
        assert!(matches!(
            estimate_stats_from_samples(&[h], &v, 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_omega_gives_zero_channel() {
        let u = linalg::eye(2);
        let stats = UserStatistics::new(u, RMat::zeros(2, 4), 0.5).unwrap();
        let h = sample_channel(&stats, &linalg::dft_matrix(4), &mut seeded(1));
        assert_eq!(h.norm(), 0.0);
    }

    #[test]
    fn alpha_one_freezes_the_slot() {
        let cfg = SystemConfig::desk(1);
        let mut stats =
            generate_synthetic_stats(&cfg, &GeneratorProfile::uniform(1, 16), &mut seeded(4))
                .unwrap();
        stats[0] = stats[0].with_alpha(1.0).unwrap();
        let slot = evolve_slot(&stats[0], &linalg::dft_matrix(16), 7, &mut seeded(5)).unwrap();
        for n in 1..7 {
            assert_eq!(slot.blocks[n], slot.blocks[0]);
        }
    }

    #[test]
    fn pilots_are_orthonormal() {
        let mut cfg = SystemConfig::desk(3);
        cfg.rx_antennas = vec![1, 2, 3];
        cfg.streams = vec![1, 2, 2];
        cfg.block_len = 9;
        let x = build_orthogonal_pilots(&cfg).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                let g = &x[l] * x[k].adjoint();
                let expect = if k == l {
                    linalg::eye(x[k].nrows())
                } else {
                    linalg::zeros(x[l].nrows(), x[k].nrows())
                };
                assert!((g - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn pilots_fill_a_square_block() {
        let mut cfg = SystemConfig::desk(1);
        cfg.rx_antennas = vec![4];
        cfg.streams = vec![4];
        cfg.block_len = 4;
        let x = build_orthogonal_pilots(&cfg).unwrap();
        assert!(linalg::unitarity_defect(&x[0]) < 1e-12);

        cfg.block_len = 3;
        assert!(matches!(
            build_orthogonal_pilots(&cfg),
            Err(Error::PilotCapacity { .. })
        ));
    }

    #[test]
    fn noiseless_observation_inverts_pilots() {
        let mut cfg = SystemConfig::desk(2);
        cfg.block_len = 4;
        let v = linalg::dft_matrix(cfg.tx_antennas);
        let stats =
            generate_synthetic_stats(&cfg, &GeneratorProfile::uniform(2, 16), &mut seeded(8))
                .unwrap();
        let mut rng = seeded(9);
        let h: Vec<CMat> = stats
            .iter()
            .map(|s| sample_channel(s, &v, &mut rng))
            .collect();
        let x = build_orthogonal_pilots(&cfg).unwrap();
        let y = simulate_uplink_observation(&h, &x, 0.0, &mut rng).unwrap();
        for k in 0..2 {
            let back = &y * x[k].adjoint();
            assert!((back - h[k].transpose()).norm() < 1e-12);
        }
    }
}
