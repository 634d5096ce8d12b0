//! Per-block a posteriori channel model built from the block-1 uplink
//! pilot observation.
//!
//! Given `Y`, the channel of user `k` in block `n` is distributed as
//! `Ĥ_kn + U_k (Ξ_kn ⊙ W) Vᴴ` where `Ĥ_kn` is the MMSE estimate shrunk by
//! `α^{n−1}` and `Ξ²_kn` the elementwise beam-domain error variance.

use rand::Rng;

use crate::channel::UserStatistics;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat, RMat};

/// Entrywise `Ω / (Ω + σ_BS²)`, with the `σ_BS² = 0` limit taken as 1 on
/// the support of `Ω` and 0 off it.
pub fn delta_matrix(stats: &UserStatistics, sigma2_bs: f64) -> RMat {
    stats.omega().map(|w| {
        if w <= 0.0 {
            0.0
        } else {
            w / (w + sigma2_bs.max(0.0))
        }
    })
}

/// `α^{2(n−1)}`, with `0^0 = 1`.
fn aging_power(alpha: f64, n: usize) -> f64 {
    alpha.powi(2 * (n as i32 - 1))
}

/// Elementwise error variance `Ω − α^{2(n−1)} Ω Δ`, clamped at zero.
pub fn xi2_matrix(stats: &UserStatistics, sigma2_bs: f64, n: usize) -> Result<RMat> {
    if n == 0 {
        return Err(Error::Block(n));
    }
    let a2 = aging_power(stats.alpha(), n);
    let delta = delta_matrix(stats, sigma2_bs);
    Ok(stats
        .omega()
        .zip_map(&delta, |w, d| (w - a2 * w * d).max(0.0)))
}

/// MMSE estimate `α^{n−1} U (Δ ⊙ Uᴴ X_k* Yᵀ V) Vᴴ` of user `k`'s channel in
/// block `n`.
pub fn mmse_estimate(
    y: &CMat,
    pilot: &CMat,
    stats: &UserStatistics,
    v: &CMat,
    sigma2_bs: f64,
    n: usize,
) -> Result<CMat> {
    if n == 0 {
        return Err(Error::Block(n));
    }
    let (mk, mt) = (stats.rx(), stats.tx());
    if y.nrows() != mt || pilot.nrows() != mk || pilot.ncols() != y.ncols() || v.nrows() != mt {
        return Err(Error::Shape(format!(
            "Y is {}x{}, pilot {}x{}, user {mk}x{mt}",
            y.nrows(),
            y.ncols(),
            pilot.nrows(),
            pilot.ncols()
        )));
    }
    let beam = stats.u().adjoint() * pilot.conjugate() * y.transpose() * v;
    let delta = delta_matrix(stats, sigma2_bs);
    let scale = stats.alpha().powi(n as i32 - 1);
    let shrunk = beam.zip_map(&delta, |z, d| z * (d * scale));
    Ok(stats.u() * shrunk * v.adjoint())
}

/// Posterior of one user in one block.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPosterior {
    pub hhat: CMat,
    pub xi2: RMat,
    pub u: CMat,
}

impl UserPosterior {
    pub fn rx(&self) -> usize {
        self.hhat.nrows()
    }

    /// One draw `Ĥ + U (Ξ ⊙ W) Vᴴ`.
    pub fn sample<R: Rng + ?Sized>(&self, v: &CMat, rng: &mut R) -> CMat {
        let w = linalg::complex_gaussian(self.xi2.nrows(), self.xi2.ncols(), rng);
        let core = w.zip_map(&self.xi2, |z, s| z * s.sqrt());
        &self.hhat + &self.u * core * v.adjoint()
    }

    pub fn is_deterministic(&self) -> bool {
        self.xi2.iter().all(|&x| x == 0.0)
    }
}

/// Posterior of all users for one data block, with the shared DFT basis.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPosterior {
    pub block: usize,
    pub v: CMat,
    pub users: Vec<UserPosterior>,
}

impl BlockPosterior {
    pub fn tx(&self) -> usize {
        self.v.nrows()
    }

    pub fn users(&self) -> usize {
        self.users.len()
    }

    /// Purely statistical knowledge: `Ĥ = 0` and `Ξ² = Ω`.
    pub fn zero_mean(stats: &[UserStatistics], v: &CMat) -> Self {
        BlockPosterior {
            block: 0,
            v: v.clone(),
            users: stats
                .iter()
                .map(|s| UserPosterior {
                    hhat: linalg::zeros(s.rx(), s.tx()),
                    xi2: s.omega().clone(),
                    u: s.u().clone(),
                })
                .collect(),
        }
    }

    /// Perfectly known channels: `Ĥ = H` and `Ξ² = 0`.
    pub fn deterministic(channels: &[CMat], v: &CMat) -> Self {
        BlockPosterior {
            block: 0,
            v: v.clone(),
            users: channels
                .iter()
                .map(|h| UserPosterior {
                    hhat: h.clone(),
                    xi2: RMat::zeros(h.nrows(), h.ncols()),
                    u: linalg::eye(h.nrows()),
                })
                .collect(),
        }
    }

    /// Stream counts and shapes must agree with the configuration.
    pub fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.users() != cfg.users() || self.tx() != cfg.tx_antennas {
            return Err(Error::Shape(format!(
                "posterior has {} users on {} antennas, config has {} on {}",
                self.users(),
                self.tx(),
                cfg.users(),
                cfg.tx_antennas
            )));
        }
        for (k, (u, &m)) in self.users.iter().zip(&cfg.rx_antennas).enumerate() {
            if u.rx() != m {
                return Err(Error::Shape(format!(
                    "user {k} has {} rows, expected {m}",
                    u.rx()
                )));
            }
        }
        Ok(())
    }
}

/// Posterior for every data block `n = 2..=N_b` of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorModel {
    blocks: Vec<BlockPosterior>,
}

impl PosteriorModel {
    pub fn block(&self, n: usize) -> Result<&BlockPosterior> {
        if n < 2 {
            return Err(Error::Block(n));
        }
        self.blocks.get(n - 2).ok_or(Error::Block(n))
    }

    pub fn blocks(&self) -> &[BlockPosterior] {
        &self.blocks
    }

    pub fn from_blocks(blocks: Vec<BlockPosterior>) -> Self {
        PosteriorModel { blocks }
    }

    /// Keep only the first `count` data blocks.
    pub fn truncated(mut self, count: usize) -> Self {
        self.blocks.truncate(count);
        self
    }

    /// Data block indices covered by the model.
    pub fn data_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().map(|b| b.block)
    }
}

/// Assemble the posterior for all users and data blocks of a slot.
pub fn build_posterior(
    y: &CMat,
    pilots: &[CMat],
    stats: &[UserStatistics],
    v: &CMat,
    sigma2_bs: f64,
    cfg: &SystemConfig,
) -> Result<PosteriorModel> {
    if pilots.len() != stats.len() || stats.len() != cfg.users() {
        return Err(Error::Shape(
            "one pilot and one statistics entry per user".into(),
        ));
    }
    let first: Vec<CMat> = stats
        .iter()
        .zip(pilots)
        .map(|(s, x)| mmse_estimate(y, x, s, v, sigma2_bs, 1))
        .collect::<Result<_>>()?;
    let blocks = (2..=cfg.blocks)
        .map(|n| {
            let users = stats
                .iter()
                .zip(&first)
                .map(|(s, h1)| {
                    Ok(UserPosterior {
                        hhat: h1 * c64(s.alpha().powi(n as i32 - 1), 0.0),
                        xi2: xi2_matrix(s, sigma2_bs, n)?,
                        u: s.u().clone(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(BlockPosterior {
                block: n,
                v: v.clone(),
                users,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PosteriorModel { blocks })
}
