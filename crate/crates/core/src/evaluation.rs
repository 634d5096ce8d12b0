//! Monte Carlo rate estimation and the slot-level experiment protocol.
//!
//! A slot draws the block-1 channels from the a priori statistics, sends
//! orthogonal pilots, builds the posterior for data blocks `2..=N_b` and
//! designs precoders for every block. Achieved rates are scored under the
//! law of the true aged channel given the true block-1 channel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::beam;
use crate::channel::{
    build_orthogonal_pilots, generate_synthetic_stats, sample_channel, simulate_uplink_observation,
    GeneratorProfile, UserStatistics,
};
use crate::config::{noise_from_snr_db, DesignParams, SystemConfig};
use crate::det_equiv::DeState;
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat};
use crate::mm::{self, MmOptions, PrecoderSet};
use crate::operators;
use crate::posterior::{
    build_posterior, xi2_matrix, BlockPosterior, PosteriorModel, UserPosterior,
};
use crate::rng::{derive, stream};

/// Precoder design methods available to experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "alg1")]
    Mm,
    #[serde(rename = "alg2")]
    MmShared,
    #[serde(rename = "alg3")]
    BeamDomain,
    #[serde(rename = "rzf")]
    Rzf,
    #[serde(rename = "slnr")]
    Slnr,
    #[serde(rename = "wmmse")]
    Wmmse,
    #[serde(rename = "robust-rzf")]
    RobustRzf,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Mm,
        Algorithm::MmShared,
        Algorithm::BeamDomain,
        Algorithm::Rzf,
        Algorithm::Slnr,
        Algorithm::Wmmse,
        Algorithm::RobustRzf,
    ];

    /// Short name accepted on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mm => "alg1",
            Algorithm::MmShared => "alg2",
            Algorithm::BeamDomain => "alg3",
            Algorithm::Rzf => "rzf",
            Algorithm::Slnr => "slnr",
            Algorithm::Wmmse => "wmmse",
            Algorithm::RobustRzf => "robust-rzf",
        }
    }

    /// Name written to result files.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::RobustRzf => "robust-rzf (conventional)",
            other => other.name(),
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(
            self,
            Algorithm::Mm | Algorithm::MmShared | Algorithm::BeamDomain | Algorithm::Wmmse
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm `{s}`")))
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl RateEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return RateEstimate { mean, stderr: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        RateEstimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Ergodic rate `E[log det(I + R⁻¹ H P Pᴴ Hᴴ)]` of user `k`, in nats, with
/// `H` drawn from the posterior and `R` the closed-form interference
/// covariance.
pub fn monte_carlo_rate<R: Rng + ?Sized>(
    block: &BlockPosterior,
    precoders: &[CMat],
    k: usize,
    sigma2_z: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<RateEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    if k >= block.users() {
        return Err(Error::Shape(format!("user {k} out of range")));
    }
    let r = operators::interference_covariance(block, precoders, k, sigma2_z)?;
    let r_logdet = linalg::hpd_logdet(&r)?;
    let user = &block.users[k];
    let p = &precoders[k];
    let mean_part = &user.hhat * p;
    let beam_p = block.v.adjoint() * p;
    let std = user.xi2.map(f64::sqrt);
    let random = !user.is_deterministic();
    let draws = if random { n_samples } else { 1 };
    let mut xs = Vec::with_capacity(draws);
    for _ in 0..draws {
        let hp = if random {
            let w = linalg::complex_gaussian(user.rx(), block.tx(), rng);
            let core = w.zip_map(&std, |z, s| z * s);
            &mean_part + &user.u * core * &beam_p
        } else {
            mean_part.clone()
        };
        let s = &r + &hp * hp.adjoint();
        xs.push((linalg::hpd_logdet(&s)? - r_logdet).max(0.0));
    }
    Ok(RateEstimate::from_samples(&xs))
}

/// Weighted sum of per-user Monte Carlo rates; user `k` draws from the
/// stream `derive(seed, path ++ [k])`.
pub fn monte_carlo_sum_rate(
    block: &BlockPosterior,
    precoders: &[CMat],
    weights: &[f64],
    sigma2_z: f64,
    n_samples: usize,
    seed: u64,
    path: &[u64],
) -> Result<RateEstimate> {
    let per_user: Vec<RateEstimate> = (0..block.users())
        .into_par_iter()
        .map(|k| {
            let mut p = path.to_vec();
            p.push(k as u64);
            monte_carlo_rate(
                block,
                precoders,
                k,
                sigma2_z,
                n_samples,
                &mut derive(seed, &p),
            )
        })
        .collect::<Result<_>>()?;
    Ok(RateEstimate {
        mean: per_user.iter().zip(weights).map(|(r, w)| w * r.mean).sum(),
        stderr: per_user
            .iter()
            .zip(weights)
            .map(|(r, w)| (w * r.stderr).powi(2))
            .sum::<f64>()
            .sqrt(),
    })
}

/// Law of the block-`n` channel given the true block-1 channel:
/// mean `α^{n−1} H_1`, variances `(1 − α^{2(n−1)}) Ω`.
pub fn aged_channel_law(
    stats: &[UserStatistics],
    first_block: &[CMat],
    v: &CMat,
    n: usize,
) -> Result<BlockPosterior> {
    let users = stats
        .iter()
        .zip(first_block)
        .map(|(s, h)| {
            Ok(UserPosterior {
                hhat: h * c64(s.alpha().powi(n as i32 - 1), 0.0),
                xi2: xi2_matrix(s, 0.0, n)?,
                u: s.u().clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(BlockPosterior {
        block: n,
        v: v.clone(),
        users,
    })
}

/// Knobs of the slot protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub slots: usize,
    pub mc_samples: usize,
    pub mm: MmOptions,
    /// Scale of the error load in the robust RZF baseline.
    pub robust_load: f64,
    pub profile: GeneratorProfile,
}

impl ExperimentOptions {
    pub fn new(profile: GeneratorProfile) -> Self {
        ExperimentOptions {
            slots: 100,
            mc_samples: 1000,
            mm: MmOptions::default(),
            robust_load: 1.0,
            profile,
        }
    }
}

/// Achieved sum-rate of one algorithm in one block of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub snr_db: f64,
    pub algorithm: String,
    pub slot: usize,
    pub block: usize,
    pub sum_rate: f64,
    pub stderr: f64,
    pub seed: u64,
}

/// One MM iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub snr_db: f64,
    pub algorithm: String,
    pub slot: usize,
    pub block: usize,
    pub iteration: usize,
    pub de_objective: f64,
    pub mu: f64,
    pub power: f64,
    pub seed: u64,
}

/// Residual of one fixed-point sweep at the final MM iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub algorithm: String,
    pub slot: usize,
    pub user: usize,
    pub sweep: usize,
    pub residual: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResult {
    pub rates: Vec<RateRecord>,
    pub traces: Vec<TraceRecord>,
    /// Fixed-point residual histories, filled when the solver trace is on.
    pub solver: Vec<SolverRecord>,
    /// Slots dropped because a design or evaluation step failed.
    pub failed_slots: usize,
    pub warnings: Vec<String>,
}

impl ExperimentResult {
    fn append(&mut self, other: ExperimentResult) {
        self.rates.extend(other.rates);
        self.traces.extend(other.traces);
        self.solver.extend(other.solver);
        self.failed_slots += other.failed_slots;
        self.warnings.extend(other.warnings);
    }

    fn select(&self, algorithm: Algorithm, snr_db: Option<f64>) -> Vec<f64> {
        self.rates
            .iter()
            .filter(|r| r.algorithm == algorithm.label() && snr_db.is_none_or(|s| r.snr_db == s))
            .map(|r| r.sum_rate)
            .collect()
    }

    /// Average over slots and blocks; `None` when there are no records.
    pub fn mean_rate(&self, algorithm: Algorithm, snr_db: Option<f64>) -> Option<f64> {
        let xs = self.select(algorithm, snr_db);
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Average with the standard error across slot and block records.
    pub fn summary(&self, algorithm: Algorithm, snr_db: Option<f64>) -> Option<RateEstimate> {
        let xs = self.select(algorithm, snr_db);
        (!xs.is_empty()).then(|| RateEstimate::from_samples(&xs))
    }

    pub fn algorithms(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rates.iter().map(|r| r.algorithm.clone()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Fixed inputs of a run: statistics, DFT basis and pilots.
struct Setup {
    truth: Vec<UserStatistics>,
    design: Vec<UserStatistics>,
    v: CMat,
    pilots: Vec<CMat>,
}

impl Setup {
    fn new(cfg: &SystemConfig, profile: &GeneratorProfile, assumed: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        if cfg.blocks < 2 {
            return Err(Error::InvalidConfig(
                "experiments need at least one data block (blocks >= 2)".into(),
            ));
        }
        let truth =
            generate_synthetic_stats(cfg, profile, &mut derive(cfg.seed, &[stream::STATISTICS]))?;
        let design = match assumed {
            Some(a) => truth
                .iter()
                .map(|s| s.with_alpha(a))
                .collect::<Result<_>>()?,
            None => truth.clone(),
        };
        Ok(Setup {
            truth,
            design,
            v: linalg::dft_matrix(cfg.tx_antennas),
            pilots: build_orthogonal_pilots(cfg)?,
        })
    }
}

struct Slot {
    index: usize,
    design: PosteriorModel,
    truth: Vec<BlockPosterior>,
    genie: Vec<CMat>,
    init: PrecoderSet,
}

fn draw_slot(cfg: &SystemConfig, setup: &Setup, index: usize) -> Result<Slot> {
    let mut rng = derive(cfg.seed, &[stream::CHANNEL, index as u64]);
    let genie: Vec<CMat> = setup
        .truth
        .iter()
        .map(|s| sample_channel(s, &setup.v, &mut rng))
        .collect();
    let y = simulate_uplink_observation(&genie, &setup.pilots, cfg.sigma2_bs, &mut rng)?;
    let design = build_posterior(
        &y,
        &setup.pilots,
        &setup.design,
        &setup.v,
        cfg.sigma2_bs,
        cfg,
    )?;
    let truth = (2..=cfg.blocks)
        .map(|n| aged_channel_law(&setup.truth, &genie, &setup.v, n))
        .collect::<Result<_>>()?;
    let init = PrecoderSet::random(
        cfg.tx_antennas,
        &cfg.streams,
        cfg.power,
        &mut derive(cfg.seed, &[stream::INIT, index as u64]),
    );
    Ok(Slot {
        index,
        design,
        truth,
        genie,
        init,
    })
}

/// Per-iteration `(objective, mu, power)` of one design run.
type Trace = Vec<(f64, f64, f64)>;

/// Outcome of designing every data block of a slot.
struct Design {
    precoders: Vec<PrecoderSet>,
    /// Trace of the first data block.
    trace: Trace,
    /// Final fixed-point states of the first data block, when the method
    /// uses them.
    states: Vec<DeState>,
}

fn mm_trace(r: &mm::MmReport) -> Trace {
    r.objective
        .iter()
        .zip(&r.mu)
        .zip(&r.power)
        .map(|((&o, &m), &p)| (o, m, p))
        .collect()
}

/// Precoders for every data block, warm-starting iterative designs from the
/// previous block.
fn design_slot(
    alg: Algorithm,
    cfg: &SystemConfig,
    setup: &Setup,
    slot: &Slot,
    params: &DesignParams,
    opts: &ExperimentOptions,
) -> Result<Design> {
    let blocks = slot.design.blocks();
    let mut out = Vec::with_capacity(blocks.len());
    let mut first_trace = Trace::new();
    let mut first_states = Vec::new();
    match alg {
        Algorithm::Mm | Algorithm::MmShared | Algorithm::Wmmse => {
            let mut prev = slot.init.clone();
            for (i, b) in blocks.iter().enumerate() {
                let (p, trace, states) = match alg {
                    Algorithm::Mm | Algorithm::MmShared => {
                        let r = if alg == Algorithm::Mm {
                            mm::algorithm1(b, params, &prev, &opts.mm)?
                        } else {
                            mm::algorithm2(b, params, &prev, &opts.mm)?
                        };
                        let t = mm_trace(&r);
                        (r.precoders, t, r.states)
                    }
                    _ => {
                        let r = baselines::wmmse(&slot.genie, params, &prev, &opts.mm)?;
                        let t = r
                            .rate
                            .iter()
                            .zip(&r.mu)
                            .zip(&r.power)
                            .map(|((&o, &m), &p)| (o, m, p))
                            .collect();
                        (r.precoders, t, Vec::new())
                    }
                };
                if i == 0 {
                    first_trace = trace;
                    first_states = states;
                }
                prev = p.clone();
                out.push(p);
            }
        }
        Algorithm::BeamDomain => {
            let r = beam::algorithm3(&setup.design, &cfg.streams, params, &setup.v, &opts.mm)?;
            first_trace = mm_trace(&r.report);
            first_states = r.report.states;
            out = vec![r.report.precoders; blocks.len()];
        }
        Algorithm::Rzf => out = vec![baselines::rzf(&slot.genie, params)?; blocks.len()],
        Algorithm::Slnr => {
            out = vec![baselines::slnr(&slot.genie, &cfg.streams, params)?; blocks.len()]
        }
        Algorithm::RobustRzf => {
            for b in blocks {
                out.push(baselines::robust_rzf(b, params, opts.robust_load)?);
            }
        }
    }
    for p in &out {
        if !p.within_budget(params.power, 1e-9) {
            return Err(Error::PowerBudget {
                power: p.power(),
                budget: params.power,
            });
        }
    }
    Ok(Design {
        precoders: out,
        trace: first_trace,
        states: first_states,
    })
}

fn run_slot(
    cfg: &SystemConfig,
    setup: &Setup,
    algorithms: &[Algorithm],
    opts: &ExperimentOptions,
    snr_db: f64,
    index: usize,
) -> Result<ExperimentResult> {
    let slot = draw_slot(cfg, setup, index)?;
    let params = DesignParams::from_config(cfg, cfg.sigma2_z);
    let mut result = ExperimentResult::default();
    for &alg in algorithms {
        let Design {
            precoders: designs,
            trace,
            ..
        } = design_slot(alg, cfg, setup, &slot, &params, opts)?;
        for (it, (o, m, p)) in trace.into_iter().enumerate() {
            result.traces.push(TraceRecord {
                snr_db,
                algorithm: alg.label().into(),
                slot: slot.index,
                block: 2,
                iteration: it,
                de_objective: o,
                mu: m,
                power: p,
                seed: cfg.seed,
            });
        }
        for (law, p) in slot.truth.iter().zip(&designs) {
            let est = monte_carlo_sum_rate(
                law,
                p.as_slice(),
                &cfg.weights,
                cfg.sigma2_z,
                opts.mc_samples,
                cfg.seed,
                &[stream::EVAL, slot.index as u64, law.block as u64],
            )?;
            result.rates.push(RateRecord {
                snr_db,
                algorithm: alg.label().into(),
                slot: slot.index,
                block: law.block,
                sum_rate: est.mean,
                stderr: est.stderr,
                seed: cfg.seed,
            });
        }
    }
    Ok(result)
}

fn run(
    cfg: &SystemConfig,
    setup: &Setup,
    algorithms: &[Algorithm],
    opts: &ExperimentOptions,
    snr_db: f64,
) -> ExperimentResult {
    let per_slot: Vec<Result<ExperimentResult>> = (0..opts.slots)
        .into_par_iter()
        .map(|s| run_slot(cfg, setup, algorithms, opts, snr_db, s))
        .collect();
    let mut out = ExperimentResult::default();
    for (s, r) in per_slot.into_iter().enumerate() {
        match r {
            Ok(r) => out.append(r),
            Err(e) => {
                out.failed_slots += 1;
                out.warnings.push(format!("slot {s} at {snr_db} dB: {e}"));
            }
        }
    }
    out
}

fn snr_of(cfg: &SystemConfig) -> f64 {
    -10.0 * cfg.sigma2_z.log10()
}

/// The slot protocol at the configured noise level, averaged over
/// `opts.slots` slots.
pub fn run_slot_experiment(
    cfg: &SystemConfig,
    algorithms: &[Algorithm],
    opts: &ExperimentOptions,
) -> Result<ExperimentResult> {
    let setup = Setup::new(cfg, &opts.profile, None)?;
    Ok(run(cfg, &setup, algorithms, opts, snr_of(cfg)))
}

/// One slot experiment per SNR point with `σ_z² = 10^(−SNR/10)`. Every
/// point reuses the same statistics and channel draws.
pub fn sweep_snr(
    cfg: &SystemConfig,
    algorithms: &[Algorithm],
    snr_db: &[f64],
    opts: &ExperimentOptions,
) -> Result<ExperimentResult> {
    let setup = Setup::new(cfg, &opts.profile, None)?;
    let mut out = ExperimentResult::default();
    for &snr in snr_db {
        let mut c = cfg.clone();
        c.sigma2_z = noise_from_snr_db(snr);
        c.validate()?;
        out.append(run(&c, &setup, algorithms, opts, snr));
    }
    Ok(out)
}

/// Traces of a cold-started run on the first data block of each slot.
pub fn convergence_study(
    cfg: &SystemConfig,
    algorithms: &[Algorithm],
    opts: &ExperimentOptions,
) -> Result<ExperimentResult> {
    let setup = Setup::new(cfg, &opts.profile, None)?;
    let params = DesignParams::from_config(cfg, cfg.sigma2_z);
    let snr = snr_of(cfg);
    let mut out = ExperimentResult::default();
    for s in 0..opts.slots {
        let slot = draw_slot(cfg, &setup, s)?;
        let mut single = slot;
        single.design = single.design.truncated(1);
        for &alg in algorithms.iter().filter(|a| a.is_iterative()) {
            let design = design_slot(alg, cfg, &setup, &single, &params, opts)?;
            for (user, st) in design.states.iter().enumerate() {
                out.solver
                    .extend(
                        st.trace
                            .iter()
                            .enumerate()
                            .map(|(sweep, &residual)| SolverRecord {
                                algorithm: alg.label().into(),
                                slot: s,
                                user,
                                sweep: sweep + 1,
                                residual,
                                seed: cfg.seed,
                            }),
                    );
            }
            out.traces
                .extend(
                    design
                        .trace
                        .into_iter()
                        .enumerate()
                        .map(|(it, (o, m, p))| TraceRecord {
                            snr_db: snr,
                            algorithm: alg.label().into(),
                            slot: s,
                            block: 2,
                            iteration: it,
                            de_objective: o,
                            mu: m,
                            power: p,
                            seed: cfg.seed,
                        }),
                );
        }
    }
    Ok(out)
}

/// Average rate when the design assumes `assumed_alpha` while channels age
/// with `true_alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRecord {
    pub true_alpha: f64,
    pub assumed_alpha: f64,
    pub snr_db: f64,
    pub algorithm: String,
    pub sum_rate: f64,
    pub stderr: f64,
    /// Matched-design rate minus this rate.
    pub degradation: f64,
    pub seed: u64,
}

pub fn alpha_mismatch_study(
    cfg: &SystemConfig,
    true_alpha: f64,
    assumed_alphas: &[f64],
    algorithm: Algorithm,
    opts: &ExperimentOptions,
) -> Result<Vec<MismatchRecord>> {
    if !(0.0..=1.0).contains(&true_alpha) || assumed_alphas.iter().any(|a| !(0.0..=1.0).contains(a))
    {
        return Err(Error::InvalidConfig(
            "aging coefficients must lie in [0, 1]".into(),
        ));
    }
    let mut c = cfg.clone();
    c.alphas = vec![true_alpha; cfg.users()];
    let snr = snr_of(&c);
    let summarize = |assumed: Option<f64>| -> Result<RateEstimate> {
        let setup = Setup::new(&c, &opts.profile, assumed)?;
        let r = run(&c, &setup, &[algorithm], opts, snr);
        r.summary(algorithm, None).ok_or_else(|| {
            Error::InvalidConfig(format!("every slot failed: {:?}", r.warnings.first()))
        })
    };
    let matched = summarize(None)?;
    assumed_alphas
        .iter()
        .map(|&a| {
            let est = summarize(Some(a))?;
            Ok(MismatchRecord {
                true_alpha,
                assumed_alpha: a,
                snr_db: snr,
                algorithm: algorithm.label().into(),
                sum_rate: est.mean,
                stderr: est.stderr,
                degradation: matched.mean - est.mean,
                seed: cfg.seed,
            })
        })
        .collect()
}
