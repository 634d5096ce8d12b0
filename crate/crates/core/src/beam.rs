//! Beam-domain power allocation for zero-mean posteriors.
//!
//! With `Ĥ = 0` the precoders can be restricted to `P_k = V Π_k J_k`, where
//! `Π_k` orders the transmit beams by decreasing average gain and `J_k`
//! carries one real amplitude per stream. Every quantity of the MM
//! iteration is then diagonal, so the algorithm runs on vectors.

use std::time::Instant;

use crate::channel::UserStatistics;
use crate::config::DesignParams;
use crate::det_equiv::{self, FixedPointOptions};
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat, RMat};
use crate::mm::{self, MmReport, PrecoderSet};
use crate::posterior::BlockPosterior;

/// Transmit beams sorted by decreasing column sum of `Ω`; ties keep the
/// lower beam index first.
pub fn beam_order(stats: &UserStatistics) -> Vec<usize> {
    order_by_power(&stats.beam_powers())
}

pub fn order_by_power(a: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&x, &y| a[y].total_cmp(&a[x]));
    idx
}

/// Per-user beam permutation and stream amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamAllocation {
    /// Full beam permutation per user; stream `j` uses beam `order[k][j]`.
    pub order: Vec<Vec<usize>>,
    /// Real nonnegative amplitudes, one per stream.
    pub amplitudes: Vec<Vec<f64>>,
}

impl BeamAllocation {
    pub fn active_beams(&self, k: usize) -> &[usize] {
        &self.order[k][..self.amplitudes[k].len()]
    }

    pub fn power(&self) -> f64 {
        self.amplitudes.iter().flatten().map(|x| x * x).sum()
    }

    /// Per-user beam-domain power vector `q_k` of length `M_t`.
    pub fn beam_powers(&self, tx: usize) -> Vec<Vec<f64>> {
        (0..self.order.len())
            .map(|k| {
                let mut q = vec![0.0; tx];
                for (&b, &x) in self.active_beams(k).iter().zip(&self.amplitudes[k]) {
                    q[b] = x * x;
                }
                q
            })
            .collect()
    }

    /// `P_k = V Π_k J_k`: column `j` is `J_jj` times DFT column `order[k][j]`.
    pub fn precoders(&self, v: &CMat) -> PrecoderSet {
        PrecoderSet(
            (0..self.order.len())
                .map(|k| {
                    let d = self.amplitudes[k].len();
                    let mut p = linalg::zeros(v.nrows(), d);
                    for (j, (&b, &x)) in self
                        .active_beams(k)
                        .iter()
                        .zip(&self.amplitudes[k])
                        .enumerate()
                    {
                        p.set_column(j, &(v.column(b) * c64(x, 0.0)));
                    }
                    p
                })
                .collect(),
        )
    }

    /// Rows `(user, beam, power)` for every active stream.
    pub fn rows(&self) -> Vec<(usize, usize, f64)> {
        (0..self.order.len())
            .flat_map(|k| {
                self.active_beams(k)
                    .iter()
                    .zip(&self.amplitudes[k])
                    .map(move |(&b, &x)| (k, b, x * x))
            })
            .collect()
    }
}

/// Outcome of the beam-domain algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamReport {
    pub allocation: BeamAllocation,
    pub report: MmReport,
    /// Relative stationarity residual at the final iterate.
    pub kkt_residual: f64,
}

/// Diagonal deterministic-equivalent state of one user.
#[derive(Debug, Clone, PartialEq)]
struct DiagState {
    /// Beam-domain diagonal of `Γ` (length `M_t`).
    s2: Vec<f64>,
    /// Eigen-domain diagonal of `Γ̃` (length `M_k`).
    gamma_tilde: Vec<f64>,
    g: Vec<f64>,
    g_tilde: Vec<f64>,
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let diff: f64 = new
        .iter()
        .zip(old)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(new).max(norm(old));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Vector fixed point for one user: `r` is the eigen-domain interference
/// profile, `beams`/`amp` the active streams.
fn solve_diag(
    omega: &RMat,
    r: &[f64],
    beams: &[usize],
    amp: &[f64],
    opts: &FixedPointOptions,
    warm: Option<&DiagState>,
) -> Result<DiagState> {
    let (mk, mt) = omega.shape();
    let d = amp.len();
    let mut g = warm.map_or(vec![1.0; d], |s| s.g.clone());
    let mut g_tilde = warm.map_or(vec![1.0; mk], |s| s.g_tilde.clone());
    let mut damping: Option<f64> = opts.damping;
    let mut last = f64::INFINITY;
    for _ in 0..opts.max_iter.max(1) * 2 {
        let s2: Vec<f64> = (0..mt)
            .map(|j| (0..mk).map(|i| omega[(i, j)] * g_tilde[i] / r[i]).sum())
            .collect();
        let mut t = vec![0.0; mt];
        for (j, &b) in beams.iter().enumerate() {
            t[b] = amp[j] * amp[j] * g[j];
        }
        let gamma_tilde: Vec<f64> = (0..mk)
            .map(|i| (0..mt).map(|j| omega[(i, j)] * t[j]).sum())
            .collect();
        let g_new: Vec<f64> = beams
            .iter()
            .zip(amp)
            .map(|(&b, &x)| 1.0 / (1.0 + x * x * s2[b]))
            .collect();
        let gt_new: Vec<f64> = (0..mk)
            .map(|i| 1.0 / (1.0 + gamma_tilde[i] / r[i]))
            .collect();
        let residual = rel_change(&g_new, &g).max(rel_change(&gt_new, &g_tilde));
        if !residual.is_finite() {
            return Err(Error::NonFinite("beam-domain fixed point".into()));
        }
        if residual > last && damping.is_none() {
            damping = Some(0.5);
        }
        last = residual;
        if residual <= opts.tol {
            return Ok(DiagState {
                s2,
                gamma_tilde,
                g: g_new,
                g_tilde: gt_new,
            });
        }
        match damping {
            Some(beta) => {
                g.iter_mut()
                    .zip(&g_new)
                    .for_each(|(x, y)| *x = (1.0 - beta) * *x + beta * y);
                g_tilde
                    .iter_mut()
                    .zip(&gt_new)
                    .for_each(|(x, y)| *x = (1.0 - beta) * *x + beta * y);
            }
            None => {
                g = g_new;
                g_tilde = gt_new;
            }
        }
    }
    Err(Error::FixedPoint {
        iterations: opts.max_iter.max(1) * 2,
        residual: last,
    })
}

/// `Σ ln(1 + J² s2) + Σ ln(1 + γ̃/r) − Σ g̃ γ̃ / r`.
fn diag_rate(state: &DiagState, r: &[f64], beams: &[usize], amp: &[f64]) -> f64 {
    let a: f64 = beams
        .iter()
        .zip(amp)
        .map(|(&b, &x)| (1.0 + x * x * state.s2[b]).ln())
        .sum();
    let b: f64 = state
        .gamma_tilde
        .iter()
        .zip(r)
        .zip(&state.g_tilde)
        .map(|((&gt, &ri), &g)| (1.0 + gt / ri).ln() - g * gt / ri)
        .sum();
    (a + b).max(0.0)
}

struct Context<'a> {
    stats: &'a [UserStatistics],
    params: &'a DesignParams,
    fp: FixedPointOptions,
}

struct Eval {
    r: Vec<Vec<f64>>,
    states: Vec<DiagState>,
    objective: f64,
}

impl Context<'_> {
    fn interference(&self, alloc: &BeamAllocation) -> Vec<Vec<f64>> {
        let mt = self.stats[0].tx();
        let q = alloc.beam_powers(mt);
        let total: Vec<f64> = (0..mt).map(|b| q.iter().map(|x| x[b]).sum()).collect();
        self.stats
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let others: Vec<f64> = (0..mt).map(|b| total[b] - q[k][b]).collect();
                (0..s.rx())
                    .map(|i| {
                        self.params.sigma2_z
                            + (0..mt).map(|b| s.omega()[(i, b)] * others[b]).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    fn evaluate(&self, alloc: &BeamAllocation, warm: Option<&[DiagState]>) -> Result<Eval> {
        let r = self.interference(alloc);
        let states: Vec<DiagState> = (0..self.stats.len())
            .map(|k| {
                solve_diag(
                    self.stats[k].omega(),
                    &r[k],
                    alloc.active_beams(k),
                    &alloc.amplitudes[k],
                    &self.fp,
                    warm.map(|w| &w[k]),
                )
            })
            .collect::<Result<_>>()?;
        let objective = (0..self.stats.len())
            .map(|k| {
                self.params.weights[k]
                    * diag_rate(
                        &states[k],
                        &r[k],
                        alloc.active_beams(k),
                        &alloc.amplitudes[k],
                    )
            })
            .sum();
        Ok(Eval {
            r,
            states,
            objective,
        })
    }

    /// Right-hand sides `(w Λ_A + Λ_F) J` and shaping `Λ_D` on the active
    /// beams of every user.
    fn update_terms(&self, alloc: &BeamAllocation, eval: &Eval) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mt = self.stats[0].tx();
        let w = &self.params.weights;
        let lambda_a: Vec<Vec<f64>> = self
            .stats
            .iter()
            .zip(&eval.r)
            .map(|(s, r)| {
                (0..mt)
                    .map(|b| (0..s.rx()).map(|i| s.omega()[(i, b)] / r[i]).sum())
                    .collect()
            })
            .collect();
        let lambda_d: Vec<f64> = (0..mt)
            .map(|b| {
                (0..self.stats.len())
                    .map(|k| w[k] * (lambda_a[k][b] - eval.states[k].s2[b]))
                    .sum()
            })
            .collect();
        let mut rhs = Vec::with_capacity(self.stats.len());
        let mut shaping = Vec::with_capacity(self.stats.len());
        for k in 0..self.stats.len() {
            let s2 = &eval.states[k].s2;
            let beams = alloc.active_beams(k);
            rhs.push(
                beams
                    .iter()
                    .zip(&alloc.amplitudes[k])
                    .map(|(&b, &x)| {
                        let q = x * x;
                        let lambda_f = w[k] * (s2[b] / (1.0 + s2[b] * q) - s2[b]);
                        (w[k] * lambda_a[k][b] + lambda_f) * x
                    })
                    .collect(),
            );
            shaping.push(beams.iter().map(|&b| lambda_d[b]).collect());
        }
        (rhs, shaping)
    }
}

fn kkt(alloc: &BeamAllocation, rhs: &[Vec<f64>], shaping: &[Vec<f64>], mu: f64) -> f64 {
    let mut num = 0.0;
    for k in 0..alloc.amplitudes.len() {
        for ((&x, &n), &l) in alloc.amplitudes[k].iter().zip(&rhs[k]).zip(&shaping[k]) {
            num += (n - (l + mu) * x).powi(2);
        }
    }
    let den = alloc.power().sqrt();
    if den == 0.0 {
        0.0
    } else {
        num.sqrt() / den
    }
}

/// Zero-mean beam-domain MM power allocation.
pub fn algorithm3(
    stats: &[UserStatistics],
    streams: &[usize],
    params: &DesignParams,
    v: &CMat,
    opts: &mm::MmOptions,
) -> Result<BeamReport> {
    let start = Instant::now();
    if stats.is_empty() || streams.len() != stats.len() || params.weights.len() != stats.len() {
        return Err(Error::Shape("one stream count and weight per user".into()));
    }
    let mt = stats[0].tx();
    if stats.iter().any(|s| s.tx() != mt) || v.nrows() != mt {
        return Err(Error::Shape(
            "users disagree on the transmit dimension".into(),
        ));
    }
    if streams.iter().any(|&d| d == 0 || d > mt) {
        return Err(Error::InvalidConfig(
            "stream counts must lie in 1..=M_t".into(),
        ));
    }
    if !(params.sigma2_z > 0.0) || !(params.power > 0.0) {
        return Err(Error::InvalidConfig(
            "noise variance and power must be positive".into(),
        ));
    }
    let ctx = Context {
        stats,
        params,
        fp: opts.fixed_point,
    };
    let total_streams: usize = streams.iter().sum();
    let init = (params.power / total_streams as f64).sqrt();
    let mut alloc = BeamAllocation {
        order: stats.iter().map(beam_order).collect(),
        amplitudes: streams.iter().map(|&d| vec![init; d]).collect(),
    };

    let mut eval = ctx.evaluate(&alloc, None).map_err(|e| e.at_iteration(0))?;
    let mut objective = vec![eval.objective];
    let mut mu_trace = vec![0.0];
    let mut power = vec![alloc.power()];
    let mut iterations = 0;
    for it in 1..=opts.iterations {
        let (rhs, shaping) = ctx.update_terms(&alloc, &eval);
        let (mu, amps) = mm::mu_bisection_diag(&rhs, &shaping, params.power, opts.tol_power)
            .map_err(|e| e.at_iteration(it))?;
        let next = BeamAllocation {
            order: alloc.order.clone(),
            amplitudes: amps,
        };
        let next_eval = ctx
            .evaluate(&next, Some(&eval.states))
            .map_err(|e| e.at_iteration(it))?;
        let prev = eval.objective;
        alloc = next;
        eval = next_eval;
        objective.push(eval.objective);
        mu_trace.push(mu);
        power.push(alloc.power());
        iterations = it;
        if (eval.objective - prev).abs() <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let (rhs, shaping) = ctx.update_terms(&alloc, &eval);
    let (mu_final, _) = mm::mu_bisection_diag(&rhs, &shaping, params.power, opts.tol_power)?;
    let kkt_residual = kkt(&alloc, &rhs, &shaping, mu_final);

    let precoders = alloc.precoders(v);
    let block = BlockPosterior::zero_mean(stats, v);
    let states = det_equiv::solve_all(
        &block,
        precoders.as_slice(),
        params.sigma2_z,
        &opts.fixed_point,
        None,
    )?;
    Ok(BeamReport {
        allocation: alloc,
        report: MmReport {
            objective,
            mu: mu_trace,
            power,
            precoders,
            iterations,
            wall_time: start.elapsed(),
            states,
        },
        kkt_residual,
    })
}

/// Beam alignment of a precoder set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamStructure {
    /// Every column of `Vᴴ P_k` has one entry holding at least `1 − tol` of
    /// its squared norm.
    pub aligned: bool,
    /// Largest fraction of a column's energy outside its dominant beam.
    pub max_off_mass: f64,
    /// Largest relative off-diagonal energy of `Vᴴ P_k P_kᴴ V`; zero when
    /// `P_k` is `V Π J` times any unitary on the right.
    pub max_gram_off_mass: f64,
}

pub fn verify_beam_structure(precoders: &PrecoderSet, v: &CMat, tol: f64) -> BeamStructure {
    let mut max_off: f64 = 0.0;
    let mut max_gram: f64 = 0.0;
    for p in precoders.as_slice() {
        let beam = v.adjoint() * p;
        for col in beam.column_iter() {
            let energy: f64 = col.iter().map(|z| z.norm_sqr()).sum();
            if energy == 0.0 {
                continue;
            }
            let peak = col.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
            max_off = max_off.max(1.0 - peak / energy);
        }
        let gram = &beam * beam.adjoint();
        let total = gram.norm_squared();
        if total > 0.0 {
            let diag: f64 = gram.diagonal().iter().map(|z| z.norm_sqr()).sum();
            max_gram = max_gram.max((total - diag) / total);
        }
    }
    BeamStructure {
        aligned: max_off <= tol,
        max_off_mass: max_off,
        max_gram_off_mass: max_gram,
    }
}
