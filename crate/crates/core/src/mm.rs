//! Minorize-maximize precoder updates driven by deterministic equivalents.
//!
//! Each iteration evaluates, per user, the surrogate matrices
//! `A = E[Hᴴ R⁻¹ H]`, the deterministic equivalents `B̄`, `C̄`, and then
//! solves the concave quadratic surrogate under the sum-power constraint by
//! bisection on the Lagrange multiplier.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use crate::config::DesignParams;
use crate::det_equiv::{self, DeState, FixedPointOptions};
use crate::error::{Error, Result};
use crate::linalg::{self, c64, CMat};
use crate::operators::OperatorKernel;
use crate::posterior::BlockPosterior;

/// One precoder per user under a shared sum-power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet(pub Vec<CMat>);

impl PrecoderSet {
    pub fn power(&self) -> f64 {
        total_power(&self.0)
    }

    pub fn as_slice(&self) -> &[CMat] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<CMat> {
        self.0
    }

    pub fn users(&self) -> usize {
        self.0.len()
    }

    /// Rescale so the total power equals `power`; all-zero sets stay zero.
    pub fn scaled_to(mut self, power: f64) -> Self {
        let current = self.power();
        if current > 0.0 {
            let s = c64((power / current).sqrt(), 0.0);
            for p in &mut self.0 {
                *p *= s;
            }
        }
        self
    }

    /// i.i.d. complex Gaussian entries scaled to exactly meet `power`.
    pub fn random<R: Rng + ?Sized>(tx: usize, streams: &[usize], power: f64, rng: &mut R) -> Self {
        PrecoderSet(
            streams
                .iter()
                .map(|&d| linalg::complex_gaussian(tx, d, rng))
                .collect(),
        )
        .scaled_to(power)
    }

    /// True when `Σ tr(P Pᴴ) ≤ budget·(1 + rel_tol)`.
    pub fn within_budget(&self, budget: f64, rel_tol: f64) -> bool {
        self.power() <= budget * (1.0 + rel_tol)
    }
}

pub fn total_power(precoders: &[CMat]) -> f64 {
    precoders.iter().map(|p| p.norm_squared()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmOptions {
    pub iterations: usize,
    /// Early exit when the relative objective change drops below this.
    pub rel_tol: f64,
    pub tol_power: f64,
    pub fixed_point: FixedPointOptions,
}

impl Default for MmOptions {
    fn default() -> Self {
        MmOptions {
            iterations: 30,
            rel_tol: 1e-8,
            tol_power: 1e-6,
            fixed_point: FixedPointOptions::default(),
        }
    }
}

impl MmOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        MmOptions {
            iterations,
            ..Default::default()
        }
    }

    /// Run the full budget without the early exit.
    pub fn exhaustive(iterations: usize) -> Self {
        MmOptions {
            iterations,
            rel_tol: 0.0,
            ..Default::default()
        }
    }
}

/// Trace and result of one MM run.
///
/// `objective[i]`, `mu[i]` and `power[i]` describe the iterate after `i`
/// updates; entry 0 is the initialization (with `mu = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct MmReport {
    pub objective: Vec<f64>,
    pub mu: Vec<f64>,
    pub power: Vec<f64>,
    pub precoders: PrecoderSet,
    pub iterations: usize,
    pub wall_time: Duration,
    /// Fixed-point states at the final precoders.
    pub states: Vec<DeState>,
}

impl MmReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().unwrap_or(&0.0)
    }

    /// Largest objective decrease between consecutive iterates, measured
    /// against the slack `1e-8·(1 + |value|)`; nonpositive means ascent.
    pub fn worst_descent(&self) -> f64 {
        self.objective
            .windows(2)
            .map(|w| (w[0] - w[1]) - 1e-8 * (1.0 + w[0].abs()))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `A = Ĥᴴ R⁻¹ Ĥ + η̃(R⁻¹)`.
pub fn compute_a(block: &BlockPosterior, k: usize, r_inv: &CMat) -> CMat {
    let user = &block.users[k];
    let kernel = OperatorKernel::posterior(user, &block.v);
    linalg::hermitian_part(
        &(user.hhat.adjoint() * r_inv * &user.hhat + kernel.eta_tilde_raw(r_inv)),
    )
}

/// `B̄ = A − Γ + Γ P (I + Pᴴ Γ P)⁻¹ Pᴴ Γ`.
pub fn compute_b_bar(a: &CMat, state: &DeState, p: &CMat) -> Result<CMat> {
    let gp = &state.gamma * p;
    let inner = linalg::hpd_inverse(&(linalg::eye(p.ncols()) + p.adjoint() * &gp))?;
    Ok(linalg::hermitian_part(
        &(a - &state.gamma + &gp * inner * gp.adjoint()),
    ))
}

/// `B̄ = A − (I + Γ P Pᴴ)⁻¹ Γ` evaluated directly.
pub fn compute_b_bar_direct(a: &CMat, state: &DeState, p: &CMat) -> Result<CMat> {
    let mt = p.nrows();
    let m = linalg::eye(mt) + &state.gamma * p * p.adjoint();
    Ok(linalg::hermitian_part(
        &(a - linalg::solve(&m, &state.gamma)?),
    ))
}

/// `C̄ = Ĥᴴ M Ĥ + η̃(M)` with `M = R⁻¹ − (R + Γ̃)⁻¹`.
pub fn compute_c_bar(
    block: &BlockPosterior,
    k: usize,
    state: &DeState,
    r_inv: &CMat,
) -> Result<CMat> {
    let user = &block.users[k];
    let kernel = OperatorKernel::posterior(user, &block.v);
    let m =
        linalg::hermitian_part(&(r_inv - linalg::hpd_inverse(&(&state.r + &state.gamma_tilde))?));
    Ok(linalg::hermitian_part(
        &(user.hhat.adjoint() * &m * &user.hhat + kernel.eta_tilde_raw(&m)),
    ))
}

/// `D̄_k = w_k B̄_k + Σ_{l≠k} w_l C̄_l`.
pub fn compute_d_bar(b_bar: &[CMat], c_bar: &[CMat], weights: &[f64], k: usize) -> CMat {
    let mut d = &b_bar[k] * c64(weights[k], 0.0);
    for (l, c) in c_bar.iter().enumerate() {
        if l != k {
            d += c * c64(weights[l], 0.0);
        }
    }
    linalg::hermitian_part(&d)
}

/// `F̄_k = w_k (C̄_k − B̄_k)`.
pub fn compute_f_bar(b_bar: &CMat, c_bar: &CMat, weight: f64) -> CMat {
    linalg::hermitian_part(&((c_bar - b_bar) * c64(weight, 0.0)))
}

/// Per-user surrogate matrices at one iterate.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub a: Vec<CMat>,
    pub b_bar: Vec<CMat>,
    pub c_bar: Vec<CMat>,
}

pub fn surrogate(
    block: &BlockPosterior,
    precoders: &[CMat],
    states: &[DeState],
) -> Result<Surrogate> {
    let parts: Vec<(CMat, CMat, CMat)> = (0..block.users())
        .into_par_iter()
        .map(|k| {
            let r_inv = linalg::hpd_inverse(&states[k].r)?;
            let a = compute_a(block, k, &r_inv);
            let b = compute_b_bar(&a, &states[k], &precoders[k])?;
            let c = compute_c_bar(block, k, &states[k], &r_inv)?;
            Ok((a, b, c))
        })
        .collect::<Result<_>>()?;
    let mut s = Surrogate {
        a: Vec::with_capacity(parts.len()),
        b_bar: Vec::with_capacity(parts.len()),
        c_bar: Vec::with_capacity(parts.len()),
    };
    for (a, b, c) in parts {
        s.a.push(a);
        s.b_bar.push(b);
        s.c_bar.push(c);
    }
    Ok(s)
}

/// Quadratic shaping matrices for the multiplier search.
#[derive(Debug, Clone, Copy)]
pub enum Shaping<'a> {
    PerUser(&'a [CMat]),
    Shared(&'a CMat),
}

/// `(eigenvalue, squared coefficient)` pairs of one quadratic term.
type Terms = Vec<(f64, f64)>;

fn power_at(terms: &[Terms], mu: f64) -> f64 {
    let mut total = 0.0;
    for t in terms {
        for &(lambda, c2) in t {
            let den = lambda + mu;
            if c2 == 0.0 {
                continue;
            }
            if den <= 0.0 {
                return f64::INFINITY;
            }
            total += c2 / (den * den);
        }
    }
    total
}

/// Smallest `μ ≥ max(0, −λ_min)` with total power at most `budget`.
fn solve_multiplier(terms: &[Terms], budget: f64, tol_power: f64) -> Result<f64> {
    let energy: f64 = terms.iter().flatten().map(|t| t.1).sum();
    if !energy.is_finite() || terms.iter().flatten().any(|t| !t.0.is_finite()) {
        return Err(Error::NonFinite("multiplier search".into()));
    }
    if energy == 0.0 {
        return Ok(0.0);
    }
    let lambda_min = terms
        .iter()
        .flatten()
        .filter(|t| t.1 > 0.0)
        .map(|t| t.0)
        .fold(f64::INFINITY, f64::min);
    let lo_bound = (-lambda_min).max(0.0);
    if lo_bound == 0.0 && power_at(terms, 0.0) <= budget {
        return Ok(0.0);
    }

    let mut hi_step = 1.0f64;
    let mut doublings = 0;
    while power_at(terms, lo_bound + hi_step) >= budget {
        hi_step *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::BisectionBracket);
        }
    }
    let mut lo = lo_bound;
    let mut hi = lo_bound + hi_step;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if power_at(terms, mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        let p_hi = power_at(terms, hi);
        if (budget - p_hi) <= 1e-3 * tol_power * budget && hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(hi)
}

struct Eig {
    values: Vec<f64>,
    vectors: CMat,
}

/// Relative size below which eigenvalues and coefficients count as zero.
const NULL_EIG: f64 = 1e-12;
const NULL_COEF: f64 = 1e-24;

fn eig(m: &CMat) -> Eig {
    let e = linalg::hermitian_eigen(m);
    let scale = e.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    Eig {
        values: e
            .values
            .iter()
            .map(|&x| if x.abs() <= NULL_EIG * scale { 0.0 } else { x })
            .collect(),
        vectors: e.vectors,
    }
}

/// Coefficients `Qᴴ N` with rounding-level rows zeroed, and their terms.
fn terms_of(e: &Eig, rhs: &CMat) -> (CMat, Terms) {
    let mut coef = e.vectors.adjoint() * rhs;
    let energy = rhs.norm_squared();
    let terms = (0..coef.nrows())
        .map(|i| {
            let mut c2: f64 = coef.row(i).iter().map(|z| z.norm_sqr()).sum();
            if c2 <= NULL_COEF * energy {
                coef.row_mut(i).fill(c64(0.0, 0.0));
                c2 = 0.0;
            }
            (e.values[i], c2)
        })
        .collect();
    (coef, terms)
}

fn apply(e: &Eig, coef: &CMat, mu: f64) -> CMat {
    let mut scaled = coef.clone();
    for i in 0..scaled.nrows() {
        let den = e.values[i] + mu;
        let f = if den > 0.0 { 1.0 / den } else { 0.0 };
        scaled.row_mut(i).scale_mut(f);
    }
    &e.vectors * scaled
}

/// Solution of `max Σ 2Re tr(Nᴴ P) − tr(Pᴴ D P)` under `Σ tr(P Pᴴ) ≤ budget`:
/// `P_k = (D_k + μ I)⁻¹ N_k` with the multiplier `μ` found by bisection.
pub fn mu_bisection(
    rhs: &[CMat],
    shaping: Shaping,
    budget: f64,
    tol_power: f64,
) -> Result<(f64, PrecoderSet)> {
    if rhs.iter().any(|n| !linalg::is_finite(n)) {
        return Err(Error::NonFinite("precoder update right-hand side".into()));
    }
    let eigs: Vec<Eig> = match shaping {
        Shaping::PerUser(d) => {
            if d.len() != rhs.len() {
                return Err(Error::Shape("one shaping matrix per user".into()));
            }
            d.iter().map(eig).collect()
        }
        Shaping::Shared(d) => vec![eig(d)],
    };
    let pick = |k: usize| if eigs.len() == 1 { &eigs[0] } else { &eigs[k] };
    let (coefs, terms): (Vec<CMat>, Vec<Terms>) = rhs
        .iter()
        .enumerate()
        .map(|(k, n)| terms_of(pick(k), n))
        .unzip();
    let mu = solve_multiplier(&terms, budget, tol_power)?;
    let mut p: Vec<CMat> = coefs
        .iter()
        .enumerate()
        .map(|(k, c)| apply(pick(k), c, mu))
        .collect();
    let total = total_power(&p);
    if total > budget {
        let s = c64((budget / total).sqrt(), 0.0);
        p.iter_mut().for_each(|x| *x *= s);
    }
    Ok((mu, PrecoderSet(p)))
}

/// Diagonal variant: entries `x_kj = n_kj / (d_kj + μ)` with
/// `Σ x² ≤ budget`.
pub fn mu_bisection_diag(
    rhs: &[Vec<f64>],
    shaping: &[Vec<f64>],
    budget: f64,
    tol_power: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if rhs.len() != shaping.len() || rhs.iter().zip(shaping).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape(
            "diagonal right-hand side and shaping differ".into(),
        ));
    }
    let terms: Vec<Terms> = rhs
        .iter()
        .zip(shaping)
        .map(|(n, d)| d.iter().zip(n).map(|(&l, &x)| (l, x * x)).collect())
        .collect();
    let mu = solve_multiplier(&terms, budget, tol_power)?;
    let mut out: Vec<Vec<f64>> = rhs
        .iter()
        .zip(shaping)
        .map(|(n, d)| {
            n.iter()
                .zip(d)
                .map(|(&x, &l)| if l + mu > 0.0 { x / (l + mu) } else { 0.0 })
                .collect()
        })
        .collect();
    let total: f64 = out.iter().flatten().map(|x| x * x).sum();
    if total > budget {
        let s = (budget / total).sqrt();
        out.iter_mut().flatten().for_each(|x| *x *= s);
    }
    Ok((mu, out))
}

/// Result of one simultaneous update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub precoders: PrecoderSet,
    pub mu: f64,
}

fn validate_inputs(
    block: &BlockPosterior,
    params: &DesignParams,
    precoders: &[CMat],
) -> Result<()> {
    if precoders.len() != block.users() || params.weights.len() != block.users() {
        return Err(Error::Shape(format!(
            "{} users, {} precoders, {} weights",
            block.users(),
            precoders.len(),
            params.weights.len()
        )));
    }
    if precoders.iter().any(|p| p.nrows() != block.tx()) {
        return Err(Error::Shape(
            "precoder rows must equal the transmit antennas".into(),
        ));
    }
    if !(params.sigma2_z > 0.0) || !(params.power > 0.0) {
        return Err(Error::InvalidConfig(
            "noise variance and power must be positive".into(),
        ));
    }
    Ok(())
}

/// One update `P_k⁺ = (D̄_k + μ I)⁻¹ w_k A_k P_k` for all users at once.
pub fn algorithm1_step(
    block: &BlockPosterior,
    params: &DesignParams,
    precoders: &[CMat],
    states: &[DeState],
    tol_power: f64,
) -> Result<StepOutput> {
    let s = surrogate(block, precoders, states)?;
    let w = &params.weights;
    let d: Vec<CMat> = (0..block.users())
        .map(|k| compute_d_bar(&s.b_bar, &s.c_bar, w, k))
        .collect();
    let rhs: Vec<CMat> = (0..block.users())
        .map(|k| &s.a[k] * &precoders[k] * c64(w[k], 0.0))
        .collect();
    let (mu, p) = mu_bisection(&rhs, Shaping::PerUser(&d), params.power, tol_power)?;
    Ok(StepOutput { precoders: p, mu })
}

/// One update `P_k⁺ = (Σ_l w_l C̄_l + μ I)⁻¹ (w_k A_k + F̄_k) P_k` sharing a
/// single shaping matrix across users.
pub fn algorithm2_step(
    block: &BlockPosterior,
    params: &DesignParams,
    precoders: &[CMat],
    states: &[DeState],
    tol_power: f64,
) -> Result<StepOutput> {
    let s = surrogate(block, precoders, states)?;
    let w = &params.weights;
    let mt = block.tx();
    let shared = linalg::hermitian_part(
        &s.c_bar
            .iter()
            .zip(w)
            .fold(linalg::zeros(mt, mt), |acc, (c, &wk)| {
                acc + c * c64(wk, 0.0)
            }),
    );
    let rhs: Vec<CMat> = (0..block.users())
        .map(|k| {
            let f = compute_f_bar(&s.b_bar[k], &s.c_bar[k], w[k]);
            (&s.a[k] * c64(w[k], 0.0) + f) * &precoders[k]
        })
        .collect();
    let (mu, p) = mu_bisection(&rhs, Shaping::Shared(&shared), params.power, tol_power)?;
    Ok(StepOutput { precoders: p, mu })
}

type StepFn = fn(&BlockPosterior, &DesignParams, &[CMat], &[DeState], f64) -> Result<StepOutput>;

fn run_mm(
    step: StepFn,
    block: &BlockPosterior,
    params: &DesignParams,
    init: &PrecoderSet,
    opts: &MmOptions,
) -> Result<MmReport> {
    let start = Instant::now();
    validate_inputs(block, params, init.as_slice())?;
    let fp = &opts.fixed_point;
    let mut precoders = init.clone();
    let mut states = det_equiv::solve_all(block, precoders.as_slice(), params.sigma2_z, fp, None)
        .map_err(|e| e.at_iteration(0))?;
    let first = det_equiv::de_weighted_sum_rate(&states, precoders.as_slice(), &params.weights)
        .map_err(|e| e.at_iteration(0))?;
    let mut objective = vec![first];
    let mut mu = vec![0.0];
    let mut power = vec![precoders.power()];
    let mut iterations = 0;

    for it in 1..=opts.iterations {
        let out = step(block, params, precoders.as_slice(), &states, opts.tol_power)
            .map_err(|e| e.at_iteration(it))?;
        let next_states = det_equiv::solve_all(
            block,
            out.precoders.as_slice(),
            params.sigma2_z,
            fp,
            Some(&states),
        )
        .map_err(|e| e.at_iteration(it))?;
        let value = det_equiv::de_weighted_sum_rate(
            &next_states,
            out.precoders.as_slice(),
            &params.weights,
        )
        .map_err(|e| e.at_iteration(it))?;
        let prev = *objective.last().unwrap_or(&0.0);
        precoders = out.precoders;
        states = next_states;
        objective.push(value);
        mu.push(out.mu);
        power.push(precoders.power());
        iterations = it;
        if (value - prev).abs() <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(MmReport {
        objective,
        mu,
        power,
        precoders,
        iterations,
        wall_time: start.elapsed(),
        states,
    })
}

/// MM with the per-user surrogate (one `M_t × M_t` solve per user).
pub fn algorithm1(
    block: &BlockPosterior,
    params: &DesignParams,
    init: &PrecoderSet,
    opts: &MmOptions,
) -> Result<MmReport> {
    run_mm(algorithm1_step, block, params, init, opts)
}

/// MM with the shared-shaping surrogate (one `M_t × M_t` solve in total).
pub fn algorithm2(
    block: &BlockPosterior,
    params: &DesignParams,
    init: &PrecoderSet,
    opts: &MmOptions,
) -> Result<MmReport> {
    run_mm(algorithm2_step, block, params, init, opts)
}
