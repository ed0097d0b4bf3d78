//! Risk-averse agent subproblems.
//!
//! Every agent maximizes beta * E[u] + (1 - beta) * CVaR_alpha(u) over its
//! contract volumes, where the scenario surplus u is affine in the volumes,
//! minus a small quadratic penalty on aggregate volume imbalance that damps
//! the clearing loop. Single-contract problems are solved exactly by
//! bisection on the supergradient; multi-contract problems go through the
//! conic solver in epigraph form. Both paths are deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{Cone, ConvexError, QpBuilder};
use crate::dispatch::DispatchResult;
use crate::scenario::System;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("empty outcome set")]
    EmptyOutcomes,
    #[error("tail probability alpha={0} outside (0, 1]")]
    BadAlpha(f64),
    #[error("risk weight beta={0} outside [0, 1]")]
    BadBeta(f64),
    #[error("contract {contract}: volume bounds [{lower}, {upper}] are invalid; finite ordered bounds are required")]
    BadBounds {
        contract: usize,
        lower: f64,
        upper: f64,
    },
    #[error("agent subproblem solver failed: {0}")]
    Solver(#[from] ConvexError),
    #[error("reliability credit undefined: no scarcity block has a price above the peaker cost")]
    NoScarcity,
}

/// Risk attitude: tail probability and expected-value weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub alpha: f64,
    pub beta: f64,
}

impl RiskParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AgentError::BadAlpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(AgentError::BadBeta(self.beta));
        }
        Ok(())
    }

    pub fn risk_neutral(&self) -> bool {
        self.beta >= 1.0
    }
}

/// Per-contract volume bounds for one agent (positive volume = purchase).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl VolumeBounds {
    pub fn symmetric(k: usize, magnitude: f64) -> Self {
        VolumeBounds {
            lower: vec![-magnitude; k],
            upper: vec![magnitude; k],
        }
    }

    fn validate(&self) -> Result<(), AgentError> {
        for k in 0..self.lower.len() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(AgentError::BadBounds {
                    contract: k,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(())
    }
}

/// Contract market view shared by all agents within one clearing iteration.
#[derive(Debug, Clone, Copy)]
pub struct Market<'a> {
    /// First-stage contract prices phi^k.
    pub prices: &'a [f64],
    /// Payout matrix [contract][scenario].
    pub payouts: &'a [Vec<f64>],
}

impl Market<'_> {
    pub fn n_contracts(&self) -> usize {
        self.prices.len()
    }
}

/// One agent's optimal decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    /// Contract volumes, signed (positive = purchase).
    pub volumes: Vec<f64>,
    pub value_at_risk: f64,
    /// Scenario surplus u.
    pub surplus: Vec<f64>,
    /// Tail slacks u+ = max(0, VaR - u).
    pub tail_slack: Vec<f64>,
    /// Tail duals tau, nonnegative, summing to (1 - beta).
    pub tail_duals: Vec<f64>,
    /// Risk-adjusted objective including the imbalance penalty.
    pub rho: f64,
}

impl AgentDecision {
    /// The probability re-weighting implied by risk aversion: tau + beta * p.
    pub fn tilted_measure(&self, prob: &[f64], beta: f64) -> Vec<f64> {
        self.tail_duals
            .iter()
            .zip(prob)
            .map(|(t, p)| t + beta * p)
            .collect()
    }
}

/// Relative tie tolerance used when grouping scenarios at the quantile.
const TIE_REL: f64 = 1e-7;

struct TailInfo {
    var: f64,
    /// Risk-envelope measure q attaining CVaR (proportional tie split).
    q: Vec<f64>,
    /// Indices with u within the tie band of the quantile.
    tied: Vec<usize>,
    /// Quantile mass assigned to the tied group: alpha minus the mass
    /// strictly below the tie band.
    rem_mass: f64,
}

fn tail_info(u: &[f64], p: &[f64], alpha: f64) -> TailInfo {
    let n = u.len();
    debug_assert!(n > 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[a].partial_cmp(&u[b]).unwrap().then(a.cmp(&b)));

    let mut cum = 0.0;
    let mut var = u[order[n - 1]];
    for &i in &order {
        cum += p[i];
        if cum >= alpha - 1e-12 {
            var = u[i];
            break;
        }
    }

    let scale = u.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let tie_tol = TIE_REL * scale;
    let mut tied = Vec::new();
    let mut strict_mass = 0.0;
    let mut tied_mass = 0.0;
    for i in 0..n {
        if u[i] < var - tie_tol {
            strict_mass += p[i];
        } else if u[i] <= var + tie_tol {
            tied.push(i);
            tied_mass += p[i];
        }
    }
    let rem_mass = (alpha - strict_mass).clamp(0.0, tied_mass);

    let mut q = vec![0.0; n];
    for i in 0..n {
        if u[i] < var - tie_tol {
            q[i] = p[i] / alpha;
        }
    }
    if tied_mass > 0.0 {
        for &i in &tied {
            q[i] = rem_mass * p[i] / (tied_mass * alpha);
        }
    }
    TailInfo {
        var,
        q,
        tied,
        rem_mass,
    }
}

/// Conditional value at risk of the alpha tail: the probability-weighted
/// mean of the worst alpha-quantile of outcomes.
pub fn cvar(outcomes: &[f64], prob: &[f64], alpha: f64) -> Result<f64, AgentError> {
    if outcomes.is_empty() {
        return Err(AgentError::EmptyOutcomes);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AgentError::BadAlpha(alpha));
    }
    let info = tail_info(outcomes, prob, alpha);
    Ok(outcomes.iter().zip(&info.q).map(|(u, q)| u * q).sum())
}

/// beta * E[u] + (1 - beta) * CVaR_alpha(u).
pub fn risk_measure(outcomes: &[f64], prob: &[f64], params: RiskParams) -> Result<f64, AgentError> {
    params.validate()?;
    if outcomes.is_empty() {
        return Err(AgentError::EmptyOutcomes);
    }
    let mean: f64 = outcomes.iter().zip(prob).map(|(u, p)| u * p).sum();
    if params.risk_neutral() {
        return Ok(mean);
    }
    Ok(params.beta * mean + (1.0 - params.beta) * cvar(outcomes, prob, params.alpha)?)
}

/// The full agent trade problem over one contract menu.
#[derive(Debug, Clone, Copy)]
pub struct TradeProblem<'a> {
    /// Scenario surplus before trading.
    pub base: &'a [f64],
    pub prob: &'a [f64],
    pub market: Market<'a>,
    pub bounds: &'a VolumeBounds,
    pub params: RiskParams,
    /// Quadratic imbalance penalty weight (0 disables the term).
    pub gamma: f64,
    /// Sum of the other agents' volumes per contract, held fixed.
    pub other_volumes: &'a [f64],
    /// Warm-start volumes (used as data, not solver state).
    pub warm: Option<&'a [f64]>,
}

fn surplus_at(problem: &TradeProblem, volumes: &[f64]) -> Vec<f64> {
    let k = problem.market.n_contracts();
    let mut u = problem.base.to_vec();
    for ki in 0..k {
        let v = volumes[ki];
        if v == 0.0 {
            continue;
        }
        let phi = problem.market.prices[ki];
        let eta = &problem.market.payouts[ki];
        for (n, un) in u.iter_mut().enumerate() {
            *un -= v * (phi - eta[n]);
        }
    }
    u
}

fn penalty(problem: &TradeProblem, volumes: &[f64]) -> f64 {
    if problem.gamma == 0.0 {
        return 0.0;
    }
    let total: f64 = volumes
        .iter()
        .zip(problem.other_volumes)
        .map(|(v, o)| (v + o).powi(2))
        .sum();
    0.5 * problem.gamma * total
}

fn decision_at(problem: &TradeProblem, volumes: Vec<f64>) -> Result<AgentDecision, AgentError> {
    let u = surplus_at(problem, &volumes);
    let info = tail_info(&u, problem.prob, problem.params.alpha);
    let mean: f64 = u.iter().zip(problem.prob).map(|(x, p)| x * p).sum();
    let cvar_val: f64 = u.iter().zip(&info.q).map(|(x, q)| x * q).sum();
    let beta = problem.params.beta;
    let rho = beta * mean + (1.0 - beta) * cvar_val - penalty(problem, &volumes);
    let tail_slack: Vec<f64> = u.iter().map(|x| (info.var - x).max(0.0)).collect();
    let tail_duals: Vec<f64> = info.q.iter().map(|q| (1.0 - beta) * q).collect();
    Ok(AgentDecision {
        volumes,
        value_at_risk: info.var,
        surplus: u,
        tail_slack,
        tail_duals,
        rho,
    })
}

/// Solves the trade problem. Errors on invalid risk parameters or
/// non-finite/unordered bounds; an unbounded direction is impossible once
/// bounds are finite.
pub fn solve_trades(problem: &TradeProblem) -> Result<AgentDecision, AgentError> {
    problem.params.validate()?;
    if problem.base.is_empty() {
        return Err(AgentError::EmptyOutcomes);
    }
    problem.bounds.validate()?;
    let k = problem.market.n_contracts();
    match k {
        0 => decision_at(problem, Vec::new()),
        1 => solve_single_contract(problem),
        _ => solve_multi_contract(problem),
    }
}

/// Supergradient interval of the objective in the single-contract volume.
/// Returns (g_lo, g_hi) = (right derivative, left derivative).
fn gradient_interval(problem: &TradeProblem, v: f64) -> (f64, f64) {
    let phi = problem.market.prices[0];
    let eta = &problem.market.payouts[0];
    let p = problem.prob;
    let beta = problem.params.beta;
    let alpha = problem.params.alpha;
    let u = surplus_at(problem, &[v]);
    let info = tail_info(&u, p, alpha);

    // d u_n / d v = eta_n - phi =: -c_n.
    let scale = u.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let mut g_base = 0.0;
    for n in 0..u.len() {
        g_base += beta * p[n] * (eta[n] - phi);
        if u[n] < info.var - TIE_REL * scale {
            g_base += (1.0 - beta) * (p[n] / alpha) * (eta[n] - phi);
        }
    }
    // Extremes over the tie-group allocation of the remaining quantile mass.
    let (s_min, s_max) = tie_extremes(problem, &info, |n| eta[n] - phi);
    let pen = problem.gamma * (v + problem.other_volumes[0]);
    let lo = g_base + (1.0 - beta) / alpha * s_min - pen;
    let hi = g_base + (1.0 - beta) / alpha * s_max - pen;
    (lo, hi)
}

/// Min and max of sum w_n * weight(n) over 0 <= w_n <= p_n on the tied set
/// with sum w = rem_mass.
fn tie_extremes(
    problem: &TradeProblem,
    info: &TailInfo,
    weight: impl Fn(usize) -> f64,
) -> (f64, f64) {
    let p = problem.prob;
    let mut asc: Vec<usize> = info.tied.clone();
    asc.sort_by(|&a, &b| {
        weight(a)
            .partial_cmp(&weight(b))
            .unwrap()
            .then(a.cmp(&b))
    });
    let fill = |order: &[usize]| -> f64 {
        let mut mass = info.rem_mass;
        let mut total = 0.0;
        for &n in order {
            if mass <= 0.0 {
                break;
            }
            let w = mass.min(p[n]);
            total += w * weight(n);
            mass -= w;
        }
        total
    };
    let desc: Vec<usize> = asc.iter().rev().copied().collect();
    (fill(&asc), fill(&desc))
}

fn solve_single_contract(problem: &TradeProblem) -> Result<AgentDecision, AgentError> {
    let (lb, ub) = (problem.bounds.lower[0], problem.bounds.upper[0]);
    if ub - lb < 1e-15 {
        return finish_single(problem, lb);
    }
    let (lo_at_lb, _) = gradient_interval(problem, lb);
    if lo_at_lb <= 0.0 {
        // Nonincreasing to the right of the lower bound (covers flat
        // objectives deterministically).
        return finish_single(problem, lb);
    }
    let (_, hi_at_ub) = gradient_interval(problem, ub);
    if hi_at_ub >= 0.0 {
        return finish_single(problem, ub);
    }

    // Invariant: objective increasing at `lo`, decreasing at `hi`.
    let mut lo = lb;
    let mut hi = ub;
    let scale_u = problem.base.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let eta = &problem.market.payouts[0];
    let c_scale = eta
        .iter()
        .map(|e| (e - problem.market.prices[0]).abs())
        .fold(1.0_f64, f64::max);
    let v_tol = (TIE_REL * scale_u / c_scale * 0.1).min((ub - lb) * 1e-12 + 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (g_lo, g_hi) = gradient_interval(problem, mid);
        if g_lo <= 0.0 && g_hi >= 0.0 {
            return finish_single(problem, mid);
        }
        if g_lo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= v_tol {
            break;
        }
    }
    finish_single(problem, 0.5 * (lo + hi))
}

/// Builds the decision at a solved single-contract volume, selecting the
/// tie allocation that zeroes the stationarity residual where possible.
fn finish_single(problem: &TradeProblem, v: f64) -> Result<AgentDecision, AgentError> {
    let mut decision = decision_at(problem, vec![v])?;
    let beta = problem.params.beta;
    let alpha = problem.params.alpha;
    if beta >= 1.0 {
        return Ok(decision);
    }
    let phi = problem.market.prices[0];
    let eta = &problem.market.payouts[0];
    let p = problem.prob;
    let info = tail_info(&decision.surplus, p, alpha);
    if info.tied.is_empty() {
        return Ok(decision);
    }

    let mut g_base = 0.0;
    let scale = decision
        .surplus
        .iter()
        .fold(1.0_f64, |m, x| m.max(x.abs()));
    for n in 0..p.len() {
        g_base += beta * p[n] * (eta[n] - phi);
        if decision.surplus[n] < info.var - TIE_REL * scale {
            g_base += (1.0 - beta) * (p[n] / alpha) * (eta[n] - phi);
        }
    }
    let pen = problem.gamma * (v + problem.other_volumes[0]);
    let (s_min, s_max) = tie_extremes(problem, &info, |n| eta[n] - phi);
    let g_min = g_base + (1.0 - beta) / alpha * s_min - pen;
    let g_max = g_base + (1.0 - beta) / alpha * s_max - pen;

    // Target supergradient: 0 in the interior, the closest valid value at a
    // bound.
    let at_lb = (v - problem.bounds.lower[0]).abs() <= 1e-9 * v.abs().max(1.0);
    let at_ub = (problem.bounds.upper[0] - v).abs() <= 1e-9 * v.abs().max(1.0);
    let target_g = if at_lb {
        g_max.min(0.0)
    } else if at_ub {
        g_min.max(0.0)
    } else {
        0.0
    }
    .clamp(g_min, g_max);

    let theta = if (g_max - g_min).abs() > 0.0 {
        ((target_g - g_min) / (g_max - g_min)).clamp(0.0, 1.0)
    } else {
        0.0
    };

    // Interpolate between the two extreme allocations.
    let w_extreme = |ascending: bool| -> Vec<f64> {
        let mut order = info.tied.clone();
        order.sort_by(|&a, &b| {
            let wa = eta[a] - phi;
            let wb = eta[b] - phi;
            wa.partial_cmp(&wb).unwrap().then(a.cmp(&b))
        });
        if !ascending {
            order.reverse();
        }
        let mut mass = info.rem_mass;
        let mut w = vec![0.0; info.tied.len()];
        for &n in &order {
            if mass <= 0.0 {
                break;
            }
            let take = mass.min(p[n]);
            let pos = info.tied.iter().position(|&m| m == n).unwrap();
            w[pos] = take;
            mass -= take;
        }
        w
    };
    let w_min = w_extreme(true); // attains s_min
    let w_max = w_extreme(false); // attains s_max
    for (pos, &n) in info.tied.iter().enumerate() {
        let w = w_min[pos] + theta * (w_max[pos] - w_min[pos]);
        decision.tail_duals[n] = (1.0 - beta) * w / alpha;
    }
    // Scenarios strictly below keep the full tail density.
    for n in 0..p.len() {
        if decision.surplus[n] < info.var - TIE_REL * scale && !info.tied.contains(&n) {
            decision.tail_duals[n] = (1.0 - beta) * p[n] / alpha;
        }
    }
    Ok(decision)
}

/// Epigraph form solved by the conic engine: variables (v, VaR, w).
fn solve_multi_contract(problem: &TradeProblem) -> Result<AgentDecision, AgentError> {
    let k = problem.market.n_contracts();
    let n = problem.base.len();
    let beta = problem.params.beta;
    let alpha = problem.params.alpha;
    let p = problem.prob;

    let mut qp = QpBuilder::new(k + 1 + n);
    let var_ix = k;
    let w_ix = |i: usize| k + 1 + i;

    for ki in 0..k {
        if problem.gamma > 0.0 {
            qp.quadratic(ki, problem.gamma);
            qp.linear(ki, problem.gamma * problem.other_volumes[ki]);
        }
        let phi = problem.market.prices[ki];
        let eta = &problem.market.payouts[ki];
        let fair: f64 = p.iter().zip(eta).map(|(pn, e)| pn * (phi - e)).sum();
        qp.linear(ki, beta * fair);
    }
    qp.linear(var_ix, -(1.0 - beta));
    for i in 0..n {
        qp.linear(w_ix(i), (1.0 - beta) / alpha * p[i]);
    }

    // Tail rows: sum_k (phi_k - eta_kn) v_k + VaR - w_n <= base_n.
    let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(k + 2);
    for i in 0..n {
        coeffs.clear();
        for ki in 0..k {
            let c = problem.market.prices[ki] - problem.market.payouts[ki][i];
            if c != 0.0 {
                coeffs.push((ki, c));
            }
        }
        coeffs.push((var_ix, 1.0));
        coeffs.push((w_ix(i), -1.0));
        qp.row(&coeffs, problem.base[i]);
    }
    // w >= 0.
    for i in 0..n {
        qp.row(&[(w_ix(i), -1.0)], 0.0);
    }
    // Volume bounds.
    for ki in 0..k {
        qp.row(&[(ki, 1.0)], problem.bounds.upper[ki]);
        qp.row(&[(ki, -1.0)], -problem.bounds.lower[ki]);
    }
    qp.cone(Cone::Nonneg(2 * n + 2 * k));

    let sol = qp.solve()?;
    let volumes: Vec<f64> = (0..k)
        .map(|ki| sol.x[ki].clamp(problem.bounds.lower[ki], problem.bounds.upper[ki]))
        .collect();
    let mut decision = decision_at(problem, volumes)?;
    // Tail duals from the interior-point solution (deterministic analytic
    // center of the optimal face).
    for i in 0..n {
        decision.tail_duals[i] = sol.z[i].max(0.0);
    }
    decision.value_at_risk = sol.x[var_ix];
    decision.tail_slack = decision
        .surplus
        .iter()
        .map(|u| (decision.value_at_risk - u).max(0.0))
        .collect();
    Ok(decision)
}

/// Stationarity and complementarity residual of a decision, relative to the
/// problem scale. Exact solutions return values near machine precision;
/// interior-point solutions return the solver tolerance.
pub fn kkt_residual(problem: &TradeProblem, decision: &AgentDecision) -> f64 {
    let k = problem.market.n_contracts();
    let p = problem.prob;
    let beta = problem.params.beta;
    let alpha = problem.params.alpha;
    let scale_u = problem.base.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let mut worst: f64 = 0.0;

    // Stationarity in each volume.
    for ki in 0..k {
        let phi = problem.market.prices[ki];
        let eta = &problem.market.payouts[ki];
        let mut g = 0.0;
        for n in 0..p.len() {
            g += (beta * p[n] + decision.tail_duals[n]) * (eta[n] - phi);
        }
        g -= problem.gamma * (decision.volumes[ki] + problem.other_volumes[ki]);
        let (lb, ub) = (problem.bounds.lower[ki], problem.bounds.upper[ki]);
        let v = decision.volumes[ki];
        let span = (ub - lb).max(1e-12);
        let at_lb = (v - lb).abs() <= 1e-7 * span;
        let at_ub = (ub - v).abs() <= 1e-7 * span;
        let viol = if at_lb && at_ub {
            0.0
        } else if at_lb {
            g.max(0.0)
        } else if at_ub {
            (-g).max(0.0)
        } else {
            g.abs()
        };
        // Gradient scale: payout spread.
        let g_scale = eta
            .iter()
            .map(|e| (e - phi).abs())
            .fold(1.0_f64, f64::max);
        worst = worst.max(viol / g_scale);
    }

    // VaR stationarity: tail duals sum to (1 - beta).
    let tau_sum: f64 = decision.tail_duals.iter().sum();
    worst = worst.max((tau_sum - (1.0 - beta)).abs() / 1.0_f64.max(1.0 - beta));

    // Dual bounds and complementary slackness on the tail constraints.
    for n in 0..p.len() {
        let tau = decision.tail_duals[n];
        let cap = (1.0 - beta) * p[n] / alpha;
        worst = worst.max((tau - cap).max(0.0) / cap.max(1e-12));
        worst = worst.max((-tau).max(0.0) / cap.max(1e-12));
        let slack = (decision.value_at_risk - decision.surplus[n]).max(0.0);
        let gap = (decision.tail_slack[n] - slack).abs();
        worst = worst.max(gap * tau / (scale_u * cap.max(1e-12)));
        // tau below cap requires zero slack.
        if decision.tail_slack[n] > 1e-7 * scale_u {
            worst = worst.max((cap - tau).max(0.0) / cap.max(1e-12) * 1e-2);
        }
    }
    worst
}

/// Generator subproblem: risk-adjusted profit of one technology given its
/// installed capacity and per-scenario spot margins.
#[allow(clippy::too_many_arguments)]
pub fn solve_generator(
    margin_per_mw: &[f64],
    capacity: f64,
    inv_cost: f64,
    prob: &[f64],
    market: Market<'_>,
    bounds: &VolumeBounds,
    params: RiskParams,
    gamma: f64,
    other_volumes: &[f64],
) -> Result<AgentDecision, AgentError> {
    let base: Vec<f64> = margin_per_mw
        .iter()
        .map(|m| capacity * m - inv_cost * capacity)
        .collect();
    solve_trades(&TradeProblem {
        base: &base,
        prob,
        market,
        bounds,
        params,
        gamma,
        other_volumes,
        warm: None,
    })
}

/// Consumer subproblem: risk-adjusted utility of the representative
/// consumer. No imbalance penalty term.
pub fn solve_consumer(
    gross_value: &[f64],
    spot_payment: &[f64],
    prob: &[f64],
    market: Market<'_>,
    bounds: &VolumeBounds,
    params: RiskParams,
) -> Result<AgentDecision, AgentError> {
    let base: Vec<f64> = gross_value
        .iter()
        .zip(spot_payment)
        .map(|(g, s)| g - s)
        .collect();
    let zeros = vec![0.0; market.n_contracts()];
    solve_trades(&TradeProblem {
        base: &base,
        prob,
        market,
        bounds,
        params,
        gamma: 0.0,
        other_volumes: &zeros,
        warm: None,
    })
}

/// Collective seller decision plus the per-technology risk-adjusted profit
/// signal psi used by the capacity update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveDecision {
    pub decision: AgentDecision,
    /// psi_g = sum_n (tau_n + beta p_n) * profit_gn.
    pub psi: Vec<f64>,
}

/// Single-agent portfolio of all technologies trading one contract.
pub fn solve_collective(
    tech_profit: &[Vec<f64>],
    prob: &[f64],
    market: Market<'_>,
    bounds: &VolumeBounds,
    params: RiskParams,
    gamma: f64,
    other_volumes: &[f64],
) -> Result<CollectiveDecision, AgentError> {
    let n = prob.len();
    let mut base = vec![0.0; n];
    for profits in tech_profit {
        for (b, x) in base.iter_mut().zip(profits) {
            *b += x;
        }
    }
    let decision = solve_trades(&TradeProblem {
        base: &base,
        prob,
        market,
        bounds,
        params,
        gamma,
        other_volumes,
        warm: None,
    })?;
    let psi = tech_profit
        .iter()
        .map(|profits| {
            profits
                .iter()
                .enumerate()
                .map(|(i, x)| (decision.tail_duals[i] + params.beta * prob[i]) * x)
                .sum()
        })
        .collect();
    Ok(CollectiveDecision { decision, psi })
}

/// Availability-weighted share of scarcity blocks: the expected availability
/// of a technology over blocks whose price exceeds the peaker's marginal
/// cost. Used to cap option sales in mandatory regimes.
pub fn reliability_credit(
    system: &System,
    dispatches: &[DispatchResult],
    technology: usize,
) -> Result<f64, AgentError> {
    // Scarcity is measured against the peaker's cost; when no technology is
    // marked as the peaker, the highest-average-cost one stands in.
    let peaker = system
        .tech_by_role(crate::scenario::TechRole::Peaker)
        .unwrap_or_else(|| {
            (0..system.n_tech())
                .max_by(|&a, &b| {
                    let ca: f64 = system.technologies[a].fuel_cost.iter().sum();
                    let cb: f64 = system.technologies[b].fuel_cost.iter().sum();
                    ca.partial_cmp(&cb).unwrap().then(b.cmp(&a))
                })
                .unwrap_or(technology)
        });
    let mut num = 0.0;
    let mut den = 0.0;
    for n in 0..system.scenarios.n_scenarios() {
        let id = system.scenarios.id(n);
        let peak_cost = system.marginal_cost(peaker, id.fuel);
        for (t, (b, d)) in system
            .curve
            .blocks
            .iter()
            .zip(&dispatches[n].blocks)
            .enumerate()
        {
            if d.price > peak_cost {
                num += b.hours * system.availability(technology, id.profile, t);
                den += b.hours;
            }
        }
    }
    if den == 0.0 {
        return Err(AgentError::NoScarcity);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn cvar_full_tail_is_expectation() {
        let u = [3.0, -1.0, 7.0, 2.5];
        let p = uniform(4);
        let mean: f64 = u.iter().zip(&p).map(|(x, q)| x * q).sum();
        assert!((cvar(&u, &p, 1.0).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn cvar_half_tail_of_two_points() {
        let u = [0.0, 10.0];
        assert!((cvar(&u, &uniform(2), 0.5).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn cvar_single_outcome_is_that_outcome() {
        for alpha in [0.01, 0.4, 1.0] {
            assert!((cvar(&[42.0], &[1.0], alpha).unwrap() - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_translation_equivariance() {
        let u = [5.0, -3.0, 8.0, 1.0, 0.0];
        let p = [0.1, 0.3, 0.2, 0.25, 0.15];
        let base = cvar(&u, &p, 0.4).unwrap();
        let shifted: Vec<f64> = u.iter().map(|x| x + 11.5).collect();
        assert!((cvar(&shifted, &p, 0.4).unwrap() - (base + 11.5)).abs() < 1e-9);
    }

    #[test]
    fn risk_measure_composes_expectation_and_cvar() {
        let u = [0.0, 10.0];
        let p = uniform(2);
        let rm = risk_measure(
            &u,
            &p,
            RiskParams {
                alpha: 0.5,
                beta: 0.7,
            },
        )
        .unwrap();
        assert!((rm - 3.5).abs() < 1e-12);
        let neutral = risk_measure(
            &u,
            &p,
            RiskParams {
                alpha: 0.5,
                beta: 1.0,
            },
        )
        .unwrap();
        assert!((neutral - 5.0).abs() < 1e-12);
        let tail_only = risk_measure(
            &u,
            &p,
            RiskParams {
                alpha: 0.5,
                beta: 0.0,
            },
        )
        .unwrap();
        assert!((tail_only - 0.0).abs() < 1e-12);
    }

    #[test]
    fn risk_measure_never_exceeds_expectation() {
        let u = [4.0, -2.0, 9.0, 0.5, 3.3];
        let p = [0.2, 0.2, 0.2, 0.2, 0.2];
        let mean: f64 = u.iter().zip(&p).map(|(x, q)| x * q).sum();
        for beta in [0.0, 0.3, 0.8] {
            let rm = risk_measure(
                &u,
                &p,
                RiskParams { alpha: 0.6, beta },
            )
            .unwrap();
            assert!(rm <= mean + 1e-12);
        }
    }

    fn market_fixture<'a>(prices: &'a [f64], payouts: &'a [Vec<f64>]) -> Market<'a> {
        Market { prices, payouts }
    }

    #[test]
    fn empty_menu_returns_raw_risk_measure() {
        let base = [100.0, -50.0, 20.0];
        let p = uniform(3);
        let params = RiskParams {
            alpha: 0.5,
            beta: 0.6,
        };
        let d = solve_trades(&TradeProblem {
            base: &base,
            prob: &p,
            market: market_fixture(&[], &[]),
            bounds: &VolumeBounds {
                lower: vec![],
                upper: vec![],
            },
            params,
            gamma: 0.0,
            other_volumes: &[],
            warm: None,
        })
        .unwrap();
        assert!(d.volumes.is_empty());
        let expected = risk_measure(&base, &p, params).unwrap();
        assert!((d.rho - expected).abs() < 1e-9);
    }

    #[test]
    fn two_scenario_equalization_single_contract() {
        // Profit (0, 100), equal probability, beta = 0, alpha = 0.5; a
        // contract paying (1, 0) * 100 at fair price 50 equalizes the two
        // scenarios at u = (50, 50).
        let base = [0.0, 100.0];
        let p = uniform(2);
        let payouts = vec![vec![100.0, 0.0]];
        let prices = [50.0];
        let bounds = VolumeBounds {
            lower: vec![-10.0],
            upper: vec![10.0],
        };
        let d = solve_trades(&TradeProblem {
            base: &base,
            prob: &p,
            market: market_fixture(&prices, &payouts),
            bounds: &bounds,
            params: RiskParams {
                alpha: 0.5,
                beta: 0.0,
            },
            gamma: 0.0,
            other_volumes: &[0.0],
            warm: None,
        })
        .unwrap();
        // u0 = 50v, u1 = 100 - 50v meet at v = 1 with u = (50, 50).
        assert!((d.volumes[0] - 1.0).abs() < 1e-6, "v = {}", d.volumes[0]);
        assert!((d.surplus[0] - 50.0).abs() < 1e-4);
        assert!((d.surplus[1] - 50.0).abs() < 1e-4);
        assert!((d.rho - 50.0).abs() < 1e-4);

        // Grid-search oracle over v confirms the optimum.
        let mut best = f64::NEG_INFINITY;
        let mut best_v = 0.0;
        for i in 0..=2000 {
            let v = -10.0 + 20.0 * i as f64 / 2000.0;
            let u0 = base[0] - v * (50.0 - 100.0);
            let u1 = base[1] - v * (50.0 - 0.0);
            let val = u0.min(u1); // beta=0, alpha=0.5 on two equal atoms
            if val > best {
                best = val;
                best_v = v;
            }
        }
        assert!((best_v - 1.0).abs() < 0.02);
        assert!((best - 50.0).abs() < 1.0);
    }

    #[test]
    fn risk_neutral_fair_contract_value_is_volume_invariant() {
        let base = [10.0, 30.0];
        let p = uniform(2);
        let payouts = vec![vec![8.0, 4.0]];
        let fair = 6.0;
        let prices = [fair];
        let params = RiskParams {
            alpha: 0.5,
            beta: 1.0,
        };
        let mk = market_fixture(&prices, &payouts);
        // rho equals expected profit no matter the chosen volume.
        for v in [-3.0, 0.0, 5.0] {
            let u0 = base[0] - v * (fair - payouts[0][0]);
            let u1 = base[1] - v * (fair - payouts[0][1]);
            let mean = 0.5 * (u0 + u1);
            assert!((mean - 20.0).abs() < 1e-12);
        }
        let d = solve_trades(&TradeProblem {
            base: &base,
            prob: &p,
            market: mk,
            bounds: &VolumeBounds {
                lower: vec![-100.0],
                upper: vec![100.0],
            },
            params,
            gamma: 0.0,
            other_volumes: &[0.0],
            warm: None,
        })
        .unwrap();
        assert!((d.rho - 20.0).abs() < 1e-9);
        assert!(d.volumes[0].is_finite());
    }

    #[test]
    fn infinite_bounds_are_rejected() {
        let base = [1.0, 2.0];
        let p = uniform(2);
        let payouts = vec![vec![1.0, 0.0]];
        let prices = [0.4];
        let err = solve_trades(&TradeProblem {
            base: &base,
            prob: &p,
            market: market_fixture(&prices, &payouts),
            bounds: &VolumeBounds {
                lower: vec![f64::NEG_INFINITY],
                upper: vec![f64::INFINITY],
            },
            params: RiskParams {
                alpha: 0.5,
                beta: 0.5,
            },
            gamma: 0.0,
            other_volumes: &[0.0],
            warm: None,
        })
        .unwrap_err();
        assert!(matches!(err, AgentError::BadBounds { .. }));
    }

    #[test]
    fn single_and_multi_contract_paths_agree() {
        // Same problem solved by bisection (K=1) and by the conic engine
        // (duplicate the contract with a zero-width second slot).
        let base = [40.0, -25.0, 80.0, 5.0];
        let p = [0.3, 0.2, 0.25, 0.25];
        let payouts1 = vec![vec![30.0, 90.0, -10.0, 20.0]];
        let payouts2 = vec![
            vec![30.0, 90.0, -10.0, 20.0],
            vec![0.0, 0.0, 0.0, 0.0],
        ];
        let prices1 = [35.0];
        let prices2 = [35.0, 0.0];
        let params = RiskParams {
            alpha: 0.4,
            beta: 0.3,
        };
        let d1 = solve_trades(&TradeProblem {
            base: &base,
            prob: &p,
            market: market_fixture(&prices1, &payouts1),
            bounds: &VolumeBounds {
                lower: vec![-5.0],
                upper: vec![5.0],
            },
            params,
            gamma: 1e-4,
            other_volumes: &[0.2],
            warm: None,
        })
        .unwrap();
        let d2 = solve_trades(&TradeProblem {
            base: &base,
            prob: &p,
            market: market_fixture(&prices2, &payouts2),
            bounds: &VolumeBounds {
                lower: vec![-5.0, 0.0],
                upper: vec![5.0, 0.0],
            },
            params,
            gamma: 1e-4,
            other_volumes: &[0.2, 0.0],
            warm: None,
        })
        .unwrap();
        assert!(
            (d1.volumes[0] - d2.volumes[0]).abs() < 1e-4,
            "bisection {} vs conic {}",
            d1.volumes[0],
            d2.volumes[0]
        );
        assert!((d1.rho - d2.rho).abs() < 1e-6 * d1.rho.abs().max(1.0));
    }

    #[test]
    fn kkt_residual_small_at_reported_solutions() {
        let base = [40.0, -25.0, 80.0, 5.0, 12.0];
        let p = uniform(5);
        let payouts = vec![vec![30.0, 90.0, -10.0, 20.0, 55.0]];
        let prices = [37.0];
        let params = RiskParams {
            alpha: 0.4,
            beta: 0.3,
        };
        let problem = TradeProblem {
            base: &base,
            prob: &p,
            market: market_fixture(&prices, &payouts),
            bounds: &VolumeBounds {
                lower: vec![-4.0],
                upper: vec![4.0],
            },
            params,
            gamma: 1e-5,
            other_volumes: &[0.0],
            warm: None,
        };
        let d = solve_trades(&problem).unwrap();
        let res = kkt_residual(&problem, &d);
        assert!(res < 1e-6, "KKT residual {res}");
    }

    #[test]
    fn mandatory_floor_weakly_lowers_consumer_objective() {
        let gross = [1000.0, 900.0, 1200.0];
        let spot = [400.0, 800.0, 300.0];
        let p = uniform(3);
        let payouts = vec![vec![120.0, 260.0, 60.0]];
        // Price above fair value: forced purchases hurt.
        let prices = [170.0];
        let params = RiskParams {
            alpha: 0.7,
            beta: 0.7,
        };
        let free = solve_consumer(
            &gross,
            &spot,
            &p,
            market_fixture(&prices, &payouts),
            &VolumeBounds {
                lower: vec![0.0],
                upper: vec![10.0],
            },
            params,
        )
        .unwrap();
        let floored = solve_consumer(
            &gross,
            &spot,
            &p,
            market_fixture(&prices, &payouts),
            &VolumeBounds {
                lower: vec![4.0],
                upper: vec![10.0],
            },
            params,
        )
        .unwrap();
        assert!(free.rho >= floored.rho - 1e-9);
    }

    #[test]
    fn collective_psi_matches_direct_risk_reweighting() {
        // Single technology: psi equals the tilted-measure value of its
        // profit vector.
        let profit = vec![vec![50.0, -20.0, 130.0]];
        let p = uniform(3);
        let payouts = vec![vec![10.0, 80.0, -5.0]];
        let prices = [30.0];
        let params = RiskParams {
            alpha: 0.5,
            beta: 0.4,
        };
        let col = solve_collective(
            &profit,
            &p,
            market_fixture(&prices, &payouts),
            &VolumeBounds {
                lower: vec![-3.0],
                upper: vec![3.0],
            },
            params,
            1e-6,
            &[0.0],
        )
        .unwrap();
        let tilted = col.decision.tilted_measure(&p, params.beta);
        let direct: f64 = profit[0].iter().zip(&tilted).map(|(x, m)| x * m).sum();
        assert!((col.psi[0] - direct).abs() < 1e-9);
    }

    #[test]
    fn collective_psi_risk_neutral_collapses_to_expectation() {
        let profit = vec![vec![10.0, 30.0], vec![-5.0, 25.0]];
        let p = uniform(2);
        let payouts = vec![vec![1.0, -1.0]];
        let prices = [0.0];
        let col = solve_collective(
            &profit,
            &p,
            market_fixture(&prices, &payouts),
            &VolumeBounds {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
            RiskParams {
                alpha: 0.7,
                beta: 1.0,
            },
            0.0,
            &[0.0],
        )
        .unwrap();
        assert!((col.psi[0] - 20.0).abs() < 1e-9);
        assert!((col.psi[1] - 10.0).abs() < 1e-9);
        assert!(col.decision.tail_duals.iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn collective_psi_zero_capacity_is_zero() {
        let profit = vec![vec![0.0, 0.0], vec![7.0, -3.0]];
        let p = uniform(2);
        let payouts = vec![vec![1.0, -1.0]];
        let prices = [0.0];
        let col = solve_collective(
            &profit,
            &p,
            market_fixture(&prices, &payouts),
            &VolumeBounds {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
            RiskParams {
                alpha: 0.5,
                beta: 0.3,
            },
            1e-6,
            &[0.0],
        )
        .unwrap();
        assert_eq!(col.psi[0], 0.0);
    }

    #[test]
    fn collective_decomposition_identity() {
        // sum_g psi_g plus the tilted-measure value of the trading cash flow
        // recovers rho up to the gamma penalty.
        let profit = vec![vec![50.0, -20.0, 130.0], vec![10.0, 60.0, -40.0]];
        let p = uniform(3);
        let payouts = vec![vec![10.0, 80.0, -5.0]];
        let prices = [30.0];
        let params = RiskParams {
            alpha: 0.5,
            beta: 0.4,
        };
        let gamma = 1e-6;
        let col = solve_collective(
            &profit,
            &p,
            market_fixture(&prices, &payouts),
            &VolumeBounds {
                lower: vec![-3.0],
                upper: vec![3.0],
            },
            params,
            gamma,
            &[0.5],
        )
        .unwrap();
        let tilted = col.decision.tilted_measure(&p, params.beta);
        let v = col.decision.volumes[0];
        let cash: f64 = (0..3)
            .map(|n| -v * (prices[0] - payouts[0][n]) * tilted[n])
            .sum();
        let psi_total: f64 = col.psi.iter().sum();
        let pen = 0.5 * gamma * (v + 0.5) * (v + 0.5);
        let lhs = psi_total + cash - pen;
        assert!(
            (lhs - col.decision.rho).abs() < 1e-6 * col.decision.rho.abs().max(1.0),
            "decomposition {lhs} vs rho {}",
            col.decision.rho
        );
    }
}
