//! Near-equilibrium computation: an outer capacity update driven by
//! risk-adjusted profits and an inner price-adjustment loop that clears the
//! contract market, per regime.
//!
//! The outer update is x_g <- max(0, x_g + eps1 * rho_g / C_INV_g); in
//! collective regimes the per-technology signal psi_g replaces rho_g. The
//! inner loop moves each contract price by eps2 times its net traded volume
//! until every contract clears to within sigma, with geometric step backoff
//! on oscillation. Payouts stay fixed inside the inner loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, AgentDecision, AgentError, Market, RiskParams, TradeProblem, VolumeBounds,
};
use crate::contracts::{Contract, ContractError, ContractKind, payout_table};
use crate::convex::{Cone, QpBuilder};
use crate::dispatch::{self, DispatchError, DispatchResult, ScenarioTotals};
use crate::scenario::{System, TechRole};

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("contract {contract}: clearing infeasible, net volume range [{min_total}, {max_total}] excludes zero")]
    InfeasibleClearing {
        contract: String,
        min_total: f64,
        max_total: f64,
    },
    #[error("contract {contract}: price step collapsed below its floor while still oscillating")]
    StepFloor { contract: String },
    #[error("this regime derives its purchase floor from a reference run; run the unrestricted counterpart first and pass its state file")]
    MissingReference,
    #[error("invalid regime: {0}")]
    BadRegime(String),
    #[error("problem too large for the direct planner solve ({0} block-scenarios); use the iterative planner")]
    TooLargeForDirect(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    /// Three contracts adapted to the three technologies.
    Unrestricted3,
    /// Options with a consumer purchase floor and rc-based sale caps;
    /// futures and unit-contingent redefined to pay only up to the strike.
    MandatoryOption,
    OptionsOnlySep,
    OptionsOnlyCol,
    SfpfcSep,
    SfpfcCol,
    /// Collective SFPFC with a consumer purchase floor.
    SfpfcMandatory,
    /// Planner benchmark over the pooled risk set.
    CompleteTrading,
    /// One security per scenario; complete-markets test menu.
    ArrowDebreu,
}

impl RegimeKind {
    pub fn collective(self) -> bool {
        matches!(
            self,
            RegimeKind::OptionsOnlyCol | RegimeKind::SfpfcCol | RegimeKind::SfpfcMandatory
        )
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, RegimeKind::MandatoryOption | RegimeKind::SfpfcMandatory)
    }
}

/// Consumer purchase floor specification for mandatory regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorSpec {
    /// Floor in MW, fixed in the configuration.
    Explicit(f64),
    /// Sum over technologies of rc_g * x_g from the reference run.
    FromReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MandatoryRule {
    /// Menu index of the contract carrying the obligation.
    pub contract: usize,
    pub floor: FloorSpec,
    /// Cap each technology's sales of that contract at rc_g * x_g,
    /// recomputed every outer iteration.
    pub rc_caps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub kind: RegimeKind,
    pub contracts: Vec<Contract>,
    pub mandatory: Option<MandatoryRule>,
}

impl Regime {
    pub fn validate(&self, n_tech: usize) -> Result<(), EquilibriumError> {
        for c in &self.contracts {
            c.validate(n_tech)?;
        }
        if self.kind == RegimeKind::MandatoryOption {
            let has_option = self
                .contracts
                .iter()
                .any(|c| matches!(c.kind, ContractKind::CallOption { .. }));
            let plain_forward = self.contracts.iter().any(|c| {
                matches!(
                    c.kind,
                    ContractKind::Future { .. } | ContractKind::UnitContingent { .. }
                ) && c.cap.is_none()
            });
            if !has_option {
                return Err(EquilibriumError::BadRegime(
                    "mandatory option regime needs a call option in the menu".into(),
                ));
            }
            if plain_forward {
                return Err(EquilibriumError::BadRegime(
                    "mandatory option regime requires capped future and unit-contingent variants"
                        .into(),
                ));
            }
            if self.mandatory.is_none() {
                return Err(EquilibriumError::BadRegime(
                    "mandatory option regime needs a mandatory rule".into(),
                ));
            }
        }
        if self.kind.needs_reference() && self.mandatory.is_none() {
            return Err(EquilibriumError::BadRegime(
                "mandatory regime needs a mandatory rule".into(),
            ));
        }
        if self.kind.collective() && self.contracts.len() != 1 {
            return Err(EquilibriumError::BadRegime(
                "collective regimes trade exactly one contract".into(),
            ));
        }
        if self.kind.collective()
            && self
                .mandatory
                .as_ref()
                .map(|r| r.rc_caps)
                .unwrap_or(false)
        {
            return Err(EquilibriumError::BadRegime(
                "rc-based sale caps apply to per-technology sellers only".into(),
            ));
        }
        Ok(())
    }
}

/// Step sizes, tolerances, and iteration limits for the fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmParams {
    /// Capacity step eps1 (MW per unit of rho/C_INV).
    pub step_capacity: f64,
    /// Initial price step as a fraction of the contract's payout scale per
    /// unit of volume-scale imbalance.
    pub step_price_fraction: f64,
    /// Clearing tolerance sigma on net traded volume.
    pub sigma: f64,
    /// Zero-profit tolerance delta, $/yr.
    pub delta: f64,
    /// Imbalance penalty weight; None derives 1e-6 * C_INV_peaker / peak MW.
    pub gamma: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Converged runs must also satisfy this proximity bound, percent.
    pub proximity_cap_pct: f64,
    /// Relative marginal-value tolerance of the planner fixed point.
    pub planner_tol: f64,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        AlgorithmParams {
            step_capacity: 0.5,
            step_price_fraction: 0.005,
            sigma: 10.0,
            delta: 1.0e6,
            gamma: None,
            max_outer: 600,
            max_inner: 2000,
            proximity_cap_pct: 0.2,
            planner_tol: 1e-5,
        }
    }
}

/// Risk attitudes of the market sides. Generators share one beta; the
/// consumer has its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketRisk {
    pub consumer: RiskParams,
    pub generators: RiskParams,
}

impl MarketRisk {
    /// Pooled risk set for the complete-trading benchmark: common alpha,
    /// highest beta.
    pub fn pooled(&self) -> RiskParams {
        RiskParams {
            alpha: self.consumer.alpha,
            beta: self.consumer.beta.max(self.generators.beta),
        }
    }
}

/// Data carried over from a reference run for mandatory regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub capacities: Vec<f64>,
    pub reliability_credits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub inner_iterations: usize,
    pub clearing_residual: f64,
    pub max_profit_residual: f64,
    pub proximity_pct: f64,
    pub capacities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub regime: RegimeKind,
    pub capacities: Vec<f64>,
    /// Contract prices phi.
    pub prices: Vec<f64>,
    pub consumer: AgentDecision,
    /// One decision per technology in separate regimes; a single collective
    /// decision otherwise.
    pub sellers: Vec<AgentDecision>,
    /// rho_g per technology (psi_g in collective regimes).
    pub tech_signal: Vec<f64>,
    pub converged: bool,
    pub clearing_residual: Vec<f64>,
    pub proximity_pct: f64,
    pub outer_iterations: usize,
    pub history: Vec<OuterRecord>,
    /// rc_g at the final dispatch; NaN when no scarcity block exists.
    pub reliability_credits: Vec<f64>,
    /// Consumer floor actually applied, if any.
    pub applied_floor_mw: Option<f64>,
    #[serde(skip)]
    pub dispatches: Vec<DispatchResult>,
    #[serde(skip)]
    pub payouts: Vec<Vec<f64>>,
    #[serde(skip)]
    pub totals: Vec<ScenarioTotals>,
}

impl EquilibriumResult {
    /// Total risk-adjusted surplus across all agents, $/yr.
    pub fn total_surplus(&self) -> f64 {
        self.consumer.rho + self.sellers.iter().map(|s| s.rho).sum::<f64>()
    }
}

fn derive_gamma(system: &System, params: &AlgorithmParams) -> f64 {
    if let Some(g) = params.gamma {
        return g;
    }
    let peaker = system
        .tech_by_role(TechRole::Peaker)
        .unwrap_or(0);
    let peak = system.curve.peak_fixed_mw().max(1.0);
    1e-6 * system.technologies[peaker].inv_cost / peak
}

/// Generates the one-security-per-scenario menu.
pub fn arrow_debreu_menu(system: &System) -> Vec<Contract> {
    (0..system.scenarios.n_scenarios())
        .map(|n| Contract {
            name: format!("state{n:04}"),
            kind: ContractKind::ScenarioSecurity { scenario: n },
            cap: None,
        })
        .collect()
}

/// Consumer floor plus rc-based sale caps for mandatory regimes.
///
/// The consumer floor is the reference mix's reliability-weighted capacity
/// sum(rc_g * x_g); generator sale caps are rc_g * x_g at the current
/// capacities and are recomputed every outer iteration.
pub fn mandatory_bounds(
    rule: &MandatoryRule,
    reference: Option<&Reference>,
    current_capacities: &[f64],
    current_rc: &[f64],
) -> Result<(f64, Vec<f64>), EquilibriumError> {
    let floor = match rule.floor {
        FloorSpec::Explicit(mw) => mw,
        FloorSpec::FromReference => {
            let r = reference.ok_or(EquilibriumError::MissingReference)?;
            r.capacities
                .iter()
                .zip(&r.reliability_credits)
                .map(|(x, rc)| x * rc)
                .sum()
        }
    };
    let caps = if rule.rc_caps {
        current_capacities
            .iter()
            .zip(current_rc)
            .map(|(x, rc)| x * rc)
            .collect()
    } else {
        vec![f64::INFINITY; current_capacities.len()]
    };
    Ok((floor, caps))
}

struct BoundsContext<'a> {
    system: &'a System,
    regime: &'a Regime,
    start: &'a [f64],
    floor_mw: Option<f64>,
    /// Per-technology sale cap on the mandatory contract (finite only when
    /// rc caps are active).
    sale_caps: Option<Vec<f64>>,
}

/// Volume bounds per agent (index 0 = consumer, then sellers).
fn build_bounds(ctx: &BoundsContext, capacities: &[f64], n_sellers: usize) -> Vec<VolumeBounds> {
    let max_cap = capacities
        .iter()
        .chain(ctx.start.iter())
        .fold(1.0_f64, |m, &x| m.max(x));
    let default_mag = 2.0 * max_cap;
    // Scenario securities pay $1 per unit; volumes are dollar-scaled.
    let ad_mag = 10.0
        * ctx
            .system
            .technologies
            .iter()
            .zip(ctx.start)
            .map(|(t, x)| t.inv_cost * x)
            .sum::<f64>()
            .max(1e6);

    let magnitude: Vec<f64> = ctx
        .regime
        .contracts
        .iter()
        .map(|c| match c.kind {
            ContractKind::ScenarioSecurity { .. } => ad_mag,
            _ => default_mag,
        })
        .collect();

    let mut out = Vec::with_capacity(1 + n_sellers);
    // Consumer.
    let mut consumer = VolumeBounds {
        lower: magnitude.iter().map(|m| -m).collect(),
        upper: magnitude.clone(),
    };
    if let (Some(rule), Some(floor)) = (&ctx.regime.mandatory, ctx.floor_mw) {
        consumer.lower[rule.contract] = floor;
        consumer.upper[rule.contract] = consumer.upper[rule.contract].max(1.25 * floor);
    }
    out.push(consumer);
    // Sellers.
    for s in 0..n_sellers {
        let mut b = VolumeBounds {
            lower: magnitude.iter().map(|m| -m).collect(),
            upper: magnitude.clone(),
        };
        if let (Some(rule), Some(caps)) = (&ctx.regime.mandatory, &ctx.sale_caps) {
            if caps[s].is_finite() {
                b.lower[rule.contract] = -caps[s];
            }
        }
        out.push(b);
    }
    out
}

/// Everything the agents need for one outer iteration.
struct AgentWorkspace<'a> {
    system: &'a System,
    risk: MarketRisk,
    gamma: f64,
    collective: bool,
    /// Per-scenario base surplus of the consumer.
    consumer_base: Vec<f64>,
    /// Per-technology, per-scenario profit x_g * margin - C_INV * x_g.
    tech_profit: Vec<Vec<f64>>,
}

impl AgentWorkspace<'_> {
    fn n_sellers(&self) -> usize {
        if self.collective {
            1
        } else {
            self.tech_profit.len()
        }
    }
}

struct ClearingOutcome {
    cleared: bool,
    iterations: usize,
    residual: Vec<f64>,
    consumer: AgentDecision,
    sellers: Vec<AgentDecision>,
    psi: Option<Vec<f64>>,
}

/// Solves every agent at the current prices with the others' volumes held
/// fixed (Jacobi step). Sellers run in parallel; results are positionally
/// deterministic.
fn solve_agents(
    ws: &AgentWorkspace,
    market: Market<'_>,
    bounds: &[VolumeBounds],
    volumes: &[Vec<f64>],
) -> Result<(AgentDecision, Vec<AgentDecision>, Option<Vec<f64>>), EquilibriumError> {
    let k = market.n_contracts();
    let prob = &ws.system.scenarios.prob;
    let totals: Vec<f64> = (0..k)
        .map(|ki| volumes.iter().map(|v| v[ki]).sum())
        .collect();

    let other = |agent: usize| -> Vec<f64> {
        (0..k).map(|ki| totals[ki] - volumes[agent][ki]).collect()
    };

    let consumer_other = other(0);
    let consumer = agents::solve_trades(&TradeProblem {
        base: &ws.consumer_base,
        prob,
        market,
        bounds: &bounds[0],
        params: ws.risk.consumer,
        gamma: 0.0,
        other_volumes: &consumer_other,
        warm: Some(&volumes[0]),
    })?;

    if ws.collective {
        let col = agents::solve_collective(
            &ws.tech_profit,
            prob,
            market,
            &bounds[1],
            ws.risk.generators,
            ws.gamma,
            &other(1),
        )?;
        Ok((consumer, vec![col.decision], Some(col.psi)))
    } else {
        let sellers: Result<Vec<AgentDecision>, AgentError> = (0..ws.tech_profit.len())
            .into_par_iter()
            .map(|g| {
                let others = other(1 + g);
                agents::solve_trades(&TradeProblem {
                    base: &ws.tech_profit[g],
                    prob,
                    market,
                    bounds: &bounds[1 + g],
                    params: ws.risk.generators,
                    gamma: ws.gamma,
                    other_volumes: &others,
                    warm: Some(&volumes[1 + g]),
                })
            })
            .collect();
        Ok((consumer, sellers?, None))
    }
}

/// Inner loop: price adjustment until every contract clears to sigma.
///
/// Prices move by an adaptive per-contract step times the net volume; the
/// step halves when the residual oscillates without shrinking and grows
/// when it crawls in one direction. Collapse of a step below its floor
/// while still oscillating is a hard failure.
#[allow(clippy::too_many_arguments)]
fn clear_contracts(
    ws: &AgentWorkspace,
    contracts: &[Contract],
    payouts: &[Vec<f64>],
    bounds: &[VolumeBounds],
    prices: &mut [f64],
    volumes: &mut Vec<Vec<f64>>,
    params: &AlgorithmParams,
) -> Result<ClearingOutcome, EquilibriumError> {
    let k = contracts.len();
    let n_agents = 1 + ws.n_sellers();
    if volumes.len() != n_agents || volumes.iter().any(|v| v.len() != k) {
        *volumes = vec![vec![0.0; k]; n_agents];
    }

    if k == 0 {
        let market = Market {
            prices: &*prices,
            payouts,
        };
        let (consumer, sellers, psi) = solve_agents(ws, market, bounds, volumes)?;
        return Ok(ClearingOutcome {
            cleared: true,
            iterations: 0,
            residual: Vec::new(),
            consumer,
            sellers,
            psi,
        });
    }

    // Structural feasibility: zero net volume must be reachable.
    for ki in 0..k {
        let min_total: f64 = bounds.iter().map(|b| b.lower[ki]).sum();
        let max_total: f64 = bounds.iter().map(|b| b.upper[ki]).sum();
        if min_total > params.sigma || max_total < -params.sigma {
            return Err(EquilibriumError::InfeasibleClearing {
                contract: contracts[ki].name.clone(),
                min_total,
                max_total,
            });
        }
    }

    let payout_scale: Vec<f64> = (0..k)
        .map(|ki| {
            payouts[ki]
                .iter()
                .fold(1.0_f64, |m, e| m.max(e.abs()))
        })
        .collect();
    let volume_scale: Vec<f64> = (0..k)
        .map(|ki| {
            bounds
                .iter()
                .map(|b| b.lower[ki].abs().max(b.upper[ki].abs()))
                .fold(1.0_f64, f64::max)
        })
        .collect();
    let mut eps: Vec<f64> = (0..k)
        .map(|ki| params.step_price_fraction * payout_scale[ki] / volume_scale[ki])
        .collect();
    let eps_floor: Vec<f64> = eps.iter().map(|e| e * 2f64.powi(-44)).collect();
    let eps_cap: Vec<f64> = eps.iter().map(|e| e * 2f64.powi(40)).collect();
    let price_cap: Vec<f64> = payout_scale.iter().map(|s| 4.0 * s).collect();

    let mut last_res: Vec<Option<f64>> = vec![None; k];
    let mut outcome = None;
    for it in 0..params.max_inner {
        let market = Market {
            prices: &*prices,
            payouts,
        };
        let (consumer, sellers, psi) = solve_agents(ws, market, bounds, volumes)?;
        volumes[0].copy_from_slice(&consumer.volumes);
        for (s, seller) in sellers.iter().enumerate() {
            volumes[1 + s].copy_from_slice(&seller.volumes);
        }
        let residual: Vec<f64> = (0..k)
            .map(|ki| volumes.iter().map(|v| v[ki]).sum())
            .collect();
        let worst = residual.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if worst <= params.sigma {
            outcome = Some(ClearingOutcome {
                cleared: true,
                iterations: it + 1,
                residual,
                consumer,
                sellers,
                psi,
            });
            break;
        }
        if it + 1 == params.max_inner {
            outcome = Some(ClearingOutcome {
                cleared: false,
                iterations: it + 1,
                residual,
                consumer,
                sellers,
                psi,
            });
            break;
        }
        for ki in 0..k {
            let r = residual[ki];
            if let Some(prev) = last_res[ki] {
                if r * prev < 0.0 && r.abs() >= 0.999 * prev.abs() {
                    eps[ki] *= 0.5;
                    if eps[ki] < eps_floor[ki] {
                        return Err(EquilibriumError::StepFloor {
                            contract: contracts[ki].name.clone(),
                        });
                    }
                } else if r * prev > 0.0 && r.abs() >= 0.9 * prev.abs() {
                    eps[ki] = (eps[ki] * 1.6).min(eps_cap[ki]);
                }
            }
            last_res[ki] = Some(r);
            prices[ki] = (prices[ki] + eps[ki] * r).clamp(-price_cap[ki], price_cap[ki]);
        }
    }
    Ok(outcome.expect("clearing loop always produces an outcome"))
}

fn fair_prices(payouts: &[Vec<f64>], prob: &[f64]) -> Vec<f64> {
    payouts
        .iter()
        .map(|eta| eta.iter().zip(prob).map(|(e, p)| e * p).sum())
        .collect()
}

fn reliability_credits_or_nan(system: &System, dispatches: &[DispatchResult]) -> Vec<f64> {
    (0..system.n_tech())
        .map(|g| agents::reliability_credit(system, dispatches, g).unwrap_or(f64::NAN))
        .collect()
}

/// Mean availability over profiles and blocks, hour-weighted; the fallback
/// sale-cap basis when no scarcity block exists at the current capacities.
fn mean_availability(system: &System, g: usize) -> f64 {
    let h = system.curve.total_hours();
    let r_n = system.scenarios.profiles.len() as f64;
    let mut total = 0.0;
    for r in 0..system.scenarios.profiles.len() {
        for (t, b) in system.curve.blocks.iter().enumerate() {
            total += b.hours * system.availability(g, r, t);
        }
    }
    total / (h * r_n)
}

/// Runs the fixed point for one regime from a starting capacity vector.
pub fn find_equilibrium(
    system: &System,
    regime: &Regime,
    risk: MarketRisk,
    params: &AlgorithmParams,
    start: &[f64],
    reference: Option<&Reference>,
) -> Result<EquilibriumResult, EquilibriumError> {
    regime.validate(system.n_tech())?;
    risk.consumer.validate()?;
    risk.generators.validate()?;
    if regime.kind == RegimeKind::CompleteTrading {
        return complete_trading_as_equilibrium(system, risk, params, start);
    }
    let regime = if regime.kind == RegimeKind::ArrowDebreu && regime.contracts.is_empty() {
        Regime {
            kind: RegimeKind::ArrowDebreu,
            contracts: arrow_debreu_menu(system),
            mandatory: None,
        }
    } else {
        regime.clone()
    };
    if regime.kind.needs_reference()
        && regime
            .mandatory
            .as_ref()
            .map(|r| matches!(r.floor, FloorSpec::FromReference))
            .unwrap_or(false)
        && reference.is_none()
    {
        return Err(EquilibriumError::MissingReference);
    }

    let gamma = derive_gamma(system, params);
    let n_tech = system.n_tech();
    let prob = system.scenarios.prob.clone();
    let collective = regime.kind.collective();
    let n_sellers = if collective { 1 } else { n_tech };

    let mut capacities = start.to_vec();
    let mut prices: Vec<f64> = Vec::new();
    let mut volumes: Vec<Vec<f64>> = vec![vec![0.0; regime.contracts.len()]; 1 + n_sellers];
    let mut signal = vec![0.0; n_tech];
    let mut step_scale = vec![1.0_f64; n_tech];
    let mut prev_signal: Option<Vec<f64>> = None;
    let mut history: Vec<OuterRecord> = Vec::new();

    let mut final_state: Option<(
        Vec<DispatchResult>,
        Vec<ScenarioTotals>,
        Vec<Vec<f64>>,
        ClearingOutcome,
        Vec<f64>,
        Option<f64>,
    )> = None;
    let mut converged = false;
    let mut proximity = f64::INFINITY;

    for outer in 0..params.max_outer {
        if outer > 0 {
            // Adaptive per-technology damping: halve on sign flips of the
            // profit signal, recover gently while it keeps direction.
            if let Some(prev) = &prev_signal {
                for g in 0..n_tech {
                    if signal[g] * prev[g] < 0.0 {
                        step_scale[g] = (step_scale[g] * 0.5).max(2f64.powi(-24));
                    } else if signal[g] * prev[g] > 0.0 {
                        step_scale[g] = (step_scale[g] * 1.2).min(8.0);
                    }
                }
            }
            prev_signal = Some(signal.clone());
            for g in 0..n_tech {
                let step = params.step_capacity * step_scale[g] * signal[g]
                    / system.technologies[g].inv_cost;
                capacities[g] = (capacities[g] + step).max(0.0);
            }
        }

        let dispatches = dispatch::solve_all(system, &capacities)?;
        let totals: Vec<ScenarioTotals> = (0..prob.len())
            .map(|n| dispatch::scenario_totals(system, system.scenarios.id(n), &dispatches[n]))
            .collect();
        let payouts = payout_table(system, &regime.contracts, &dispatches)?;

        let tech_profit: Vec<Vec<f64>> = (0..n_tech)
            .map(|g| {
                totals
                    .iter()
                    .map(|t| {
                        capacities[g] * t.margin_per_mw[g]
                            - system.technologies[g].inv_cost * capacities[g]
                    })
                    .collect()
            })
            .collect();
        let consumer_base: Vec<f64> = totals
            .iter()
            .map(|t| t.gross_value - t.spot_payment)
            .collect();

        // Mandatory regimes: recompute rc and volume bounds each iteration.
        // When no scarcity block exists yet, the mean availability stands in
        // for the undefined credit.
        let (floor_mw, sale_caps) = if let Some(rule) = &regime.mandatory {
            let rc: Vec<f64> = reliability_credits_or_nan(system, &dispatches)
                .into_iter()
                .enumerate()
                .map(|(g, rc)| {
                    if rc.is_nan() {
                        mean_availability(system, g)
                    } else {
                        rc
                    }
                })
                .collect();
            let (floor, caps) = mandatory_bounds(rule, reference, &capacities, &rc)?;
            (Some(floor), Some(caps))
        } else {
            (None, None)
        };
        let ctx = BoundsContext {
            system,
            regime: &regime,
            start,
            floor_mw,
            sale_caps,
        };
        let bounds = build_bounds(&ctx, &capacities, n_sellers);

        if prices.len() != regime.contracts.len() {
            prices = fair_prices(&payouts, &prob);
        }

        let ws = AgentWorkspace {
            system,
            risk,
            gamma,
            collective,
            consumer_base,
            tech_profit,
        };
        let outcome = clear_contracts(
            &ws,
            &regime.contracts,
            &payouts,
            &bounds,
            &mut prices,
            &mut volumes,
            params,
        )?;

        signal = match (&outcome.psi, collective) {
            (Some(psi), true) => psi.clone(),
            _ => outcome.sellers.iter().map(|s| s.rho).collect(),
        };

        let x_eps = 1e-6 * capacities.iter().fold(1.0_f64, |m, &x| m.max(x));
        let mut max_resid = 0.0_f64;
        let mut prox = 0.0_f64;
        let mut profit_ok = true;
        for g in 0..n_tech {
            if capacities[g] > x_eps {
                max_resid = max_resid.max(signal[g].abs());
                prox = prox.max(
                    signal[g].abs() / (system.technologies[g].inv_cost * capacities[g]) * 100.0,
                );
                if signal[g].abs() > params.delta {
                    profit_ok = false;
                }
            } else {
                max_resid = max_resid.max(signal[g].max(0.0));
                if signal[g] > params.delta {
                    profit_ok = false;
                }
            }
        }
        proximity = prox;
        let clearing_resid = outcome
            .residual
            .iter()
            .fold(0.0_f64, |m, r| m.max(r.abs()));
        history.push(OuterRecord {
            outer,
            inner_iterations: outcome.iterations,
            clearing_residual: clearing_resid,
            max_profit_residual: max_resid,
            proximity_pct: prox,
            capacities: capacities.clone(),
        });

        let done =
            outcome.cleared && profit_ok && prox <= params.proximity_cap_pct;
        final_state = Some((
            dispatches,
            totals,
            payouts,
            outcome,
            signal.clone(),
            floor_mw,
        ));
        if done {
            converged = true;
            break;
        }
    }

    let (dispatches, totals, payouts, outcome, signal, floor_mw) =
        final_state.expect("at least one outer iteration runs");
    let rc = reliability_credits_or_nan(system, &dispatches);
    Ok(EquilibriumResult {
        regime: regime.kind,
        capacities,
        prices,
        consumer: outcome.consumer,
        sellers: outcome.sellers,
        tech_signal: signal,
        converged,
        clearing_residual: outcome.residual,
        proximity_pct: proximity,
        outer_iterations: history.len(),
        history,
        reliability_credits: rc,
        applied_floor_mw: floor_mw,
        dispatches,
        payouts,
        totals,
    })
}

/// Runs one regime from several capacity starts; results are labeled by
/// start index.
pub fn multi_start(
    system: &System,
    regime: &Regime,
    risk: MarketRisk,
    params: &AlgorithmParams,
    starts: &[Vec<f64>],
    reference: Option<&Reference>,
) -> Result<Vec<EquilibriumResult>, EquilibriumError> {
    starts
        .iter()
        .map(|s| find_equilibrium(system, regime, risk, params, s, reference))
        .collect()
}

/// Planner fixed point over the pooled risk set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResult {
    pub capacities: Vec<f64>,
    /// Risk-adjusted net social surplus.
    pub rho: f64,
    /// Per-scenario net surplus u.
    pub surplus: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub dispatches: Vec<DispatchResult>,
}

/// Iterative planner: capacity ascent on the tilted-measure marginal value
/// of each technology. Fixed points satisfy the planner's KKT conditions;
/// unlike the equilibrium update this uses per-MW marginals, so entry from
/// zero capacity is detected.
pub fn solve_complete_trading(
    system: &System,
    pooled: RiskParams,
    params: &AlgorithmParams,
    start: &[f64],
) -> Result<PlannerResult, EquilibriumError> {
    pooled.validate()?;
    let n_tech = system.n_tech();
    let prob = &system.scenarios.prob;

    let mut capacities = start.to_vec();
    let mut step_scale = vec![1.0_f64; n_tech];
    let mut prev_marg: Option<Vec<f64>> = None;
    let x_ref = start.iter().fold(1.0_f64, |m, &x| m.max(x));
    let mut converged = false;
    let mut iterations = 0;

    let mut last: Option<(Vec<DispatchResult>, Vec<f64>, f64)> = None;
    for it in 0..params.max_outer {
        iterations = it + 1;
        let dispatches = dispatch::solve_all(system, &capacities)?;
        let inv_total: f64 = system
            .technologies
            .iter()
            .zip(&capacities)
            .map(|(t, x)| t.inv_cost * x)
            .sum();
        let surplus: Vec<f64> = dispatches.iter().map(|d| d.welfare - inv_total).collect();
        let rho = agents::risk_measure(&surplus, prob, pooled)?;
        // Tilted measure tau + beta p from the empty-menu decision.
        let decision = agents::solve_trades(&TradeProblem {
            base: &surplus,
            prob,
            market: Market {
                prices: &[],
                payouts: &[],
            },
            bounds: &VolumeBounds {
                lower: vec![],
                upper: vec![],
            },
            params: pooled,
            gamma: 0.0,
            other_volumes: &[],
            warm: None,
        })?;
        let tilted = decision.tilted_measure(prob, pooled.beta);

        let totals: Vec<ScenarioTotals> = (0..prob.len())
            .map(|n| dispatch::scenario_totals(system, system.scenarios.id(n), &dispatches[n]))
            .collect();
        let marg: Vec<f64> = (0..n_tech)
            .map(|g| {
                totals
                    .iter()
                    .zip(&tilted)
                    .map(|(t, m)| m * (t.margin_per_mw[g] - system.technologies[g].inv_cost))
                    .sum()
            })
            .collect();

        let mut worst = 0.0_f64;
        for g in 0..n_tech {
            let rel = marg[g] / system.technologies[g].inv_cost;
            if capacities[g] > 1e-6 * x_ref {
                worst = worst.max(rel.abs());
            } else {
                worst = worst.max(rel.max(0.0));
            }
        }
        last = Some((dispatches, surplus, rho));
        if worst <= params.planner_tol {
            converged = true;
            break;
        }

        if let Some(prev) = &prev_marg {
            for g in 0..n_tech {
                if marg[g] * prev[g] < 0.0 {
                    step_scale[g] = (step_scale[g] * 0.5).max(2f64.powi(-28));
                } else if marg[g] * prev[g] > 0.0 {
                    step_scale[g] = (step_scale[g] * 1.2).min(8.0);
                }
            }
        }
        prev_marg = Some(marg.clone());
        for g in 0..n_tech {
            let frac = marg[g] / system.technologies[g].inv_cost;
            let base = capacities[g].max(0.02 * x_ref);
            capacities[g] =
                (capacities[g] + params.step_capacity * step_scale[g] * frac * base).max(0.0);
        }
    }

    let (dispatches, surplus, rho) = last.expect("planner runs at least one iteration");
    Ok(PlannerResult {
        capacities,
        rho,
        surplus,
        converged,
        iterations,
        dispatches,
    })
}

fn complete_trading_as_equilibrium(
    system: &System,
    risk: MarketRisk,
    params: &AlgorithmParams,
    start: &[f64],
) -> Result<EquilibriumResult, EquilibriumError> {
    let planner = solve_complete_trading(system, risk.pooled(), params, start)?;
    let totals: Vec<ScenarioTotals> = (0..system.scenarios.prob.len())
        .map(|n| dispatch::scenario_totals(system, system.scenarios.id(n), &planner.dispatches[n]))
        .collect();
    let rc = reliability_credits_or_nan(system, &planner.dispatches);
    // Shape the planner outcome like an equilibrium result: the planner is
    // the single "agent", no contracts trade.
    let decision = AgentDecision {
        volumes: Vec::new(),
        value_at_risk: 0.0,
        surplus: planner.surplus.clone(),
        tail_slack: vec![0.0; planner.surplus.len()],
        tail_duals: vec![0.0; planner.surplus.len()],
        rho: planner.rho,
    };
    let consumer = AgentDecision {
        volumes: Vec::new(),
        value_at_risk: 0.0,
        surplus: vec![0.0; planner.surplus.len()],
        tail_slack: vec![0.0; planner.surplus.len()],
        tail_duals: vec![0.0; planner.surplus.len()],
        rho: 0.0,
    };
    Ok(EquilibriumResult {
        regime: RegimeKind::CompleteTrading,
        capacities: planner.capacities.clone(),
        prices: Vec::new(),
        consumer,
        sellers: vec![decision],
        tech_signal: vec![0.0; system.n_tech()],
        converged: planner.converged,
        clearing_residual: Vec::new(),
        proximity_pct: 0.0,
        outer_iterations: planner.iterations,
        history: Vec::new(),
        reliability_credits: rc,
        applied_floor_mw: None,
        dispatches: planner.dispatches,
        payouts: Vec::new(),
        totals,
    })
}

/// Direct epigraph solve of the planner problem through the conic engine.
/// Intended for desk-scale verification; guarded by problem size.
pub fn solve_complete_trading_direct(
    system: &System,
    pooled: RiskParams,
) -> Result<PlannerResult, EquilibriumError> {
    pooled.validate()?;
    let n = system.scenarios.n_scenarios();
    let t_blocks = system.n_blocks();
    if n * t_blocks > 20_000 {
        return Err(EquilibriumError::TooLargeForDirect(n * t_blocks));
    }
    let g_n = system.n_tech();
    let curve = &system.curve;
    let voll = curve.voll;
    let d_res = curve.responsive_mw;
    let has_res = d_res > 0.0;
    let prob = &system.scenarios.prob;
    let (alpha, beta) = (pooled.alpha, pooled.beta);

    // Variable layout: x (G) | per (n,t): y_g.., dfix, dres, e | u_n | VaR | w_n.
    let per_block = g_n + 1 + if has_res { 2 } else { 0 };
    let x_ix = |g: usize| g;
    let blk0 = g_n;
    let blk = |sn: usize, t: usize| blk0 + (sn * t_blocks + t) * per_block;
    let y_ix = |sn: usize, t: usize, g: usize| blk(sn, t) + g;
    let dfix_ix = |sn: usize, t: usize| blk(sn, t) + g_n;
    let dres_ix = |sn: usize, t: usize| blk(sn, t) + g_n + 1;
    let e_ix = |sn: usize, t: usize| blk(sn, t) + g_n + 2;
    let u0 = blk0 + n * t_blocks * per_block;
    let u_ix = |sn: usize| u0 + sn;
    let var_ix = u0 + n;
    let w_ix = |sn: usize| var_ix + 1 + sn;
    let n_vars = var_ix + 1 + n;

    let mut qp = QpBuilder::new(n_vars);
    for sn in 0..n {
        qp.linear(u_ix(sn), -beta * prob[sn]);
        qp.linear(w_ix(sn), (1.0 - beta) / alpha * prob[sn]);
    }
    qp.linear(var_ix, -(1.0 - beta));

    // Zero cone: balance per (scenario, block) and the u definitions.
    let mut zero_rows = 0;
    for sn in 0..n {
        let id = system.scenarios.id(sn);
        let shift = system.scenarios.net_shift(id);
        for t in 0..t_blocks {
            let mut coeffs = vec![(dfix_ix(sn, t), 1.0)];
            if has_res {
                coeffs.push((dres_ix(sn, t), 1.0));
            }
            for g in 0..g_n {
                coeffs.push((y_ix(sn, t, g), -1.0));
            }
            qp.row(&coeffs, -shift);
            zero_rows += 1;
        }
    }
    for sn in 0..n {
        let id = system.scenarios.id(sn);
        let mut coeffs = vec![(u_ix(sn), 1.0)];
        for t in 0..t_blocks {
            let hours = curve.blocks[t].hours;
            coeffs.push((dfix_ix(sn, t), -hours * voll));
            if has_res {
                coeffs.push((dres_ix(sn, t), -hours * voll));
                coeffs.push((e_ix(sn, t), hours * voll));
            }
            for g in 0..g_n {
                coeffs.push((y_ix(sn, t, g), hours * system.marginal_cost(g, id.fuel)));
            }
        }
        for g in 0..g_n {
            coeffs.push((x_ix(g), system.technologies[g].inv_cost));
        }
        qp.row(&coeffs, 0.0);
        zero_rows += 1;
    }
    qp.cone(Cone::Zero(zero_rows));

    // Nonnegative cone.
    let mut nn_rows = 0;
    for g in 0..g_n {
        qp.row(&[(x_ix(g), -1.0)], 0.0);
        nn_rows += 1;
    }
    for sn in 0..n {
        let id = system.scenarios.id(sn);
        for t in 0..t_blocks {
            for g in 0..g_n {
                let a = system.availability(g, id.profile, t);
                qp.row(&[(y_ix(sn, t, g), 1.0), (x_ix(g), -a)], 0.0);
                qp.row(&[(y_ix(sn, t, g), -1.0)], 0.0);
                nn_rows += 2;
            }
            qp.row(&[(dfix_ix(sn, t), 1.0)], curve.blocks[t].fixed_mw);
            qp.row(&[(dfix_ix(sn, t), -1.0)], 0.0);
            nn_rows += 2;
            if has_res {
                qp.row(&[(dres_ix(sn, t), 1.0)], d_res);
                qp.row(&[(dres_ix(sn, t), -1.0)], 0.0);
                nn_rows += 2;
            }
        }
        qp.row(&[(var_ix, 1.0), (u_ix(sn), -1.0), (w_ix(sn), -1.0)], 0.0);
        qp.row(&[(w_ix(sn), -1.0)], 0.0);
        nn_rows += 2;
    }
    qp.cone(Cone::Nonneg(nn_rows));

    // Rotated-cone embedding of e >= dres^2 / (2 D_res) per (n, t):
    // (e + D, e - D, sqrt(2) dres) in SOC.
    if has_res {
        for sn in 0..n {
            for t in 0..t_blocks {
                qp.row(&[(e_ix(sn, t), -1.0)], d_res);
                qp.row(&[(e_ix(sn, t), -1.0)], -d_res);
                qp.row(&[(dres_ix(sn, t), -std::f64::consts::SQRT_2)], 0.0);
                qp.cone(Cone::Soc(3));
            }
        }
    }

    let sol = qp.solve().map_err(AgentError::from)?;
    let capacities: Vec<f64> = (0..g_n).map(|g| sol.x[x_ix(g)].max(0.0)).collect();
    // Evaluate the achieved plan through the dispatch pipeline.
    let dispatches = dispatch::solve_all(system, &capacities)?;
    let inv_total: f64 = system
        .technologies
        .iter()
        .zip(&capacities)
        .map(|(t, x)| t.inv_cost * x)
        .sum();
    let surplus: Vec<f64> = dispatches.iter().map(|d| d.welfare - inv_total).collect();
    let rho = agents::risk_measure(&surplus, prob, pooled)?;
    Ok(PlannerResult {
        capacities,
        rho,
        surplus,
        converged: true,
        iterations: 1,
        dispatches,
    })
}
