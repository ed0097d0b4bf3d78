//! Per-scenario economic dispatch.
//!
//! Each scenario decomposes into independent time blocks (there are no
//! intertemporal constraints), and each block is a small concave program:
//! merit-order supply against a demand stack of must-serve exogenous shift,
//! fixed demand valued at `voll`, and a linearly decreasing responsive
//! tranche. The block solver is analytic: it walks the merit order and reads
//! the clearing price off the marginal condition, so block solves are exact
//! and cheap.
//!
//! Price conventions at degenerate points:
//! - a partially dispatched cost group sets the price at its cost;
//! - unserved fixed demand prices at `voll`;
//! - an interior responsive margin prices on the inverse demand curve;
//! - saturated demand prices at 0, and zero net demand prices at 0;
//! - purely inelastic demand landing on a supply step prices at the cost of
//!   the last dispatched group (left-continuous).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{ScenarioId, System};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("block {block} infeasible under scenario (f={fuel}, r={profile}, s={demand}): net shift {shift_mw} MW exceeds available capacity {available_mw} MW")]
    BlockInfeasible {
        fuel: usize,
        profile: usize,
        demand: usize,
        block: usize,
        shift_mw: f64,
        available_mw: f64,
    },
    #[error("block {block}: negative net shift {shift_mw} MW cannot be absorbed by demand")]
    UnabsorbableShift { block: usize, shift_mw: f64 },
}

/// One block's primal dispatch and duals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDispatch {
    /// Generation per technology, MW.
    pub output: Vec<f64>,
    /// Served non-price-responsive demand, MW.
    pub served_fixed: f64,
    /// Served price-responsive demand, MW.
    pub served_responsive: f64,
    /// Spot price, $/MWh.
    pub price: f64,
    /// Operating profit per available MW and hour, $/MWh:
    /// max(0, price - marginal cost).
    pub unit_profit: Vec<f64>,
}

/// Dispatch of a full scenario across blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub blocks: Vec<BlockDispatch>,
    /// Social surplus of the scenario, $ (exogenous shifts excluded).
    pub welfare: f64,
    /// Unserved fixed energy, MWh.
    pub unserved_mwh: f64,
}

/// Inputs of a single block solve.
#[derive(Debug, Clone)]
pub struct BlockProblem<'a> {
    /// Available capacity per technology (availability x installed), MW.
    pub avail_cap: &'a [f64],
    /// Marginal cost per technology, $/MWh.
    pub marginal_cost: &'a [f64],
    /// Baseline fixed demand, MW.
    pub fixed_mw: f64,
    /// Width of the responsive tranche, MW.
    pub responsive_mw: f64,
    /// Value of fixed load, $/MWh.
    pub voll: f64,
    /// Exogenous net shift D+ - D-, MW (must-serve when positive).
    pub shift_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolution {
    pub output: Vec<f64>,
    pub served_fixed: f64,
    pub served_responsive: f64,
    pub price: f64,
    /// Hourly welfare contribution of the block, $/h.
    pub welfare_per_hour: f64,
}

struct CostGroup {
    cost: f64,
    members: Vec<usize>,
    cap: f64,
}

fn cost_groups(costs: &[f64], caps: &[f64]) -> Vec<CostGroup> {
    let mut order: Vec<usize> = (0..costs.len()).filter(|&i| caps[i] > 0.0).collect();
    order.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).unwrap().then(a.cmp(&b)));
    let mut groups: Vec<CostGroup> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if g.cost == costs[i] => {
                g.members.push(i);
                g.cap += caps[i];
            }
            _ => groups.push(CostGroup {
                cost: costs[i],
                members: vec![i],
                cap: caps[i],
            }),
        }
    }
    groups
}

/// Solves one block to optimality. Pure function; see the module docs for
/// price conventions on degenerate geometry.
pub fn solve_block(p: &BlockProblem) -> Result<BlockSolution, DispatchError> {
    let voll = p.voll;
    let total_avail: f64 = p.avail_cap.iter().sum();
    let must = p.shift_mw.max(0.0);
    let feas_tol = 1e-9 * total_avail.max(1.0);
    if must > total_avail + feas_tol {
        // Caller attaches the scenario coordinates.
        return Err(DispatchError::BlockInfeasible {
            fuel: 0,
            profile: 0,
            demand: 0,
            block: 0,
            shift_mw: p.shift_mw,
            available_mw: total_avail,
        });
    }

    // A negative shift is must-take supply, absorbed by demand at zero cost.
    let free = (-p.shift_mw).max(0.0);
    let free_fix = free.min(p.fixed_mw);
    let free_res = (free - free_fix).min(p.responsive_mw);
    if free - free_fix - free_res > 1e-9 * free.max(1.0) {
        return Err(DispatchError::UnabsorbableShift {
            block: 0,
            shift_mw: p.shift_mw,
        });
    }

    let groups = cost_groups(p.marginal_cost, p.avail_cap);
    let mut taken = vec![0.0; groups.len()];

    // Must-serve phase: infinite value, cheapest first.
    let mut need = must.min(total_avail);
    for (gi, g) in groups.iter().enumerate() {
        if need <= 0.0 {
            break;
        }
        let t = need.min(g.cap);
        taken[gi] = t;
        need -= t;
    }

    let mut d_fix = free_fix;
    let mut d_res = free_res;
    let mut rf = p.fixed_mw - free_fix; // fixed demand still unserved
    let fix_tol = 1e-9 * p.fixed_mw.max(1.0);
    let res_tol = 1e-9 * p.responsive_mw.max(1.0);

    for (gi, g) in groups.iter().enumerate() {
        let mut rem = g.cap - taken[gi];
        if rem <= 0.0 {
            continue;
        }
        // Fixed demand while value strictly exceeds cost.
        if rf > fix_tol && g.cost < voll {
            let t = rf.min(rem);
            taken[gi] += t;
            d_fix += t;
            rf -= t;
            rem -= t;
        }
        if rem <= 0.0 {
            continue;
        }
        if rf > fix_tol {
            // Remaining fixed demand but cost >= voll: scarcity stop.
            break;
        }
        if p.responsive_mw > 0.0 {
            let marginal_value = voll * (1.0 - d_res / p.responsive_mw);
            if g.cost < marginal_value {
                // Serve responsive demand down to the value == cost point.
                let target = p.responsive_mw * (1.0 - g.cost / voll);
                let add = (target - d_res).clamp(0.0, rem);
                taken[gi] += add;
                d_res += add;
                rem -= add;
                if rem > 0.0 {
                    break; // demand margin reached inside this group
                }
                continue;
            }
        }
        break;
    }

    // At most one group is partially dispatched.
    let partial = groups
        .iter()
        .enumerate()
        .position(|(gi, g)| taken[gi] > feas_tol && taken[gi] < g.cap - 1e-12 * g.cap.max(1.0));

    let price = if let Some(gi) = partial {
        groups[gi].cost
    } else if rf > fix_tol && p.fixed_mw > 0.0 {
        voll
    } else if p.responsive_mw > 0.0 && d_res > res_tol && d_res < p.responsive_mw - res_tol {
        voll * (1.0 - d_res / p.responsive_mw)
    } else if p.responsive_mw > 0.0 && d_res <= res_tol {
        // Responsive demand unserved at its start value.
        voll
    } else if p.responsive_mw > 0.0 {
        // Saturated responsive demand.
        0.0
    } else {
        // Purely inelastic demand: cost of the last dispatched group,
        // zero when nothing runs.
        groups
            .iter()
            .enumerate()
            .rev()
            .find(|(gi, _)| taken[*gi] > feas_tol)
            .map(|(_, g)| g.cost)
            .unwrap_or(0.0)
    };

    // Pro-rata split of each group's dispatch across equal-cost members.
    let mut output = vec![0.0; p.avail_cap.len()];
    for (gi, g) in groups.iter().enumerate() {
        if taken[gi] <= 0.0 {
            continue;
        }
        for &i in &g.members {
            output[i] = taken[gi] * p.avail_cap[i] / g.cap;
        }
    }

    let quad = if p.responsive_mw > 0.0 {
        d_res * d_res / (2.0 * p.responsive_mw)
    } else {
        0.0
    };
    let production_cost: f64 = output
        .iter()
        .zip(p.marginal_cost)
        .map(|(y, c)| y * c)
        .sum();
    let welfare_per_hour = voll * (d_fix + d_res - quad) - production_cost;

    Ok(BlockSolution {
        output,
        served_fixed: d_fix,
        served_responsive: d_res,
        price,
        welfare_per_hour,
    })
}

/// Solves every block of one scenario and assembles welfare and duals.
pub fn solve_scenario(
    system: &System,
    capacities: &[f64],
    id: ScenarioId,
) -> Result<DispatchResult, DispatchError> {
    let curve = &system.curve;
    let shift = system.scenarios.net_shift(id);
    let n_tech = system.n_tech();
    let costs: Vec<f64> = (0..n_tech)
        .map(|g| system.marginal_cost(g, id.fuel))
        .collect();

    let mut blocks = Vec::with_capacity(curve.blocks.len());
    let mut welfare = 0.0;
    let mut unserved = 0.0;
    let mut avail_cap = vec![0.0; n_tech];
    for (t, b) in curve.blocks.iter().enumerate() {
        for g in 0..n_tech {
            avail_cap[g] = system.availability(g, id.profile, t) * capacities[g];
        }
        let problem = BlockProblem {
            avail_cap: &avail_cap,
            marginal_cost: &costs,
            fixed_mw: b.fixed_mw,
            responsive_mw: curve.responsive_mw,
            voll: curve.voll,
            shift_mw: shift,
        };
        let sol = solve_block(&problem).map_err(|e| match e {
            DispatchError::BlockInfeasible {
                shift_mw,
                available_mw,
                ..
            } => DispatchError::BlockInfeasible {
                fuel: id.fuel,
                profile: id.profile,
                demand: id.demand,
                block: t,
                shift_mw,
                available_mw,
            },
            DispatchError::UnabsorbableShift { shift_mw, .. } => {
                DispatchError::UnabsorbableShift { block: t, shift_mw }
            }
        })?;
        welfare += b.hours * sol.welfare_per_hour;
        unserved += b.hours * (b.fixed_mw - sol.served_fixed).max(0.0);
        let unit_profit = costs
            .iter()
            .map(|c| (sol.price - c).max(0.0))
            .collect::<Vec<_>>();
        blocks.push(BlockDispatch {
            output: sol.output,
            served_fixed: sol.served_fixed,
            served_responsive: sol.served_responsive,
            price: sol.price,
            unit_profit,
        });
    }
    Ok(DispatchResult {
        blocks,
        welfare,
        unserved_mwh: unserved,
    })
}

/// Dispatches every scenario in parallel. Results are indexed by canonical
/// scenario order, so the outcome is independent of scheduling.
pub fn solve_all(system: &System, capacities: &[f64]) -> Result<Vec<DispatchResult>, DispatchError> {
    (0..system.scenarios.n_scenarios())
        .into_par_iter()
        .map(|n| solve_scenario(system, capacities, system.scenarios.id(n)))
        .collect()
}

/// Unserved fixed energy of a solved scenario, MWh.
pub fn unserved_energy(system: &System, result: &DispatchResult) -> f64 {
    system
        .curve
        .blocks
        .iter()
        .zip(&result.blocks)
        .map(|(b, d)| b.hours * (b.fixed_mw - d.served_fixed).max(0.0))
        .sum()
}

/// Per-scenario aggregates consumed by the agent models and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTotals {
    /// Spot margin per installed MW of each technology,
    /// sum_t L_t * pi_gt * A_grt, $/MW-yr.
    pub margin_per_mw: Vec<f64>,
    /// Gross consumption value sum_t L_t B (d_fix + d_res - d_res^2/2D), $.
    pub gross_value: f64,
    /// Spot payments sum_t L_t lambda_t q_t with q = d_fix + d_res + shift, $.
    pub spot_payment: f64,
    /// Total consumption sum_t L_t q_t, MWh.
    pub consumption_mwh: f64,
}

pub fn scenario_totals(system: &System, id: ScenarioId, result: &DispatchResult) -> ScenarioTotals {
    let curve = &system.curve;
    let n_tech = system.n_tech();
    let shift = system.scenarios.net_shift(id);
    let mut margin = vec![0.0; n_tech];
    let mut gross = 0.0;
    let mut paid = 0.0;
    let mut consumption = 0.0;
    for (t, (b, d)) in curve.blocks.iter().zip(&result.blocks).enumerate() {
        for g in 0..n_tech {
            margin[g] += b.hours * d.unit_profit[g] * system.availability(g, id.profile, t);
        }
        let quad = if curve.responsive_mw > 0.0 {
            d.served_responsive * d.served_responsive / (2.0 * curve.responsive_mw)
        } else {
            0.0
        };
        gross += b.hours * curve.voll * (d.served_fixed + d.served_responsive - quad);
        let q = d.served_fixed + d.served_responsive + shift;
        paid += b.hours * d.price * q;
        consumption += b.hours * q;
    }
    ScenarioTotals {
        margin_per_mw: margin,
        gross_value: gross,
        spot_payment: paid,
        consumption_mwh: consumption,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(
        caps: &[f64],
        costs: &[f64],
        fixed: f64,
        responsive: f64,
        voll: f64,
        shift: f64,
    ) -> BlockSolution {
        solve_block(&BlockProblem {
            avail_cap: caps,
            marginal_cost: costs,
            fixed_mw: fixed,
            responsive_mw: responsive,
            voll,
            shift_mw: shift,
        })
        .unwrap()
    }

    #[test]
    fn interior_merit_order_point() {
        let sol = block(&[100.0], &[20.0], 50.0, 0.0, 1000.0, 0.0);
        assert_eq!(sol.output, vec![50.0]);
        assert_eq!(sol.price, 20.0);
        assert_eq!(sol.served_fixed, 50.0);
        assert!((sol.welfare_per_hour - 49_000.0).abs() < 1e-9);
    }

    #[test]
    fn scarcity_prices_at_voll() {
        let sol = block(&[100.0], &[20.0], 150.0, 0.0, 1000.0, 0.0);
        assert_eq!(sol.output, vec![100.0]);
        assert_eq!(sol.served_fixed, 100.0);
        assert_eq!(sol.price, 1000.0);
    }

    #[test]
    fn responsive_margin_sets_price() {
        // Hand KKT: fixed 100 served by (60 @ 20) + (40 @ 100); responsive
        // runs until its value 1000(1 - d/10) meets cost 100, so d_res = 9.
        let sol = block(&[60.0, 60.0], &[20.0, 100.0], 100.0, 10.0, 1000.0, 0.0);
        assert_eq!(sol.price, 100.0);
        assert!((sol.served_responsive - 9.0).abs() < 1e-12);
        assert!((sol.output[0] - 60.0).abs() < 1e-12);
        assert!((sol.output[1] - 49.0).abs() < 1e-12);
    }

    #[test]
    fn empty_market_prices_at_zero() {
        let sol = block(&[0.0], &[20.0], 0.0, 0.0, 1000.0, 0.0);
        assert_eq!(sol.price, 0.0);
        assert_eq!(sol.welfare_per_hour, 0.0);
    }

    #[test]
    fn must_serve_shift_is_dispatched_without_welfare() {
        let sol = block(&[100.0], &[20.0], 0.0, 0.0, 1000.0, 30.0);
        assert_eq!(sol.output, vec![30.0]);
        assert_eq!(sol.price, 20.0); // partial group
        assert!((sol.welfare_per_hour - -600.0).abs() < 1e-9); // production cost only
    }

    #[test]
    fn negative_shift_is_absorbed_by_fixed_demand() {
        let sol = block(&[100.0], &[20.0], 50.0, 0.0, 1000.0, -30.0);
        // 30 MW free supply serves fixed demand; generators cover the rest.
        assert_eq!(sol.served_fixed, 50.0);
        assert_eq!(sol.output, vec![20.0]);
    }

    #[test]
    fn shift_beyond_capacity_is_infeasible() {
        let err = solve_block(&BlockProblem {
            avail_cap: &[10.0],
            marginal_cost: &[20.0],
            fixed_mw: 0.0,
            responsive_mw: 0.0,
            voll: 1000.0,
            shift_mw: 25.0,
        })
        .unwrap_err();
        assert!(matches!(err, DispatchError::BlockInfeasible { .. }));
    }

    #[test]
    fn equal_cost_groups_split_pro_rata() {
        let sol = block(&[30.0, 60.0], &[20.0, 20.0], 45.0, 0.0, 1000.0, 0.0);
        assert!((sol.output[0] - 15.0).abs() < 1e-12);
        assert!((sol.output[1] - 30.0).abs() < 1e-12);
        assert_eq!(sol.price, 20.0);
    }

    #[test]
    fn saturated_demand_prices_at_zero() {
        // Zero-cost capacity exceeding all demand: responsive saturates.
        let sol = block(&[100.0], &[0.0], 20.0, 10.0, 1000.0, 0.0);
        assert_eq!(sol.served_responsive, 10.0);
        assert_eq!(sol.price, 0.0);
    }

    #[test]
    fn balance_holds_to_machine_precision() {
        let sol = block(&[35.0, 20.0, 70.0], &[12.0, 31.0, 77.0], 90.0, 15.0, 900.0, 4.0);
        let supply: f64 = sol.output.iter().sum();
        let demand = sol.served_fixed + sol.served_responsive + 4.0;
        assert!((supply - demand).abs() <= 1e-9 * demand.max(1.0));
    }
}
