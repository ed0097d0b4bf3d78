//! Tradable hedging instruments and their scenario payouts.
//!
//! Payouts are per MW of contracted volume over the whole horizon
//! ($/MW-yr for a full-year curve). A positive volume is a purchase; the
//! holder's cash flow per scenario is v * (payout - price).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::DispatchResult;
use crate::scenario::{ScenarioId, System};

#[derive(Debug, Error)]
pub enum ContractError {
    #[error("contract {name}: unit-contingent contracts need a valid technology")]
    MissingTechnology { name: String },
    #[error("contract {name}: price cap only applies to futures and unit-contingent contracts")]
    InvalidCap { name: String },
    #[error("contract {name}: negative reference price {price}")]
    NegativePrice { name: String, price: f64 },
    #[error(
        "contract {name}: load shape undefined under scenario (f={fuel}, s={demand}) with zero total fixed demand"
    )]
    ZeroShape {
        name: String,
        fuel: usize,
        demand: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContractKind {
    /// Pays max(0, price - strike) per hour of each block.
    CallOption { strike: f64 },
    /// Pays price - settle per hour of each block.
    Future { settle: f64 },
    /// Future whose hourly volume tracks a technology's availability.
    UnitContingent { settle: f64, technology: usize },
    /// Forward whose hourly shape is set ex post proportional to realized
    /// fixed load (served or not), excluding the responsive tranche.
    Sfpfc { settle: f64 },
    /// Pays one dollar per unit in exactly one scenario; used to build
    /// complete-market test menus.
    ScenarioSecurity { scenario: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub name: String,
    pub kind: ContractKind,
    /// When set, spot prices are capped at this level inside the payout,
    /// so the instrument excludes scarcity rents above the cap.
    pub cap: Option<f64>,
}

impl Contract {
    pub fn validate(&self, n_tech: usize) -> Result<(), ContractError> {
        let reference = match self.kind {
            ContractKind::CallOption { strike } => strike,
            ContractKind::Future { settle } => settle,
            ContractKind::UnitContingent { settle, technology } => {
                if technology >= n_tech {
                    return Err(ContractError::MissingTechnology {
                        name: self.name.clone(),
                    });
                }
                settle
            }
            ContractKind::Sfpfc { settle } => settle,
            ContractKind::ScenarioSecurity { .. } => 0.0,
        };
        if reference < 0.0 {
            return Err(ContractError::NegativePrice {
                name: self.name.clone(),
                price: reference,
            });
        }
        if self.cap.is_some()
            && !matches!(
                self.kind,
                ContractKind::Future { .. } | ContractKind::UnitContingent { .. }
            )
        {
            return Err(ContractError::InvalidCap {
                name: self.name.clone(),
            });
        }
        Ok(())
    }

    fn capped(&self, price: f64) -> f64 {
        match self.cap {
            Some(cap) => price.min(cap),
            None => price,
        }
    }
}

/// Payout of one contract under one dispatched scenario, $/MW-yr.
pub fn payout(
    system: &System,
    contract: &Contract,
    dispatch: &DispatchResult,
    id: ScenarioId,
) -> Result<f64, ContractError> {
    let curve = &system.curve;
    let scenarios = &system.scenarios;
    match contract.kind {
        ContractKind::CallOption { strike } => Ok(curve
            .blocks
            .iter()
            .zip(&dispatch.blocks)
            .map(|(b, d)| b.hours * (d.price - strike).max(0.0))
            .sum()),
        ContractKind::Future { settle } => Ok(curve
            .blocks
            .iter()
            .zip(&dispatch.blocks)
            .map(|(b, d)| b.hours * (contract.capped(d.price) - settle))
            .sum()),
        ContractKind::UnitContingent { settle, technology } => Ok(curve
            .blocks
            .iter()
            .zip(&dispatch.blocks)
            .enumerate()
            .map(|(t, (b, d))| {
                system.availability(technology, id.profile, t)
                    * b.hours
                    * (contract.capped(d.price) - settle)
            })
            .sum()),
        ContractKind::Sfpfc { settle } => {
            let shift = scenarios.net_shift(id);
            let denom: f64 = curve
                .blocks
                .iter()
                .map(|b| b.hours * (b.fixed_mw + shift))
                .sum();
            if denom <= 0.0 {
                return Err(ContractError::ZeroShape {
                    name: contract.name.clone(),
                    fuel: id.fuel,
                    demand: id.demand,
                });
            }
            let total_hours = curve.total_hours();
            Ok(curve
                .blocks
                .iter()
                .zip(&dispatch.blocks)
                .map(|(b, d)| {
                    let weight = total_hours * (b.fixed_mw + shift) / denom;
                    weight * b.hours * (d.price - settle)
                })
                .sum())
        }
        ContractKind::ScenarioSecurity { scenario } => {
            Ok(if scenarios.index(id) == scenario { 1.0 } else { 0.0 })
        }
    }
}

/// Payout matrix `[contract][scenario]` for a full dispatch pass.
pub fn payout_table(
    system: &System,
    contracts: &[Contract],
    dispatches: &[DispatchResult],
) -> Result<Vec<Vec<f64>>, ContractError> {
    contracts
        .iter()
        .map(|c| {
            (0..system.scenarios.n_scenarios())
                .map(|n| payout(system, c, &dispatches[n], system.scenarios.id(n)))
                .collect()
        })
        .collect()
}

/// Clearing price minus actuarially fair value, $/MW-yr. Positive means
/// sellers are compensated for bearing risk.
pub fn risk_premium(price: f64, payouts: &[f64], prob: &[f64]) -> f64 {
    let fair: f64 = payouts.iter().zip(prob).map(|(e, p)| e * p).sum();
    price - fair
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::solve_all;
    use crate::scenario::{
        AvailabilityKind, AvailabilityProfile, Block, DemandCurve, DemandScenario, FuelScenario,
        ScenarioSet, System, TechRole, Technology,
    };

    fn small_system(blocks: Vec<Block>, responsive: f64) -> System {
        let curve = DemandCurve::new(blocks, responsive, 1000.0).unwrap();
        let t = curve.blocks.len();
        // Hand-set wind profile so block prices vary even on flat load.
        let wind: Vec<f64> = (0..t)
            .map(|i| 0.2 + 0.6 * ((i * 7 % 10) as f64) / 10.0)
            .collect();
        let technologies = vec![
            Technology {
                name: "gen".into(),
                role: TechRole::Peaker,
                inv_cost: 50_000.0,
                fuel_cost: vec![30.0],
                availability: AvailabilityKind::Full,
            },
            Technology {
                name: "wind".into(),
                role: TechRole::Variable,
                inv_cost: 70_000.0,
                fuel_cost: vec![0.0],
                availability: AvailabilityKind::Profiled,
            },
        ];
        let scenarios = ScenarioSet {
            fuel: vec![FuelScenario { down_shift_mw: 0.0 }],
            profiles: vec![AvailabilityProfile {
                availability: vec![vec![1.0; t], wind],
                load_correlation: vec![0.0, 0.0],
            }],
            demand: vec![DemandScenario { up_shift_mw: 0.0 }],
            prob: vec![1.0],
        };
        System {
            curve,
            technologies,
            scenarios,
        }
    }

    fn id0() -> ScenarioId {
        ScenarioId {
            fuel: 0,
            profile: 0,
            demand: 0,
        }
    }

    #[test]
    fn out_of_the_money_option_pays_zero() {
        let system = small_system(
            vec![
                Block {
                    hours: 4380.0,
                    fixed_mw: 50.0,
                },
                Block {
                    hours: 4380.0,
                    fixed_mw: 30.0,
                },
            ],
            0.0,
        );
        let dispatches = solve_all(&system, &[100.0, 0.0]).unwrap();
        let option = Contract {
            name: "opt".into(),
            kind: ContractKind::CallOption { strike: 1000.0 },
            cap: None,
        };
        let pay = payout(&system, &option, &dispatches[0], id0()).unwrap();
        assert_eq!(pay, 0.0);
    }

    #[test]
    fn future_at_par_pays_zero() {
        // Price is pinned at the generator cost of 30 in both blocks; a
        // future settling at 30 pays exactly zero.
        let system = small_system(
            vec![
                Block {
                    hours: 4380.0,
                    fixed_mw: 50.0,
                },
                Block {
                    hours: 4380.0,
                    fixed_mw: 30.0,
                },
            ],
            0.0,
        );
        let dispatches = solve_all(&system, &[100.0, 0.0]).unwrap();
        let future = Contract {
            name: "fut".into(),
            kind: ContractKind::Future { settle: 30.0 },
            cap: None,
        };
        let pay = payout(&system, &future, &dispatches[0], id0()).unwrap();
        assert!(pay.abs() < 1e-9);
    }

    #[test]
    fn single_scarce_block_option_payout() {
        // One one-hour block with price 2000 (scarcity is impossible here,
        // so force it with tiny capacity), remaining blocks below strike.
        let system = small_system(
            vec![
                Block {
                    hours: 1.0,
                    fixed_mw: 50.0,
                },
                Block {
                    hours: 8759.0,
                    fixed_mw: 1.0,
                },
            ],
            0.0,
        );
        // 10 MW of capacity: block 0 is curtailed and prices at voll.
        let dispatches = solve_all(&system, &[10.0, 0.0]).unwrap();
        assert_eq!(dispatches[0].blocks[0].price, 1000.0);
        let option = Contract {
            name: "opt".into(),
            kind: ContractKind::CallOption { strike: 990.0 },
            cap: None,
        };
        let pay = payout(&system, &option, &dispatches[0], id0()).unwrap();
        // One in-the-money hour, 10 $/MWh over strike.
        assert!((pay - 10.0).abs() < 1e-9);
    }

    #[test]
    fn sfpfc_on_flat_load_equals_future() {
        let system = small_system(
            vec![
                Block {
                    hours: 2190.0,
                    fixed_mw: 80.0,
                },
                Block {
                    hours: 2190.0,
                    fixed_mw: 80.0,
                },
                Block {
                    hours: 2190.0,
                    fixed_mw: 80.0,
                },
                Block {
                    hours: 2190.0,
                    fixed_mw: 80.0,
                },
            ],
            5.0,
        );
        let dispatches = solve_all(&system, &[60.0, 50.0]).unwrap();
        let sfpfc = Contract {
            name: "sfpfc".into(),
            kind: ContractKind::Sfpfc { settle: 50.0 },
            cap: None,
        };
        let future = Contract {
            name: "fut".into(),
            kind: ContractKind::Future { settle: 50.0 },
            cap: None,
        };
        let a = payout(&system, &sfpfc, &dispatches[0], id0()).unwrap();
        let b = payout(&system, &future, &dispatches[0], id0()).unwrap();
        assert!(
            (a - b).abs() <= 1e-9 * b.abs().max(1.0),
            "flat-load SFPFC {a} vs future {b}"
        );
    }

    #[test]
    fn sfpfc_weights_normalize_to_total_hours() {
        let system = small_system(
            vec![
                Block {
                    hours: 3000.0,
                    fixed_mw: 120.0,
                },
                Block {
                    hours: 5760.0,
                    fixed_mw: 40.0,
                },
            ],
            0.0,
        );
        let shift = 0.0;
        let denom: f64 = system
            .curve
            .blocks
            .iter()
            .map(|b| b.hours * (b.fixed_mw + shift))
            .sum();
        let total: f64 = system
            .curve
            .blocks
            .iter()
            .map(|b| b.hours * system.curve.total_hours() * (b.fixed_mw + shift) / denom)
            .sum();
        assert!((total - system.curve.total_hours()).abs() < 1e-9);
    }

    #[test]
    fn capped_future_never_exceeds_uncapped() {
        let system = small_system(
            vec![
                Block {
                    hours: 10.0,
                    fixed_mw: 50.0,
                },
                Block {
                    hours: 8750.0,
                    fixed_mw: 5.0,
                },
            ],
            0.0,
        );
        let dispatches = solve_all(&system, &[20.0, 0.0]).unwrap();
        let capped = Contract {
            name: "capped".into(),
            kind: ContractKind::Future { settle: 50.0 },
            cap: Some(900.0),
        };
        let plain = Contract {
            name: "plain".into(),
            kind: ContractKind::Future { settle: 50.0 },
            cap: None,
        };
        let a = payout(&system, &capped, &dispatches[0], id0()).unwrap();
        let b = payout(&system, &plain, &dispatches[0], id0()).unwrap();
        assert!(a <= b + 1e-12);
    }

    #[test]
    fn capped_future_plus_option_recovers_plain_future() {
        // min(p, k) + max(0, p - k) = p identically, so the two-tranche
        // decomposition is exact per scenario.
        let system = small_system(
            vec![
                Block {
                    hours: 6.0,
                    fixed_mw: 45.0,
                },
                Block {
                    hours: 8754.0,
                    fixed_mw: 9.0,
                },
            ],
            0.0,
        );
        let dispatches = solve_all(&system, &[20.0, 0.0]).unwrap();
        let strike = 1000.0;
        let capped = Contract {
            name: "capped".into(),
            kind: ContractKind::Future { settle: 50.0 },
            cap: Some(strike),
        };
        let option = Contract {
            name: "opt".into(),
            kind: ContractKind::CallOption { strike },
            cap: None,
        };
        let plain = Contract {
            name: "plain".into(),
            kind: ContractKind::Future { settle: 50.0 },
            cap: None,
        };
        let a = payout(&system, &capped, &dispatches[0], id0()).unwrap();
        let b = payout(&system, &option, &dispatches[0], id0()).unwrap();
        let c = payout(&system, &plain, &dispatches[0], id0()).unwrap();
        assert!(((a + b) - c).abs() <= 1e-9 * c.abs().max(1.0));
    }

    #[test]
    fn option_payout_is_nonnegative() {
        let system = small_system(
            vec![Block {
                hours: 8760.0,
                fixed_mw: 42.0,
            }],
            3.0,
        );
        let dispatches = solve_all(&system, &[100.0, 10.0]).unwrap();
        let option = Contract {
            name: "opt".into(),
            kind: ContractKind::CallOption { strike: 10.0 },
            cap: None,
        };
        assert!(payout(&system, &option, &dispatches[0], id0()).unwrap() >= 0.0);
    }

    #[test]
    fn risk_premium_is_price_minus_fair_value() {
        assert_eq!(risk_premium(0.0, &[0.0, 0.0], &[0.5, 0.5]), 0.0);
        assert_eq!(risk_premium(100.0, &[60.0, 100.0], &[0.5, 0.5]), 20.0);
    }

    #[test]
    fn zero_sum_across_cleared_positions() {
        // For any balanced volumes, per-scenario cash flows net to zero.
        let eta = [120.0, -40.0, 7.5];
        let phi = 55.0;
        let volumes = [3.0, -1.25, -1.75]; // sums to zero
        for e in eta {
            let net: f64 = volumes.iter().map(|v| v * (phi - e)).sum();
            assert!(net.abs() < 1e-12);
        }
    }

    #[test]
    fn scenario_security_pays_in_its_scenario_only() {
        let system = small_system(
            vec![Block {
                hours: 8760.0,
                fixed_mw: 10.0,
            }],
            0.0,
        );
        let dispatches = solve_all(&system, &[20.0, 0.0]).unwrap();
        let sec = Contract {
            name: "ad0".into(),
            kind: ContractKind::ScenarioSecurity { scenario: 0 },
            cap: None,
        };
        assert_eq!(payout(&system, &sec, &dispatches[0], id0()).unwrap(), 1.0);
    }

    #[test]
    fn cap_on_option_is_rejected() {
        let c = Contract {
            name: "bad".into(),
            kind: ContractKind::CallOption { strike: 10.0 },
            cap: Some(5.0),
        };
        assert!(matches!(
            c.validate(3).unwrap_err(),
            ContractError::InvalidCap { .. }
        ));
    }

    #[test]
    fn sfpfc_zero_shape_is_an_error() {
        let system = small_system(
            vec![Block {
                hours: 8760.0,
                fixed_mw: 0.0,
            }],
            4.0,
        );
        let dispatches = solve_all(&system, &[20.0, 0.0]).unwrap();
        let sfpfc = Contract {
            name: "sfpfc".into(),
            kind: ContractKind::Sfpfc { settle: 50.0 },
            cap: None,
        };
        assert!(matches!(
            payout(&system, &sfpfc, &dispatches[0], id0()).unwrap_err(),
            ContractError::ZeroShape { .. }
        ));
    }
}
