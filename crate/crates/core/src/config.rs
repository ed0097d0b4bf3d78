//! Configuration file loading and problem assembly.
//!
//! One TOML file declares the demand curve source, technologies, scenario
//! grids, risk attitudes, algorithm parameters, the contract menu, and the
//! regime definitions. Runs with equal scenario-defining sections, risk
//! parameters, and seed share a fingerprint; surplus comparisons require
//! equal fingerprints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::RiskParams;
use crate::contracts::{Contract, ContractKind};
use crate::equilibrium::{
    AlgorithmParams, FloorSpec, MandatoryRule, MarketRisk, Regime, RegimeKind,
};
use crate::scenario::{
    self, AvailabilityConfig, AvailabilityKind, DemandCurve, ScenarioConfig, ScenarioError, System,
    TechRole, Technology,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDemand {
    pub hours: usize,
    pub peak_mw: f64,
    pub min_mw: f64,
    /// Load-duration curvature; the mean is min + (peak - min)/(shape + 1).
    pub shape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    /// Number of contiguous equal-length aggregation blocks.
    pub blocks: usize,
    pub responsive_mw: f64,
    pub voll: f64,
    /// "synthetic" or "file".
    pub source: String,
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticDemand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechnologySection {
    pub name: String,
    /// baseload | peaker | variable | other.
    pub role: String,
    pub inv_cost: f64,
    pub fuel_costs: Vec<f64>,
    /// "full" or "profiled".
    pub availability: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvailabilitySection {
    pub mean: f64,
    pub correlations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenariosSection {
    pub demand_up_shifts_mw: Vec<f64>,
    pub demand_down_shifts_mw: Vec<f64>,
    pub availability: AvailabilitySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSection {
    pub alpha: f64,
    pub beta_consumer: f64,
    pub beta_generators: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSection {
    pub step_capacity: f64,
    pub step_price_fraction: f64,
    pub sigma: f64,
    pub delta: f64,
    pub gamma: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub proximity_cap_pct: f64,
    pub planner_tol: f64,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        let d = AlgorithmParams::default();
        AlgorithmSection {
            step_capacity: d.step_capacity,
            step_price_fraction: d.step_price_fraction,
            sigma: d.sigma,
            delta: d.delta,
            gamma: d.gamma,
            max_outer: d.max_outer,
            max_inner: d.max_inner,
            proximity_cap_pct: d.proximity_cap_pct,
            planner_tol: d.planner_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSection {
    pub name: String,
    /// call_option | future | unit_contingent | sfpfc.
    pub kind: String,
    pub strike: Option<f64>,
    pub settle: Option<f64>,
    pub technology: Option<String>,
    pub cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    #[serde(default)]
    pub contracts: Vec<String>,
    /// Menu entry carrying the mandatory obligation.
    pub obligation: Option<String>,
    /// Explicit consumer purchase floor; omitted means derived from the
    /// reference run's reliability-weighted capacity.
    pub floor_mw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub demand: DemandSection,
    #[serde(rename = "technology")]
    pub technologies: Vec<TechnologySection>,
    pub scenarios: ScenariosSection,
    pub risk: RiskSection,
    #[serde(default)]
    pub algorithm: AlgorithmSection,
    /// Initial capacities by technology name, MW.
    pub start: BTreeMap<String, f64>,
    #[serde(default, rename = "contracts")]
    pub contracts: Vec<ContractSection>,
    #[serde(default)]
    pub regimes: BTreeMap<String, RegimeSection>,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_validated(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self.demand.source.as_str() {
            "synthetic" => {
                if self.demand.synthetic.is_none() {
                    return Err(ConfigError::Invalid(
                        "demand.source = synthetic requires a [demand.synthetic] section".into(),
                    ));
                }
            }
            "file" => {
                if self.demand.path.is_none() {
                    return Err(ConfigError::Invalid(
                        "demand.source = file requires demand.path".into(),
                    ));
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown demand source {other:?}"
                )))
            }
        }
        if self.technologies.is_empty() {
            return Err(ConfigError::Invalid("at least one technology".into()));
        }
        let n_fuel = self.scenarios.demand_down_shifts_mw.len();
        for t in &self.technologies {
            if t.fuel_costs.len() != n_fuel {
                return Err(ConfigError::Invalid(format!(
                    "technology {}: {} fuel costs but {} fuel scenarios",
                    t.name,
                    t.fuel_costs.len(),
                    n_fuel
                )));
            }
            parse_role(&t.role).map_err(ConfigError::Invalid)?;
            parse_availability(&t.availability).map_err(ConfigError::Invalid)?;
        }
        for t in &self.technologies {
            if !self.start.contains_key(&t.name) {
                return Err(ConfigError::Invalid(format!(
                    "missing start capacity for technology {}",
                    t.name
                )));
            }
        }
        for c in &self.contracts {
            self.parse_contract(c)?;
        }
        for (name, regime) in &self.regimes {
            parse_regime_kind(name).map_err(ConfigError::Invalid)?;
            for cname in &regime.contracts {
                if !self.contracts.iter().any(|c| &c.name == cname) {
                    return Err(ConfigError::Invalid(format!(
                        "regime {name}: unknown contract {cname:?}"
                    )));
                }
            }
            if let Some(ob) = &regime.obligation {
                if !regime.contracts.contains(ob) {
                    return Err(ConfigError::Invalid(format!(
                        "regime {name}: obligation {ob:?} is not in its menu"
                    )));
                }
            }
        }
        Ok(())
    }

    fn parse_contract(&self, c: &ContractSection) -> Result<Contract, ConfigError> {
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| {
                ConfigError::Invalid(format!("contract {}: missing {field}", c.name))
            })
        };
        let kind = match c.kind.as_str() {
            "call_option" => ContractKind::CallOption {
                strike: need(c.strike, "strike")?,
            },
            "future" => ContractKind::Future {
                settle: need(c.settle, "settle")?,
            },
            "unit_contingent" => {
                let tech_name = c.technology.as_ref().ok_or_else(|| {
                    ConfigError::Invalid(format!("contract {}: missing technology", c.name))
                })?;
                let technology = self
                    .technologies
                    .iter()
                    .position(|t| &t.name == tech_name)
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "contract {}: unknown technology {tech_name:?}",
                            c.name
                        ))
                    })?;
                ContractKind::UnitContingent {
                    settle: need(c.settle, "settle")?,
                    technology,
                }
            }
            "sfpfc" => ContractKind::Sfpfc {
                settle: need(c.settle, "settle")?,
            },
            other => {
                return Err(ConfigError::Invalid(format!(
                    "contract {}: unknown kind {other:?}",
                    c.name
                )))
            }
        };
        let contract = Contract {
            name: c.name.clone(),
            kind,
            cap: c.cap,
        };
        contract
            .validate(self.technologies.len())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(contract)
    }

    /// Builds the immutable problem instance. The seed argument overrides
    /// the configured one (CLI --seed).
    pub fn build_system(&self, seed: u64) -> Result<System, ConfigError> {
        let curve = self.build_curve()?;
        let technologies: Vec<Technology> = self
            .technologies
            .iter()
            .map(|t| Technology {
                name: t.name.clone(),
                role: parse_role(&t.role).expect("validated"),
                inv_cost: t.inv_cost,
                fuel_cost: t.fuel_costs.clone(),
                availability: parse_availability(&t.availability).expect("validated"),
            })
            .collect();
        let scen_cfg = ScenarioConfig {
            demand_up_shifts_mw: self.scenarios.demand_up_shifts_mw.clone(),
            demand_down_shifts_mw: self.scenarios.demand_down_shifts_mw.clone(),
            availability: AvailabilityConfig {
                mean: self.scenarios.availability.mean,
                correlations: self.scenarios.availability.correlations.clone(),
            },
        };
        let scenarios = scenario::build_scenario_set(&scen_cfg, &technologies, &curve, seed)?;
        Ok(System {
            curve,
            technologies,
            scenarios,
        })
    }

    fn build_curve(&self) -> Result<DemandCurve, ConfigError> {
        let d = &self.demand;
        match d.source.as_str() {
            "synthetic" => {
                let s = d.synthetic.as_ref().expect("validated");
                let hourly =
                    scenario::synthetic_load_duration(s.hours, s.peak_mw, s.min_mw, s.shape);
                let blocks = scenario::aggregate_series(&hourly, d.blocks)?;
                Ok(DemandCurve::new(blocks, d.responsive_mw, d.voll)?)
            }
            "file" => {
                let path = d.path.as_ref().expect("validated");
                Ok(scenario::load_demand_curve(
                    path,
                    d.blocks,
                    d.responsive_mw,
                    d.voll,
                )?)
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn risk(&self, beta_generators: Option<f64>) -> MarketRisk {
        MarketRisk {
            consumer: RiskParams {
                alpha: self.risk.alpha,
                beta: self.risk.beta_consumer,
            },
            generators: RiskParams {
                alpha: self.risk.alpha,
                beta: beta_generators.unwrap_or(self.risk.beta_generators),
            },
        }
    }

    pub fn algorithm(&self) -> AlgorithmParams {
        let a = &self.algorithm;
        AlgorithmParams {
            step_capacity: a.step_capacity,
            step_price_fraction: a.step_price_fraction,
            sigma: a.sigma,
            delta: a.delta,
            gamma: a.gamma,
            max_outer: a.max_outer,
            max_inner: a.max_inner,
            proximity_cap_pct: a.proximity_cap_pct,
            planner_tol: a.planner_tol,
        }
    }

    /// Initial capacities in technology order.
    pub fn start_capacities(&self) -> Vec<f64> {
        self.technologies
            .iter()
            .map(|t| self.start.get(&t.name).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn regime_names(&self) -> Vec<String> {
        self.regimes.keys().cloned().collect()
    }

    /// Builds the named regime from the menu.
    pub fn build_regime(&self, name: &str) -> Result<Regime, ConfigError> {
        let kind = parse_regime_kind(name).map_err(ConfigError::Invalid)?;
        let section = self
            .regimes
            .get(name)
            .cloned()
            .unwrap_or(RegimeSection {
                contracts: Vec::new(),
                obligation: None,
                floor_mw: None,
            });
        if matches!(kind, RegimeKind::CompleteTrading | RegimeKind::ArrowDebreu)
            && !section.contracts.is_empty()
        {
            return Err(ConfigError::Invalid(format!(
                "regime {name} does not take a contract menu"
            )));
        }
        let contracts: Vec<Contract> = section
            .contracts
            .iter()
            .map(|cname| {
                let c = self
                    .contracts
                    .iter()
                    .find(|c| &c.name == cname)
                    .expect("validated");
                self.parse_contract(c)
            })
            .collect::<Result<_, _>>()?;
        let mandatory = if kind.needs_reference() {
            let contract = match &section.obligation {
                Some(ob) => section
                    .contracts
                    .iter()
                    .position(|c| c == ob)
                    .expect("validated"),
                None => {
                    if contracts.len() == 1 {
                        0
                    } else {
                        return Err(ConfigError::Invalid(format!(
                            "regime {name}: an obligation contract is required"
                        )));
                    }
                }
            };
            Some(MandatoryRule {
                contract,
                floor: match section.floor_mw {
                    Some(mw) => FloorSpec::Explicit(mw),
                    None => FloorSpec::FromReference,
                },
                rc_caps: kind == RegimeKind::MandatoryOption,
            })
        } else {
            None
        };
        let regime = Regime {
            kind,
            contracts,
            mandatory,
        };
        regime
            .validate(self.technologies.len())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(regime)
    }

    /// Hash of the scenario-defining configuration, risk parameters, and
    /// seed. Regime and algorithm sections are excluded so runs under
    /// different regimes on the same world remain comparable.
    pub fn fingerprint(&self, seed: u64, beta_generators: Option<f64>) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            seed: u64,
            demand: &'a DemandSection,
            technologies: &'a [TechnologySection],
            scenarios: &'a ScenariosSection,
            alpha: f64,
            beta_consumer: f64,
            beta_generators: f64,
        }
        let fp = Fingerprint {
            seed,
            demand: &self.demand,
            technologies: &self.technologies,
            scenarios: &self.scenarios,
            alpha: self.risk.alpha,
            beta_consumer: self.risk.beta_consumer,
            beta_generators: beta_generators.unwrap_or(self.risk.beta_generators),
        };
        let json = serde_json::to_string(&fp).expect("fingerprint serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_role(s: &str) -> Result<TechRole, String> {
    match s {
        "baseload" => Ok(TechRole::Baseload),
        "peaker" => Ok(TechRole::Peaker),
        "variable" => Ok(TechRole::Variable),
        "other" => Ok(TechRole::Other),
        other => Err(format!("unknown technology role {other:?}")),
    }
}

fn parse_availability(s: &str) -> Result<AvailabilityKind, String> {
    match s {
        "full" => Ok(AvailabilityKind::Full),
        "profiled" => Ok(AvailabilityKind::Profiled),
        other => Err(format!("unknown availability kind {other:?}")),
    }
}

pub fn parse_regime_kind(s: &str) -> Result<RegimeKind, String> {
    match s {
        "unrestricted3" => Ok(RegimeKind::Unrestricted3),
        "mandatory_option" => Ok(RegimeKind::MandatoryOption),
        "options_only_sep" => Ok(RegimeKind::OptionsOnlySep),
        "options_only_col" => Ok(RegimeKind::OptionsOnlyCol),
        "sfpfc_sep" => Ok(RegimeKind::SfpfcSep),
        "sfpfc_col" => Ok(RegimeKind::SfpfcCol),
        "sfpfc_mandatory" => Ok(RegimeKind::SfpfcMandatory),
        "complete_trading" => Ok(RegimeKind::CompleteTrading),
        "arrow_debreu" => Ok(RegimeKind::ArrowDebreu),
        other => Err(format!("unknown regime {other:?}")),
    }
}

/// The regime a mandatory regime derives its floor from.
pub fn reference_regime(kind: RegimeKind) -> Option<RegimeKind> {
    match kind {
        RegimeKind::MandatoryOption => Some(RegimeKind::Unrestricted3),
        RegimeKind::SfpfcMandatory => Some(RegimeKind::SfpfcCol),
        _ => None,
    }
}
