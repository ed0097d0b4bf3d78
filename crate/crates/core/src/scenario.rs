//! Demand curves, technologies, and stochastic scenario construction.
//!
//! A [`ScenarioSet`] is the cartesian product of fuel-cost scenarios (which
//! also carry a downward demand shift), availability profiles, and upward
//! demand-shift scenarios. Construction is deterministic given a seed and
//! immutable afterwards, so a built [`System`] can be shared freely across
//! threads.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("demand file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("demand file row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("demand file is empty")]
    EmptyFile,
    #[error("aggregation into {blocks} blocks does not divide {hours} hours evenly")]
    UnevenAggregation { blocks: usize, hours: usize },
    #[error("block {block}: {reason}")]
    InvalidBlock { block: usize, reason: String },
    #[error("invalid demand curve: {0}")]
    InvalidCurve(String),
    #[error("technology {name}: {reason}")]
    InvalidTechnology { name: String, reason: String },
    #[error("scenario config: {0}")]
    InvalidConfig(String),
    #[error(
        "net fixed demand negative in block {block} under fuel scenario {fuel} and demand scenario {demand}"
    )]
    InfeasibleShift {
        fuel: usize,
        demand: usize,
        block: usize,
    },
    #[error("availability profile {profile}: cannot reach mean {mean} with correlation {correlation} after {retries} retries")]
    UnreachableProfile {
        profile: usize,
        mean: f64,
        correlation: f64,
        retries: usize,
    },
}

/// One time block of the (possibly aggregated) demand curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Block length in hours.
    pub hours: f64,
    /// Baseline non-price-responsive demand over the block, MW.
    pub fixed_mw: f64,
}

/// Piecewise-constant annual demand curve plus the price-responsive tranche.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCurve {
    pub blocks: Vec<Block>,
    /// Width of the price-responsive tranche, MW.
    pub responsive_mw: f64,
    /// Value of non-price-responsive load, $/MWh. Must exceed every
    /// marginal cost that can appear in a scenario.
    pub voll: f64,
}

impl DemandCurve {
    pub fn new(blocks: Vec<Block>, responsive_mw: f64, voll: f64) -> Result<Self, ScenarioError> {
        let curve = DemandCurve {
            blocks,
            responsive_mw,
            voll,
        };
        curve.validate()?;
        Ok(curve)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.blocks.is_empty() {
            return Err(ScenarioError::InvalidCurve("no blocks".into()));
        }
        for (t, b) in self.blocks.iter().enumerate() {
            if !(b.hours > 0.0) {
                return Err(ScenarioError::InvalidBlock {
                    block: t,
                    reason: format!("non-positive length {}", b.hours),
                });
            }
            if b.fixed_mw < 0.0 || !b.fixed_mw.is_finite() {
                return Err(ScenarioError::InvalidBlock {
                    block: t,
                    reason: format!("invalid demand {}", b.fixed_mw),
                });
            }
        }
        if self.responsive_mw < 0.0 {
            return Err(ScenarioError::InvalidCurve(
                "negative responsive demand".into(),
            ));
        }
        if !(self.voll > 0.0) {
            return Err(ScenarioError::InvalidCurve(
                "value of lost load must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Total covered hours (8760 for a full-year curve).
    pub fn total_hours(&self) -> f64 {
        self.blocks.iter().map(|b| b.hours).sum()
    }

    /// Total fixed energy of the curve, MWh.
    pub fn total_energy_mwh(&self) -> f64 {
        self.blocks.iter().map(|b| b.hours * b.fixed_mw).sum()
    }

    pub fn peak_fixed_mw(&self) -> f64 {
        self.blocks.iter().map(|b| b.fixed_mw).fold(0.0, f64::max)
    }

    /// Block-length-weighted mean of an arbitrary per-block series.
    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        let h = self.total_hours();
        self.blocks
            .iter()
            .zip(values)
            .map(|(b, v)| b.hours * v)
            .sum::<f64>()
            / h
    }
}

/// Economic role markers used by regimes (option sale caps, fuel scaling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechRole {
    Baseload,
    Peaker,
    Variable,
    Other,
}

impl fmt::Display for TechRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TechRole::Baseload => "baseload",
            TechRole::Peaker => "peaker",
            TechRole::Variable => "variable",
            TechRole::Other => "other",
        };
        f.write_str(s)
    }
}

/// Whether a technology is always available or uses generated profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityKind {
    /// A_grt = 1 in every block and profile.
    Full,
    /// Availability follows the generated per-profile series.
    Profiled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Technology {
    pub name: String,
    pub role: TechRole,
    /// Amortized investment cost, $/MW-yr.
    pub inv_cost: f64,
    /// Marginal cost per fuel scenario, $/MWh (length |F|).
    pub fuel_cost: Vec<f64>,
    pub availability: AvailabilityKind,
}

impl Technology {
    fn validate(&self, n_fuel: usize) -> Result<(), ScenarioError> {
        let fail = |reason: String| ScenarioError::InvalidTechnology {
            name: self.name.clone(),
            reason,
        };
        if !(self.inv_cost > 0.0) {
            return Err(fail(format!(
                "investment cost must be positive, got {}",
                self.inv_cost
            )));
        }
        if self.fuel_cost.len() != n_fuel {
            return Err(fail(format!(
                "expected {} fuel-cost entries, got {}",
                n_fuel,
                self.fuel_cost.len()
            )));
        }
        if self.fuel_cost.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(fail("negative or non-finite marginal cost".into()));
        }
        Ok(())
    }
}

/// Fuel scenario: marginal costs are read from `Technology::fuel_cost[f]`;
/// the scenario itself carries the associated downward demand shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelScenario {
    pub down_shift_mw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandScenario {
    pub up_shift_mw: f64,
}

/// One availability profile: per technology, per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityProfile {
    /// availability[g][t] in [0, 1].
    pub availability: Vec<Vec<f64>>,
    /// Realized block-length-weighted Pearson correlation of the profiled
    /// technologies' series with fixed demand (diagnostic).
    pub load_correlation: Vec<f64>,
}

/// Index of one scenario in the (f, r, s) product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioId {
    pub fuel: usize,
    pub profile: usize,
    pub demand: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub fuel: Vec<FuelScenario>,
    pub profiles: Vec<AvailabilityProfile>,
    pub demand: Vec<DemandScenario>,
    /// Probability per scenario in canonical (f-major, then r, then s) order.
    pub prob: Vec<f64>,
}

impl ScenarioSet {
    pub fn n_scenarios(&self) -> usize {
        self.fuel.len() * self.profiles.len() * self.demand.len()
    }

    pub fn index(&self, id: ScenarioId) -> usize {
        (id.fuel * self.profiles.len() + id.profile) * self.demand.len() + id.demand
    }

    pub fn id(&self, index: usize) -> ScenarioId {
        let s = index % self.demand.len();
        let rest = index / self.demand.len();
        let r = rest % self.profiles.len();
        let f = rest / self.profiles.len();
        ScenarioId {
            fuel: f,
            profile: r,
            demand: s,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ScenarioId> + '_ {
        (0..self.n_scenarios()).map(|n| self.id(n))
    }

    /// Net exogenous shift D+_s - D-_f for a scenario, MW.
    pub fn net_shift(&self, id: ScenarioId) -> f64 {
        self.demand[id.demand].up_shift_mw - self.fuel[id.fuel].down_shift_mw
    }
}

/// A fully constructed problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub curve: DemandCurve,
    pub technologies: Vec<Technology>,
    pub scenarios: ScenarioSet,
}

impl System {
    pub fn n_tech(&self) -> usize {
        self.technologies.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.curve.blocks.len()
    }

    pub fn availability(&self, g: usize, r: usize, t: usize) -> f64 {
        self.scenarios.profiles[r].availability[g][t]
    }

    pub fn marginal_cost(&self, g: usize, f: usize) -> f64 {
        self.technologies[g].fuel_cost[f]
    }

    pub fn tech_by_role(&self, role: TechRole) -> Option<usize> {
        self.technologies.iter().position(|t| t.role == role)
    }

    pub fn tech_by_name(&self, name: &str) -> Option<usize> {
        self.technologies.iter().position(|t| t.name == name)
    }
}

/// Parameters for generated availability profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityConfig {
    /// Target block-length-weighted mean availability, in (0, 1].
    pub mean: f64,
    /// Target Pearson correlation with fixed demand, one per profile,
    /// strictly increasing.
    pub correlations: Vec<f64>,
}

/// Scenario-grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Upward demand shift per demand scenario, MW (length |S|).
    pub demand_up_shifts_mw: Vec<f64>,
    /// Downward demand shift per fuel scenario, MW (length |F|),
    /// nondecreasing in the fuel index.
    pub demand_down_shifts_mw: Vec<f64>,
    pub availability: AvailabilityConfig,
}

/// Reads an hourly demand series. Accepts one value per line or
/// two whitespace/comma-separated columns (hour index, MW); blank lines and
/// `#` comments are skipped.
pub fn load_hourly_series(path: &Path) -> Result<Vec<f64>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let raw = match fields.len() {
            1 => fields[0],
            2 => fields[1],
            n => {
                return Err(ScenarioError::MalformedRow {
                    row,
                    reason: format!("expected 1 or 2 columns, found {n}"),
                })
            }
        };
        let value: f64 = raw.parse().map_err(|_| ScenarioError::MalformedRow {
            row,
            reason: format!("not a number: {raw:?}"),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(ScenarioError::MalformedRow {
                row,
                reason: format!("negative or non-finite demand {value}"),
            });
        }
        values.push(value);
    }
    if values.is_empty() {
        return Err(ScenarioError::EmptyFile);
    }
    Ok(values)
}

/// Aggregates an hourly series into `blocks` contiguous equal-length blocks.
/// Block demand is the mean of its hours, so total energy is preserved
/// exactly.
pub fn aggregate_series(hourly: &[f64], blocks: usize) -> Result<Vec<Block>, ScenarioError> {
    if blocks == 0 || hourly.len() % blocks != 0 {
        return Err(ScenarioError::UnevenAggregation {
            blocks,
            hours: hourly.len(),
        });
    }
    let width = hourly.len() / blocks;
    Ok(hourly
        .chunks_exact(width)
        .map(|chunk| Block {
            hours: width as f64,
            fixed_mw: chunk.iter().sum::<f64>() / width as f64,
        })
        .collect())
}

/// Loads an hourly demand file and aggregates it into a block curve.
pub fn load_demand_curve(
    path: &Path,
    aggregation: usize,
    responsive_mw: f64,
    voll: f64,
) -> Result<DemandCurve, ScenarioError> {
    let hourly = load_hourly_series(path)?;
    let blocks = aggregate_series(&hourly, aggregation)?;
    DemandCurve::new(blocks, responsive_mw, voll)
}

/// Deterministic synthetic load duration curve: `hours` values in
/// descending order with the given peak, minimum, and curvature.
///
/// D(u) = min + (peak - min) * (1 - u)^shape for u in (0, 1), so the mean is
/// min + (peak - min) / (shape + 1).
pub fn synthetic_load_duration(hours: usize, peak_mw: f64, min_mw: f64, shape: f64) -> Vec<f64> {
    (0..hours)
        .map(|i| {
            let u = (i as f64 + 0.5) / hours as f64;
            min_mw + (peak_mw - min_mw) * (1.0 - u).powf(shape)
        })
        .collect()
}

/// Block-length-weighted Pearson correlation between two per-block series.
pub fn weighted_correlation(curve: &DemandCurve, a: &[f64], b: &[f64]) -> f64 {
    let h = curve.total_hours();
    let w: Vec<f64> = curve.blocks.iter().map(|blk| blk.hours / h).collect();
    let ma: f64 = w.iter().zip(a).map(|(w, x)| w * x).sum();
    let mb: f64 = w.iter().zip(b).map(|(w, x)| w * x).sum();
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += w[i] * (a[i] - ma) * (b[i] - mb);
        va += w[i] * (a[i] - ma).powi(2);
        vb += w[i] * (b[i] - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

const MEAN_TOL: f64 = 1e-3;
const CORR_TOL: f64 = 1e-2;
const PROFILE_RETRIES: usize = 12;

/// Generates one availability series per requested profile for a
/// variable technology.
///
/// Each series has block-length-weighted mean equal to `cfg.mean` within
/// 1e-3 and Pearson correlation with fixed demand within 1e-2 of its
/// target. The construction draws a base value multiset, rank-reorders it
/// against a blend of the load ranking and noise (bisecting the blend weight
/// until the measured correlation matches), then shifts and clips to restore
/// the mean.
pub fn make_availability_profiles(
    cfg: &AvailabilityConfig,
    curve: &DemandCurve,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ScenarioError> {
    if !(cfg.mean > 0.0 && cfg.mean <= 1.0) {
        return Err(ScenarioError::InvalidConfig(format!(
            "availability mean {} outside (0, 1]",
            cfg.mean
        )));
    }
    if cfg.correlations.is_empty() {
        return Err(ScenarioError::InvalidConfig(
            "at least one availability profile required".into(),
        ));
    }
    if cfg.correlations.windows(2).any(|w| w[0] >= w[1]) && cfg.correlations.len() > 1 {
        return Err(ScenarioError::InvalidConfig(
            "correlation targets must be strictly increasing".into(),
        ));
    }

    let t_blocks = curve.blocks.len();
    // Saturated target: the only series with mean 1.0 is all-ones.
    if (cfg.mean - 1.0).abs() < f64::EPSILON {
        return Ok(vec![vec![1.0; t_blocks]; cfg.correlations.len()]);
    }

    let load: Vec<f64> = curve.blocks.iter().map(|b| b.fixed_mw).collect();
    let mut out = Vec::with_capacity(cfg.correlations.len());
    for (r, &target_corr) in cfg.correlations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + r as u64);
        let mut found = None;
        for _attempt in 0..PROFILE_RETRIES {
            if let Some(series) = try_profile(cfg.mean, target_corr, curve, &load, &mut rng) {
                found = Some(series);
                break;
            }
        }
        match found {
            Some(series) => out.push(series),
            None => {
                return Err(ScenarioError::UnreachableProfile {
                    profile: r,
                    mean: cfg.mean,
                    correlation: target_corr,
                    retries: PROFILE_RETRIES,
                })
            }
        }
    }
    Ok(out)
}

fn try_profile(
    mean: f64,
    target_corr: f64,
    curve: &DemandCurve,
    load: &[f64],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let t = load.len();
    // Base multiset: uniform on [0, min(2*mean, 1)] keeps raw values inside
    // the unit interval with mean close to the target.
    let hi = (2.0 * mean).min(1.0);
    let base: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..hi)).collect();
    let mut sorted_base = base.clone();
    sorted_base.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let noise: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let load_rank = standardized_ranks(load);

    let assemble = |blend: f64| -> Vec<f64> {
        // Keys mixing the load ranking with noise; blend = +/-1 gives the
        // co-monotone / anti-monotone extremes.
        let keys: Vec<f64> = (0..t)
            .map(|i| blend * load_rank[i] + (1.0 - blend.abs()) * noise[i])
            .collect();
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap().then(a.cmp(&b)));
        let mut series = vec![0.0; t];
        for (pos, &block) in order.iter().enumerate() {
            series[block] = sorted_base[pos];
        }
        recenter(&mut series, mean, curve);
        series
    };

    let corr_of = |blend: f64| -> f64 {
        let series = assemble(blend);
        weighted_correlation(curve, &series, load)
    };

    // Measured correlation is monotone in the blend weight; bisect.
    let (mut lo, mut hi_b) = (-1.0_f64, 1.0_f64);
    let (c_lo, c_hi) = (corr_of(lo), corr_of(hi_b));
    if target_corr < c_lo - CORR_TOL || target_corr > c_hi + CORR_TOL {
        return None;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi_b);
        if corr_of(mid) < target_corr {
            lo = mid;
        } else {
            hi_b = mid;
        }
    }
    let series = assemble(0.5 * (lo + hi_b));
    let achieved = weighted_correlation(curve, &series, load);
    let mean_ok = (curve.weighted_mean(&series) - mean).abs() <= MEAN_TOL;
    let corr_ok = (achieved - target_corr).abs() <= CORR_TOL;
    (mean_ok && corr_ok).then_some(series)
}

/// Ranks standardized to [-1, 1], ties broken by index.
fn standardized_ranks(values: &[f64]) -> Vec<f64> {
    let t = values.len();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; t];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = if t > 1 {
            2.0 * pos as f64 / (t - 1) as f64 - 1.0
        } else {
            0.0
        };
    }
    ranks
}

/// Shift toward the target weighted mean, clipping to [0, 1]; iterate since
/// clipping feeds back into the mean.
fn recenter(series: &mut [f64], mean: f64, curve: &DemandCurve) {
    for _ in 0..200 {
        let current = curve.weighted_mean(series);
        let gap = mean - current;
        if gap.abs() <= MEAN_TOL * 1e-3 {
            break;
        }
        for v in series.iter_mut() {
            *v = (*v + gap).clamp(0.0, 1.0);
        }
    }
}

/// Builds the full scenario set from configuration.
///
/// Probabilities are uniform. Availability profiles are generated for
/// `Profiled` technologies; `Full` technologies get A = 1 everywhere. The
/// construction rejects any (f, s, block) whose net fixed demand
/// D_fix + D+ - D- would be negative.
pub fn build_scenario_set(
    cfg: &ScenarioConfig,
    technologies: &[Technology],
    curve: &DemandCurve,
    seed: u64,
) -> Result<ScenarioSet, ScenarioError> {
    let n_fuel = cfg.demand_down_shifts_mw.len();
    let n_demand = cfg.demand_up_shifts_mw.len();
    let n_profiles = cfg.availability.correlations.len();
    if n_fuel == 0 || n_demand == 0 || n_profiles == 0 {
        return Err(ScenarioError::InvalidConfig(
            "scenario grid must be non-empty in every dimension".into(),
        ));
    }
    if cfg
        .demand_down_shifts_mw
        .windows(2)
        .any(|w| w[0] > w[1] + 1e-12)
    {
        return Err(ScenarioError::InvalidConfig(
            "downward shifts must be nondecreasing in the fuel-cost index".into(),
        ));
    }
    for tech in technologies {
        tech.validate(n_fuel)?;
    }

    // Feasibility: net fixed demand must stay nonnegative in every block.
    for (f, down) in cfg.demand_down_shifts_mw.iter().enumerate() {
        for (s, up) in cfg.demand_up_shifts_mw.iter().enumerate() {
            for (t, b) in curve.blocks.iter().enumerate() {
                if b.fixed_mw + up - down < 0.0 {
                    return Err(ScenarioError::InfeasibleShift {
                        fuel: f,
                        demand: s,
                        block: t,
                    });
                }
            }
        }
    }

    let generated = if technologies
        .iter()
        .any(|t| t.availability == AvailabilityKind::Profiled)
    {
        make_availability_profiles(&cfg.availability, curve, seed)?
    } else {
        vec![vec![1.0; curve.blocks.len()]; n_profiles]
    };

    let t_blocks = curve.blocks.len();
    let load: Vec<f64> = curve.blocks.iter().map(|b| b.fixed_mw).collect();
    let profiles: Vec<AvailabilityProfile> = (0..n_profiles)
        .map(|r| {
            let availability: Vec<Vec<f64>> = technologies
                .iter()
                .map(|tech| match tech.availability {
                    AvailabilityKind::Full => vec![1.0; t_blocks],
                    AvailabilityKind::Profiled => generated[r].clone(),
                })
                .collect();
            let load_correlation = availability
                .iter()
                .map(|series| weighted_correlation(curve, series, &load))
                .collect();
            AvailabilityProfile {
                availability,
                load_correlation,
            }
        })
        .collect();

    let n = n_fuel * n_profiles * n_demand;
    Ok(ScenarioSet {
        fuel: cfg
            .demand_down_shifts_mw
            .iter()
            .map(|&d| FuelScenario { down_shift_mw: d })
            .collect(),
        profiles,
        demand: cfg
            .demand_up_shifts_mw
            .iter()
            .map(|&u| DemandScenario { up_shift_mw: u })
            .collect(),
        prob: vec![1.0 / n as f64; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn flat_curve(blocks: usize, mw: f64) -> DemandCurve {
        DemandCurve::new(
            vec![
                Block {
                    hours: 8760.0 / blocks as f64,
                    fixed_mw: mw
                };
                blocks
            ],
            0.0,
            1000.0,
        )
        .unwrap()
    }

    fn write_series(values: &[f64]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for v in values {
            writeln!(f, "{v}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn identity_aggregation_keeps_hourly_blocks() {
        let hourly: Vec<f64> = (0..8760).map(|i| 50.0 + (i % 7) as f64).collect();
        let f = write_series(&hourly);
        let curve = load_demand_curve(f.path(), 8760, 0.0, 1000.0).unwrap();
        assert_eq!(curve.blocks.len(), 8760);
        assert!(curve.blocks.iter().all(|b| b.hours == 1.0));
        assert_eq!(curve.blocks[3].fixed_mw, hourly[3]);
    }

    #[test]
    fn constant_series_aggregates_to_constant_blocks() {
        let hourly = vec![100.0; 8760];
        let f = write_series(&hourly);
        let curve = load_demand_curve(f.path(), 4, 0.0, 1000.0).unwrap();
        assert_eq!(curve.blocks.len(), 4);
        for b in &curve.blocks {
            assert_eq!(b.hours, 2190.0);
            assert_eq!(b.fixed_mw, 100.0);
        }
    }

    #[test]
    fn sawtooth_aggregation_preserves_energy() {
        let hourly: Vec<f64> = (0..8760).map(|i| (i % 1000) as f64).collect();
        let raw_energy: f64 = hourly.iter().sum();
        let f = write_series(&hourly);
        let curve = load_demand_curve(f.path(), 24, 0.0, 1000.0).unwrap();
        assert_eq!(curve.blocks.len(), 24);
        // Independent recomputation of sum(L_t * D_t) against the raw series.
        let block_energy: f64 = curve.blocks.iter().map(|b| b.hours * b.fixed_mw).sum();
        assert!(
            (block_energy - raw_energy).abs() <= 1e-9 * raw_energy,
            "block energy {block_energy} vs raw {raw_energy}"
        );
    }

    #[test]
    fn malformed_rows_are_rejected_with_row_index() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "10.0\nnot_a_number\n20.0").unwrap();
        f.flush().unwrap();
        let err = load_hourly_series(f.path()).unwrap_err();
        match err {
            ScenarioError::MalformedRow { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn negative_demand_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "10.0\n-4.0").unwrap();
        f.flush().unwrap();
        assert!(matches!(
            load_hourly_series(f.path()).unwrap_err(),
            ScenarioError::MalformedRow { row: 2, .. }
        ));
    }

    #[test]
    fn empty_file_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(
            load_hourly_series(f.path()).unwrap_err(),
            ScenarioError::EmptyFile
        ));
    }

    #[test]
    fn two_column_format_accepted() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# hour, mw\n0, 55.0\n1 66.0").unwrap();
        f.flush().unwrap();
        assert_eq!(load_hourly_series(f.path()).unwrap(), vec![55.0, 66.0]);
    }

    fn techs(n_fuel: usize) -> Vec<Technology> {
        vec![
            Technology {
                name: "thermal".into(),
                role: TechRole::Peaker,
                inv_cost: 60_000.0,
                fuel_cost: vec![70.0; n_fuel],
                availability: AvailabilityKind::Full,
            },
            Technology {
                name: "variable".into(),
                role: TechRole::Variable,
                inv_cost: 70_000.0,
                fuel_cost: vec![0.0; n_fuel],
                availability: AvailabilityKind::Profiled,
            },
        ]
    }

    fn varied_curve() -> DemandCurve {
        let hourly = synthetic_load_duration(8760, 150.0, 60.0, 2.0);
        DemandCurve::new(aggregate_series(&hourly, 24).unwrap(), 2.0, 1000.0).unwrap()
    }

    #[test]
    fn degenerate_single_scenario_set() {
        let cfg = ScenarioConfig {
            demand_up_shifts_mw: vec![0.0],
            demand_down_shifts_mw: vec![0.0],
            availability: AvailabilityConfig {
                mean: 1.0,
                correlations: vec![0.0],
            },
        };
        let curve = flat_curve(4, 100.0);
        let set = build_scenario_set(&cfg, &techs(1), &curve, 7).unwrap();
        assert_eq!(set.n_scenarios(), 1);
        assert_eq!(set.prob, vec![1.0]);
    }

    #[test]
    fn full_grid_has_uniform_probabilities() {
        let cfg = ScenarioConfig {
            demand_up_shifts_mw: (0..10).map(|i| i as f64).collect(),
            demand_down_shifts_mw: (0..10).map(|i| 0.5 * i as f64).collect(),
            availability: AvailabilityConfig {
                mean: 0.375,
                correlations: vec![-0.3, -0.1, 0.1, 0.3],
            },
        };
        let curve = varied_curve();
        let set = build_scenario_set(&cfg, &techs(10), &curve, 11).unwrap();
        assert_eq!(set.n_scenarios(), 400);
        assert!(set.prob.iter().all(|p| (p - 1.0 / 400.0).abs() < 1e-15));
        let total: f64 = set.prob.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn generated_availability_hits_mean_target() {
        let curve = varied_curve();
        let cfg = AvailabilityConfig {
            mean: 0.375,
            correlations: vec![-0.3, -0.1, 0.1, 0.3],
        };
        let profiles = make_availability_profiles(&cfg, &curve, 3).unwrap();
        for series in &profiles {
            let mean = curve.weighted_mean(series);
            assert!(
                (mean - 0.375).abs() <= 1e-3,
                "profile mean {mean} missed target"
            );
            assert!(series.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn saturated_mean_returns_all_ones() {
        let curve = varied_curve();
        let cfg = AvailabilityConfig {
            mean: 1.0,
            correlations: vec![0.7],
        };
        let profiles = make_availability_profiles(&cfg, &curve, 3).unwrap();
        assert!(profiles[0].iter().all(|&a| a == 1.0));
    }

    #[test]
    fn zero_correlation_target_gives_near_zero_correlation() {
        let curve = varied_curve();
        let cfg = AvailabilityConfig {
            mean: 0.375,
            correlations: vec![0.0],
        };
        let profiles = make_availability_profiles(&cfg, &curve, 5).unwrap();
        let load: Vec<f64> = curve.blocks.iter().map(|b| b.fixed_mw).collect();
        let corr = weighted_correlation(&curve, &profiles[0], &load);
        assert!(corr.abs() < 0.02, "correlation {corr} should be near zero");
    }

    #[test]
    fn correlation_targets_are_ordered_and_matched() {
        let curve = varied_curve();
        let cfg = AvailabilityConfig {
            mean: 0.375,
            correlations: vec![-0.3, 0.3],
        };
        let profiles = make_availability_profiles(&cfg, &curve, 9).unwrap();
        let load: Vec<f64> = curve.blocks.iter().map(|b| b.fixed_mw).collect();
        let c0 = weighted_correlation(&curve, &profiles[0], &load);
        let c1 = weighted_correlation(&curve, &profiles[1], &load);
        assert!(c0 < c1 + 1e-2, "correlations out of order: {c0} vs {c1}");
        assert!((c0 + 0.3).abs() <= 1e-2, "profile 0 correlation {c0}");
        assert!((c1 - 0.3).abs() <= 1e-2, "profile 1 correlation {c1}");
    }

    #[test]
    fn unreachable_correlation_is_reported() {
        // A two-block curve cannot express a +0.999 correlation with mean
        // pinned at 0.05 after clipping; expect the named-profile error.
        let curve = flat_curve(3, 100.0);
        let cfg = AvailabilityConfig {
            mean: 0.375,
            correlations: vec![0.9],
        };
        // Flat load has zero variance, so correlation is identically zero.
        let err = make_availability_profiles(&cfg, &curve, 1).unwrap_err();
        assert!(matches!(
            err,
            ScenarioError::UnreachableProfile { profile: 0, .. }
        ));
    }

    #[test]
    fn infeasible_shift_names_offending_scenario() {
        let cfg = ScenarioConfig {
            demand_up_shifts_mw: vec![0.0, 5.0],
            demand_down_shifts_mw: vec![0.0, 500.0],
            availability: AvailabilityConfig {
                mean: 1.0,
                correlations: vec![0.0],
            },
        };
        let curve = flat_curve(4, 100.0);
        let err = build_scenario_set(&cfg, &techs(2), &curve, 7).unwrap_err();
        match err {
            ScenarioError::InfeasibleShift { fuel, demand, .. } => {
                assert_eq!(fuel, 1);
                assert_eq!(demand, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = ScenarioConfig {
            demand_up_shifts_mw: vec![0.0, 3.0],
            demand_down_shifts_mw: vec![0.0, 1.0],
            availability: AvailabilityConfig {
                mean: 0.375,
                correlations: vec![-0.2, 0.2],
            },
        };
        let curve = varied_curve();
        let a = build_scenario_set(&cfg, &techs(2), &curve, 42).unwrap();
        let b = build_scenario_set(&cfg, &techs(2), &curve, 42).unwrap();
        assert_eq!(a, b);
        let c = build_scenario_set(&cfg, &techs(2), &curve, 43).unwrap();
        assert_ne!(a, c);
    }
}
