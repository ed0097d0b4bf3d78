//! Metrics, comparison tables, rendering, and run-state persistence.
//!
//! Metrics are pure functions of an equilibrium result, so recomputing them
//! from a stored state reproduces the stored values exactly. Human-readable
//! tables round to display precision; delimited and structured outputs keep
//! full precision. All output is deterministically ordered.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{EquilibriumResult, OuterRecord, RegimeKind};
use crate::scenario::System;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("state file {path}: {reason}")]
    BadState { path: String, reason: String },
    #[error("cannot compare runs: {0}")]
    Incomparable(String),
    #[error("output path {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Per-scenario consumption-weighted prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSummary {
    /// Spot price per scenario, $/MWh; NaN for excluded scenarios.
    pub spot: Vec<f64>,
    /// Spot plus the consumer's net contract cash flow over the same
    /// consumption, $/MWh.
    pub hedged: Vec<f64>,
    /// Scenarios excluded for zero consumption.
    pub excluded: Vec<usize>,
}

/// Consumption-weighted spot and hedged prices per scenario. The hedged
/// price adds the consumer's net contract cash flow to spot payments before
/// dividing by the same consumption. Zero-consumption scenarios are
/// excluded from the averages with a warning entry.
pub fn consumption_weighted_prices(system: &System, result: &EquilibriumResult) -> PriceSummary {
    let n = system.scenarios.n_scenarios();
    let mut spot = vec![f64::NAN; n];
    let mut hedged = vec![f64::NAN; n];
    let mut excluded = Vec::new();
    for sn in 0..n {
        let totals = &result.totals[sn];
        if totals.consumption_mwh <= 0.0 {
            excluded.push(sn);
            continue;
        }
        let mut contract_cost = 0.0;
        for (k, price) in result.prices.iter().enumerate() {
            let v = result.consumer.volumes.get(k).copied().unwrap_or(0.0);
            contract_cost += v * (price - result.payouts[k][sn]);
        }
        spot[sn] = totals.spot_payment / totals.consumption_mwh;
        hedged[sn] = (totals.spot_payment + contract_cost) / totals.consumption_mwh;
    }
    PriceSummary {
        spot,
        hedged,
        excluded,
    }
}

fn weighted_mean_std(values: &[f64], prob: &[f64]) -> (f64, f64) {
    let mut mass = 0.0;
    let mut mean = 0.0;
    for (v, p) in values.iter().zip(prob) {
        if v.is_finite() {
            mass += p;
            mean += p * v;
        }
    }
    if mass <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    mean /= mass;
    let mut var = 0.0;
    for (v, p) in values.iter().zip(prob) {
        if v.is_finite() {
            var += p / mass * (v - mean).powi(2);
        }
    }
    (mean, var.max(0.0).sqrt())
}

/// Signed volume per agent and contract; agent 0 is the consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub agent: String,
    pub contract: String,
    pub volume_mw: f64,
}

/// All reported metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub regime: RegimeKind,
    pub beta_generators: f64,
    pub converged: bool,
    pub technology_names: Vec<String>,
    pub capacity_mw: Vec<f64>,
    pub avg_spot_price: f64,
    pub avg_hedged_price: f64,
    pub spot_volatility: f64,
    pub hedged_volatility: f64,
    pub expected_unserved_gwh: f64,
    pub proximity_pct: f64,
    pub contract_names: Vec<String>,
    pub contract_prices: Vec<f64>,
    pub risk_premia: Vec<f64>,
    pub volumes: Vec<VolumeRow>,
    /// Total risk-adjusted surplus across agents, $/yr.
    pub total_surplus: f64,
    /// Surplus difference against a reference run, $M/yr.
    pub surplus_delta_musd: Option<f64>,
    pub warnings: Vec<String>,
}

/// Builds the metrics table for one result.
pub fn build_metrics(
    system: &System,
    result: &EquilibriumResult,
    beta_generators: f64,
) -> MetricsTable {
    let prob = &system.scenarios.prob;
    let prices = consumption_weighted_prices(system, result);
    let (avg_spot, vol_spot) = weighted_mean_std(&prices.spot, prob);
    let (avg_hedged, vol_hedged) = weighted_mean_std(&prices.hedged, prob);
    let eue_mwh: f64 = result
        .dispatches
        .iter()
        .zip(prob)
        .map(|(d, p)| p * d.unserved_mwh)
        .sum();

    let contract_names: Vec<String> = result
        .payouts
        .iter()
        .enumerate()
        .map(|(k, _)| format!("c{k}"))
        .collect();
    let risk_premia: Vec<f64> = result
        .prices
        .iter()
        .enumerate()
        .map(|(k, phi)| crate::contracts::risk_premium(*phi, &result.payouts[k], prob))
        .collect();

    let mut volumes = Vec::new();
    let seller_names: Vec<String> = if result.sellers.len() == system.n_tech() {
        system
            .technologies
            .iter()
            .map(|t| t.name.clone())
            .collect()
    } else {
        vec!["portfolio".to_string(); result.sellers.len()]
    };
    for (k, name) in contract_names.iter().enumerate() {
        if let Some(v) = result.consumer.volumes.get(k) {
            volumes.push(VolumeRow {
                agent: "consumer".into(),
                contract: name.clone(),
                volume_mw: *v,
            });
        }
        for (s, seller) in result.sellers.iter().enumerate() {
            if let Some(v) = seller.volumes.get(k) {
                volumes.push(VolumeRow {
                    agent: seller_names[s].clone(),
                    contract: name.clone(),
                    volume_mw: *v,
                });
            }
        }
    }

    let mut warnings = Vec::new();
    if !prices.excluded.is_empty() {
        warnings.push(format!(
            "{} zero-consumption scenarios excluded from price averages",
            prices.excluded.len()
        ));
    }
    if !result.converged {
        warnings.push("run did not converge".into());
    }

    MetricsTable {
        regime: result.regime,
        beta_generators,
        converged: result.converged,
        technology_names: system
            .technologies
            .iter()
            .map(|t| t.name.clone())
            .collect(),
        capacity_mw: result.capacities.clone(),
        avg_spot_price: avg_spot,
        avg_hedged_price: avg_hedged,
        spot_volatility: vol_spot,
        hedged_volatility: vol_hedged,
        expected_unserved_gwh: eue_mwh / 1000.0,
        proximity_pct: result.proximity_pct,
        contract_names,
        contract_prices: result.prices.clone(),
        risk_premia,
        volumes,
        total_surplus: result.total_surplus(),
        surplus_delta_musd: None,
        warnings,
    }
}

/// Attaches contract names from a regime menu (metrics default to c0..).
pub fn name_contracts(table: &mut MetricsTable, names: &[String]) {
    if names.len() == table.contract_names.len() {
        table.contract_names = names.to_vec();
        for row in &mut table.volumes {
            if let Some(ix) = row.contract.strip_prefix('c').and_then(|s| s.parse::<usize>().ok())
            {
                if ix < names.len() {
                    row.contract = names[ix].clone();
                }
            }
        }
    }
}

/// One persisted run: everything needed for warm restarts, comparisons, and
/// the two-phase mandatory workflow. Deterministic serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format: u32,
    /// Hash of the scenario-defining configuration plus risk parameters and
    /// seed; comparisons require equality.
    pub fingerprint: String,
    pub regime: RegimeKind,
    pub seed: u64,
    pub alpha: f64,
    pub beta_consumer: f64,
    pub beta_generators: f64,
    pub converged: bool,
    pub capacities_mw: Vec<f64>,
    pub contract_names: Vec<String>,
    pub contract_prices: Vec<f64>,
    /// Volumes per agent (consumer first), per contract.
    pub volumes: Vec<Vec<f64>>,
    /// Agent objectives: consumer then sellers.
    pub agent_rho: Vec<f64>,
    /// Per-technology profit signal (rho_g, or psi_g in collective regimes).
    pub tech_signal: Vec<f64>,
    /// Reliability credit per technology; None when undefined.
    pub reliability_credits: Vec<Option<f64>>,
    pub applied_floor_mw: Option<f64>,
    pub clearing_residual: Vec<f64>,
    pub proximity_pct: f64,
    pub outer_iterations: usize,
    pub history: Vec<OuterRecord>,
    pub metrics: MetricsTable,
}

pub fn make_run_state(
    fingerprint: String,
    seed: u64,
    alpha: f64,
    beta_consumer: f64,
    beta_generators: f64,
    result: &EquilibriumResult,
    metrics: MetricsTable,
) -> RunState {
    RunState {
        format: 1,
        fingerprint,
        regime: result.regime,
        seed,
        alpha,
        beta_consumer,
        beta_generators,
        converged: result.converged,
        capacities_mw: result.capacities.clone(),
        contract_names: metrics.contract_names.clone(),
        contract_prices: result.prices.clone(),
        volumes: std::iter::once(&result.consumer)
            .chain(result.sellers.iter())
            .map(|a| a.volumes.clone())
            .collect(),
        agent_rho: std::iter::once(result.consumer.rho)
            .chain(result.sellers.iter().map(|s| s.rho))
            .collect(),
        tech_signal: result.tech_signal.clone(),
        reliability_credits: result
            .reliability_credits
            .iter()
            .map(|rc| if rc.is_nan() { None } else { Some(*rc) })
            .collect(),
        applied_floor_mw: result.applied_floor_mw,
        clearing_residual: result.clearing_residual.clone(),
        proximity_pct: result.proximity_pct,
        outer_iterations: result.outer_iterations,
        history: result.history.clone(),
        metrics,
    }
}

pub fn save_state(state: &RunState, path: &Path) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(state).map_err(|e| ReportError::BadState {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_state(path: &Path) -> Result<RunState, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::BadState {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Side-by-side comparison with the surplus delta computed against the
/// reference. Refuses runs with different fingerprints or risk parameters.
pub fn compare_runs(
    result: &RunState,
    reference: &RunState,
) -> Result<MetricsTable, ReportError> {
    if result.fingerprint != reference.fingerprint {
        return Err(ReportError::Incomparable(format!(
            "fingerprint mismatch: {} vs {}",
            result.fingerprint, reference.fingerprint
        )));
    }
    if result.beta_generators != reference.beta_generators
        || result.beta_consumer != reference.beta_consumer
        || result.alpha != reference.alpha
    {
        return Err(ReportError::Incomparable(
            "risk parameters differ between runs".into(),
        ));
    }
    let mut table = result.metrics.clone();
    table.surplus_delta_musd =
        Some((result.metrics.total_surplus - reference.metrics.total_surplus) / 1e6);
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Table,
    Delimited,
    Structured,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(OutputFormat::Table),
            "delimited" => Ok(OutputFormat::Delimited),
            "structured" => Ok(OutputFormat::Structured),
            other => Err(format!(
                "unknown format {other:?}; expected table, delimited, or structured"
            )),
        }
    }
}

fn regime_label(kind: RegimeKind) -> &'static str {
    match kind {
        RegimeKind::Unrestricted3 => "unrestricted3",
        RegimeKind::MandatoryOption => "mandatory_option",
        RegimeKind::OptionsOnlySep => "options_only_sep",
        RegimeKind::OptionsOnlyCol => "options_only_col",
        RegimeKind::SfpfcSep => "sfpfc_sep",
        RegimeKind::SfpfcCol => "sfpfc_col",
        RegimeKind::SfpfcMandatory => "sfpfc_mandatory",
        RegimeKind::CompleteTrading => "complete_trading",
        RegimeKind::ArrowDebreu => "arrow_debreu",
    }
}

/// Human-readable paired-column table over a set of runs.
pub fn render_table(tables: &[MetricsTable]) -> String {
    if tables.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    let label_width = 34;
    let col_width = 18;
    let headers: Vec<String> = tables
        .iter()
        .map(|t| format!("{} b={:.1}", regime_label(t.regime), t.beta_generators))
        .collect();

    let mut line = format!("{:label_width$}", "");
    for h in &headers {
        line.push_str(&format!("{h:>col_width$}"));
    }
    out.push_str(&line);
    out.push('\n');
    out.push_str(&"-".repeat(label_width + col_width * headers.len()));
    out.push('\n');

    let mut push_row = |label: &str, values: Vec<String>, out: &mut String| {
        let mut line = format!("{label:label_width$}");
        for v in values {
            line.push_str(&format!("{v:>col_width$}"));
        }
        line.push('\n');
        out.push_str(&line);
    };

    push_row(
        "Converged",
        tables
            .iter()
            .map(|t| if t.converged { "yes" } else { "NO" }.to_string())
            .collect(),
        &mut out,
    );
    out.push_str("Capacity (GW)\n");
    let n_tech = tables[0].technology_names.len();
    for g in 0..n_tech {
        push_row(
            &format!("  {}", tables[0].technology_names[g]),
            tables
                .iter()
                .map(|t| format!("{:.1}", t.capacity_mw[g] / 1000.0))
                .collect(),
            &mut out,
        );
    }
    out.push_str("Average Price ($/MWh)\n");
    push_row(
        "  Spot",
        tables
            .iter()
            .map(|t| format!("{:.2}", t.avg_spot_price))
            .collect(),
        &mut out,
    );
    push_row(
        "  Hedged",
        tables
            .iter()
            .map(|t| format!("{:.2}", t.avg_hedged_price))
            .collect(),
        &mut out,
    );
    out.push_str("Interannual Volatility ($/MWh)\n");
    push_row(
        "  Spot",
        tables
            .iter()
            .map(|t| format!("{:.2}", t.spot_volatility))
            .collect(),
        &mut out,
    );
    push_row(
        "  Hedged",
        tables
            .iter()
            .map(|t| format!("{:.2}", t.hedged_volatility))
            .collect(),
        &mut out,
    );
    push_row(
        "Expected Unserved Energy (GWh)",
        tables
            .iter()
            .map(|t| format!("{:.2}", t.expected_unserved_gwh))
            .collect(),
        &mut out,
    );
    push_row(
        "Proximity to Equilibrium (%)",
        tables
            .iter()
            .map(|t| format!("{:.3}", t.proximity_pct))
            .collect(),
        &mut out,
    );

    // Union of contract names, in first-appearance order.
    let mut contract_names: Vec<String> = Vec::new();
    for t in tables {
        for name in &t.contract_names {
            if !contract_names.contains(name) {
                contract_names.push(name.clone());
            }
        }
    }
    if !contract_names.is_empty() {
        out.push_str("Contract Risk Premium ($/MW-yr)\n");
        for name in &contract_names {
            push_row(
                &format!("  {name}"),
                tables
                    .iter()
                    .map(|t| {
                        t.contract_names
                            .iter()
                            .position(|n| n == name)
                            .map(|k| format!("{:.0}", t.risk_premia[k]))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect(),
                &mut out,
            );
        }
        out.push_str("Trade Volume (GW, sales positive)\n");
        let mut agents: Vec<String> = Vec::new();
        for t in tables {
            for row in &t.volumes {
                if row.agent != "consumer" && !agents.contains(&row.agent) {
                    agents.push(row.agent.clone());
                }
            }
        }
        for agent in &agents {
            for name in &contract_names {
                push_row(
                    &format!("  {agent}: {name}"),
                    tables
                        .iter()
                        .map(|t| {
                            t.volumes
                                .iter()
                                .find(|r| &r.agent == agent && &r.contract == name)
                                .map(|r| format!("{:.1}", (-r.volume_mw).max(0.0) / 1000.0))
                                .unwrap_or_else(|| "-".into())
                        })
                        .collect(),
                    &mut out,
                );
            }
        }
    }
    push_row(
        "Change in Surplus ($M/yr)",
        tables
            .iter()
            .map(|t| {
                t.surplus_delta_musd
                    .map(|d| format!("{d:.0}"))
                    .unwrap_or_else(|| "-".into())
            })
            .collect(),
        &mut out,
    );
    for t in tables {
        for w in &t.warnings {
            out.push_str(&format!(
                "warning [{} b={:.1}]: {w}\n",
                regime_label(t.regime),
                t.beta_generators
            ));
        }
    }
    out
}

/// Delimited (CSV) rendering at full precision, one row per run.
pub fn render_delimited(tables: &[MetricsTable]) -> String {
    let mut out = String::new();
    if tables.is_empty() {
        return out;
    }
    let n_tech = tables[0].technology_names.len();
    let mut header = vec![
        "regime".to_string(),
        "beta_generators".to_string(),
        "converged".to_string(),
    ];
    for name in &tables[0].technology_names {
        header.push(format!("capacity_mw_{name}"));
    }
    header.extend(
        [
            "avg_spot_price",
            "avg_hedged_price",
            "spot_volatility",
            "hedged_volatility",
            "expected_unserved_gwh",
            "proximity_pct",
            "total_surplus",
            "surplus_delta_musd",
        ]
        .map(String::from),
    );
    out.push_str(&header.join(","));
    out.push('\n');
    for t in tables {
        let mut row = vec![
            regime_label(t.regime).to_string(),
            format!("{}", t.beta_generators),
            format!("{}", t.converged),
        ];
        for g in 0..n_tech {
            row.push(format!("{}", t.capacity_mw.get(g).copied().unwrap_or(f64::NAN)));
        }
        row.push(format!("{}", t.avg_spot_price));
        row.push(format!("{}", t.avg_hedged_price));
        row.push(format!("{}", t.spot_volatility));
        row.push(format!("{}", t.hedged_volatility));
        row.push(format!("{}", t.expected_unserved_gwh));
        row.push(format!("{}", t.proximity_pct));
        row.push(format!("{}", t.total_surplus));
        row.push(
            t.surplus_delta_musd
                .map(|d| format!("{d}"))
                .unwrap_or_default(),
        );
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Structured (JSON) rendering at full precision.
pub fn render_structured(tables: &[MetricsTable]) -> String {
    let mut text = serde_json::to_string_pretty(tables).expect("metrics serialize");
    text.push('\n');
    text
}

pub fn render(tables: &[MetricsTable], format: OutputFormat) -> String {
    match format {
        OutputFormat::Table => render_table(tables),
        OutputFormat::Delimited => render_delimited(tables),
        OutputFormat::Structured => render_structured(tables),
    }
}

/// Multi-start diff report: capacities and surplus per start.
pub fn render_multistart(tables: &[MetricsTable]) -> String {
    let mut out = String::new();
    if tables.is_empty() {
        return out;
    }
    out.push_str("start,converged");
    for name in &tables[0].technology_names {
        out.push_str(&format!(",capacity_mw_{name}"));
    }
    out.push_str(",total_surplus,surplus_vs_start0_musd\n");
    let base = tables[0].total_surplus;
    for (i, t) in tables.iter().enumerate() {
        out.push_str(&format!("{i},{}", t.converged));
        for x in &t.capacity_mw {
            out.push_str(&format!(",{x}"));
        }
        out.push_str(&format!(
            ",{},{}\n",
            t.total_surplus,
            (t.total_surplus - base) / 1e6
        ));
    }
    out
}

/// Residual-history rendering for the inspect command.
pub fn render_history(state: &RunState) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "run: regime={} seed={} beta_g={} converged={}\n",
        regime_label(state.regime),
        state.seed,
        state.beta_generators,
        state.converged
    ));
    out.push_str("outer,inner_iterations,clearing_residual,max_profit_residual,proximity_pct");
    for i in 0..state.capacities_mw.len() {
        out.push_str(&format!(",x{i}_mw"));
    }
    out.push('\n');
    for rec in &state.history {
        out.push_str(&format!(
            "{},{},{},{},{}",
            rec.outer,
            rec.inner_iterations,
            rec.clearing_residual,
            rec.max_profit_residual,
            rec.proximity_pct
        ));
        for x in &rec.capacities {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}
