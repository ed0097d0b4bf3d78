//! Command-line interface: run one regime, sweep a beta grid across
//! regimes, compare persisted runs, and inspect residual histories.
//!
//! Exit codes: 0 converged, 2 unconverged, 3 infeasible, 4 config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capeq::agents::AgentError;
use capeq::config::{reference_regime, Config, ConfigError};
use capeq::contracts::ContractError;
use capeq::dispatch::DispatchError;
use capeq::equilibrium::{
    find_equilibrium, EquilibriumError, EquilibriumResult, Reference, RegimeKind,
};
use capeq::report::{
    self, build_metrics, compare_runs, load_state, make_run_state, name_contracts, render,
    render_history, render_multistart, save_state, MetricsTable, OutputFormat, RunState,
};
use capeq::scenario::System;

#[derive(Parser)]
#[command(
    name = "capeq",
    version,
    about = "Capacity-investment equilibria under contracting regimes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for state files and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Output format: table, delimited, or structured.
    #[arg(long, default_value = "table")]
    format: OutputFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single regime.
    Run {
        #[command(flatten)]
        common: CommonOpts,
        /// Regime name (for example unrestricted3 or sfpfc_col).
        #[arg(long)]
        regime: String,
        /// Generator beta override.
        #[arg(long)]
        beta: Option<f64>,
        /// Number of capacity starts (multi-start).
        #[arg(long, default_value_t = 1)]
        starts: usize,
        /// Reference state file (mandatory regimes; also enables the
        /// surplus delta).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Warm-start capacities from a previous state file.
        #[arg(long)]
        warm: Option<PathBuf>,
    },
    /// Run a beta grid across regimes; references are ordered first.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated regimes (defaults to all configured).
        #[arg(long)]
        regime: Option<String>,
        /// Comma-separated generator betas.
        #[arg(long)]
        beta: Option<String>,
    },
    /// Compare a run against a reference run.
    Compare {
        result: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value = "table")]
        format: OutputFormat,
    },
    /// Print the residual history of a persisted run.
    Inspect { state: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch_command(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

#[derive(Debug)]
struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        self.code
    }
    fn config(msg: impl Into<String>) -> Self {
        CliError {
            message: msg.into(),
            code: 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<report::ReportError> for CliError {
    fn from(e: report::ReportError) -> Self {
        CliError {
            message: e.to_string(),
            code: 4,
        }
    }
}

impl From<EquilibriumError> for CliError {
    fn from(e: EquilibriumError) -> Self {
        let code = match &e {
            EquilibriumError::Dispatch(DispatchError::BlockInfeasible { .. })
            | EquilibriumError::Dispatch(DispatchError::UnabsorbableShift { .. })
            | EquilibriumError::InfeasibleClearing { .. } => 3,
            EquilibriumError::Contract(ContractError::ZeroShape { .. }) => 3,
            EquilibriumError::Contract(_) => 4,
            EquilibriumError::Agent(AgentError::Solver(_)) => 2,
            EquilibriumError::Agent(_) => 4,
            EquilibriumError::StepFloor { .. } => 2,
            EquilibriumError::MissingReference | EquilibriumError::BadRegime(_) => 4,
            EquilibriumError::TooLargeForDirect(_) => 4,
        };
        CliError {
            message: e.to_string(),
            code,
        }
    }
}

fn dispatch_command(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run {
            common,
            regime,
            beta,
            starts,
            reference,
            warm,
        } => run_single(common, regime, beta, starts, reference, warm),
        Command::Sweep {
            common,
            regime,
            beta,
        } => run_sweep(common, regime, beta),
        Command::Compare {
            result,
            reference,
            format,
        } => {
            let result = load_state(&result)?;
            let reference = load_state(&reference)?;
            let table =
                compare_runs(&result, &reference).map_err(|e| CliError::config(e.to_string()))?;
            let mut base = reference.metrics.clone();
            base.surplus_delta_musd = Some(0.0);
            print!("{}", render(&[base, table], format));
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { state } => {
            let state = load_state(&state)?;
            print!("{}", render_history(&state));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_reference(path: &Path) -> Result<(RunState, Reference), CliError> {
    let state = load_state(path)?;
    let rc: Option<Vec<f64>> = state.reliability_credits.iter().copied().collect();
    let rc = rc.ok_or_else(|| {
        CliError::config("reference run has undefined reliability credits (no scarcity blocks)")
    })?;
    let reference = Reference {
        capacities: state.capacities_mw.clone(),
        reliability_credits: rc,
    };
    Ok((state, reference))
}

/// Deterministic multi-start vectors: the configured start plus scaled
/// perturbations drawn from the run seed.
fn start_vectors(base: &[f64], starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut out = vec![base.to_vec()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_ab1e);
    for _ in 1..starts {
        out.push(base.iter().map(|x| x * rng.gen_range(0.4..1.8)).collect());
    }
    out
}

struct RunOutput {
    result: EquilibriumResult,
    metrics: MetricsTable,
    state: RunState,
}

#[allow(clippy::too_many_arguments)]
fn execute_run(
    cfg: &Config,
    system: &System,
    regime_name: &str,
    beta: Option<f64>,
    seed: u64,
    start: &[f64],
    reference: Option<&Reference>,
    reference_state: Option<&RunState>,
) -> Result<RunOutput, CliError> {
    let regime = cfg.build_regime(regime_name)?;
    let risk = cfg.risk(beta);
    let params = cfg.algorithm();
    let result = find_equilibrium(system, &regime, risk, &params, start, reference)?;
    let mut metrics = build_metrics(system, &result, risk.generators.beta);
    let names: Vec<String> = regime.contracts.iter().map(|c| c.name.clone()).collect();
    name_contracts(&mut metrics, &names);
    let fingerprint = cfg.fingerprint(seed, beta);
    if let Some(ref_state) = reference_state {
        if ref_state.fingerprint == fingerprint {
            metrics.surplus_delta_musd =
                Some((metrics.total_surplus - ref_state.metrics.total_surplus) / 1e6);
        }
    }
    let state = make_run_state(
        fingerprint,
        seed,
        risk.consumer.alpha,
        risk.consumer.beta,
        risk.generators.beta,
        &result,
        metrics.clone(),
    );
    Ok(RunOutput {
        result,
        metrics,
        state,
    })
}

fn state_filename(regime: &str, beta: f64, start_index: Option<usize>) -> String {
    match start_index {
        Some(i) if i > 0 => format!("{regime}_b{beta:.2}_start{i}.state.json"),
        _ => format!("{regime}_b{beta:.2}.state.json"),
    }
}

fn write_outputs(out_dir: &Path, stem: &str, tables: &[MetricsTable]) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", out_dir.display())))?;
    for (suffix, format) in [
        ("txt", OutputFormat::Table),
        ("csv", OutputFormat::Delimited),
        ("json", OutputFormat::Structured),
    ] {
        let path = out_dir.join(format!("{stem}.{suffix}"));
        std::fs::write(&path, render(tables, format))
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_single(
    common: CommonOpts,
    regime_name: String,
    beta: Option<f64>,
    starts: usize,
    reference: Option<PathBuf>,
    warm: Option<PathBuf>,
) -> Result<ExitCode, CliError> {
    let cfg = Config::from_path(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let system = cfg.build_system(seed)?;

    let loaded_ref = reference.as_deref().map(load_reference).transpose()?;
    let (ref_state, ref_data) = match &loaded_ref {
        Some((state, data)) => (Some(state), Some(data)),
        None => (None, None),
    };

    let base_start = match &warm {
        Some(path) => load_state(path)?.capacities_mw,
        None => cfg.start_capacities(),
    };
    let starts_list = start_vectors(&base_start, starts.max(1), seed);

    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", common.out.display())))?;

    let mut tables = Vec::new();
    let mut all_converged = true;
    for (i, start) in starts_list.iter().enumerate() {
        let run = execute_run(
            &cfg,
            &system,
            &regime_name,
            beta,
            seed,
            start,
            ref_data,
            ref_state,
        )?;
        all_converged &= run.result.converged;
        let file = state_filename(&regime_name, run.state.beta_generators, Some(i));
        save_state(&run.state, &common.out.join(file))?;
        tables.push(run.metrics);
    }

    print!("{}", render(&tables, common.format));
    if tables.len() > 1 {
        let multistart = render_multistart(&tables);
        std::fs::write(common.out.join("multistart.csv"), &multistart)
            .map_err(|e| CliError::config(format!("cannot write multistart report: {e}")))?;
        print!("{multistart}");
    }
    write_outputs(&common.out, "metrics", &tables)?;
    Ok(if all_converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn parse_beta_list(arg: Option<String>, default: f64) -> Result<Vec<f64>, CliError> {
    match arg {
        None => Ok(vec![default]),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::config(format!("bad beta value {s:?}")))
            })
            .collect(),
    }
}

/// Orders regimes so that mandatory regimes follow their references,
/// inserting missing references.
fn sweep_order(requested: &[String]) -> Result<Vec<String>, CliError> {
    let mut ordered: Vec<String> = Vec::new();
    let push = |name: &str, ordered: &mut Vec<String>| {
        if !ordered.iter().any(|n| n == name) {
            ordered.push(name.to_string());
        }
    };
    for name in requested {
        let kind = capeq::config::parse_regime_kind(name).map_err(CliError::config)?;
        if let Some(reference) = reference_regime(kind) {
            let ref_name = match reference {
                RegimeKind::Unrestricted3 => "unrestricted3",
                RegimeKind::SfpfcCol => "sfpfc_col",
                _ => unreachable!(),
            };
            push(ref_name, &mut ordered);
        }
        push(name, &mut ordered);
    }
    Ok(ordered)
}

fn run_sweep(
    common: CommonOpts,
    regime: Option<String>,
    beta: Option<String>,
) -> Result<ExitCode, CliError> {
    let cfg = Config::from_path(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let system = cfg.build_system(seed)?;
    let betas = parse_beta_list(beta, cfg.risk.beta_generators)?;
    let requested: Vec<String> = match regime {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => cfg.regime_names(),
    };
    let ordered = sweep_order(&requested)?;

    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", common.out.display())))?;

    let mut all_converged = true;
    let mut tables: Vec<MetricsTable> = Vec::new();
    for &b in &betas {
        let mut runs_at_beta: Vec<(String, RunOutput)> = Vec::new();
        for name in &ordered {
            let kind = capeq::config::parse_regime_kind(name).map_err(CliError::config)?;
            // The surplus baseline is the three-contract case when present.
            let baseline = runs_at_beta
                .iter()
                .find(|(n, _)| n == "unrestricted3")
                .map(|(_, r)| &r.state);
            let reference_run = reference_regime(kind).and_then(|ref_kind| {
                runs_at_beta
                    .iter()
                    .find(|(_, r)| r.result.regime == ref_kind)
                    .map(|(_, r)| r)
            });
            let ref_data = reference_run.map(|r| Reference {
                capacities: r.result.capacities.clone(),
                reliability_credits: r.result.reliability_credits.clone(),
            });
            if reference_regime(kind).is_some() && ref_data.is_none() {
                return Err(CliError::config(format!(
                    "regime {name} needs its reference regime in the sweep"
                )));
            }
            let run = execute_run(
                &cfg,
                &system,
                name,
                Some(b),
                seed,
                &cfg.start_capacities(),
                ref_data.as_ref(),
                baseline,
            )?;
            all_converged &= run.result.converged;
            save_state(&run.state, &common.out.join(state_filename(name, b, None)))?;
            runs_at_beta.push((name.clone(), run));
        }
        tables.extend(runs_at_beta.into_iter().map(|(_, r)| r.metrics));
    }

    print!("{}", render(&tables, common.format));
    write_outputs(&common.out, "sweep", &tables)?;
    Ok(if all_converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
