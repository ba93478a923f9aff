//! `thermoops` command-line front end.
//!
//! Exit codes: 0 on success, 1 when the computation itself fails (an
//! infeasible conversion, a violated condition), 2 on usage errors
//! (bad flags, unreadable or malformed input files).

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use rayon::prelude::*;
use serde_json::{json, Value};

use thermoops::catcoherence::{default_truncation, hadamard_demo, hadamard_setup, implementation_error, make_resource};
use thermoops::channels::{check_covariant, check_gibbs_preserving, default_time_samples, pinching, Channel, ThermalOperationSpec};
use thermoops::classical::{
    build_classical_target, gibbs_stochastic_feasible, stochastic_residual, thermo_violation, ClassicalState,
    WindowPolicy, DEFAULT_SEARCH_RADIUS,
};
use thermoops::modes::{coherent_modes, independent_basis, IntegerBasis, DEFAULT_MAG_THRESHOLD};
use thermoops::protocol::{run_catalytic, run_marginal_conversion, ProtocolConfig};
use thermoops::qstate::io::HamiltonianJson;
use thermoops::qstate::{gibbs_state_of, DensityOperator, EnergyVector};
use thermoops::randomwalk::{default_horizon, hitting_bound, simulate_hitting, WalkSpec};
use thermoops::Error;

use report::{emit_report, Format};

#[derive(Parser)]
#[command(
    name = "thermoops",
    version,
    about = "Desk-scale simulation of thermal operations with coherent resources"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output format; CSV flattens the report into rows.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Coherent modes of a state.
    Modes {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAG_THRESHOLD)]
        threshold: f64,
        /// Also reduce the modes to an integer-independent basis.
        #[arg(long)]
        basis: bool,
    },
    /// Thermal operations and pinching.
    #[command(subcommand)]
    Channel(ChannelCmd),
    /// Thermomajorization, Gibbs-stochastic maps and classical targets.
    #[command(subcommand)]
    Classical(ClassicalCmd),
    /// Catalytic coherence on a ladder resource.
    #[command(subcommand)]
    Catcoh(CatcohCmd),
    /// The resource drift walk.
    #[command(subcommand)]
    Walk(WalkCmd),
    /// The marginal conversion protocol and its catalyst.
    #[command(subcommand)]
    Protocol(ProtocolCmd),
}

#[derive(Subcommand)]
enum ChannelCmd {
    /// Apply a thermal operation to a state.
    Apply {
        #[arg(long)]
        channel: PathBuf,
        #[arg(long)]
        state: PathBuf,
    },
    /// Energy conservation, Gibbs preservation and covariance of a thermal operation.
    Check {
        #[arg(long)]
        channel: PathBuf,
        /// Hamiltonian of the input system.
        #[arg(long)]
        system: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Pinch a state in its energy eigenbasis.
    Pinch {
        #[arg(long)]
        state: PathBuf,
    },
}

#[derive(Subcommand)]
enum ClassicalCmd {
    /// Is there a Gibbs-stochastic map taking p to q? Exits 1 if not.
    Feasible {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        beta: f64,
    },
    /// Classical stand-in for a target state and its rotation data.
    Target(TargetArgs),
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value_t = 1)]
    mu: usize,
    /// Take the ladders from the coherent modes of this state.
    #[arg(long, conflicts_with = "ladder")]
    source: Option<PathBuf>,
    /// Ladder spacing, e.g. `1` or `[1, 1/2]`; repeatable.
    #[arg(long)]
    ladder: Vec<String>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Strict)]
    policy: PolicyArg,
    #[arg(long, default_value_t = DEFAULT_SEARCH_RADIUS)]
    radius: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Strict,
    Relaxed,
}

impl From<PolicyArg> for WindowPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Strict => WindowPolicy::Strict,
            PolicyArg::Relaxed => WindowPolicy::Relaxed,
        }
    }
}

#[derive(Subcommand)]
enum CatcohCmd {
    /// Hadamard on a qubit with a single-ladder resource, reused nu times.
    DemoHadamard {
        #[arg(long = "L", default_value_t = 128)]
        width: usize,
        #[arg(long = "M", default_value_t = 40)]
        offset: usize,
        #[arg(long, default_value_t = 20)]
        nu: usize,
    },
    /// Hadamard probe error for several widths; one row per L.
    Sweep {
        #[arg(long = "L", value_delimiter = ',', default_values_t = [8usize, 32, 128])]
        widths: Vec<usize>,
        #[arg(long = "M", default_value_t = 40)]
        offset: usize,
    },
}

#[derive(Subcommand)]
enum WalkCmd {
    /// Root gamma and the hitting bound.
    Bound {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Monte Carlo hitting estimate.
    Sim {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        horizon: Option<u64>,
    },
}

#[derive(Subcommand)]
enum ProtocolCmd {
    /// Steps (1)-(4) on rho^(mu nu).
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Conversion, catalyst construction and one catalytic step.
    Catalyst {
        #[arg(long)]
        config: PathBuf,
    },
}

/// What a command produced: the JSON report, an optional table for CSV
/// output, and whether the run counts as a success.
struct Report {
    json: Value,
    table: Option<Value>,
    success: bool,
}

/// Why a command failed, and so which exit code it gets.
enum Failure {
    Usage(String),
    Domain(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Argument(_) | Error::InvalidState(_) | Error::Json(_) | Error::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<Report, Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(x: &T) -> std::result::Result<Value, Failure> {
    serde_json::to_value(x).map_err(|e| Failure::Domain(e.to_string()))
}

fn ok(json: Value) -> Outcome {
    Ok(Report { json, table: None, success: true })
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Modes { state, threshold, basis } => {
            let rho: DensityOperator = read_json(state)?;
            let modes = coherent_modes(&rho, *threshold);
            let mut v = to_value(&modes)?;
            if *basis {
                let b = independent_basis(&modes.to_vec(), rho.basis());
                v["basis"] = to_value(&b)?["elements"].take();
            }
            ok(v)
        }
        Command::Channel(c) => channel(c),
        Command::Classical(c) => classical(c),
        Command::Catcoh(c) => catcoh(c),
        Command::Walk(c) => walk(c),
        Command::Protocol(c) => protocol(c),
    }
}

fn channel(cmd: &ChannelCmd) -> Outcome {
    match cmd {
        ChannelCmd::Apply { channel, state } => {
            let spec: ThermalOperationSpec = read_json(channel)?;
            let rho: DensityOperator = read_json(state)?;
            let op = spec.bind(rho.basis(), rho.subsystems())?;
            ok(to_value(&op.apply(&rho)?)?)
        }
        ChannelCmd::Check { channel, system, samples } => {
            let spec: ThermalOperationSpec = read_json(channel)?;
            let h: HamiltonianJson = read_json(system)?;
            let (basis, subs) = h.to_subsystems()?;
            let op = spec.bind(&basis, &subs)?;
            let gibbs = check_gibbs_preserving(&op, &basis, &subs, op.beta())?;
            let energies = gibbs_state_of(basis.clone(), subs.clone(), op.beta())?.numeric_energies();
            let ts = default_time_samples(&energies, *samples);
            let cov = check_covariant(&op, &basis, &subs, &ts)?;
            ok(json!({
                "energy_residual": op.residual(),
                "gibbs_preserving": gibbs,
                "covariance": cov,
            }))
        }
        ChannelCmd::Pinch { state } => {
            let rho: DensityOperator = read_json(state)?;
            ok(to_value(&pinching(&rho))?)
        }
    }
}

fn classical(cmd: &ClassicalCmd) -> Outcome {
    match cmd {
        ClassicalCmd::Feasible { p, q, beta } => {
            let p: ClassicalState = read_json(p)?;
            let q: ClassicalState = read_json(q)?;
            let map = gibbs_stochastic_feasible(&p, &q, *beta)?;
            let violation = thermo_violation(&p, &q, *beta)?;
            let g = p.gibbs_weights(*beta)?;
            let residual = map.as_ref().map(|t| stochastic_residual(t, &g, p.probs(), q.probs()));
            let rows: Option<Vec<Vec<f64>>> = map
                .as_ref()
                .map(|t| (0..t.nrows()).map(|i| t.row(i).iter().copied().collect()).collect());
            let feasible = map.is_some();
            Ok(Report {
                json: json!({
                    "feasible": feasible,
                    "thermomajorizes": violation.is_none(),
                    "violation": violation,
                    "residual": residual,
                    "map": rows,
                }),
                table: None,
                success: feasible,
            })
        }
        ClassicalCmd::Target(a) => {
            let rho_p: DensityOperator = read_json(&a.state)?;
            let ladders = match &a.source {
                Some(src) => {
                    let rho: DensityOperator = read_json(src)?;
                    independent_basis(&coherent_modes(&rho, DEFAULT_MAG_THRESHOLD).to_vec(), rho.basis())
                }
                None => {
                    let elems = a
                        .ladder
                        .iter()
                        .map(|s| EnergyVector::parse_display(s))
                        .collect::<thermoops::Result<Vec<_>>>()?;
                    IntegerBasis::new(elems)
                        .ok_or_else(|| Failure::Usage("ladder spacings are not independent".into()))?
                }
            };
            let (plan, cl) = build_classical_target(&rho_p, a.mu, &ladders, a.policy.into(), a.radius)?;
            ok(json!({ "plan": to_value(&plan)?, "classical": to_value(&cl)? }))
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    #[serde(rename = "L")]
    width: usize,
    #[serde(rename = "M")]
    offset: usize,
    probe_error: f64,
}

fn catcoh(cmd: &CatcohCmd) -> Outcome {
    match cmd {
        CatcohCmd::DemoHadamard { width, offset, nu } => {
            let rep = hadamard_demo(*width, *offset, *nu)?;
            let steps: Vec<Value> = (0..rep.nu)
                .map(|k| {
                    json!({
                        "step": k + 1,
                        "error": rep.step_errors[k],
                        "boundary_mass": rep.boundary_mass[k],
                        "resource_energy": rep.resource_energy[k],
                    })
                })
                .collect();
            Ok(Report { json: to_value(&rep)?, table: Some(Value::Array(steps)), success: true })
        }
        CatcohCmd::Sweep { widths, offset } => {
            // Configurations run in parallel; `collect` keeps the input order.
            let rows = widths
                .par_iter()
                .map(|&w| {
                    let t = default_truncation(w, *offset, 1, 1);
                    let u = hadamard_setup(t)?;
                    let res = make_resource(w, *offset, &EnergyVector::from_ints(&[1]), t, u.basis())?;
                    Ok(SweepRow { width: w, offset: *offset, probe_error: implementation_error(&u, &res)? })
                })
                .collect::<thermoops::Result<Vec<_>>>()?;
            let v = to_value(&rows)?;
            Ok(Report { json: v.clone(), table: Some(v), success: true })
        }
    }
}

fn walk(cmd: &WalkCmd) -> Outcome {
    match cmd {
        WalkCmd::Bound { spec } => {
            let s: WalkSpec = read_json(spec)?;
            let b = hitting_bound(&s)?;
            ok(json!({
                "gamma": b.gamma,
                "bound": b.bound,
                "loose": b.loose,
                "residual": b.residual,
                "drift": s.drift(),
                "xi": s.xi(),
            }))
        }
        WalkCmd::Sim { spec, n, seed, horizon } => {
            let s: WalkSpec = read_json(spec)?;
            let b = hitting_bound(&s)?;
            let h = match horizon {
                Some(h) => *h,
                None => default_horizon(&s)?,
            };
            let r = simulate_hitting(&s, *n, h, *seed)?;
            ok(json!({
                "gamma": b.gamma,
                "bound": b.bound,
                "estimate": r.estimate,
                "stderr": r.stderr,
                "escaped_mass": r.escaped_mass,
                "tail_bound": r.tail_bound,
                "trajectories": r.trajectories,
                "horizon": r.horizon,
                "seed": r.seed,
            }))
        }
    }
}

fn protocol(cmd: &ProtocolCmd) -> Outcome {
    match cmd {
        ProtocolCmd::Run { config } => {
            let cfg: ProtocolConfig = read_json(config)?;
            let (_, rep) = run_marginal_conversion(&cfg)?;
            ok(to_value(&rep)?)
        }
        ProtocolCmd::Catalyst { config } => {
            let cfg: ProtocolConfig = read_json(config)?;
            let (conv, cat) = run_catalytic(&cfg)?;
            ok(json!({ "conversion": to_value(&conv)?, "catalyst": to_value(&cat)? }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            let value = match cli.format {
                Format::Json => &report.json,
                Format::Csv => report.table.as_ref().unwrap_or(&report.json),
            };
            if let Err(e) = emit_report(value, cli.format, cli.out.as_deref()) {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            if report.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
