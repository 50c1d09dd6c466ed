//! The `lazyprune` command line: model generation, single runs, policy
//! benchmarks, layer/fraction sweeps, attention profiling and invariant
//! verification. Exit codes: 0 success, 1 usage or configuration, 2 runtime
//! invariant violation, 3 I/O or weight-file format.

pub mod args;
mod commands;
pub mod io;

use std::ffi::OsString;

use clap::Parser;
use lazyprune::{Policy, PruningSchedule};
use thiserror::Error;

use args::{Cli, Command, PolicyArgs, PolicyKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invariant(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<lazyprune::Error> for CliError {
    fn from(e: lazyprune::Error) -> Self {
        use lazyprune::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Input(_) => CliError::Usage(msg),
            E::Io(_) | E::Format(_) => CliError::Io(msg),
            E::Shape(_) | E::DegenerateRow { .. } | E::Invariant(_) | E::MissingKv { .. } | E::MissingAux { .. } => {
                CliError::Invariant(msg)
            }
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenModel(a) => commands::gen_model(&a),
        Command::Run(a) => commands::run(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Profile(a) => commands::profile(&a),
        Command::Verify(a) => commands::verify(&a),
    }
}

/// Builds the policy from flags, rejecting flags that belong to another
/// policy.
pub fn policy_from_args(a: &PolicyArgs) -> Result<Policy, CliError> {
    let stray = |flag: &str, set: bool| -> Result<(), CliError> {
        if set {
            Err(CliError::Usage(format!("--{flag} does not apply to --policy {:?}", a.policy).to_lowercase()))
        } else {
            Ok(())
        }
    };
    let missing = |flag: &str| CliError::Usage(format!("--policy {:?} requires --{flag}", a.policy).to_lowercase());
    let statics = a.static_layer.is_some() || a.static_fraction.is_some();
    match a.policy {
        PolicyKind::Baseline => {
            stray("schedule", a.schedule.is_some())?;
            stray("drop-ratio", a.drop_ratio.is_some())?;
            stray("static-layer/--static-fraction", statics)?;
            Ok(Policy::Baseline)
        }
        PolicyKind::Lazy => {
            stray("drop-ratio", a.drop_ratio.is_some())?;
            stray("static-layer/--static-fraction", statics)?;
            let schedule: PruningSchedule = a.schedule.as_deref().ok_or_else(|| missing("schedule"))?.parse()?;
            Ok(Policy::lazy(schedule))
        }
        PolicyKind::Random => {
            stray("schedule", a.schedule.is_some())?;
            stray("static-layer/--static-fraction", statics)?;
            Ok(Policy::Random {
                drop_ratio: a.drop_ratio.ok_or_else(|| missing("drop-ratio"))?,
                seed: a.seed,
            })
        }
        PolicyKind::Static => {
            stray("schedule", a.schedule.is_some())?;
            stray("drop-ratio", a.drop_ratio.is_some())?;
            Ok(Policy::Static {
                after_layer: a.static_layer.ok_or_else(|| missing("static-layer"))?,
                keep_fraction: a.static_fraction.ok_or_else(|| missing("static-fraction"))?,
            })
        }
    }
}

/// `baseline`, `lazy:<schedule>`, `random:<drop>[:<seed>]` or
/// `static:<layer>:<fraction>`.
pub fn parse_policy_spec(spec: &str) -> Result<Policy, CliError> {
    let bad = || CliError::Usage(format!("bad policy spec {spec:?}"));
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match name.trim() {
        "baseline" if rest.is_empty() => Ok(Policy::Baseline),
        "lazy" => Ok(Policy::lazy(rest.parse()?)),
        "random" => {
            let (drop, seed) = rest.split_once(':').unwrap_or((rest, "0"));
            Ok(Policy::Random {
                drop_ratio: drop.trim().parse().map_err(|_| bad())?,
                seed: seed.trim().parse().map_err(|_| bad())?,
            })
        }
        "static" => {
            let (layer, frac) = rest.split_once(':').ok_or_else(bad)?;
            Ok(Policy::Static {
                after_layer: layer.trim().parse().map_err(|_| bad())?,
                keep_fraction: frac.trim().parse().map_err(|_| bad())?,
            })
        }
        _ => Err(bad()),
    }
}

/// `step@layer=tok,tok,...`
pub fn parse_force_keep(spec: &str) -> Result<(usize, usize, Vec<usize>), CliError> {
    let bad = || CliError::Usage(format!("bad --force-keep {spec:?}; expected step@layer=tok,tok,..."));
    let (at, tokens) = spec.split_once('=').ok_or_else(bad)?;
    let (step, layer) = at.split_once('@').ok_or_else(bad)?;
    let tokens = tokens
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    Ok((
        step.trim().parse().map_err(|_| bad())?,
        layer.trim().parse().map_err(|_| bad())?,
        tokens,
    ))
}
