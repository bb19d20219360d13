//! Command-line front end: verify a scenario, run its honest reference
//! execution, or replay a recorded counterexample.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use owntrans::properties::{
    check_agreement, check_impersonation_state, check_secrecy, ImpersonationCase, PropertyId,
    PropertyKind,
};
use owntrans::report::{HonestRunDocument, ReplayInput, ReportDocument};
use owntrans::scenario::{bundled, load_scenario, Scenario, BUNDLED};
use owntrans::{explore, replay, run_honest};

#[derive(Parser)]
#[command(
    name = "owntrans",
    version,
    about = "Bounded symbolic verifier for a device ownership-transfer protocol"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore the bounded state space and check the scenario's properties.
    Verify {
        /// Bundled scenario name or path to a scenario file.
        scenario: String,
        /// Override the scenario's exploration depth bound.
        #[arg(long)]
        max_depth: Option<u32>,
        /// Override the scenario's session ceiling.
        #[arg(long)]
        max_sessions: Option<u32>,
        /// Check only this property (repeatable); defaults to the
        /// scenario's own list.
        #[arg(long = "property", value_parser = parse_property)]
        properties: Vec<PropertyId>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Also write the full JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every session straight through with faithful delivery and print
    /// the event sequence.
    RunHonest {
        /// Bundled scenario name or path to a scenario file.
        scenario: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Re-execute the counterexamples recorded in a report and confirm each
    /// violation still holds at the replayed state.
    Replay {
        /// A verify report (or bare counterexample object) in JSON form.
        file: PathBuf,
        /// The scenario the report was produced from.
        scenario: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn parse_property(raw: &str) -> Result<PropertyId, String> {
    PropertyId::parse(raw).ok_or_else(|| {
        let known: Vec<&str> = PropertyId::all().iter().map(|p| p.id()).collect();
        format!("unknown property {raw:?}; known: {}", known.join(", "))
    })
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Verify {
            scenario,
            max_depth,
            max_sessions,
            properties,
            format,
            out,
        } => cmd_verify(&scenario, max_depth, max_sessions, properties, format, out),
        Command::RunHonest { scenario, format } => cmd_run_honest(&scenario, format),
        Command::Replay { file, scenario } => cmd_replay(&file, &scenario),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            3
        }
    }
}

/// A scenario argument is tried as a bundled name first, then as a path.
fn resolve_scenario(scenario_arg: &str) -> Result<Scenario> {
    if let Some(json) = bundled(scenario_arg) {
        return Ok(Scenario::from_json_str(json).expect("bundled scenarios parse"));
    }
    load_scenario(scenario_arg).with_context(|| {
        format!(
            "{scenario_arg:?} is not a bundled scenario ({}) and failed to load as a file",
            BUNDLED.join(", ")
        )
    })
}

fn cmd_verify(
    scenario_arg: &str,
    max_depth: Option<u32>,
    max_sessions: Option<u32>,
    properties: Vec<PropertyId>,
    format: Format,
    out: Option<PathBuf>,
) -> Result<i32> {
    let mut scenario = resolve_scenario(scenario_arg)?;
    if let Some(depth) = max_depth {
        scenario.bounds.max_depth = depth;
    }
    if let Some(sessions) = max_sessions {
        scenario.bounds.max_sessions = sessions;
    }
    if !properties.is_empty() {
        let mut ids: Vec<String> = Vec::new();
        for p in properties {
            if !ids.iter().any(|known| known == p.id()) {
                ids.push(p.id().to_string());
            }
        }
        scenario.properties = ids;
    }
    let sys = scenario.compile()?;
    let result = explore(&sys);
    let doc = ReportDocument::from_result(&scenario, &result);
    if let Some(path) = &out {
        let json = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, json + "\n")
            .with_context(|| format!("cannot write report to {}", path.display()))?;
    }
    match format {
        Format::Text => print!("{}", doc.render_text()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    Ok(doc.exit_code())
}

fn cmd_run_honest(scenario_arg: &str, format: Format) -> Result<i32> {
    let scenario = resolve_scenario(scenario_arg)?;
    let sys = scenario.compile()?;
    let events = run_honest(&sys)?;
    let doc = HonestRunDocument::new(&scenario, &events);
    match format {
        Format::Text => print!("{}", doc.render_text()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    Ok(0)
}

fn cmd_replay(file: &Path, scenario_arg: &str) -> Result<i32> {
    let text =
        std::fs::read_to_string(file).with_context(|| format!("cannot read {}", file.display()))?;
    let input: ReplayInput = serde_json::from_str(&text)
        .context("file is neither a verify report nor a counterexample object")?;
    let counterexamples = input.counterexamples();
    if counterexamples.is_empty() {
        bail!("the report records no counterexamples to replay");
    }
    let scenario = resolve_scenario(scenario_arg)?;
    let sys = scenario.compile()?;
    for cx in &counterexamples {
        let path = cx.to_path()?;
        let state = replay(&path, &sys)?;
        let replayed_hash = hex::encode(state.state_key());
        if replayed_hash != cx.violating_state.state_hash {
            bail!(
                "replaying the {} counterexample reached state {} but the report recorded {}",
                cx.violated_property,
                replayed_hash,
                cx.violating_state.state_hash
            );
        }
        if !violation_present(cx.violated_property, &state, &sys.honest) {
            bail!(
                "replaying the {} counterexample reached the recorded state, but the violation \
                 is not present there",
                cx.violated_property
            );
        }
        println!(
            "replayed {}: {} steps, state hash matches, violation confirmed",
            cx.violated_property,
            path.len()
        );
    }
    Ok(0)
}

/// Re-runs the relevant check against a replayed state.
fn violation_present(
    id: PropertyId,
    state: &owntrans::GlobalState,
    honest: &BTreeSet<String>,
) -> bool {
    match id {
        PropertyId::Secrecy => check_secrecy(state, honest).is_some(),
        PropertyId::Agreement => check_agreement(state, honest, false).is_some(),
        PropertyId::AgreementInjective => check_agreement(state, honest, true).is_some(),
        PropertyId::ImpersonationOldOwner => {
            check_impersonation_state(state, honest, ImpersonationCase::OldOwner).is_some()
        }
        PropertyId::ImpersonationNewOwner => {
            check_impersonation_state(state, honest, ImpersonationCase::NewOwner).is_some()
        }
        // Reachability findings are witnesses, not counterexamples; a
        // report never records one here.
        PropertyId::TransferCompletes => id.kind() != PropertyKind::Reachability,
    }
}
