//! Report documents: one JSON shape per command, plus a text rendering
//! derived from the same data. Terms appear both pretty-printed and as
//! canonical hex bytes, so recorded counterexamples can be replayed and
//! compared byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explorer::{Counterexample, ExploreResult, Transition, TransitionKind, Witness};
use crate::honest::HonestEvent;
use crate::properties::{Coverage, PropertyId, PropertyKind, Verdict};
use crate::protocol::{RolePhase, RoleState, SignalEvent};
use crate::scenario::Scenario;
use crate::term::{Atom, AtomKind, Term, TermError};
use crate::GlobalState;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid hex in report: {0}")]
    Hex(#[from] hex::FromHexError),
    #[error("invalid term bytes in report: {0}")]
    Term(#[from] TermError),
    #[error("unknown transition kind {0:?}")]
    UnknownTransitionKind(String),
}

/// A term in both human and machine form. `hex` is the canonical byte
/// encoding; decoding it reconstructs the term exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermDto {
    pub pretty: String,
    pub hex: String,
}

impl TermDto {
    pub fn of(t: &Term) -> TermDto {
        TermDto {
            pretty: t.to_string(),
            hex: hex::encode(t.canonical_encode()),
        }
    }

    pub fn decode(&self) -> Result<Term, ReportError> {
        Ok(Term::canonical_decode(&hex::decode(&self.hex)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalDto {
    pub kind: String,
    pub actor: String,
    pub partner: String,
    pub payload: Vec<TermDto>,
    pub session_id: u32,
}

impl SignalDto {
    fn of(ev: &SignalEvent) -> SignalDto {
        SignalDto {
            kind: ev.kind.to_string(),
            actor: ev.actor.display_name(),
            partner: ev.partner.display_name(),
            payload: ev.payload.iter().map(TermDto::of).collect(),
            session_id: ev.session_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDto {
    pub role: String,
    pub agent: String,
    pub session_id: u32,
    pub phase: String,
    pub bindings: BTreeMap<String, TermDto>,
}

impl RoleDto {
    fn of(rs: &RoleState) -> RoleDto {
        RoleDto {
            role: rs.role.to_string(),
            agent: rs.agent.display_name(),
            session_id: rs.session_id,
            phase: match rs.pc {
                RolePhase::At(k) => format!("at step {k}"),
                RolePhase::Completed => "completed".to_string(),
                RolePhase::Stuck => "stuck".to_string(),
            },
            bindings: rs
                .bindings
                .iter()
                .map(|(name, value)| (name.clone(), TermDto::of(value)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDto {
    pub roles: Vec<RoleDto>,
    pub knowledge: Vec<TermDto>,
    pub trace: Vec<SignalDto>,
    pub depth: u32,
    /// Hex digest of the state's canonical encoding; replaying the path
    /// must land on a state with this exact hash.
    pub state_hash: String,
}

impl StateDto {
    pub fn of(gs: &GlobalState) -> StateDto {
        StateDto {
            roles: gs.roles.iter().map(RoleDto::of).collect(),
            knowledge: gs.kb.facts().iter().map(TermDto::of).collect(),
            trace: gs.trace.iter().map(SignalDto::of).collect(),
            depth: gs.depth,
            state_hash: hex::encode(gs.state_key()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionDto {
    /// "honest_send", "intruder_deliver", or "signal_step".
    pub kind: String,
    pub actor: String,
    pub session_id: u32,
    pub label: String,
    pub message: Option<TermDto>,
    /// One-line human rendering of the step.
    pub description: String,
}

fn kind_name(kind: TransitionKind) -> &'static str {
    match kind {
        TransitionKind::HonestSend => "honest_send",
        TransitionKind::IntruderDeliver => "intruder_deliver",
        TransitionKind::SignalStep => "signal_step",
    }
}

impl TransitionDto {
    pub fn of(tr: &Transition) -> TransitionDto {
        TransitionDto {
            kind: kind_name(tr.kind).to_string(),
            actor: tr.actor.display_name(),
            session_id: tr.session_id,
            label: tr.label.clone(),
            message: tr.message.as_ref().map(TermDto::of),
            description: tr.to_string(),
        }
    }

    pub fn to_transition(&self) -> Result<Transition, ReportError> {
        let kind = match self.kind.as_str() {
            "honest_send" => TransitionKind::HonestSend,
            "intruder_deliver" => TransitionKind::IntruderDeliver,
            "signal_step" => TransitionKind::SignalStep,
            other => return Err(ReportError::UnknownTransitionKind(other.to_string())),
        };
        Ok(Transition {
            kind,
            actor: Atom::new(AtomKind::AgentName, &self.actor),
            session_id: self.session_id,
            label: self.label.clone(),
            message: self.message.as_ref().map(TermDto::decode).transpose()?,
        })
    }
}

/// A recorded violation, self-contained enough to replay against the same
/// scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterexampleDto {
    pub violated_property: PropertyId,
    pub path: Vec<TransitionDto>,
    pub violating_state: StateDto,
}

impl CounterexampleDto {
    pub fn of(cx: &Counterexample) -> CounterexampleDto {
        CounterexampleDto {
            violated_property: cx.violated_property,
            path: cx.path.iter().map(TransitionDto::of).collect(),
            violating_state: StateDto::of(&cx.violating_state),
        }
    }

    pub fn to_path(&self) -> Result<Vec<Transition>, ReportError> {
        self.path.iter().map(TransitionDto::to_transition).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessDto {
    pub property: PropertyId,
    pub path: Vec<TransitionDto>,
    pub state: StateDto,
}

impl WitnessDto {
    pub fn of(w: &Witness) -> WitnessDto {
        WitnessDto {
            property: w.property,
            path: w.path.iter().map(TransitionDto::of).collect(),
            state: StateDto::of(&w.state),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub id: PropertyId,
    pub kind: String,
    pub display_name: String,
    pub verdict: Verdict,
    /// The attack-table view: did the attacker's goal become reachable?
    /// `false` for a held safety property, `true` for a violated one,
    /// absent when inconclusive or not applicable (reachability checks).
    pub attacker_goal_reachable: Option<bool>,
    pub counterexample: Option<CounterexampleDto>,
    pub witness: Option<WitnessDto>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationReport {
    pub states: usize,
    pub transitions: usize,
    pub max_depth_reached: u32,
    pub exhausted: bool,
    pub depth_bound_hit: bool,
    pub duration_ms: u64,
}

/// The `verify` command's output document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub command: String,
    pub scenario: ScenarioEcho,
    pub exploration: ExplorationReport,
    pub coverage: Coverage,
    pub properties: Vec<PropertyReport>,
    pub overall: Verdict,
}

/// The effective scenario (after command-line overrides), echoed so the
/// report is self-describing.
pub type ScenarioEcho = Scenario;

impl ReportDocument {
    pub fn from_result(scenario: &Scenario, result: &ExploreResult) -> ReportDocument {
        let properties: Vec<PropertyReport> = result
            .outcomes
            .iter()
            .map(|o| {
                let attacker_goal_reachable = match (o.id.kind(), o.verdict) {
                    (PropertyKind::Reachability, _) => None,
                    (_, Verdict::Violated) => Some(true),
                    (_, Verdict::Holds) => Some(false),
                    (_, Verdict::InconclusiveAtBound) => None,
                };
                PropertyReport {
                    id: o.id,
                    kind: o.id.kind().to_string(),
                    display_name: o.id.display_name().to_string(),
                    verdict: o.verdict,
                    attacker_goal_reachable,
                    counterexample: o.counterexample.as_ref().map(CounterexampleDto::of),
                    witness: o.witness.as_ref().map(WitnessDto::of),
                }
            })
            .collect();
        let overall = if properties.iter().any(|p| p.verdict == Verdict::Violated) {
            Verdict::Violated
        } else if properties
            .iter()
            .any(|p| p.verdict == Verdict::InconclusiveAtBound)
        {
            Verdict::InconclusiveAtBound
        } else {
            Verdict::Holds
        };
        ReportDocument {
            command: "verify".to_string(),
            scenario: scenario.clone(),
            exploration: ExplorationReport {
                states: result.stats.states,
                transitions: result.stats.transitions,
                max_depth_reached: result.stats.max_depth_reached,
                exhausted: result.stats.exhausted,
                depth_bound_hit: result.stats.depth_bound_hit,
                duration_ms: result.stats.duration.as_millis() as u64,
            },
            coverage: result.coverage,
            properties,
            overall,
        }
    }

    /// Process exit code for this outcome: 0 all hold, 1 any violated,
    /// 2 inconclusive at the bound.
    pub fn exit_code(&self) -> i32 {
        match self.overall {
            Verdict::Holds => 0,
            Verdict::Violated => 1,
            Verdict::InconclusiveAtBound => 2,
        }
    }

    /// The text rendering, derived from exactly the data in the JSON form.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let s = &self.scenario;
        let _ = writeln!(
            out,
            "scenario: {} agents, {} session{}, intruder {}",
            s.agents.len(),
            s.sessions.len(),
            if s.sessions.len() == 1 { "" } else { "s" },
            if s.intruder.active {
                "active"
            } else {
                "passive"
            },
        );
        let _ = writeln!(
            out,
            "bounds: max_depth {}, max_sessions {}",
            s.bounds.max_depth, s.bounds.max_sessions
        );
        let mut flags = Vec::new();
        if s.flags.ticket_weak {
            flags.push("weakened ticket".to_string());
        }
        if !s.flags.leak.is_empty() {
            flags.push(format!("leaked: {}", s.flags.leak.join(", ")));
        }
        if !flags.is_empty() {
            let _ = writeln!(out, "flags: {}", flags.join("; "));
        }
        let e = &self.exploration;
        let _ = writeln!(
            out,
            "exploration: {} states, {} transitions, max depth {}, {} ({} ms)",
            e.states,
            e.transitions,
            e.max_depth_reached,
            if e.exhausted {
                "exhausted"
            } else if e.depth_bound_hit {
                "clipped at the depth bound"
            } else {
                "stopped early"
            },
            e.duration_ms,
        );
        let c = &self.coverage;
        let mark = |seen: bool| if seen { "seen" } else { "NOT SEEN" };
        let _ = writeln!(
            out,
            "coverage: running {}, commit {}, claim-secret {}",
            mark(c.running_seen),
            mark(c.commit_seen),
            mark(c.claim_secret_seen)
        );
        let _ = writeln!(out, "properties:");
        for p in &self.properties {
            let goal = match p.attacker_goal_reachable {
                Some(true) => " — attacker goal reachable: yes",
                Some(false) => " — attacker goal reachable: no",
                None => "",
            };
            let _ = writeln!(
                out,
                "  {} ({}): {}{}",
                p.display_name, p.id, p.verdict, goal
            );
            if let Some(cx) = &p.counterexample {
                let _ = writeln!(out, "    counterexample ({} steps):", cx.path.len());
                render_path(&mut out, &cx.path);
                let _ = writeln!(
                    out,
                    "    violating state hash: {}",
                    cx.violating_state.state_hash
                );
            }
            if let Some(w) = &p.witness {
                let _ = writeln!(out, "    witness ({} steps):", w.path.len());
                render_path(&mut out, &w.path);
            }
        }
        let _ = writeln!(out, "overall: {}", self.overall);
        out
    }
}

fn render_path(out: &mut String, path: &[TransitionDto]) {
    for (i, t) in path.iter().enumerate() {
        let _ = writeln!(out, "      {:2}. {}", i + 1, t.description);
        if let Some(m) = &t.message {
            let _ = writeln!(out, "          {}", m.pretty);
        }
    }
}

/// A file handed to `replay`: either a whole verify report or a single
/// counterexample object.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ReplayInput {
    Report(ReportDocument),
    Counterexample(CounterexampleDto),
}

impl ReplayInput {
    /// Every counterexample the file carries, in report order.
    pub fn counterexamples(self) -> Vec<CounterexampleDto> {
        match self {
            ReplayInput::Report(doc) => doc
                .properties
                .into_iter()
                .filter_map(|p| p.counterexample)
                .collect(),
            ReplayInput::Counterexample(cx) => vec![cx],
        }
    }
}

/// One reference-run event in report form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HonestEventDto {
    Message {
        label: String,
        session_id: u32,
        from: String,
        to: String,
        term: TermDto,
    },
    Signal {
        kind: String,
        actor: String,
        partner: String,
        payload: Vec<TermDto>,
        session_id: u32,
    },
}

impl HonestEventDto {
    pub fn of(ev: &HonestEvent) -> HonestEventDto {
        match ev {
            HonestEvent::Message {
                label,
                session_id,
                from,
                to,
                term,
            } => HonestEventDto::Message {
                label: label.clone(),
                session_id: *session_id,
                from: from.display_name(),
                to: to.display_name(),
                term: TermDto::of(term),
            },
            HonestEvent::Signal(ev) => HonestEventDto::Signal {
                kind: ev.kind.to_string(),
                actor: ev.actor.display_name(),
                partner: ev.partner.display_name(),
                payload: ev.payload.iter().map(TermDto::of).collect(),
                session_id: ev.session_id,
            },
        }
    }
}

/// The `run-honest` command's output document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HonestRunDocument {
    pub command: String,
    pub scenario: ScenarioEcho,
    pub events: Vec<HonestEventDto>,
}

impl HonestRunDocument {
    pub fn new(scenario: &Scenario, events: &[HonestEvent]) -> HonestRunDocument {
        HonestRunDocument {
            command: "run_honest".to_string(),
            scenario: scenario.clone(),
            events: events.iter().map(HonestEventDto::of).collect(),
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, ev) in self.events.iter().enumerate() {
            match ev {
                HonestEventDto::Message {
                    label,
                    session_id,
                    from,
                    to,
                    term,
                } => {
                    let _ = writeln!(
                        out,
                        "{:2}. {label}  {from} -> {to} (session {session_id})",
                        i + 1
                    );
                    let _ = writeln!(out, "      {}", term.pretty);
                }
                HonestEventDto::Signal {
                    kind,
                    actor,
                    partner,
                    payload,
                    session_id,
                } => {
                    let args: Vec<&str> = payload.iter().map(|t| t.pretty.as_str()).collect();
                    let _ = writeln!(
                        out,
                        "{:2}. signal {kind}  {actor} with {partner} (session {session_id}): [{}]",
                        i + 1,
                        args.join(", ")
                    );
                }
            }
        }
        let _ = writeln!(out, "complete: {} events", self.events.len());
        out
    }
}
