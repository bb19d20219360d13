//! Scenario files: which agents exist, who is honest, which transfer
//! sessions run, what the intruder starts out knowing, and which properties
//! to check. A parsed [`Scenario`] compiles into a ready-to-run [`System`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dolev_yao::IntruderProfile;
use crate::properties::{PropertyId, PropertyKind};
use crate::protocol::{cks_agent, ProtocolCtx, RoleKind, RoleState};
use crate::term::{Atom, AtomKind, Bindings, Term};

/// One declared identity. A dishonest agent is folded into the intruder:
/// it gets no role instances of its own, and its standing nonce exists for
/// the intruder to use if the scenario grants it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDecl {
    pub name: String,
    pub honest: bool,
}

/// One ownership transfer to attempt: `old_owner` hands a device to
/// `new_owner`. Sessions are numbered from 1 in list order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionDecl {
    pub old_owner: String,
    pub new_owner: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntruderDecl {
    /// Active attackers synthesize fresh messages from what they can
    /// derive; passive ones only replay whole overheard terms.
    pub active: bool,
    /// Display names ("A", "P_CKS", "N_I", ...) of atoms the intruder
    /// starts out knowing.
    #[serde(default)]
    pub initial_knowledge: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    /// Maximum number of transitions along any explored path.
    pub max_depth: u32,
    /// Hard cap on how many sessions a scenario may declare.
    pub max_sessions: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    /// Issue confirmation tickets without the session nonces — the
    /// weakened variant that opens the protocol to cross-session replay.
    #[serde(default)]
    pub ticket_weak: bool,
    /// Atoms (by display name) handed to the intruder on top of its
    /// declared knowledge: a modelled compromise such as a stolen password
    /// or an extracted server key.
    #[serde(default)]
    pub leak: Vec<String>,
}

/// The on-disk shape of a verification scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub agents: Vec<AgentDecl>,
    pub sessions: Vec<SessionDecl>,
    pub intruder: IntruderDecl,
    pub bounds: Bounds,
    #[serde(default)]
    pub flags: Flags,
    /// Property ids to check; see [`PropertyId`] for the vocabulary.
    pub properties: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    /// serde's message already names the offending field and carries the
    /// line and column.
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario invariant {invariant:?} violated: {detail}")]
    Invalid {
        invariant: &'static str,
        detail: String,
    },
}

fn invalid(invariant: &'static str, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        invariant,
        detail: detail.into(),
    }
}

/// Names of the scenarios shipped inside the binary, usable anywhere a
/// scenario path is expected.
pub const BUNDLED: [&str; 5] = [
    "base",
    "weak_ticket",
    "compromised_cks",
    "leaked_password",
    "two_sessions",
];

/// The raw JSON of a bundled scenario, if `name` is one.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "base" => Some(include_str!("../scenarios/base.scenario.json")),
        "weak_ticket" => Some(include_str!("../scenarios/weak_ticket.scenario.json")),
        "compromised_cks" => Some(include_str!("../scenarios/compromised_cks.scenario.json")),
        "leaked_password" => Some(include_str!("../scenarios/leaked_password.scenario.json")),
        "two_sessions" => Some(include_str!("../scenarios/two_sessions.scenario.json")),
        _ => None,
    }
}

/// Reads and parses a scenario file. Validation happens at
/// [`Scenario::compile`], so a loaded scenario can still be adjusted (for
/// example from command-line overrides) before being checked.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_json_str(&text)
}

/// A scenario compiled into concrete machinery: role instances with their
/// initial device knowledge, the server's password registry, the atom
/// universe typed synthesis draws from, and the resolved intruder profile.
#[derive(Debug, Clone)]
pub struct System {
    /// The validated scenario this system was compiled from, echoed into
    /// reports.
    pub scenario: Scenario,
    pub ctx: ProtocolCtx,
    /// Every atom that exists in this world.
    pub universe: BTreeSet<Atom>,
    pub intruder: IntruderProfile,
    /// Names of honestly-run agents, the server included.
    pub honest: BTreeSet<String>,
    /// All role instances at their first step, ordered by session and
    /// role rank.
    pub initial_roles: Vec<RoleState>,
    pub max_depth: u32,
    pub properties: Vec<PropertyId>,
    /// Worker threads for exploration; `None` defers to the
    /// `OWNTRANS_THREADS` environment variable, then to one per core.
    pub threads: Option<usize>,
}

/// The nonce an agent brings to one session. Honest agents draw a fresh
/// one per session; a dishonest agent has a single standing nonce, since
/// freshness is a discipline only honest devices follow.
fn session_nonce(agent: &str, honest: bool, session: u32) -> Atom {
    if honest && session > 1 {
        Atom::new(AtomKind::Nonce, format!("N_{agent}{session}"))
    } else {
        Atom::new(AtomKind::Nonce, format!("N_{agent}"))
    }
}

/// Per-session label for server-generated material: bare in session 1,
/// numbered afterwards ("OTCpayload", "OTCpayload2", ...).
fn serial(base: &str, session: u32) -> String {
    if session == 1 {
        base.to_string()
    } else {
        format!("{base}{session}")
    }
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Scenario, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Validates every scenario invariant and builds the [`System`].
    pub fn compile(&self) -> Result<System, ScenarioError> {
        let mut seen = BTreeSet::new();
        for a in &self.agents {
            if a.name.is_empty() {
                return Err(invalid(
                    "agent names are non-empty",
                    "an agent is declared with an empty name",
                ));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(invalid(
                    "agent names are unique",
                    format!("{:?} is declared twice", a.name),
                ));
            }
        }
        let cks_count = self.agents.iter().filter(|a| a.name == "CKS").count();
        if cks_count != 1 {
            return Err(invalid(
                "exactly one CKS",
                format!("found {cks_count} agents named \"CKS\""),
            ));
        }
        if !self.agents.iter().any(|a| a.name == "CKS" && a.honest) {
            return Err(invalid(
                "the key server is honest",
                "agent \"CKS\" is declared dishonest",
            ));
        }

        let honesty: BTreeMap<&str, bool> = self
            .agents
            .iter()
            .map(|a| (a.name.as_str(), a.honest))
            .collect();
        let honest: BTreeSet<String> = self
            .agents
            .iter()
            .filter(|a| a.honest)
            .map(|a| a.name.clone())
            .collect();

        if self.bounds.max_depth == 0 {
            return Err(invalid(
                "bounds are positive",
                "max_depth must be at least 1",
            ));
        }
        if self.bounds.max_sessions == 0 {
            return Err(invalid(
                "bounds are positive",
                "max_sessions must be at least 1",
            ));
        }
        if self.sessions.is_empty() {
            return Err(invalid(
                "at least one session",
                "the sessions list is empty",
            ));
        }
        if self.sessions.len() as u64 > u64::from(self.bounds.max_sessions) {
            return Err(invalid(
                "session count within max_sessions",
                format!(
                    "{} sessions declared, max_sessions is {}",
                    self.sessions.len(),
                    self.bounds.max_sessions
                ),
            ));
        }
        for (i, s) in self.sessions.iter().enumerate() {
            for name in [&s.old_owner, &s.new_owner] {
                if !honesty.contains_key(name.as_str()) {
                    return Err(invalid(
                        "session participants are declared agents",
                        format!("sessions[{i}] references undeclared agent {name:?}"),
                    ));
                }
                if name == "CKS" {
                    return Err(invalid(
                        "the key server owns no devices",
                        format!("sessions[{i}] lists \"CKS\" as a participant"),
                    ));
                }
            }
            if s.old_owner == s.new_owner {
                return Err(invalid(
                    "session endpoints are distinct",
                    format!("sessions[{i}] transfers from {:?} to itself", s.old_owner),
                ));
            }
        }

        if self.properties.is_empty() {
            return Err(invalid(
                "at least one property",
                "the properties list is empty",
            ));
        }
        let mut properties = Vec::new();
        for id in &self.properties {
            let Some(p) = PropertyId::parse(id) else {
                let known: Vec<&str> = PropertyId::all().iter().map(|p| p.id()).collect();
                return Err(invalid(
                    "known property ids",
                    format!("{id:?} is not a property; known ids: {}", known.join(", ")),
                ));
            };
            if properties.contains(&p) {
                return Err(invalid(
                    "no duplicate properties",
                    format!("{id:?} appears twice"),
                ));
            }
            properties.push(p);
        }
        if properties
            .iter()
            .any(|p| p.kind() == PropertyKind::Unreachability)
            && honest.len() == self.agents.len()
        {
            return Err(invalid(
                "impersonation needs a dishonest agent",
                "an unreachability property is selected but every agent is honest",
            ));
        }

        let mut universe: BTreeSet<Atom> = BTreeSet::new();
        for a in &self.agents {
            universe.insert(Atom::new(AtomKind::AgentName, &a.name));
            if a.name != "CKS" {
                universe.insert(Atom::new(AtomKind::Password, format!("PW_{}", a.name)));
            }
            if !a.honest {
                universe.insert(Atom::new(AtomKind::Nonce, format!("N_{}", a.name)));
            }
        }
        universe.insert(Atom::new(AtomKind::PublicKey, "CKS"));
        universe.insert(Atom::new(AtomKind::PrivateKey, "CKS"));
        universe.insert(Atom::new(AtomKind::Constant, "Ack"));
        for (i, s) in self.sessions.iter().enumerate() {
            let k = i as u32 + 1;
            universe.insert(session_nonce(
                &s.old_owner,
                honesty[s.old_owner.as_str()],
                k,
            ));
            universe.insert(session_nonce(
                &s.new_owner,
                honesty[s.new_owner.as_str()],
                k,
            ));
            universe.insert(Atom::new(AtomKind::Constant, serial("OTCpayload", k)));
            universe.insert(Atom::new(AtomKind::Constant, serial("TempID", k)));
        }

        let by_display: BTreeMap<String, Atom> = universe
            .iter()
            .map(|a| (a.display_name(), a.clone()))
            .collect();
        let mut initial_knowledge = BTreeSet::new();
        for (field, list) in [
            (
                "intruder.initial_knowledge",
                &self.intruder.initial_knowledge,
            ),
            ("flags.leak", &self.flags.leak),
        ] {
            for label in list {
                let Some(atom) = by_display.get(label) else {
                    return Err(invalid(
                        "knowledge labels name existing atoms",
                        format!("{field} lists {label:?}, which names nothing in this scenario"),
                    ));
                };
                initial_knowledge.insert(Term::Atom(atom.clone()));
            }
        }
        let intruder = IntruderProfile {
            initial_knowledge,
            active: self.intruder.active,
        };

        let passwords: BTreeMap<String, Term> = self
            .agents
            .iter()
            .filter(|a| a.name != "CKS")
            .map(|a| {
                (
                    a.name.clone(),
                    Term::atom(AtomKind::Password, format!("PW_{}", a.name)),
                )
            })
            .collect();
        let ctx = ProtocolCtx {
            passwords,
            ticket_weak: self.flags.ticket_weak,
        };

        let mut initial_roles = Vec::new();
        for (i, s) in self.sessions.iter().enumerate() {
            let k = i as u32 + 1;
            let old_honest = honesty[s.old_owner.as_str()];
            let new_honest = honesty[s.new_owner.as_str()];
            let ida = Term::atom(AtomKind::AgentName, &s.old_owner);
            let idb = Term::atom(AtomKind::AgentName, &s.new_owner);
            let na = Term::Atom(session_nonce(&s.old_owner, old_honest, k));
            let nb = Term::Atom(session_nonce(&s.new_owner, new_honest, k));
            if old_honest {
                let mut b = Bindings::new();
                b.insert("ida", ida.clone());
                b.insert("idb", idb.clone());
                b.insert(
                    "pw",
                    Term::atom(AtomKind::Password, format!("PW_{}", s.old_owner)),
                );
                b.insert("na", na.clone());
                b.insert("nb", nb.clone());
                initial_roles.push(RoleState::new(
                    RoleKind::OldOwner,
                    Atom::new(AtomKind::AgentName, &s.old_owner),
                    k,
                    new_honest,
                    b,
                ));
            }
            if new_honest {
                // The incoming owner's device is at the same table as the
                // outgoing one: it knows both session nonces from the start.
                let mut b = Bindings::new();
                b.insert("ida", ida.clone());
                b.insert("idb", idb.clone());
                b.insert("na", na.clone());
                b.insert("nb", nb.clone());
                initial_roles.push(RoleState::new(
                    RoleKind::NewOwner,
                    Atom::new(AtomKind::AgentName, &s.new_owner),
                    k,
                    old_honest,
                    b,
                ));
            }
            let mut b = Bindings::new();
            b.insert(
                "otc",
                Term::atom(AtomKind::Constant, serial("OTCpayload", k)),
            );
            b.insert(
                "tempid",
                Term::atom(AtomKind::Constant, serial("TempID", k)),
            );
            initial_roles.push(RoleState::new(RoleKind::Cks, cks_agent(), k, true, b));
        }
        initial_roles.sort_by_key(|r| (r.session_id, r.role.rank()));

        Ok(System {
            scenario: self.clone(),
            ctx,
            universe,
            intruder,
            honest,
            initial_roles,
            max_depth: self.bounds.max_depth,
            properties,
            threads: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn compile_bundled(name: &str) -> System {
        Scenario::from_json_str(bundled(name).expect("bundled scenario exists"))
            .expect("bundled scenario parses")
            .compile()
            .expect("bundled scenario compiles")
    }

    #[test]
    fn every_bundled_scenario_parses_and_compiles() {
        for name in BUNDLED {
            compile_bundled(name);
        }
    }

    #[test]
    fn base_compiles_to_the_documented_setup() {
        let sys = compile_bundled("base");
        assert_eq!(
            sys.initial_roles.len(),
            3,
            "one old owner, one new owner, one server instance"
        );
        let kinds: Vec<(RoleKind, &str)> = sys
            .initial_roles
            .iter()
            .map(|r| (r.role, r.agent.label()))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (RoleKind::OldOwner, "A"),
                (RoleKind::NewOwner, "B"),
                (RoleKind::Cks, "CKS")
            ]
        );
        assert!(
            sys.initial_roles.iter().all(|r| r.partner_honest),
            "both participants are honest"
        );

        let nonce_i = Term::atom(AtomKind::Nonce, "N_I");
        let pw_a = Term::atom(AtomKind::Password, "PW_A");
        let sk = Term::atom(AtomKind::PrivateKey, "CKS");
        assert!(
            sys.intruder.initial_knowledge.contains(&nonce_i),
            "the intruder has a nonce of its own"
        );
        assert!(
            !sys.intruder.initial_knowledge.contains(&pw_a),
            "no honest password is known up front"
        );
        assert!(
            !sys.intruder.initial_knowledge.contains(&sk),
            "the server key is not known up front"
        );

        for label in ["N_A", "N_B", "N_I"] {
            assert!(
                sys.universe.contains(&Atom::new(AtomKind::Nonce, label)),
                "universe has {label}"
            );
        }
        for label in ["OTCpayload", "TempID", "Ack"] {
            assert!(
                sys.universe.contains(&Atom::new(AtomKind::Constant, label)),
                "universe has {label}"
            );
        }
        assert_eq!(sys.properties.len(), 4);
        assert!(!sys.ctx.ticket_weak);
    }

    #[test]
    fn second_session_gets_fresh_material() {
        let sys = compile_bundled("two_sessions");
        for (kind, label) in [
            (AtomKind::Nonce, "N_B2"),
            (AtomKind::Nonce, "N_A2"),
            (AtomKind::Constant, "OTCpayload2"),
            (AtomKind::Constant, "TempID2"),
        ] {
            assert!(
                sys.universe.contains(&Atom::new(kind, label)),
                "universe has the session-2 atom {label}"
            );
        }
        let cks2 = sys
            .initial_roles
            .iter()
            .find(|r| r.role == RoleKind::Cks && r.session_id == 2)
            .expect("session 2 has a server instance");
        assert_eq!(
            cks2.bindings.get("otc"),
            Some(&Term::atom(AtomKind::Constant, "OTCpayload2"))
        );
        assert_eq!(
            cks2.bindings.get("tempid"),
            Some(&Term::atom(AtomKind::Constant, "TempID2"))
        );
    }

    #[test]
    fn dishonest_participant_gets_no_role_instance() {
        let sys = compile_bundled("leaked_password");
        let kinds: Vec<RoleKind> = sys.initial_roles.iter().map(|r| r.role).collect();
        assert_eq!(
            kinds,
            vec![RoleKind::OldOwner, RoleKind::Cks],
            "the dishonest new owner runs nothing"
        );
        assert!(
            !sys.initial_roles[0].partner_honest,
            "the old owner knows its counterpart is not a device"
        );
        assert!(
            sys.intruder
                .initial_knowledge
                .contains(&Term::atom(AtomKind::Password, "PW_A")),
            "the leak hands over the password"
        );
    }

    fn base_json() -> serde_json::Value {
        serde_json::from_str(bundled("base").unwrap()).unwrap()
    }

    fn compile_err(doc: serde_json::Value) -> ScenarioError {
        match Scenario::from_json_str(&doc.to_string()) {
            Err(e) => e,
            Ok(s) => s.compile().expect_err("expected a rejection"),
        }
    }

    fn assert_invariant(err: ScenarioError, expected: &str) {
        match err {
            ScenarioError::Invalid { invariant, .. } => {
                assert_eq!(invariant, expected, "rejection names the invariant")
            }
            other => panic!("expected an invariant violation, got: {other}"),
        }
    }

    #[test]
    fn two_cks_declarations_are_rejected() {
        let mut doc = base_json();
        doc["agents"]
            .as_array_mut()
            .unwrap()
            .push(serde_json::json!({"name": "CKS", "honest": true}));
        assert_invariant(compile_err(doc), "agent names are unique");

        let mut doc = base_json();
        doc["agents"][3]["name"] = "NotCKS".into();
        assert_invariant(compile_err(doc), "exactly one CKS");
    }

    #[test]
    fn too_many_sessions_are_rejected() {
        let mut doc = base_json();
        let extra = serde_json::json!({"old_owner": "A", "new_owner": "B"});
        for _ in 0..2 {
            doc["sessions"].as_array_mut().unwrap().push(extra.clone());
        }
        assert_invariant(compile_err(doc), "session count within max_sessions");
    }

    #[test]
    fn unknown_top_level_key_is_rejected_with_position() {
        let mut doc = base_json();
        doc["extra_knob"] = serde_json::json!(true);
        let err = compile_err(doc);
        let msg = err.to_string();
        assert!(
            msg.contains("unknown field"),
            "parse error names the problem: {msg}"
        );
        assert!(
            msg.contains("line") && msg.contains("column"),
            "parse error carries a position: {msg}"
        );
    }

    #[test]
    fn unknown_property_id_is_rejected() {
        let mut doc = base_json();
        doc["properties"] = serde_json::json!(["secrecy", "liveness"]);
        let err = compile_err(doc);
        assert!(
            err.to_string().contains("liveness"),
            "rejection names the bad id: {err}"
        );
        assert_invariant(err, "known property ids");
    }

    #[test]
    fn undeclared_session_participant_is_rejected() {
        let mut doc = base_json();
        doc["sessions"][0]["new_owner"] = "Q".into();
        assert_invariant(compile_err(doc), "session participants are declared agents");
    }

    #[test]
    fn unresolvable_leak_label_is_rejected() {
        let mut doc = base_json();
        doc["flags"]["leak"] = serde_json::json!(["PW_Q"]);
        let err = compile_err(doc);
        assert!(
            err.to_string().contains("PW_Q"),
            "rejection names the label: {err}"
        );
        assert_invariant(err, "knowledge labels name existing atoms");
    }

    #[test]
    fn impersonation_without_dishonest_agent_is_rejected() {
        let mut doc = base_json();
        doc["agents"][2]["honest"] = serde_json::json!(true);
        assert_invariant(compile_err(doc), "impersonation needs a dishonest agent");
    }

    #[test]
    fn property_order_is_preserved() {
        let sys = compile_bundled("base");
        assert_eq!(
            sys.properties,
            vec![
                PropertyId::Secrecy,
                PropertyId::Agreement,
                PropertyId::ImpersonationOldOwner,
                PropertyId::ImpersonationNewOwner,
            ]
        );
    }
}
