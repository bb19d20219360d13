//! The checked claims: secrecy of the handover nonce, agreement between
//! the committing new owner and the running old owner, unreachability of
//! server-confirmed transfers that a named honest device never took part
//! in, and a reachability sanity check that a full transfer can complete.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explorer::GlobalState;
use crate::protocol::{RoleKind, RolePhase, SignalEvent, SignalKind};
use crate::term::{Atom, Term};

/// How a property is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropertyKind {
    Secrecy,
    NonInjectiveAgreement,
    InjectiveAgreement,
    /// Holds when a witness state is found.
    Reachability,
    /// Holds when exhaustive exploration finds no offending state.
    Unreachability,
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PropertyKind::Secrecy => "Secrecy",
            PropertyKind::NonInjectiveAgreement => "NonInjectiveAgreement",
            PropertyKind::InjectiveAgreement => "InjectiveAgreement",
            PropertyKind::Reachability => "Reachability",
            PropertyKind::Unreachability => "Unreachability",
        })
    }
}

/// The selectable properties. Scenario files and `--property` flags use
/// the snake_case id (the serde name).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyId {
    /// The claimed handover secret stays out of the attacker's reach.
    Secrecy,
    /// Every honest commit is preceded by the matching honest run.
    Agreement,
    /// As [`PropertyId::Agreement`], and no run is claimed by two commits.
    AgreementInjective,
    /// No completed server session names an honest old owner who never ran.
    ImpersonationOldOwner,
    /// No completed server session names an honest new owner who never
    /// committed.
    ImpersonationNewOwner,
    /// Some session can actually finish end to end.
    TransferCompletes,
}

impl PropertyId {
    pub fn all() -> [PropertyId; 6] {
        [
            PropertyId::Secrecy,
            PropertyId::Agreement,
            PropertyId::AgreementInjective,
            PropertyId::ImpersonationOldOwner,
            PropertyId::ImpersonationNewOwner,
            PropertyId::TransferCompletes,
        ]
    }

    /// The stable string id used in scenario files and on the command line.
    pub fn id(self) -> &'static str {
        match self {
            PropertyId::Secrecy => "secrecy",
            PropertyId::Agreement => "agreement",
            PropertyId::AgreementInjective => "agreement_injective",
            PropertyId::ImpersonationOldOwner => "impersonation_old_owner",
            PropertyId::ImpersonationNewOwner => "impersonation_new_owner",
            PropertyId::TransferCompletes => "transfer_completes",
        }
    }

    pub fn parse(id: &str) -> Option<PropertyId> {
        PropertyId::all().into_iter().find(|p| p.id() == id)
    }

    pub fn kind(self) -> PropertyKind {
        match self {
            PropertyId::Secrecy => PropertyKind::Secrecy,
            PropertyId::Agreement => PropertyKind::NonInjectiveAgreement,
            PropertyId::AgreementInjective => PropertyKind::InjectiveAgreement,
            PropertyId::ImpersonationOldOwner | PropertyId::ImpersonationNewOwner => {
                PropertyKind::Unreachability
            }
            PropertyId::TransferCompletes => PropertyKind::Reachability,
        }
    }

    /// The headline name used in rendered reports.
    pub fn display_name(self) -> &'static str {
        match self {
            PropertyId::Secrecy => "Secrecy",
            PropertyId::Agreement => "NonInjectiveAgreement",
            PropertyId::AgreementInjective => "InjectiveAgreement",
            PropertyId::ImpersonationOldOwner => "OldOwnerImpersonationUnreachability",
            PropertyId::ImpersonationNewOwner => "NewOwnerImpersonationUnreachability",
            PropertyId::TransferCompletes => "TransferCompletesReachability",
        }
    }
}

impl fmt::Display for PropertyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// The outcome of checking one property over an exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    /// The depth bound clipped exploration before the question could be
    /// settled; no violation was found within the bound.
    InconclusiveAtBound,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Holds => "Holds",
            Verdict::Violated => "Violated",
            Verdict::InconclusiveAtBound => "InconclusiveAtBound",
        })
    }
}

/// Proof that a claimed-secret value is within the attacker's reach.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecrecyViolation {
    pub claim: SignalEvent,
    pub secret: Term,
}

/// Secrecy over one state: every secret claimed between two honest agents
/// must be underivable from the attacker's accumulated knowledge. Claims
/// involving a dishonest partner are out of scope — handing a value to the
/// attacker's own identity discloses nothing.
pub fn check_secrecy(gs: &GlobalState, honest: &BTreeSet<String>) -> Option<SecrecyViolation> {
    for ev in &gs.trace {
        if ev.kind != SignalKind::ClaimSecret {
            continue;
        }
        if !honest.contains(ev.actor.label()) || !honest.contains(ev.partner.label()) {
            continue;
        }
        for secret in &ev.payload {
            if gs.kb.can_derive(secret) {
                return Some(SecrecyViolation {
                    claim: ev.clone(),
                    secret: secret.clone(),
                });
            }
        }
    }
    None
}

/// A commit with no matching earlier run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreementViolation {
    pub commit: SignalEvent,
    /// `true` when a matching run existed but an earlier commit already
    /// claimed it — the injective flavour's failure mode.
    pub run_already_claimed: bool,
}

/// Agreement over one state's trace: every honest commit by a new owner
/// must be preceded by the old owner running with the same partner and the
/// same nonce pair. Matching is on the participants and parameters, not on
/// session numbers — sessions are bookkeeping, the nonces are the identity
/// of an exchange. With `injective`, two commits may not claim the same
/// run.
pub fn check_agreement(
    gs: &GlobalState,
    honest: &BTreeSet<String>,
    injective: bool,
) -> Option<AgreementViolation> {
    let mut claimed = vec![false; gs.trace.len()];
    for (i, ev) in gs.trace.iter().enumerate() {
        if ev.kind != SignalKind::CommitNewOwner {
            continue;
        }
        if !honest.contains(ev.actor.label()) || !honest.contains(ev.partner.label()) {
            continue;
        }
        let matches = |r: &SignalEvent| {
            r.kind == SignalKind::RunningOldOwner
                && r.actor == ev.partner
                && r.partner == ev.actor
                && r.payload == ev.payload
        };
        let found = (0..i).find(|&j| matches(&gs.trace[j]) && !(injective && claimed[j]));
        match found {
            Some(j) => claimed[j] = true,
            None => {
                let run_already_claimed = (0..i).any(|j| matches(&gs.trace[j]));
                return Some(AgreementViolation {
                    commit: ev.clone(),
                    run_already_claimed,
                });
            }
        }
    }
    None
}

/// Which end of a transfer the attacker stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpersonationCase {
    /// The server completed a transfer *from* an honest agent who never
    /// offered one.
    OldOwner,
    /// The server completed a transfer *to* an honest agent who never
    /// accepted one.
    NewOwner,
}

/// A completed server session whose claimed honest participant never
/// emitted the corresponding signal: someone else drove the transfer in
/// their name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpersonationViolation {
    pub case: ImpersonationCase,
    pub session_id: u32,
    pub impersonated: Atom,
    pub counterpart: Atom,
    /// The (old, new) nonce pair the server believes identified the
    /// exchange.
    pub nonce_pair: [Term; 2],
}

/// Judges one *quiescent* state — a state with no enabled transition, so
/// every honest device has done all it ever will. Mid-run states are not
/// meaningful here: the server finishes its script one message before the
/// new owner commits, so "completed but unconfirmed" is the normal shape
/// of an unfinished run, not an attack.
pub fn check_impersonation_state(
    gs: &GlobalState,
    honest: &BTreeSet<String>,
    case: ImpersonationCase,
) -> Option<ImpersonationViolation> {
    for rs in &gs.roles {
        if rs.role != RoleKind::Cks || rs.pc != RolePhase::Completed {
            continue;
        }
        let (Some(ida), Some(idb), Some(na), Some(nb)) = (
            rs.bindings.get("ida").and_then(Term::as_atom),
            rs.bindings.get("idb").and_then(Term::as_atom),
            rs.bindings.get("na"),
            rs.bindings.get("nb"),
        ) else {
            continue;
        };
        let (claimed_by_server, counterpart, wanted) = match case {
            ImpersonationCase::OldOwner => (ida, idb, SignalKind::RunningOldOwner),
            ImpersonationCase::NewOwner => (idb, ida, SignalKind::CommitNewOwner),
        };
        if !honest.contains(claimed_by_server.label()) {
            continue;
        }
        let expected_payload = [na.clone(), nb.clone()];
        let confirmed = gs.trace.iter().any(|ev| {
            ev.kind == wanted
                && ev.actor == *claimed_by_server
                && ev.partner == *counterpart
                && ev.payload == expected_payload
        });
        if !confirmed {
            return Some(ImpersonationViolation {
                case,
                session_id: rs.session_id,
                impersonated: claimed_by_server.clone(),
                counterpart: counterpart.clone(),
                nonce_pair: expected_payload,
            });
        }
    }
    None
}

/// Unreachability needs the whole picture: a clipped exploration can miss
/// the offending state, so asking before exhaustion is refused.
#[derive(Debug, Error, PartialEq, Eq)]
#[error(
    "bound too small: the depth limit cut off exploration before the state space was exhausted"
)]
pub struct BoundTooSmall;

/// The whole-run form of the impersonation check, over the quiescent
/// states of a *finished* exploration (`exhausted` true).
pub fn check_impersonation_unreachable<'a>(
    quiescent_states: impl IntoIterator<Item = &'a GlobalState>,
    honest: &BTreeSet<String>,
    case: ImpersonationCase,
    exhausted: bool,
) -> Result<Option<ImpersonationViolation>, BoundTooSmall> {
    if !exhausted {
        return Err(BoundTooSmall);
    }
    Ok(quiescent_states
        .into_iter()
        .find_map(|gs| check_impersonation_state(gs, honest, case)))
}

/// `true` once every role instance of some session has finished its
/// script: a complete transfer happened.
pub fn session_completed(gs: &GlobalState) -> bool {
    let mut done: BTreeMap<u32, bool> = BTreeMap::new();
    for rs in &gs.roles {
        let entry = done.entry(rs.session_id).or_insert(true);
        *entry = *entry && rs.is_completed();
    }
    done.values().any(|&all_done| all_done)
}

/// Which signal kinds exploration ever saw — a hedge against properties
/// holding vacuously because no role got far enough to claim anything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub running_seen: bool,
    pub commit_seen: bool,
    pub claim_secret_seen: bool,
}

impl Coverage {
    pub fn note(&mut self, kind: SignalKind) {
        match kind {
            SignalKind::RunningOldOwner => self.running_seen = true,
            SignalKind::CommitNewOwner => self.commit_seen = true,
            SignalKind::ClaimSecret => self.claim_secret_seen = true,
        }
    }

    /// All three signal kinds occurred somewhere in the explored space.
    pub fn complete(&self) -> bool {
        self.running_seen && self.commit_seen && self.claim_secret_seen
    }
}
