//! The three protocol roles as deterministic step machines.
//!
//! A run of the protocol moves ownership of a device from an old owner A to
//! a new owner B through a central key server (CKS):
//!
//! ```text
//! M1  A   → CKS : {ID_A ∥ PW_A ∥ N_A ∥ OTR}_P_CKS   where OTR = {ID_A ∥ ID_B ∥ N_B}_P_CKS
//! M2  CKS → A   : Ticket = {Ack ∥ ID_A ∥ ID_B ∥ N_A ∥ N_B}_P_CKS
//! M3  B   → CKS : {ID_B ∥ Ticket ∥ N_B}_P_CKS
//! M4  CKS → B   : {OTC}_N_A
//! M5  A   → CKS : {OTC}_P_CKS
//! M6  CKS → B   : {TempID}_N_B
//! ```
//!
//! Each role is an ordered script of actions — sends, pattern-guarded
//! receives, and instrumentation signals — indexed by a program counter.
//! Scripts are *templates*: payloads and receive patterns are written over
//! binding names and instantiated against the role's current bindings, so a
//! field the role already knows becomes an equality requirement and a field
//! it doesn't becomes a hole for the matcher to fill.
//!
//! Two exchanges are device handovers, not network messages: A passes the
//! ticket to B after M2, and B passes the decrypted confirmation back to A
//! after M4. When both parties are honest the explorer propagates these
//! bindings directly; when a role's partner is dishonest the script instead
//! exposes an explicit receive so the intruder can stand in.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::term::{match_pattern, Atom, AtomKind, Bindings, Pattern, Term, TermError, VarKind};

/// The agent name of the central key server.
pub fn cks_agent() -> Atom {
    Atom::new(AtomKind::AgentName, "CKS")
}

/// The key server's public encryption key — the only public key in the
/// protocol; everything sent *to* the server is sealed under it.
pub fn cks_public_key() -> Term {
    Term::atom(AtomKind::PublicKey, "CKS")
}

/// The matching private key. Held by no role binding; it exists so
/// compromise scenarios can hand it to the intruder.
pub fn cks_private_key() -> Term {
    Term::atom(AtomKind::PrivateKey, "CKS")
}

/// The acknowledgment constant the server embeds in every ticket.
pub fn ack_constant() -> Term {
    Term::atom(AtomKind::Constant, "Ack")
}

/// Builds the server's transfer ticket: the acknowledgment, both parties,
/// and both session nonces, sealed under the server's own public key so
/// only the server can later re-check it.
pub fn make_ticket(id_a: &Term, id_b: &Term, n_a: &Term, n_b: &Term) -> Result<Term, TermError> {
    expect_kind("id_a", id_a, AtomKind::AgentName)?;
    expect_kind("id_b", id_b, AtomKind::AgentName)?;
    expect_kind("n_a", n_a, AtomKind::Nonce)?;
    expect_kind("n_b", n_b, AtomKind::Nonce)?;
    Term::aenc(
        cks_public_key(),
        Term::cat(vec![
            ack_constant(),
            id_a.clone(),
            id_b.clone(),
            n_a.clone(),
            n_b.clone(),
        ])?,
    )
}

/// The deliberately weakened ticket (scenario flag `ticket_weak`): both
/// nonces dropped, so tickets from different sessions between the same
/// parties are indistinguishable. Exists to demonstrate attack finding.
pub fn make_weak_ticket(id_a: &Term, id_b: &Term) -> Result<Term, TermError> {
    expect_kind("id_a", id_a, AtomKind::AgentName)?;
    expect_kind("id_b", id_b, AtomKind::AgentName)?;
    Term::aenc(
        cks_public_key(),
        Term::cat(vec![ack_constant(), id_a.clone(), id_b.clone()])?,
    )
}

fn expect_kind(argument: &'static str, t: &Term, kind: AtomKind) -> Result<(), TermError> {
    if t.is_atom_of(kind) {
        Ok(())
    } else {
        Err(TermError::ArgumentKind {
            argument,
            expected: kind.name(),
            actual: t.to_string(),
        })
    }
}

/// Per-scenario protocol configuration shared by every role instance.
#[derive(Debug, Clone, Default)]
pub struct ProtocolCtx {
    /// Registered password atom per agent label; the server's M1 guard
    /// checks the presented password against this registry.
    pub passwords: BTreeMap<String, Term>,
    /// Issue nonce-less tickets (the weakened protocol variant).
    pub ticket_weak: bool,
}

impl ProtocolCtx {
    pub fn password_of(&self, agent: &Atom) -> Option<&Term> {
        self.passwords.get(agent.label())
    }
}

/// Which of the three protocol programs a role instance runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoleKind {
    OldOwner,
    NewOwner,
    Cks,
}

impl RoleKind {
    /// Stable ordering rank (old owner, new owner, server) used when
    /// sorting a session's role instances.
    pub fn rank(self) -> u8 {
        match self {
            RoleKind::OldOwner => 0,
            RoleKind::NewOwner => 1,
            RoleKind::Cks => 2,
        }
    }
}

impl fmt::Display for RoleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoleKind::OldOwner => "OldOwner",
            RoleKind::NewOwner => "NewOwner",
            RoleKind::Cks => "CKS",
        })
    }
}

/// Where a role instance stands in its script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RolePhase {
    /// About to perform the script action at this index.
    At(u8),
    /// Ran the whole script; absorbing.
    Completed,
    /// Declared unable to proceed by a driver (the state machine itself
    /// never enters this phase — a failed receive is merely a disabled
    /// transition); absorbing.
    Stuck,
}

/// Instrumentation markers every property is phrased over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignalKind {
    /// Old owner claims its partner's nonce is (still) a shared secret.
    ClaimSecret,
    /// Old owner declares it is running the protocol with these parameters.
    RunningOldOwner,
    /// New owner commits to a completed transfer with these parameters.
    CommitNewOwner,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::ClaimSecret => "ClaimSecret",
            SignalKind::RunningOldOwner => "RunningOldOwner",
            SignalKind::CommitNewOwner => "CommitNewOwner",
        })
    }
}

/// One emitted instrumentation event: who signaled, about which partner,
/// with which parameters (`[N_A, N_B]` for the authentication pair,
/// `[secret]` for a secrecy claim), in which session.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignalEvent {
    pub kind: SignalKind,
    pub actor: Atom,
    pub partner: Atom,
    pub payload: Vec<Term>,
    pub session_id: u32,
}

impl SignalEvent {
    /// Stable byte encoding for state hashing; mirrors the term encoding's
    /// length-prefix discipline.
    pub fn canonical_encode_into(&self, out: &mut Vec<u8>) {
        out.push(match self.kind {
            SignalKind::ClaimSecret => 0x01,
            SignalKind::RunningOldOwner => 0x02,
            SignalKind::CommitNewOwner => 0x03,
        });
        for atom in [&self.actor, &self.partner] {
            let enc = Term::Atom(atom.clone()).canonical_encode();
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        for t in &self.payload {
            let enc = t.canonical_encode();
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
        out.extend_from_slice(&self.session_id.to_be_bytes());
    }
}

impl fmt::Display for SignalEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {}", self.kind, self.actor, self.partner)?;
        for t in &self.payload {
            write!(f, ", {t}")?;
        }
        write!(f, ") [session {}]", self.session_id)
    }
}

/// Whom a send is addressed to. Addressing is trace metadata — the intruder
/// hears every send regardless — but it keeps printed runs legible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipient {
    /// The central key server.
    Cks,
    /// The agent bound under this name at send time.
    Bound(&'static str),
}

/// A side condition on a receive, evaluated after the pattern matches,
/// over the extended bindings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Guard {
    /// The password bound under `password_var` must be the registered
    /// password of the agent bound under `agent_var`.
    PasswordMatches {
        agent_var: &'static str,
        password_var: &'static str,
    },
    /// The agents bound under the two names must differ (no self-transfer).
    DistinctAgents { a: &'static str, b: &'static str },
    /// The agent bound under `agent_var` must be an enrolled device — one
    /// with a password record. The server itself has none, so a transfer
    /// naming the server as a device is rejected here.
    EnrolledDevice { agent_var: &'static str },
}

impl Guard {
    fn holds(&self, bindings: &Bindings, ctx: &ProtocolCtx) -> bool {
        match self {
            Guard::PasswordMatches {
                agent_var,
                password_var,
            } => {
                let (Some(agent), Some(pw)) = (bindings.get(agent_var), bindings.get(password_var))
                else {
                    return false;
                };
                match agent.as_atom() {
                    Some(a) => ctx.password_of(a) == Some(pw),
                    None => false,
                }
            }
            Guard::DistinctAgents { a, b } => match (bindings.get(a), bindings.get(b)) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            },
            Guard::EnrolledDevice { agent_var } => {
                match bindings.get(agent_var).and_then(Term::as_atom) {
                    Some(a) => ctx.password_of(a).is_some(),
                    None => false,
                }
            }
        }
    }
}

/// A successful receive may propagate one binding to the same session's
/// other device — the physical handover of ticket or confirmation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handover {
    pub binding: &'static str,
    pub to_role: RoleKind,
}

/// One entry in a role's script. Payloads and patterns are templates over
/// binding names (see module docs); `label` names the protocol message or
/// event for traces and stuck diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoleAction {
    Send {
        label: &'static str,
        to: Recipient,
        payload: Pattern,
        /// Also record the sent term under this binding name (the server
        /// remembers the ticket it issued so M3 can be checked against it).
        bind_payload: Option<&'static str>,
    },
    Receive {
        label: &'static str,
        pattern: Pattern,
        /// Bind the entire incoming term, not just matched holes (a device
        /// stores the whole opaque ticket).
        bind_whole: Option<&'static str>,
        guards: Vec<Guard>,
        handover: Option<Handover>,
    },
    Signal {
        kind: SignalKind,
        /// Binding names whose values form the event payload, in order.
        payload_vars: Vec<&'static str>,
    },
    /// End-of-script marker; the program counter never rests on it (the
    /// preceding action's advance collapses straight to `Completed`).
    Done,
}

impl RoleAction {
    pub fn label(&self) -> &'static str {
        match self {
            RoleAction::Send { label, .. } => label,
            RoleAction::Receive { label, .. } => label,
            RoleAction::Signal { kind, .. } => match kind {
                SignalKind::ClaimSecret => "ClaimSecret",
                SignalKind::RunningOldOwner => "RunningOldOwner",
                SignalKind::CommitNewOwner => "CommitNewOwner",
            },
            RoleAction::Done => "Done",
        }
    }
}

fn pk() -> Pattern {
    Pattern::atom(AtomKind::PublicKey, "CKS")
}
fn ack() -> Pattern {
    Pattern::atom(AtomKind::Constant, "Ack")
}
fn v(name: &'static str, kind: AtomKind) -> Pattern {
    Pattern::var(name, VarKind::Kind(kind))
}
fn v_any(name: &'static str) -> Pattern {
    Pattern::var(name, VarKind::Any)
}

/// The ticket template over the server's binding names; instantiating it
/// with concrete bindings yields [`make_ticket`] / [`make_weak_ticket`].
fn ticket_template(weak: bool) -> Pattern {
    let fields = if weak {
        vec![
            ack(),
            v("ida", AtomKind::AgentName),
            v("idb", AtomKind::AgentName),
        ]
    } else {
        vec![
            ack(),
            v("ida", AtomKind::AgentName),
            v("idb", AtomKind::AgentName),
            v("na", AtomKind::Nonce),
            v("nb", AtomKind::Nonce),
        ]
    };
    Pattern::aenc(pk(), Pattern::cat(fields).expect("non-empty field list"))
}

/// The full action sequence for one role. `partner_honest` selects between
/// binding propagation by handover (honest partner, no script entry needed
/// on the giving side) and an explicit receive the intruder can serve
/// (dishonest or absent partner).
pub fn role_script(role: RoleKind, partner_honest: bool, ctx: &ProtocolCtx) -> Vec<RoleAction> {
    match role {
        RoleKind::OldOwner => {
            let mut script = vec![
                RoleAction::Send {
                    label: "M1",
                    to: Recipient::Cks,
                    payload: Pattern::aenc(
                        pk(),
                        Pattern::cat(vec![
                            v("ida", AtomKind::AgentName),
                            v("pw", AtomKind::Password),
                            v("na", AtomKind::Nonce),
                            Pattern::aenc(
                                pk(),
                                Pattern::cat(vec![
                                    v("ida", AtomKind::AgentName),
                                    v("idb", AtomKind::AgentName),
                                    v("nb", AtomKind::Nonce),
                                ])
                                .expect("non-empty"),
                            ),
                        ])
                        .expect("non-empty"),
                    ),
                    bind_payload: None,
                },
                RoleAction::Receive {
                    label: "M2",
                    pattern: Pattern::aenc(pk(), v_any("ticket_body")),
                    bind_whole: Some("ticket"),
                    guards: vec![],
                    handover: Some(Handover {
                        binding: "ticket",
                        to_role: RoleKind::NewOwner,
                    }),
                },
                RoleAction::Signal {
                    kind: SignalKind::RunningOldOwner,
                    payload_vars: vec!["na", "nb"],
                },
            ];
            if !partner_honest {
                // No honest new owner will hand the confirmation back;
                // accept it from whoever holds the device.
                script.push(RoleAction::Receive {
                    label: "OTC",
                    pattern: v("otc", AtomKind::Constant),
                    bind_whole: None,
                    guards: vec![],
                    handover: None,
                });
            }
            script.push(RoleAction::Send {
                label: "M5",
                to: Recipient::Cks,
                payload: Pattern::aenc(pk(), v("otc", AtomKind::Constant)),
                bind_payload: None,
            });
            script.push(RoleAction::Signal {
                kind: SignalKind::ClaimSecret,
                payload_vars: vec!["nb"],
            });
            script.push(RoleAction::Done);
            script
        }
        RoleKind::NewOwner => {
            let mut script = Vec::new();
            if !partner_honest {
                // No honest old owner will hand the ticket over; accept it
                // from whoever holds it.
                script.push(RoleAction::Receive {
                    label: "Ticket",
                    pattern: Pattern::aenc(pk(), v_any("ticket_body")),
                    bind_whole: Some("ticket"),
                    guards: vec![],
                    handover: None,
                });
            }
            script.extend([
                RoleAction::Send {
                    label: "M3",
                    to: Recipient::Cks,
                    payload: Pattern::aenc(
                        pk(),
                        Pattern::cat(vec![
                            v("idb", AtomKind::AgentName),
                            v_any("ticket"),
                            v("nb", AtomKind::Nonce),
                        ])
                        .expect("non-empty"),
                    ),
                    bind_payload: None,
                },
                RoleAction::Receive {
                    label: "M4",
                    pattern: Pattern::senc(v("na", AtomKind::Nonce), v("otc", AtomKind::Constant)),
                    bind_whole: None,
                    guards: vec![],
                    handover: Some(Handover {
                        binding: "otc",
                        to_role: RoleKind::OldOwner,
                    }),
                },
                RoleAction::Receive {
                    label: "M6",
                    pattern: Pattern::senc(
                        v("nb", AtomKind::Nonce),
                        v("tempid", AtomKind::Constant),
                    ),
                    bind_whole: None,
                    guards: vec![],
                    handover: None,
                },
                RoleAction::Signal {
                    kind: SignalKind::CommitNewOwner,
                    payload_vars: vec!["na", "nb"],
                },
                RoleAction::Done,
            ]);
            script
        }
        RoleKind::Cks => {
            // In the weak variant the ticket carries no nonces, so the
            // server cannot tie the nonce presented in M3 to the session; it
            // accepts any nonce and keys M6 with whatever was presented.
            // Bound under a fresh name because `nb` (from M1) stays bound.
            let m3_nonce = if ctx.ticket_weak {
                "nb_presented"
            } else {
                "nb"
            };
            vec![
                RoleAction::Receive {
                    label: "M1",
                    pattern: Pattern::aenc(
                        pk(),
                        Pattern::cat(vec![
                            v("ida", AtomKind::AgentName),
                            v("pw", AtomKind::Password),
                            v("na", AtomKind::Nonce),
                            Pattern::aenc(
                                pk(),
                                Pattern::cat(vec![
                                    v("ida", AtomKind::AgentName),
                                    v("idb", AtomKind::AgentName),
                                    v("nb", AtomKind::Nonce),
                                ])
                                .expect("non-empty"),
                            ),
                        ])
                        .expect("non-empty"),
                    ),
                    bind_whole: None,
                    guards: vec![
                        Guard::PasswordMatches {
                            agent_var: "ida",
                            password_var: "pw",
                        },
                        Guard::EnrolledDevice { agent_var: "idb" },
                        Guard::DistinctAgents { a: "ida", b: "idb" },
                    ],
                    handover: None,
                },
                RoleAction::Send {
                    label: "M2",
                    to: Recipient::Bound("ida"),
                    payload: ticket_template(ctx.ticket_weak),
                    bind_payload: Some("ticket"),
                },
                RoleAction::Receive {
                    label: "M3",
                    pattern: Pattern::aenc(
                        pk(),
                        Pattern::cat(vec![
                            v("idb", AtomKind::AgentName),
                            v_any("ticket"),
                            v(m3_nonce, AtomKind::Nonce),
                        ])
                        .expect("non-empty"),
                    ),
                    bind_whole: None,
                    guards: vec![],
                    handover: None,
                },
                RoleAction::Send {
                    label: "M4",
                    to: Recipient::Bound("idb"),
                    payload: Pattern::senc(v("na", AtomKind::Nonce), v("otc", AtomKind::Constant)),
                    bind_payload: None,
                },
                RoleAction::Receive {
                    label: "M5",
                    pattern: Pattern::aenc(pk(), v("otc", AtomKind::Constant)),
                    bind_whole: None,
                    guards: vec![],
                    handover: None,
                },
                RoleAction::Send {
                    label: "M6",
                    to: Recipient::Bound("idb"),
                    payload: Pattern::senc(
                        v(m3_nonce, AtomKind::Nonce),
                        v("tempid", AtomKind::Constant),
                    ),
                    bind_payload: None,
                },
                RoleAction::Done,
            ]
        }
    }
}

/// One protocol participant in one session: its program, position, and
/// what it has learned so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleState {
    pub role: RoleKind,
    pub agent: Atom,
    pub session_id: u32,
    /// Whether the same session's counterpart device is honestly run;
    /// selects the script variant (handover vs. explicit receive).
    pub partner_honest: bool,
    pub pc: RolePhase,
    pub bindings: Bindings,
}

impl RoleState {
    pub fn new(
        role: RoleKind,
        agent: Atom,
        session_id: u32,
        partner_honest: bool,
        bindings: Bindings,
    ) -> RoleState {
        RoleState {
            role,
            agent,
            session_id,
            partner_honest,
            pc: RolePhase::At(0),
            bindings,
        }
    }

    /// The action this role would perform next; `None` once absorbing.
    pub fn current_action(&self, ctx: &ProtocolCtx) -> Option<RoleAction> {
        match self.pc {
            RolePhase::At(k) => role_script(self.role, self.partner_honest, ctx)
                .into_iter()
                .nth(k as usize),
            RolePhase::Completed | RolePhase::Stuck => None,
        }
    }

    /// The concrete pattern this role's pending receive expects, with
    /// already-bound fields made ground. `None` if not at a receive.
    pub fn receive_pattern(&self, ctx: &ProtocolCtx) -> Option<Pattern> {
        match self.current_action(ctx)? {
            RoleAction::Receive { pattern, .. } => Some(pattern.instantiate(&self.bindings)),
            _ => None,
        }
    }

    pub fn is_completed(&self) -> bool {
        self.pc == RolePhase::Completed
    }

    /// Stable byte encoding of the whole role state, for global-state
    /// hashing. Bindings iterate in sorted order, so equal states encode
    /// equally.
    pub fn canonical_encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.role.rank());
        let agent_enc = Term::Atom(self.agent.clone()).canonical_encode();
        out.extend_from_slice(&(agent_enc.len() as u32).to_be_bytes());
        out.extend_from_slice(&agent_enc);
        out.extend_from_slice(&self.session_id.to_be_bytes());
        out.push(self.partner_honest as u8);
        match self.pc {
            RolePhase::At(k) => {
                out.push(0x01);
                out.push(k);
            }
            RolePhase::Completed => out.push(0x02),
            RolePhase::Stuck => out.push(0x03),
        }
        out.extend_from_slice(&(self.bindings.len() as u32).to_be_bytes());
        for (name, value) in self.bindings.iter() {
            out.extend_from_slice(&(name.len() as u32).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            let enc = value.canonical_encode();
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
    }

    fn advance(&self, ctx: &ProtocolCtx) -> RolePhase {
        let RolePhase::At(k) = self.pc else {
            return self.pc;
        };
        let script = role_script(self.role, self.partner_honest, ctx);
        match script.get(k as usize + 1) {
            Some(RoleAction::Done) | None => RolePhase::Completed,
            Some(_) => RolePhase::At(k + 1),
        }
    }
}

/// What a step produced besides the updated role state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emission {
    Send {
        label: &'static str,
        from: Atom,
        to: Atom,
        payload: Term,
    },
    Signal(SignalEvent),
}

/// A binding to copy onto the same session's other device — the physical
/// half of the M2/M4 exchanges. The driver decides whether a target exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoverPayload {
    pub to_role: RoleKind,
    pub session_id: u32,
    pub binding: &'static str,
    pub value: Term,
}

/// Result of attempting one role step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Advanced {
        state: RoleState,
        emission: Option<Emission>,
        handover: Option<HandoverPayload>,
    },
    /// The step is currently disabled: a receive didn't match or a guard
    /// failed, or a send's payload isn't yet fully bound. Not an error and
    /// not stuck — another interleaving may enable it.
    NoTransition,
}

/// Errors from driving a role against its contract (these indicate a buggy
/// driver, not a hostile message).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("{role} at step {pc} expects no incoming message")]
    UnexpectedIncoming { role: RoleKind, pc: u8 },
    #[error("{role} at step {pc} is a receive and needs an incoming message")]
    MissingIncoming { role: RoleKind, pc: u8 },
    #[error("signal references unbound name {0:?}")]
    UnboundSignalVariable(String),
    #[error("send recipient {0:?} is not bound to an agent")]
    UnresolvedRecipient(String),
}

/// Executes one script action of `rs`.
///
/// Receives take the candidate message as `incoming`; sends and signals
/// take `None`. A receive whose pattern or guard rejects the message — or a
/// send whose payload still has unbound fields — yields
/// [`StepOutcome::NoTransition`]: the transition is disabled, the state
/// unchanged. Completed and stuck roles absorb any call unchanged.
pub fn step(
    rs: &RoleState,
    ctx: &ProtocolCtx,
    incoming: Option<&Term>,
) -> Result<StepOutcome, ProtocolError> {
    let RolePhase::At(pc) = rs.pc else {
        return Ok(StepOutcome::Advanced {
            state: rs.clone(),
            emission: None,
            handover: None,
        });
    };
    let Some(action) = rs.current_action(ctx) else {
        return Ok(StepOutcome::Advanced {
            state: rs.clone(),
            emission: None,
            handover: None,
        });
    };

    match action {
        RoleAction::Send {
            label,
            to,
            payload,
            bind_payload,
        } => {
            if incoming.is_some() {
                return Err(ProtocolError::UnexpectedIncoming { role: rs.role, pc });
            }
            let Ok(term) = payload.substitute(&rs.bindings) else {
                return Ok(StepOutcome::NoTransition);
            };
            let to_atom = match to {
                Recipient::Cks => cks_agent(),
                Recipient::Bound(name) => match rs.bindings.get(name).and_then(Term::as_atom) {
                    Some(a) => a.clone(),
                    None => return Err(ProtocolError::UnresolvedRecipient(name.to_string())),
                },
            };
            let mut next = rs.clone();
            if let Some(name) = bind_payload {
                next.bindings.insert(name, term.clone());
            }
            next.pc = rs.advance(ctx);
            Ok(StepOutcome::Advanced {
                state: next,
                emission: Some(Emission::Send {
                    label,
                    from: rs.agent.clone(),
                    to: to_atom,
                    payload: term,
                }),
                handover: None,
            })
        }
        RoleAction::Receive {
            pattern,
            bind_whole,
            guards,
            handover,
            ..
        } => {
            let Some(message) = incoming else {
                return Err(ProtocolError::MissingIncoming { role: rs.role, pc });
            };
            let concrete = pattern.instantiate(&rs.bindings);
            let Some(new_bindings) = match_pattern(&concrete, message, &Bindings::new()) else {
                return Ok(StepOutcome::NoTransition);
            };
            let mut next = rs.clone();
            for (name, value) in new_bindings.iter() {
                next.bindings.insert(name.clone(), value.clone());
            }
            if let Some(name) = bind_whole {
                next.bindings.insert(name, message.clone());
            }
            if !guards.iter().all(|g| g.holds(&next.bindings, ctx)) {
                return Ok(StepOutcome::NoTransition);
            }
            let handover = handover.and_then(|h| {
                next.bindings.get(h.binding).map(|value| HandoverPayload {
                    to_role: h.to_role,
                    session_id: rs.session_id,
                    binding: h.binding,
                    value: value.clone(),
                })
            });
            next.pc = rs.advance(ctx);
            Ok(StepOutcome::Advanced {
                state: next,
                emission: None,
                handover,
            })
        }
        RoleAction::Signal { kind, payload_vars } => {
            if incoming.is_some() {
                return Err(ProtocolError::UnexpectedIncoming { role: rs.role, pc });
            }
            let payload = payload_vars
                .iter()
                .map(|name| {
                    rs.bindings
                        .get(name)
                        .cloned()
                        .ok_or_else(|| ProtocolError::UnboundSignalVariable(name.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let partner_var = match rs.role {
                RoleKind::OldOwner => "idb",
                RoleKind::NewOwner => "ida",
                RoleKind::Cks => "ida",
            };
            let partner = rs
                .bindings
                .get(partner_var)
                .and_then(Term::as_atom)
                .cloned()
                .ok_or_else(|| ProtocolError::UnboundSignalVariable(partner_var.to_string()))?;
            let event = SignalEvent {
                kind,
                actor: rs.agent.clone(),
                partner,
                payload,
                session_id: rs.session_id,
            };
            let mut next = rs.clone();
            next.pc = rs.advance(ctx);
            Ok(StepOutcome::Advanced {
                state: next,
                emission: Some(Emission::Signal(event)),
                handover: None,
            })
        }
        RoleAction::Done => {
            let mut next = rs.clone();
            next.pc = RolePhase::Completed;
            Ok(StepOutcome::Advanced {
                state: next,
                emission: None,
                handover: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(l: &str) -> Term {
        Term::atom(AtomKind::AgentName, l)
    }
    fn nonce(l: &str) -> Term {
        Term::atom(AtomKind::Nonce, l)
    }
    fn constant(l: &str) -> Term {
        Term::atom(AtomKind::Constant, l)
    }

    fn base_ctx() -> ProtocolCtx {
        let mut passwords = BTreeMap::new();
        for a in ["A", "B", "I"] {
            passwords.insert(
                a.to_string(),
                Term::atom(AtomKind::Password, format!("PW_{a}")),
            );
        }
        ProtocolCtx {
            passwords,
            ticket_weak: false,
        }
    }

    fn old_owner_state() -> RoleState {
        let mut b = Bindings::new();
        b.insert("ida", agent("A"));
        b.insert("idb", agent("B"));
        b.insert("pw", Term::atom(AtomKind::Password, "PW_A"));
        b.insert("na", nonce("N_A"));
        b.insert("nb", nonce("N_B"));
        RoleState::new(
            RoleKind::OldOwner,
            Atom::new(AtomKind::AgentName, "A"),
            1,
            true,
            b,
        )
    }

    fn new_owner_state() -> RoleState {
        let mut b = Bindings::new();
        b.insert("ida", agent("A"));
        b.insert("idb", agent("B"));
        b.insert("na", nonce("N_A"));
        b.insert("nb", nonce("N_B"));
        RoleState::new(
            RoleKind::NewOwner,
            Atom::new(AtomKind::AgentName, "B"),
            1,
            true,
            b,
        )
    }

    fn cks_state() -> RoleState {
        let mut b = Bindings::new();
        b.insert("otc", constant("OTCpayload"));
        b.insert("tempid", constant("TempID"));
        RoleState::new(
            RoleKind::Cks,
            Atom::new(AtomKind::AgentName, "CKS"),
            1,
            true,
            b,
        )
    }

    #[test]
    fn make_ticket_seals_acknowledgment_parties_and_nonces() {
        let t = make_ticket(&agent("A"), &agent("B"), &nonce("N_A"), &nonce("N_B")).unwrap();
        let expected = Term::aenc(
            cks_public_key(),
            Term::pair(
                ack_constant(),
                Term::pair(
                    agent("A"),
                    Term::pair(agent("B"), Term::pair(nonce("N_A"), nonce("N_B"))),
                ),
            ),
        )
        .unwrap();
        assert_eq!(t, expected);
        assert!(matches!(
            make_ticket(&agent("A"), &agent("B"), &agent("A"), &nonce("N_B")),
            Err(TermError::ArgumentKind {
                argument: "n_a",
                ..
            })
        ));
        // The templated form the server's script uses must agree with the
        // standalone constructor.
        let mut b = Bindings::new();
        b.insert("ida", agent("A"));
        b.insert("idb", agent("B"));
        b.insert("na", nonce("N_A"));
        b.insert("nb", nonce("N_B"));
        assert_eq!(ticket_template(false).substitute(&b).unwrap(), t);
        assert_eq!(
            ticket_template(true).substitute(&b).unwrap(),
            make_weak_ticket(&agent("A"), &agent("B")).unwrap()
        );
    }

    #[test]
    fn old_owner_first_action_is_the_enrollment_send() {
        let ctx = base_ctx();
        let rs = old_owner_state();
        let out = step(&rs, &ctx, None).unwrap();
        let StepOutcome::Advanced {
            state,
            emission: Some(Emission::Send {
                label, to, payload, ..
            }),
            ..
        } = out
        else {
            panic!("expected a send, got {out:?}");
        };
        assert_eq!(label, "M1");
        assert_eq!(to, cks_agent());
        let otr = crate::term::make_otr(&agent("A"), &agent("B"), &nonce("N_B"), &cks_public_key())
            .unwrap();
        let expected = Term::aenc(
            cks_public_key(),
            Term::cat(vec![
                agent("A"),
                Term::atom(AtomKind::Password, "PW_A"),
                nonce("N_A"),
                otr,
            ])
            .unwrap(),
        )
        .unwrap();
        assert_eq!(
            payload, expected,
            "M1 must carry identity, password, nonce, and the sealed transfer request"
        );
        assert_eq!(state.pc, RolePhase::At(1));
    }

    #[test]
    fn new_owner_accepts_the_confirmation_only_under_its_bound_nonce() {
        let ctx = base_ctx();
        let mut rs = new_owner_state();
        rs.bindings.insert(
            "ticket",
            make_ticket(&agent("A"), &agent("B"), &nonce("N_A"), &nonce("N_B")).unwrap(),
        );
        // Advance past the M3 send to the M4 receive.
        let StepOutcome::Advanced { state, .. } = step(&rs, &ctx, None).unwrap() else {
            panic!()
        };
        let rs = state;

        let good = Term::senc(nonce("N_A"), constant("OTCpayload")).unwrap();
        let StepOutcome::Advanced {
            state, handover, ..
        } = step(&rs, &ctx, Some(&good)).unwrap()
        else {
            panic!("matching confirmation must advance");
        };
        assert_eq!(state.bindings.get("otc"), Some(&constant("OTCpayload")));
        let handover = handover.expect("confirmation is handed to the old owner's device");
        assert_eq!(handover.to_role, RoleKind::OldOwner);
        assert_eq!(handover.binding, "otc");
        assert_eq!(handover.value, constant("OTCpayload"));

        let junk = Term::senc(nonce("N_I"), constant("junk")).unwrap();
        assert_eq!(
            step(&rs, &ctx, Some(&junk)).unwrap(),
            StepOutcome::NoTransition,
            "a confirmation under the wrong nonce is a disabled transition, not progress"
        );
    }

    #[test]
    fn completed_roles_absorb_any_input() {
        let ctx = base_ctx();
        let mut rs = old_owner_state();
        rs.pc = RolePhase::Completed;
        let out = step(&rs, &ctx, Some(&agent("A"))).unwrap();
        assert_eq!(
            out,
            StepOutcome::Advanced {
                state: rs.clone(),
                emission: None,
                handover: None
            },
            "completed is absorbing: no movement, no emission"
        );
    }

    #[test]
    fn server_guard_rejects_wrong_password_and_self_transfer() {
        let ctx = base_ctx();
        let rs = cks_state();
        let m1 = |pw: &str, idb: &str| {
            Term::aenc(
                cks_public_key(),
                Term::cat(vec![
                    agent("A"),
                    Term::atom(AtomKind::Password, pw),
                    nonce("N_A"),
                    Term::aenc(
                        cks_public_key(),
                        Term::cat(vec![agent("A"), agent(idb), nonce("N_B")]).unwrap(),
                    )
                    .unwrap(),
                ])
                .unwrap(),
            )
            .unwrap()
        };

        let StepOutcome::Advanced { state, .. } = step(&rs, &ctx, Some(&m1("PW_A", "B"))).unwrap()
        else {
            panic!("correct password must be accepted");
        };
        assert_eq!(state.bindings.get("ida"), Some(&agent("A")));
        assert_eq!(
            state.bindings.get("nb"),
            Some(&nonce("N_B")),
            "the inner request's nonce is extracted"
        );

        assert_eq!(
            step(&rs, &ctx, Some(&m1("PW_B", "B"))).unwrap(),
            StepOutcome::NoTransition,
            "wrong password"
        );
        assert_eq!(
            step(&rs, &ctx, Some(&m1("PW_A", "A"))).unwrap(),
            StepOutcome::NoTransition,
            "self-transfer"
        );
    }

    #[test]
    fn server_requires_inner_and_outer_identity_to_agree() {
        let ctx = base_ctx();
        let rs = cks_state();
        // Outer identity A, inner request names B as the seller.
        let mismatched = Term::aenc(
            cks_public_key(),
            Term::cat(vec![
                agent("A"),
                Term::atom(AtomKind::Password, "PW_A"),
                nonce("N_A"),
                Term::aenc(
                    cks_public_key(),
                    Term::cat(vec![agent("B"), agent("I"), nonce("N_B")]).unwrap(),
                )
                .unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        assert_eq!(
            step(&rs, &ctx, Some(&mismatched)).unwrap(),
            StepOutcome::NoTransition,
            "the repeated identity variable is an equality constraint"
        );
    }

    #[test]
    fn server_checks_presented_ticket_against_the_issued_one() {
        let ctx = base_ctx();
        let mut rs = cks_state();
        for (name, value) in [
            ("ida", agent("A")),
            ("idb", agent("B")),
            ("pw", Term::atom(AtomKind::Password, "PW_A")),
            ("na", nonce("N_A")),
            ("nb", nonce("N_B")),
        ] {
            rs.bindings.insert(name, value);
        }
        rs.pc = RolePhase::At(1);
        // Issue the ticket (M2), landing on the M3 receive.
        let StepOutcome::Advanced {
            state, emission, ..
        } = step(&rs, &ctx, None).unwrap()
        else {
            panic!()
        };
        let issued = match emission {
            Some(Emission::Send {
                label: "M2",
                payload,
                ..
            }) => payload,
            other => panic!("expected the ticket send, got {other:?}"),
        };
        assert_eq!(
            issued,
            make_ticket(&agent("A"), &agent("B"), &nonce("N_A"), &nonce("N_B")).unwrap()
        );
        assert_eq!(
            state.bindings.get("ticket"),
            Some(&issued),
            "the server remembers what it issued"
        );

        let genuine = Term::aenc(
            cks_public_key(),
            Term::cat(vec![agent("B"), issued.clone(), nonce("N_B")]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            step(&state, &ctx, Some(&genuine)).unwrap(),
            StepOutcome::Advanced { .. }
        ));

        // A ticket from some other session (different nonces) is rejected
        // even though it is a perfectly well-formed ticket.
        let foreign =
            make_ticket(&agent("A"), &agent("B"), &nonce("N_A2"), &nonce("N_B2")).unwrap();
        let forged = Term::aenc(
            cks_public_key(),
            Term::cat(vec![agent("B"), foreign, nonce("N_B")]).unwrap(),
        )
        .unwrap();
        assert_eq!(
            step(&state, &ctx, Some(&forged)).unwrap(),
            StepOutcome::NoTransition
        );

        // Replaying the right ticket under the intruder's own nonce fails:
        // the outer nonce slot is already bound to the session's N_B.
        let wrong_nonce = Term::aenc(
            cks_public_key(),
            Term::cat(vec![agent("B"), issued, nonce("N_I")]).unwrap(),
        )
        .unwrap();
        assert_eq!(
            step(&state, &ctx, Some(&wrong_nonce)).unwrap(),
            StepOutcome::NoTransition
        );
    }

    #[test]
    fn weak_server_accepts_any_presented_nonce_and_keys_m6_with_it() {
        let mut ctx = base_ctx();
        ctx.ticket_weak = true;
        let mut rs = cks_state();
        for (name, value) in [
            ("ida", agent("A")),
            ("idb", agent("B")),
            ("na", nonce("N_A")),
            ("nb", nonce("N_B")),
            (
                "ticket",
                make_weak_ticket(&agent("A"), &agent("B")).unwrap(),
            ),
        ] {
            rs.bindings.insert(name, value);
        }
        rs.pc = RolePhase::At(2); // at the M3 receive

        let foreign_nonce = Term::aenc(
            cks_public_key(),
            Term::cat(vec![
                agent("B"),
                make_weak_ticket(&agent("A"), &agent("B")).unwrap(),
                nonce("N_B_other"),
            ])
            .unwrap(),
        )
        .unwrap();
        let StepOutcome::Advanced { state, .. } = step(&rs, &ctx, Some(&foreign_nonce)).unwrap()
        else {
            panic!("weak server cannot tell the nonce is foreign");
        };
        assert_eq!(
            state.bindings.get("nb_presented"),
            Some(&nonce("N_B_other"))
        );
        assert_eq!(
            state.bindings.get("nb"),
            Some(&nonce("N_B")),
            "the enrollment nonce is never rebound"
        );

        // Drive to the M6 send: M4 out, M5 in, then M6 must be keyed by the
        // *presented* nonce.
        let StepOutcome::Advanced { state, .. } = step(&state, &ctx, None).unwrap() else {
            panic!()
        };
        let m5 = Term::aenc(cks_public_key(), constant("OTCpayload")).unwrap();
        let StepOutcome::Advanced { state, .. } = step(&state, &ctx, Some(&m5)).unwrap() else {
            panic!()
        };
        let StepOutcome::Advanced { emission, .. } = step(&state, &ctx, None).unwrap() else {
            panic!()
        };
        match emission {
            Some(Emission::Send {
                label: "M6",
                payload,
                ..
            }) => {
                assert_eq!(
                    payload,
                    Term::senc(nonce("N_B_other"), constant("TempID")).unwrap()
                );
            }
            other => panic!("expected the M6 send, got {other:?}"),
        }
    }

    #[test]
    fn signals_carry_actor_partner_and_parameters() {
        let ctx = base_ctx();
        let mut rs = old_owner_state();
        rs.pc = RolePhase::At(2); // the running signal
        let StepOutcome::Advanced {
            state, emission, ..
        } = step(&rs, &ctx, None).unwrap()
        else {
            panic!()
        };
        let Some(Emission::Signal(event)) = emission else {
            panic!("expected a signal")
        };
        assert_eq!(event.kind, SignalKind::RunningOldOwner);
        assert_eq!(event.actor, Atom::new(AtomKind::AgentName, "A"));
        assert_eq!(event.partner, Atom::new(AtomKind::AgentName, "B"));
        assert_eq!(event.payload, vec![nonce("N_A"), nonce("N_B")]);
        assert_eq!(event.session_id, 1);
        assert_eq!(state.pc, RolePhase::At(3));
    }

    #[test]
    fn sends_are_disabled_until_their_fields_are_bound() {
        let ctx = base_ctx();
        let rs = new_owner_state(); // no ticket binding yet
        assert_eq!(
            step(&rs, &ctx, None).unwrap(),
            StepOutcome::NoTransition,
            "the presentation send waits for the ticket handover"
        );
    }

    #[test]
    fn incoming_on_a_send_step_is_a_driver_error() {
        let ctx = base_ctx();
        let rs = old_owner_state();
        assert_eq!(
            step(&rs, &ctx, Some(&agent("A"))).unwrap_err(),
            ProtocolError::UnexpectedIncoming {
                role: RoleKind::OldOwner,
                pc: 0
            }
        );
        let mut at_receive = old_owner_state();
        at_receive.pc = RolePhase::At(1);
        assert_eq!(
            step(&at_receive, &ctx, None).unwrap_err(),
            ProtocolError::MissingIncoming {
                role: RoleKind::OldOwner,
                pc: 1
            }
        );
    }

    #[test]
    fn dishonest_partner_variants_insert_explicit_receives() {
        let ctx = base_ctx();
        let old = role_script(RoleKind::OldOwner, false, &ctx);
        assert!(
            matches!(&old[3], RoleAction::Receive { label: "OTC", .. }),
            "an old owner without an honest partner receives the confirmation explicitly"
        );
        let new = role_script(RoleKind::NewOwner, false, &ctx);
        assert!(
            matches!(
                &new[0],
                RoleAction::Receive {
                    label: "Ticket",
                    ..
                }
            ),
            "a new owner without an honest partner receives the ticket explicitly"
        );
        // Honest variants rely on handover instead.
        assert!(matches!(
            &role_script(RoleKind::OldOwner, true, &ctx)[3],
            RoleAction::Send { label: "M5", .. }
        ));
        assert!(matches!(
            &role_script(RoleKind::NewOwner, true, &ctx)[0],
            RoleAction::Send { label: "M3", .. }
        ));
    }

    #[test]
    fn scripts_advance_one_step_at_a_time_and_end_completed() {
        // Program counters move by exactly one per step, and the entry after
        // the last real action collapses to Completed without a visible
        // "done" transition.
        let ctx = base_ctx();
        let script = role_script(RoleKind::NewOwner, true, &ctx);
        assert_eq!(script.len(), 5, "send, two receives, commit, end marker");
        let mut rs = new_owner_state();
        rs.bindings.insert(
            "ticket",
            make_weak_ticket(&agent("A"), &agent("B")).unwrap(),
        );
        let StepOutcome::Advanced { state, .. } = step(&rs, &ctx, None).unwrap() else {
            panic!()
        };
        assert_eq!(state.pc, RolePhase::At(1));
        let m4 = Term::senc(nonce("N_A"), constant("OTCpayload")).unwrap();
        let StepOutcome::Advanced { state, .. } = step(&state, &ctx, Some(&m4)).unwrap() else {
            panic!()
        };
        assert_eq!(state.pc, RolePhase::At(2));
        let m6 = Term::senc(nonce("N_B"), constant("TempID")).unwrap();
        let StepOutcome::Advanced { state, .. } = step(&state, &ctx, Some(&m6)).unwrap() else {
            panic!()
        };
        assert_eq!(state.pc, RolePhase::At(3));
        let StepOutcome::Advanced {
            state, emission, ..
        } = step(&state, &ctx, None).unwrap()
        else {
            panic!()
        };
        assert!(
            matches!(emission, Some(Emission::Signal(ref e)) if e.kind == SignalKind::CommitNewOwner)
        );
        assert_eq!(
            state.pc,
            RolePhase::Completed,
            "the commit is the last real action"
        );
    }
}
