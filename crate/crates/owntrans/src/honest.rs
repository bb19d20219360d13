//! The no-interference reference run: every message goes straight from
//! sender to addressee, nothing is lost, reordered, or forged, and roles
//! are scheduled deterministically (state order, first actionable role
//! moves). The event sequence this produces is the protocol's canonical
//! happy path; anything the explorer adds on top of it is the intruder's
//! doing.

use std::fmt;

use thiserror::Error;

use crate::explorer::apply_handover;
use crate::protocol::{
    step, Emission, ProtocolCtx, RoleAction, RoleState, SignalEvent, StepOutcome,
};
use crate::scenario::System;
use crate::term::{Atom, Term};

/// One step of the reference run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HonestEvent {
    /// A protocol message, delivered to `to` the moment it is sent.
    Message {
        label: String,
        session_id: u32,
        from: Atom,
        to: Atom,
        term: Term,
    },
    Signal(SignalEvent),
}

impl HonestEvent {
    /// The script label ("M1", "RunningOldOwner", ...).
    pub fn label(&self) -> &str {
        match self {
            HonestEvent::Message { label, .. } => label,
            HonestEvent::Signal(ev) => match ev.kind {
                crate::protocol::SignalKind::ClaimSecret => "ClaimSecret",
                crate::protocol::SignalKind::RunningOldOwner => "RunningOldOwner",
                crate::protocol::SignalKind::CommitNewOwner => "CommitNewOwner",
            },
        }
    }
}

impl fmt::Display for HonestEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HonestEvent::Message {
                label,
                session_id,
                from,
                to,
                term,
            } => {
                write!(
                    f,
                    "{label}  {} -> {} (session {session_id}): {term}",
                    from.display_name(),
                    to.display_name()
                )
            }
            HonestEvent::Signal(ev) => write!(f, "{ev}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HonestError {
    /// No role can move and not everyone is done. Names the blocked role
    /// waiting on the lowest-numbered protocol message.
    #[error("stuck: {role} waiting at {label}")]
    Stuck { role: String, label: String },
}

/// Sort rank for "who is most fundamentally blocked": protocol messages by
/// number, device-to-device hand-overs after them.
fn label_rank(label: &str) -> u32 {
    label
        .strip_prefix('M')
        .and_then(|n| n.parse().ok())
        .unwrap_or(90)
}

fn stuck_error(roles: &[RoleState], ctx: &ProtocolCtx) -> HonestError {
    let blocked = roles
        .iter()
        .filter_map(|rs| {
            let action = rs.current_action(ctx)?;
            Some((
                label_rank(action.label()),
                rs.session_id,
                rs.role.rank(),
                rs.role,
                action.label(),
            ))
        })
        .min();
    match blocked {
        Some((_, _, _, role, label)) => HonestError::Stuck {
            role: role.to_string(),
            label: label.to_string(),
        },
        // Unreachable in practice: callers only report stuck when some
        // role still has an action.
        None => HonestError::Stuck {
            role: "nobody".to_string(),
            label: "nothing".to_string(),
        },
    }
}

struct PendingMessage {
    to: Atom,
    session_id: u32,
    term: Term,
    consumed: bool,
}

/// Runs every role to completion with ideal delivery, returning the event
/// sequence. Message routing respects sessions — the reference run has no
/// ambiguity about which server instance serves which enrollment.
pub fn run_honest(sys: &System) -> Result<Vec<HonestEvent>, HonestError> {
    let mut roles = sys.initial_roles.clone();
    let mut pending: Vec<PendingMessage> = Vec::new();
    let mut events = Vec::new();

    loop {
        let mut progressed = false;
        'scan: for i in 0..roles.len() {
            let Some(action) = roles[i].current_action(&sys.ctx) else {
                continue;
            };
            let session_id = roles[i].session_id;
            match action {
                RoleAction::Send { .. } => {
                    let outcome =
                        step(&roles[i], &sys.ctx, None).expect("a send takes no incoming message");
                    if let StepOutcome::Advanced {
                        state,
                        emission:
                            Some(Emission::Send {
                                label,
                                from,
                                to,
                                payload,
                            }),
                        ..
                    } = outcome
                    {
                        roles[i] = state;
                        pending.push(PendingMessage {
                            to: to.clone(),
                            session_id,
                            term: payload.clone(),
                            consumed: false,
                        });
                        events.push(HonestEvent::Message {
                            label: label.to_string(),
                            session_id,
                            from,
                            to,
                            term: payload,
                        });
                        progressed = true;
                        break 'scan;
                    }
                    // NoTransition: the payload waits on a hand-over; try
                    // the next role.
                }
                RoleAction::Signal { .. } => {
                    let outcome = step(&roles[i], &sys.ctx, None)
                        .expect("a signal takes no incoming message");
                    let StepOutcome::Advanced {
                        state,
                        emission: Some(Emission::Signal(ev)),
                        ..
                    } = outcome
                    else {
                        unreachable!("a signal always advances");
                    };
                    roles[i] = state;
                    events.push(HonestEvent::Signal(ev));
                    progressed = true;
                    break 'scan;
                }
                RoleAction::Receive { .. } => {
                    let mut accepted: Option<(usize, StepOutcome)> = None;
                    for (pi, p) in pending.iter().enumerate() {
                        if p.consumed || p.to != roles[i].agent || p.session_id != session_id {
                            continue;
                        }
                        let outcome = step(&roles[i], &sys.ctx, Some(&p.term))
                            .expect("a receive accepts an incoming message");
                        if matches!(outcome, StepOutcome::Advanced { .. }) {
                            accepted = Some((pi, outcome));
                            break;
                        }
                    }
                    if let Some((
                        pi,
                        StepOutcome::Advanced {
                            state, handover, ..
                        },
                    )) = accepted
                    {
                        pending[pi].consumed = true;
                        roles[i] = state;
                        if let Some(h) = handover {
                            apply_handover(&mut roles, &h);
                        }
                        progressed = true;
                        break 'scan;
                    }
                }
                RoleAction::Done => {}
            }
        }
        if !progressed {
            if roles.iter().all(|r| r.is_completed()) {
                return Ok(events);
            }
            return Err(stuck_error(&roles, &sys.ctx));
        }
    }
}
