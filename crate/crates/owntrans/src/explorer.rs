//! Exhaustive bounded exploration: every interleaving of honest role steps
//! with every message the intruder can put on the wire, deduplicated by
//! canonical state encoding and searched breadth-first so recorded attack
//! paths are as short as the state space allows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dolev_yao::KnowledgeBase;
use crate::properties::{
    check_agreement, check_impersonation_state, check_secrecy, session_completed, Coverage,
    ImpersonationCase, PropertyId, PropertyKind, Verdict,
};
use crate::protocol::{
    step, Emission, HandoverPayload, RoleAction, RoleState, SignalEvent, StepOutcome,
};
use crate::scenario::System;
use crate::term::Term;

/// Everything that can differ between two moments of the explored world:
/// the role instances, the attacker's knowledge, and the signal trace.
/// Depth is bookkeeping, not identity — it is excluded from the canonical
/// encoding, so a state rediscovered deeper is the same state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalState {
    /// Ordered by session then role rank; the order is part of the
    /// canonical encoding.
    pub roles: Vec<RoleState>,
    /// Shared, not copied, between the many successors that leave it
    /// untouched (every delivery does).
    pub kb: Arc<KnowledgeBase>,
    pub trace: Vec<SignalEvent>,
    pub depth: u32,
}

impl GlobalState {
    pub fn initial(sys: &System) -> GlobalState {
        GlobalState {
            roles: sys.initial_roles.clone(),
            kb: Arc::new(KnowledgeBase::from_terms(
                sys.intruder.initial_knowledge.iter().cloned(),
            )),
            trace: Vec::new(),
            depth: 0,
        }
    }

    /// Stable bytes determining state identity; two states encode equally
    /// exactly when no observer could tell them apart.
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.roles.len() as u32).to_be_bytes());
        for rs in &self.roles {
            let mut enc = Vec::new();
            rs.canonical_encode_into(&mut enc);
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
        let facts = self.kb.facts();
        out.extend_from_slice(&(facts.len() as u32).to_be_bytes());
        for fact in facts {
            let enc = fact.canonical_encode();
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
        out.extend_from_slice(&(self.trace.len() as u32).to_be_bytes());
        for ev in &self.trace {
            let mut enc = Vec::new();
            ev.canonical_encode_into(&mut enc);
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
        out
    }

    /// The visited-set key: a digest of the canonical encoding.
    pub fn state_key(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_encode()).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    /// An honest role's send; the payload goes to the attacker's
    /// knowledge, never directly to the addressee.
    HonestSend,
    /// The attacker delivers one derivable (or replayed) message to a
    /// waiting receiver.
    IntruderDeliver,
    /// An honest role marks a claim in the trace; nothing crosses the
    /// network.
    SignalStep,
}

/// One edge of the explored graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub kind: TransitionKind,
    /// The acting role's agent — for deliveries, the receiver.
    pub actor: crate::term::Atom,
    pub session_id: u32,
    /// The script label ("M1", "RunningOldOwner", ...).
    pub label: String,
    /// The sent or delivered message; `None` for signals.
    pub message: Option<Term>,
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let who = self.actor.display_name();
        match self.kind {
            TransitionKind::HonestSend => {
                write!(
                    f,
                    "send {} from {} (session {})",
                    self.label, who, self.session_id
                )
            }
            TransitionKind::IntruderDeliver => {
                write!(
                    f,
                    "deliver {} to {} (session {})",
                    self.label, who, self.session_id
                )
            }
            TransitionKind::SignalStep => {
                write!(
                    f,
                    "signal {} by {} (session {})",
                    self.label, who, self.session_id
                )
            }
        }
    }
}

/// Copies a received binding onto the same session's counterpart device,
/// modelling the in-person half of the exchange. First write wins; a
/// target that does not exist (dishonest counterpart) is simply absent.
pub(crate) fn apply_handover(roles: &mut [RoleState], h: &HandoverPayload) {
    if let Some(target) = roles
        .iter_mut()
        .find(|r| r.session_id == h.session_id && r.role == h.to_role)
    {
        target.bindings.insert(h.binding, h.value.clone());
    }
}

/// Memo for deliverable-message computation. The candidate set for a
/// receive depends only on the intruder's knowledge and the receiver's
/// local state, both of which repeat across a great many global states,
/// so exploration shares one of these. Keyed by the knowledge base's
/// allocation identity (a knowledge base is never mutated once shared)
/// plus the receiver's canonical encoding; each entry pins its knowledge
/// base so the address cannot be reused while the key lives.
struct DeliverableCache {
    entries: Mutex<HashMap<(usize, Vec<u8>), (Arc<KnowledgeBase>, Arc<Vec<Term>>)>>,
}

impl DeliverableCache {
    fn new() -> DeliverableCache {
        DeliverableCache {
            entries: Mutex::new(HashMap::new()),
        }
    }

    fn deliverable(&self, gs: &GlobalState, rs: &RoleState, sys: &System) -> Arc<Vec<Term>> {
        let mut role_key = Vec::new();
        rs.canonical_encode_into(&mut role_key);
        let key = (Arc::as_ptr(&gs.kb) as usize, role_key);
        if let Some((_pin, hit)) = self.entries.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let pattern = rs
            .receive_pattern(&sys.ctx)
            .expect("a receive has a pattern");
        let candidates = if sys.intruder.active {
            gs.kb.synthesizable_instances(&pattern, &sys.universe)
        } else {
            gs.kb.replayable_instances(&pattern)
        };
        let computed = Arc::new(candidates.into_iter().collect::<Vec<Term>>());
        self.entries
            .lock()
            .unwrap()
            .insert(key, (gs.kb.clone(), computed.clone()));
        computed
    }
}

/// Every state reachable in exactly one transition, in deterministic
/// order: roles in state order, one successor per enabled send or signal,
/// and one per deliverable message instance (in term order) for each
/// waiting receiver. A state with no successors is quiescent — every
/// device has done all it ever will.
pub fn successors(gs: &GlobalState, sys: &System) -> Vec<(Transition, GlobalState)> {
    successors_with(gs, sys, &DeliverableCache::new())
}

fn successors_with(
    gs: &GlobalState,
    sys: &System,
    cache: &DeliverableCache,
) -> Vec<(Transition, GlobalState)> {
    let mut out = Vec::new();
    for (i, rs) in gs.roles.iter().enumerate() {
        let Some(action) = rs.current_action(&sys.ctx) else {
            continue;
        };
        match action {
            RoleAction::Send { .. } => {
                match step(rs, &sys.ctx, None).expect("a send takes no incoming message") {
                    StepOutcome::Advanced {
                        state,
                        emission: Some(Emission::Send { label, payload, .. }),
                        ..
                    } => {
                        let mut next = gs.clone();
                        next.roles[i] = state;
                        if !next.kb.facts().contains(&payload) {
                            next.kb = Arc::new(next.kb.learn(&payload));
                        }
                        next.depth = gs.depth + 1;
                        out.push((
                            Transition {
                                kind: TransitionKind::HonestSend,
                                actor: rs.agent.clone(),
                                session_id: rs.session_id,
                                label: label.to_string(),
                                message: Some(payload),
                            },
                            next,
                        ));
                    }
                    StepOutcome::NoTransition => {}
                    other => unreachable!("a send advances with a send emission, got {other:?}"),
                }
            }
            RoleAction::Signal { .. } => {
                match step(rs, &sys.ctx, None).expect("a signal takes no incoming message") {
                    StepOutcome::Advanced {
                        state,
                        emission: Some(Emission::Signal(ev)),
                        ..
                    } => {
                        let mut next = gs.clone();
                        next.roles[i] = state;
                        next.trace.push(ev);
                        next.depth = gs.depth + 1;
                        out.push((
                            Transition {
                                kind: TransitionKind::SignalStep,
                                actor: rs.agent.clone(),
                                session_id: rs.session_id,
                                label: action.label().to_string(),
                                message: None,
                            },
                            next,
                        ));
                    }
                    other => {
                        unreachable!("a signal advances with a signal emission, got {other:?}")
                    }
                }
            }
            RoleAction::Receive { label, .. } => {
                let candidates = cache.deliverable(gs, rs, sys);
                for message in candidates.iter().cloned() {
                    match step(rs, &sys.ctx, Some(&message))
                        .expect("a receive accepts an incoming message")
                    {
                        StepOutcome::Advanced {
                            state, handover, ..
                        } => {
                            let mut next = gs.clone();
                            next.roles[i] = state;
                            if let Some(h) = handover {
                                apply_handover(&mut next.roles, &h);
                            }
                            next.depth = gs.depth + 1;
                            out.push((
                                Transition {
                                    kind: TransitionKind::IntruderDeliver,
                                    actor: rs.agent.clone(),
                                    session_id: rs.session_id,
                                    label: label.to_string(),
                                    message: Some(message),
                                },
                                next,
                            ));
                        }
                        // A guard rejected this candidate; no transition.
                        StepOutcome::NoTransition => {}
                    }
                }
            }
            RoleAction::Done => {}
        }
    }
    out
}

/// A shortest-by-construction path to a state violating one property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub violated_property: PropertyId,
    pub path: Vec<Transition>,
    pub violating_state: GlobalState,
}

/// A shortest path to a state demonstrating a reachability property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub property: PropertyId,
    pub path: Vec<Transition>,
    pub state: GlobalState,
}

/// One property's fate over a finished exploration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyOutcome {
    pub id: PropertyId,
    pub verdict: Verdict,
    pub counterexample: Option<Counterexample>,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploreStats {
    /// Distinct states discovered.
    pub states: usize,
    /// Successor edges computed (including edges into already-known
    /// states).
    pub transitions: usize,
    pub max_depth_reached: u32,
    /// Every reachable state was seen: the frontier drained with nothing
    /// cut off by the depth bound.
    pub exhausted: bool,
    /// At least one unexplored successor was dropped at the depth bound.
    pub depth_bound_hit: bool,
    pub duration: Duration,
}

#[derive(Debug, Clone)]
pub struct ExploreResult {
    pub stats: ExploreStats,
    /// One entry per registered property, in scenario order.
    pub outcomes: Vec<PropertyOutcome>,
    pub coverage: Coverage,
}

impl ExploreResult {
    pub fn outcome(&self, id: PropertyId) -> Option<&PropertyOutcome> {
        self.outcomes.iter().find(|o| o.id == id)
    }
}

fn path_to(mut id: usize, parent: &[Option<(usize, Transition)>]) -> Vec<Transition> {
    let mut path = Vec::new();
    while let Some((from, tr)) = &parent[id] {
        path.push(tr.clone());
        id = *from;
    }
    path.reverse();
    path
}

/// Property checks evaluated the moment a state is first discovered.
fn record_discovery(
    id: usize,
    store: &[GlobalState],
    parent: &[Option<(usize, Transition)>],
    sys: &System,
    violations: &mut BTreeMap<PropertyId, Counterexample>,
    witnesses: &mut BTreeMap<PropertyId, Witness>,
) {
    let gs = &store[id];
    for &p in &sys.properties {
        match p {
            PropertyId::Secrecy | PropertyId::Agreement | PropertyId::AgreementInjective => {
                if violations.contains_key(&p) {
                    continue;
                }
                let violated = match p {
                    PropertyId::Secrecy => check_secrecy(gs, &sys.honest).is_some(),
                    PropertyId::Agreement => check_agreement(gs, &sys.honest, false).is_some(),
                    PropertyId::AgreementInjective => {
                        check_agreement(gs, &sys.honest, true).is_some()
                    }
                    _ => unreachable!(),
                };
                if violated {
                    violations.insert(
                        p,
                        Counterexample {
                            violated_property: p,
                            path: path_to(id, parent),
                            violating_state: gs.clone(),
                        },
                    );
                }
            }
            PropertyId::TransferCompletes => {
                if !witnesses.contains_key(&p) && session_completed(gs) {
                    witnesses.insert(
                        p,
                        Witness {
                            property: p,
                            path: path_to(id, parent),
                            state: gs.clone(),
                        },
                    );
                }
            }
            // Judged at quiescent states only; see record_quiescent.
            PropertyId::ImpersonationOldOwner | PropertyId::ImpersonationNewOwner => {}
        }
    }
}

/// Property checks evaluated when a state turns out to have no successors.
fn record_quiescent(
    id: usize,
    store: &[GlobalState],
    parent: &[Option<(usize, Transition)>],
    sys: &System,
    violations: &mut BTreeMap<PropertyId, Counterexample>,
) {
    let gs = &store[id];
    for &p in &sys.properties {
        let case = match p {
            PropertyId::ImpersonationOldOwner => ImpersonationCase::OldOwner,
            PropertyId::ImpersonationNewOwner => ImpersonationCase::NewOwner,
            _ => continue,
        };
        if violations.contains_key(&p) {
            continue;
        }
        if check_impersonation_state(gs, &sys.honest, case).is_some() {
            violations.insert(
                p,
                Counterexample {
                    violated_property: p,
                    path: path_to(id, parent),
                    violating_state: gs.clone(),
                },
            );
        }
    }
}

fn thread_count(sys: &System) -> Option<usize> {
    sys.threads.or_else(|| {
        std::env::var("OWNTRANS_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
    })
}

/// Below this frontier width the per-level fan-out runs sequentially;
/// results are identical either way, only scheduling differs.
const PARALLEL_THRESHOLD: usize = 16;

/// Breadth-first exploration of everything the scenario allows, judging
/// every registered property. Deterministic: identical inputs give
/// identical stats, verdicts, and counterexamples regardless of thread
/// count, because each level's successor lists are merged in frontier
/// order before anything is recorded.
pub fn explore(sys: &System) -> ExploreResult {
    match thread_count(sys) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
            .install(|| explore_inner(sys)),
        None => explore_inner(sys),
    }
}

fn explore_inner(sys: &System) -> ExploreResult {
    let started = Instant::now();

    let mut store: Vec<GlobalState> = Vec::new();
    let mut parent: Vec<Option<(usize, Transition)>> = Vec::new();
    let mut visited: HashMap<[u8; 32], usize> = HashMap::new();
    let mut violations: BTreeMap<PropertyId, Counterexample> = BTreeMap::new();
    let mut witnesses: BTreeMap<PropertyId, Witness> = BTreeMap::new();
    let mut coverage = Coverage::default();
    let mut transitions = 0usize;
    let mut depth_bound_hit = false;
    let mut max_depth_reached = 0u32;

    let initial = GlobalState::initial(sys);
    visited.insert(initial.state_key(), 0);
    store.push(initial);
    parent.push(None);
    record_discovery(0, &store, &parent, sys, &mut violations, &mut witnesses);

    let all_resolved = |violations: &BTreeMap<PropertyId, Counterexample>,
                        witnesses: &BTreeMap<PropertyId, Witness>| {
        sys.properties.iter().all(|p| match p.kind() {
            PropertyKind::Reachability => witnesses.contains_key(p),
            _ => violations.contains_key(p),
        })
    };

    let mut frontier: Vec<usize> = vec![0];
    let mut drained = false;
    let cache = DeliverableCache::new();
    loop {
        if frontier.is_empty() {
            drained = true;
            break;
        }
        if all_resolved(&violations, &witnesses) {
            break;
        }
        let batch: Vec<Vec<(Transition, GlobalState)>> = if frontier.len() >= PARALLEL_THRESHOLD {
            frontier
                .par_iter()
                .map(|&id| successors_with(&store[id], sys, &cache))
                .collect()
        } else {
            frontier
                .iter()
                .map(|&id| successors_with(&store[id], sys, &cache))
                .collect()
        };

        let mut next_frontier = Vec::new();
        for (&from, succ) in frontier.iter().zip(batch) {
            transitions += succ.len();
            if succ.is_empty() {
                record_quiescent(from, &store, &parent, sys, &mut violations);
                continue;
            }
            for (tr, child) in succ {
                let key = child.state_key();
                if visited.contains_key(&key) {
                    continue;
                }
                if child.depth > sys.max_depth {
                    // A genuinely new state beyond the bound: the answer
                    // out there is unknown.
                    depth_bound_hit = true;
                    continue;
                }
                let id = store.len();
                visited.insert(key, id);
                max_depth_reached = max_depth_reached.max(child.depth);
                if tr.kind == TransitionKind::SignalStep {
                    if let Some(ev) = child.trace.last() {
                        coverage.note(ev.kind);
                    }
                }
                store.push(child);
                parent.push(Some((from, tr)));
                record_discovery(id, &store, &parent, sys, &mut violations, &mut witnesses);
                next_frontier.push(id);
            }
        }
        frontier = next_frontier;
    }

    let exhausted = drained && !depth_bound_hit;
    let outcomes = sys
        .properties
        .iter()
        .map(|&p| match p.kind() {
            PropertyKind::Reachability => match witnesses.remove(&p) {
                Some(w) => PropertyOutcome {
                    id: p,
                    verdict: Verdict::Holds,
                    counterexample: None,
                    witness: Some(w),
                },
                None => PropertyOutcome {
                    id: p,
                    verdict: if exhausted {
                        Verdict::Violated
                    } else {
                        Verdict::InconclusiveAtBound
                    },
                    counterexample: None,
                    witness: None,
                },
            },
            _ => match violations.remove(&p) {
                Some(c) => PropertyOutcome {
                    id: p,
                    verdict: Verdict::Violated,
                    counterexample: Some(c),
                    witness: None,
                },
                None => PropertyOutcome {
                    id: p,
                    verdict: if exhausted {
                        Verdict::Holds
                    } else {
                        Verdict::InconclusiveAtBound
                    },
                    counterexample: None,
                    witness: None,
                },
            },
        })
        .collect();

    ExploreResult {
        stats: ExploreStats {
            states: store.len(),
            transitions,
            max_depth_reached,
            exhausted,
            depth_bound_hit,
            duration: started.elapsed(),
        },
        outcomes,
        coverage,
    }
}

/// Breadth-first collection of reachable states (depth-bounded by the
/// system, count-capped by the caller), for whole-run analyses and tests.
pub fn collect_reachable(sys: &System, max_states: usize) -> Vec<GlobalState> {
    let mut store = vec![GlobalState::initial(sys)];
    let mut visited: HashMap<[u8; 32], usize> = HashMap::new();
    visited.insert(store[0].state_key(), 0);
    let mut frontier = vec![0usize];
    let cache = DeliverableCache::new();
    while !frontier.is_empty() && store.len() < max_states {
        let mut next = Vec::new();
        for &id in &frontier {
            for (_, child) in successors_with(&store[id], sys, &cache) {
                if store.len() >= max_states {
                    break;
                }
                let key = child.state_key();
                if visited.contains_key(&key) || child.depth > sys.max_depth {
                    continue;
                }
                visited.insert(key, store.len());
                store.push(child);
                next.push(store.len() - 1);
            }
        }
        frontier = next;
    }
    store
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("replay step {index}: {transition:?} is not enabled in the state reached so far")]
    NotEnabled { index: usize, transition: String },
}

/// Re-executes a recorded path from the initial state, insisting every
/// step is enabled exactly as recorded. Returns the final state, which
/// callers can compare byte-for-byte against the recorded one.
pub fn replay(path: &[Transition], sys: &System) -> Result<GlobalState, ReplayError> {
    let mut current = GlobalState::initial(sys);
    let cache = DeliverableCache::new();
    for (index, tr) in path.iter().enumerate() {
        match successors_with(&current, sys, &cache)
            .into_iter()
            .find(|(t, _)| t == tr)
        {
            Some((_, next)) => current = next,
            None => {
                return Err(ReplayError::NotEnabled {
                    index,
                    transition: tr.to_string(),
                });
            }
        }
    }
    Ok(current)
}
