//! Symbolic verifier for a device ownership-transfer protocol.
//!
//! Three roles — the old owner, the new owner, and a central key server —
//! exchange messages over a network fully controlled by an intruder who
//! records, decomposes, recombines, and injects traffic. The library
//! explores every interleaving of role steps and intruder deliveries up to
//! configurable bounds and checks safety properties (secrecy, agreement,
//! impersonation-unreachability), reporting a replayable counterexample
//! trace for any violation.
//!
//! Module layout mirrors the pipeline: [`term`] defines the message algebra,
//! [`dolev_yao`] the intruder's knowledge closure, [`protocol`] the role
//! state machines, [`explorer`] the bounded search, [`properties`] the
//! checks, and [`scenario`]/[`report`] the file formats the CLI speaks.

pub mod dolev_yao;
pub mod explorer;
pub mod honest;
pub mod properties;
pub mod protocol;
pub mod report;
pub mod scenario;
pub mod term;

pub use dolev_yao::{IntruderProfile, KnowledgeBase};
pub use explorer::{
    collect_reachable, explore, replay, successors, Counterexample, ExploreResult, GlobalState,
    Transition, TransitionKind, Witness,
};
pub use honest::{run_honest, HonestError, HonestEvent};
pub use properties::{
    check_agreement, check_impersonation_state, check_impersonation_unreachable, check_secrecy,
    session_completed, Coverage, ImpersonationCase, PropertyId, PropertyKind, Verdict,
};
pub use protocol::{
    make_ticket, role_script, step, ProtocolCtx, RoleAction, RoleKind, RolePhase, RoleState,
    SignalEvent, SignalKind, StepOutcome,
};
pub use scenario::{bundled, load_scenario, Scenario, ScenarioError, System};
pub use term::{
    make_otr, match_pattern, Atom, AtomKind, Bindings, Pattern, Term, TermError, VarKind,
};
