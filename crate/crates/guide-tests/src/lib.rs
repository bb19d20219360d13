//! Compiles every code example in the guide (`book/src/`) as a doc-test,
//! so the book cannot drift from the library it documents.
//!
//! Each chapter is attached verbatim as the documentation of an empty
//! module; `cargo test -p guide-tests --doc` builds and runs its examples.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/terms.md")]
pub mod terms {}

#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}

#[doc = include_str!("../../../book/src/intruder.md")]
pub mod intruder {}

#[doc = include_str!("../../../book/src/exploration.md")]
pub mod exploration {}

#[doc = include_str!("../../../book/src/properties.md")]
pub mod properties {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
