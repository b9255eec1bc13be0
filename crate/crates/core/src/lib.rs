//! Engine and analytics for multi-agent deliberations over everyday moral
//! dilemmas.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`corpus`] ingests a raw submission dump, strips edit addenda, filters
//!    unusable posts, tallies crowd verdicts, and ranks dilemmas by
//!    disagreement entropy.
//! 2. [`protocol`] runs deliberations between agents in either the
//!    synchronous or the round-robin format, enforcing the visibility rules
//!    that distinguish the two, and produces [`protocol::Transcript`]s.
//! 3. [`agents`] supplies the connectors a deliberation drives: remote
//!    chat-completion endpoints, scripted replays, and synthetic samplers.
//! 4. [`values`] annotates transcript turns with the values they invoke and
//!    computes similarity and inheritance statistics over the annotations.
//! 5. [`metrics`] summarizes runs (change-of-verdict rates, round histograms,
//!    verdict distributions) with bootstrap uncertainty.
//! 6. [`inference`] fits the multinomial verdict-choice model with inertia
//!    and conformity terms, and checks it by synthetic recovery.
//! 7. [`store`] persists runs as JSONL plus a manifest, with crash-safe
//!    appends and resume support.
//!
//! [`prompts`] holds the deliberation and judge prompt templates; rendered
//! prompts are locked by golden tests.

pub mod agents;
pub mod corpus;
pub mod inference;
pub mod metrics;
pub mod prompts;
pub mod protocol;
pub mod store;
pub mod values;

pub use protocol::Verdict;
