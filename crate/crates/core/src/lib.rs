//! Desk-scale workbench for a retrieval dialog system with a learned
//! human-handoff router.
//!
//! The pieces, bottom to top:
//!
//! - [`corpus`]: bAbI-style dialog file parsing, candidate sets, vocabulary
//!   and per-turn training instances.
//! - [`simulator`]: restaurant-booking dialog generator with switchable user
//!   behavior policies, behavior detectors and dataset statistics.
//! - [`memn2n`]: the retrieval model — a multi-hop memory network trained by
//!   SGD with exact hand-derived gradients.
//! - [`handoff`]: the routing classifier — a small MLP over the dialog state
//!   vector, trained online with REINFORCE.
//! - [`deployment`]: the streaming deployment engine that routes each test
//!   turn, learns online from the (simulated) human agent and accumulates
//!   metrics across test-order permutations.

pub mod corpus;
pub mod deployment;
pub mod handoff;
pub mod memn2n;
pub mod simulator;
