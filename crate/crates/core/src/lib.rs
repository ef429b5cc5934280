//! Protocol laboratory for multi-located parties.
//!
//! Each party in this model has a main location and a subsidiary agent;
//! intra-party links are secure, inter-party links are not. The crate
//! provides the pieces that setting needs and a simulator to exercise them:
//!
//! - [`grammar`]: text to bits to chunks to production sequences under a
//!   canonical chunk-grammar family.
//! - [`transform`]: the commuting modular-exponentiation family behind the
//!   three-stage exchange.
//! - [`share`]: 2-of-2 positional splitting of a sequence into shares.
//! - [`envelope`]: symbolic authenticated encryption, nonces, and the
//!   logical clock.
//! - [`protocol`]: party state machines for the three-stage and the
//!   five-step KDC-mediated protocol.
//! - [`sim`]: deterministic seeded network simulation, adversary models,
//!   knowledge closure, and attack verdicts.
//! - [`scenario`]: the line-oriented scenario configuration format.

pub mod envelope;
pub mod grammar;
pub mod ids;
pub mod protocol;
pub mod scenario;
pub mod share;
pub mod sim;
pub mod transform;
