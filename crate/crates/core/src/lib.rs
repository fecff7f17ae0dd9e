//! Deterministic federated-learning simulator with a covert channel carried
//! by targeted model poisoning, plus channel metrics and server-side
//! countermeasures.

pub mod covert;
pub mod data;
pub mod defense;
pub mod fl;
pub mod harness;
pub mod metrics;
pub mod nn;
