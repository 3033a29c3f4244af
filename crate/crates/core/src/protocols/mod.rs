//! Systems built on the attestation kernel.

pub mod a2m;
pub mod bft;
pub mod chain;
pub mod client;
pub mod peer_review;
