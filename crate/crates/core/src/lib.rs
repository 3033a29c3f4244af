//! Software emulation of a trusted NIC.
//!
//! The [`kernel`] is the trusted computing base: it binds every message to a
//! session key and a monotonic counter. Everything else is untrusted host
//! code built on top of it.

pub mod bench;
pub mod checker;
pub mod device;
pub mod kernel;
pub mod log;
pub mod net;
pub mod protocols;
pub mod remote_attestation;
pub mod scenario;
pub mod transform;
pub mod wire;
