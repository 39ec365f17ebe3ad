//! Core of the enclave-DBT simulator: a modeled SGX-like machine, the
//! GISA-64 guest ISA with its reference interpreter, and the translation
//! engine that runs the same guests inside the modeled enclave.

pub mod abi;
pub mod cache;
pub mod engine;
pub mod gateway;
pub mod gisa;
pub mod hostsim;
pub mod locks;
pub mod machine;
pub mod memviews;
pub mod report;
pub mod sched;
pub mod signals;
pub mod threads;
pub mod trace;
pub mod xlat;
