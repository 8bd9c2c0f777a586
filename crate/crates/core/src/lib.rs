//! Decentralised malware firewall: byteplot imaging, a deep-belief-network
//! detection engine, and a simulated peer network that records authenticated
//! verdicts in a proof-of-work chain and reaches a trust-weighted consensus.

pub mod chain;
pub mod consensus;
pub mod dataset;
pub mod dbn;
pub mod imgcodec;
pub mod netsim;
pub mod rbm;
pub mod seed;
