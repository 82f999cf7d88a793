//! Redundant, connectionless dual-link teleoperation transport with the
//! monitoring, supervision and safety-recovery machinery around it, plus a
//! deterministic simulator of the two radio links.

pub mod config;
pub mod linksim;
pub mod safety;
pub mod sources;
pub mod supervisor;
pub mod sysmon;
pub mod telemetry;
pub mod transport;
pub mod wire;
