//! Deterministic discrete-event simulator for partitioned real-time gang
//! scheduling with LLC bandwidth regulation and iGPU throttling.

pub mod contention;
pub mod engine;
pub mod metrics;
pub mod platform;
pub mod scenario;
pub mod scheduler;
pub mod sim;
pub mod throttle;
pub mod workload;
