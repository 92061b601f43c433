//! Discrete-event simulator for dynamic power management of a multi-IP
//! system-on-chip.
//!
//! Each IP block owns a nine-state power state machine ([`psm`]) and a local
//! energy manager ([`lem`]) that picks an execution state per task from an
//! ordered rule table and decides how deep to sleep between tasks. A global
//! energy manager ([`gem`]) arbitrates concurrent task requests against the
//! shared battery and chip temperature ([`environment`]). Workload generators
//! and scenario presets live in [`workload`]; the event-driven runner, the
//! always-on baseline, and the comparison metrics live in [`engine`].

pub mod engine;
pub mod environment;
pub mod gem;
pub mod lem;
pub mod psm;
pub mod workload;
