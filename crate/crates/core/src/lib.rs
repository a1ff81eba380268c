//! Meta-scheduling resource broker.
//!
//! Application descriptions are expanded into jobs, mapped onto compute and
//! data services under deadline and budget constraints, dispatched through
//! pluggable execution adapters and watched until their outputs are verified.
//! All entities live in a crash-safe store keyed by a broker instance id.

pub mod clock;
pub mod model;
pub mod interp;
pub mod store;
pub mod sched;
pub mod exec;
pub mod runtime;
