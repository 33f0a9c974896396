//! Synthesis and evaluation of topology-aware collective communication
//! schedules over arbitrary network topologies.
//!
//! Given a topology (a directed graph of NPUs with alpha-beta link costs) and
//! a collective (precondition/postcondition chunk placements), the crate
//! produces congestion-free schedules either exactly, through a 0-1 integer
//! program over a time-expanded network, or at scale, through randomized
//! greedy chunk-to-link matching. Schedules replay under a continuous-time
//! FIFO-link cost model for comparison against Ring and Direct baselines.

pub mod collective;
pub mod driver;
pub mod error;
pub mod evaluator;
pub mod greedy;
pub mod ilp;
pub mod schedule;
pub mod solver;
pub mod ten;
pub mod topology;

pub use error::{Error, Result};
