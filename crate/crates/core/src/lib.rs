//! Event-driven proactive assistance on a simulated tabletop.
//!
//! The pipeline: an [`monitor::EventMonitor`] segments human interaction
//! from an activity signal and hands a stabilized pre/post snapshot pair to
//! a [`planner::Planner`]; the returned id-indexed plan is validated,
//! grounded, executed and verified by [`executor`]; [`harness`] runs whole
//! scenario suites and computes success metrics; [`session`] drives the
//! same loop interactively.

pub mod config;
pub mod executor;
pub mod harness;
pub mod monitor;
pub mod perception;
pub mod planner;
pub mod render;
pub mod rng;
pub mod session;
pub mod workspace;
