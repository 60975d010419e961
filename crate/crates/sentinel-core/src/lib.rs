//! Status-monitored manipulation at desk scale.
//!
//! The crate is organised around the lifecycle of a policy:
//!
//! - [`geometry`] — waypoint, pose, and trajectory primitives.
//! - [`world`] — a deterministic kinematic pick-and-place world with scripted
//!   experts, runtime disturbances, and difficulty settings.
//! - [`ecgen`] — error-injected, recovery-annotated, loss-masked dataset
//!   synthesis from expert trajectories.
//! - [`runtime`] — the sentinel dispatch loop: status classification,
//!   on-demand thought-memory updates, and action generation.
//! - [`learner`] — small differentiable models, the combined training
//!   objective with hand-derived gradients, and low-rank adapters.
//! - [`secl`] — the self-evolving continual-learning loop with
//!   orthogonality-constrained adapter updates and EMA fusion.

pub mod ecgen;
pub mod geometry;
pub mod learner;
pub mod runtime;
pub mod secl;
pub mod util;
pub mod world;
