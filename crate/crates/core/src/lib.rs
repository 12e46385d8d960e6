//! Multi-agent grid navigation with adaptive quadtree state abstraction.
//!
//! Agents in a partially observed grid world encode their field of view as
//! region-quadtree graphs, adaptively trim those graphs conditioned on
//! received communication symbols, and jointly learn navigation policies and
//! a discrete communication protocol with decentralized actor-critic
//! training.
//!
//! Top-level layout:
//! - [`grid`]: the `FindGoal` environment (occluded partial views, noise and
//!   erasure channels, episode traces)
//! - [`quadtree`]: region-quadtree codec (decompose, trim, measure,
//!   reconstruct)
//! - [`neural`]: tape-based reverse-mode autodiff, layers (MLP, GIN, GRU,
//!   CNN), straight-through Gumbel-softmax, Adam, gradient checking
//! - [`abstractor`]: the adaptive tree abstractor (merge scoring, sampling,
//!   differentiable size surrogate)
//! - [`agent`]: per-agent network and step function for all encoder variants
//! - [`trainer`]: rollouts, returns, loss, decentralized training loop
//! - [`evalharness`]: evaluation protocol (reward/timeout/size reports,
//!   noise and erasure sweeps, smoothing)
//! - [`config`], [`checkpoint`], [`metrics`], [`seeding`]: run configuration,
//!   parameter persistence, line-delimited metric streams, seed derivation

pub mod abstractor;
pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod evalharness;
pub mod grid;
pub mod metrics;
pub mod neural;
pub mod quadtree;
pub mod seeding;
pub mod trainer;

pub use grid::{Action, CellState, EnvConfig, EnvState, GridMap, Observation, StepResult, Symbol};
pub use quadtree::{MergeMask, QuadNode, QuadTree};
