//! Trajectory-centric rollout orchestration for long-tail multi-step agentic
//! workloads, plus a deterministic discrete-event cluster simulator.
//!
//! The crate is organized around the three orchestration decisions for a
//! rollout batch:
//!
//! * **when** — [`scheduler`]: progressive priority scheduling with
//!   preemption, plus FCFS / round-robin / shortest-predicted-first baselines;
//! * **where** — [`placement`]: interference-weighted contiguous partitioning
//!   via presorted dynamic programming, short-trajectory aggregation, and
//!   least-load / cache-aware routing baselines, corrected at runtime by
//!   [`migration`];
//! * **how** — [`allocator`]: sort-initialized simulated annealing over
//!   per-worker model-parallelism degrees.
//!
//! [`model`] holds the shared domain types and the profile-derived timing
//! functions, [`workload`] generates reproducible heavy-tail trajectory sets,
//! [`predictor`] provides progressive length estimators, and [`sim`] executes
//! a workload under a policy selection and emits per-trajectory makespan
//! breakdowns and cluster metrics summarized by [`reporting`].

pub mod allocator;
pub mod migration;
pub mod model;
pub mod placement;
pub mod predictor;
pub mod reporting;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use model::{
    MakespanBreakdown, ModelError, ProfileTable, Step, Trajectory, TrajectoryId, WorkerConfig,
};
