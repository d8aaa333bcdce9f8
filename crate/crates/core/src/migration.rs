//! Runtime correction of placement drift: rank-based retargeting against
//! proportionally scaled group capacities, and the endpoint-exclusive
//! KV-cache transmission scheduler that runs inside tool intervals.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TrajectoryId;

#[derive(Debug, Error, PartialEq)]
pub enum MigrationError {
    #[error("trajectory {0} is not active")]
    TrajectoryInactive(TrajectoryId),
}

/// A requested prefix-cache transfer between two workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationRequest {
    pub trajectory_id: TrajectoryId,
    pub src_worker: usize,
    pub dst_worker: usize,
    pub cache_tokens: u64,
    /// Predicted total tokens; longer trajectories transfer first.
    pub priority_len: f64,
    pub issued_at: f64,
}

/// Cache transfer cost model: bytes are abstracted to tokens over an
/// effective link rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth_tokens_per_s: f64,
    pub setup_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            bandwidth_tokens_per_s: 40_000.0,
            setup_s: 0.05,
        }
    }
}

pub fn transfer_time(req: &MigrationRequest, link: &LinkModel) -> f64 {
    assert!(link.bandwidth_tokens_per_s > 0.0, "bandwidth must be > 0");
    link.setup_s + req.cache_tokens as f64 / link.bandwidth_tokens_per_s
}

/// Walks scaled group capacities cumulatively and returns the group whose
/// range covers the 1-based `rank`; ranks past the final range fall into the
/// last group.
pub fn group_for_rank(scaled_sizes: &[usize], rank: usize) -> usize {
    debug_assert!(rank >= 1);
    let mut cumulative = 0usize;
    for (g, &s) in scaled_sizes.iter().enumerate() {
        cumulative += s;
        if rank <= cumulative {
            return g;
        }
    }
    scaled_sizes.len() - 1
}

/// Picks the worker a trajectory should occupy given its refreshed
/// prediction: its rank among active trajectories (by descending predicted
/// total, ties by id) is matched against the original group sizes scaled by
/// `ceil(s_i * n_active / n_total)`.
pub fn retarget(
    traj: TrajectoryId,
    active_predicted_totals: &[(TrajectoryId, f64)],
    group_sizes: &[usize],
    n_total: usize,
) -> Result<usize, MigrationError> {
    assert!(!group_sizes.is_empty() && n_total >= 1);
    let n_active = active_predicted_totals.len();
    if n_active == 0 {
        return Err(MigrationError::TrajectoryInactive(traj));
    }
    let mut sorted: Vec<&(TrajectoryId, f64)> = active_predicted_totals.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let rank = 1 + sorted
        .iter()
        .position(|&&(id, _)| id == traj)
        .ok_or(MigrationError::TrajectoryInactive(traj))?;
    let scaled: Vec<usize> = group_sizes
        .iter()
        .map(|&s| div_ceil(s * n_active, n_total))
        .collect();
    Ok(group_for_rank(&scaled, rank))
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Greedy conflict-free batch: iterate pending requests by descending
/// trajectory length (ties by issue time, then id), selecting each request
/// whose endpoints are untouched by busy or already-selected transfers.
pub fn schedule_transfers(
    pending: &[MigrationRequest],
    busy_endpoints: &HashSet<usize>,
) -> Vec<MigrationRequest> {
    let mut order: Vec<&MigrationRequest> = pending.iter().collect();
    order.sort_by(|a, b| {
        b.priority_len
            .total_cmp(&a.priority_len)
            .then(a.issued_at.total_cmp(&b.issued_at))
            .then(a.trajectory_id.cmp(&b.trajectory_id))
    });
    let mut claimed: HashSet<usize> = HashSet::new();
    let mut batch = Vec::new();
    for req in order {
        let free = |w: usize| !busy_endpoints.contains(&w) && !claimed.contains(&w);
        if req.src_worker != req.dst_worker && free(req.src_worker) && free(req.dst_worker) {
            claimed.insert(req.src_worker);
            claimed.insert(req.dst_worker);
            batch.push(req.clone());
        }
    }
    batch
}
