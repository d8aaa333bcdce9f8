//! Per-worker queue discipline.
//!
//! Progressive priority scheduling (PPS) ranks pending generation requests
//! by predicted remaining tokens and preempts an active request whenever a
//! pending one outranks the least urgent active request, approximating
//! longest-processing-time-first as predictions refine. FCFS, round-robin,
//! and shortest-predicted-first orderings are provided as baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TrajectoryId;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("trajectory {0} is already enqueued on this worker")]
    DuplicateRequest(TrajectoryId),
}

/// Queue discipline for pending generation requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedPolicy {
    /// Progressive priority scheduling with preemption.
    Pps,
    /// Request arrival order, no preemption.
    Fcfs,
    /// Step-centric re-queue at the tail, no preemption. Per queue this
    /// coincides with arrival order; it is the default discipline of
    /// step-centric frameworks.
    RoundRobin,
    /// Ascending predicted total length, no preemption.
    Sjf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Pending,
    Active,
    /// Evicted mid-step and waiting in the pending queue again.
    Preempted,
}

/// One step's generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub trajectory_id: TrajectoryId,
    pub step_index: usize,
    /// Predicted remaining tokens; higher means more urgent under PPS.
    pub priority: f64,
    /// Predicted total tokens; ordering key for SJF.
    pub predicted_total: f64,
    pub enqueued_at: f64,
    pub state: RequestState,
}

/// A preemption performed by [`WorkerQueue::schedule`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preemption {
    pub evicted: TrajectoryId,
    pub promoted: TrajectoryId,
    pub at: f64,
}

/// Pending/active request sets of one simulated worker.
#[derive(Debug, Clone)]
pub struct WorkerQueue {
    policy: SchedPolicy,
    max_active: usize,
    pending: Vec<GenRequest>,
    active: Vec<GenRequest>,
}

impl WorkerQueue {
    pub fn new(policy: SchedPolicy, max_active: usize) -> Self {
        assert!(max_active >= 1);
        WorkerQueue {
            policy,
            max_active,
            pending: Vec::new(),
            active: Vec::new(),
        }
    }

    pub fn pending(&self) -> &[GenRequest] {
        &self.pending
    }

    pub fn active(&self) -> &[GenRequest] {
        &self.active
    }

    pub fn max_active(&self) -> usize {
        self.max_active
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty() && self.active.is_empty()
    }

    fn sort_pending(&mut self) {
        match self.policy {
            SchedPolicy::Pps => self.pending.sort_by(|a, b| {
                b.priority
                    .total_cmp(&a.priority)
                    .then(a.enqueued_at.total_cmp(&b.enqueued_at))
                    .then(a.trajectory_id.cmp(&b.trajectory_id))
            }),
            SchedPolicy::Fcfs | SchedPolicy::RoundRobin => self.pending.sort_by(|a, b| {
                a.enqueued_at
                    .total_cmp(&b.enqueued_at)
                    .then(a.trajectory_id.cmp(&b.trajectory_id))
            }),
            SchedPolicy::Sjf => self.pending.sort_by(|a, b| {
                a.predicted_total
                    .total_cmp(&b.predicted_total)
                    .then(a.enqueued_at.total_cmp(&b.enqueued_at))
                    .then(a.trajectory_id.cmp(&b.trajectory_id))
            }),
        }
    }

    /// Inserts a returning request. Under PPS, if the queue head now
    /// outranks the least urgent active request while the active set is
    /// full, that request is evicted (its cache tag persists) and the head
    /// is promoted into the vacated slot.
    pub fn schedule(
        &mut self,
        mut returning: GenRequest,
    ) -> Result<Option<Preemption>, SchedulerError> {
        let id = returning.trajectory_id;
        if self
            .pending
            .iter()
            .chain(self.active.iter())
            .any(|r| r.trajectory_id == id)
        {
            return Err(SchedulerError::DuplicateRequest(id));
        }
        let now = returning.enqueued_at;
        returning.state = RequestState::Pending;
        self.pending.push(returning);
        self.sort_pending();

        if self.policy != SchedPolicy::Pps || self.active.len() < self.max_active {
            return Ok(None);
        }
        let min_idx = match self
            .active
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.priority
                    .total_cmp(&b.priority)
                    .then(b.enqueued_at.total_cmp(&a.enqueued_at))
                    .then(b.trajectory_id.cmp(&a.trajectory_id))
            })
            .map(|(i, _)| i)
        {
            Some(i) => i,
            None => return Ok(None),
        };
        let top_priority = self.pending[0].priority;
        if top_priority > self.active[min_idx].priority {
            let mut evicted = self.active.swap_remove(min_idx);
            let evicted_id = evicted.trajectory_id;
            evicted.state = RequestState::Preempted;
            evicted.enqueued_at = now;
            self.pending.push(evicted);
            self.sort_pending();

            let mut promoted = self.pending.remove(0);
            promoted.state = RequestState::Active;
            let promoted_id = promoted.trajectory_id;
            self.active.push(promoted);
            return Ok(Some(Preemption {
                evicted: evicted_id,
                promoted: promoted_id,
                at: now,
            }));
        }
        Ok(None)
    }

    /// Moves queue-head requests into the active set until it is full,
    /// preserving the policy order. Returns the activated requests.
    pub fn admit(&mut self) -> Vec<GenRequest> {
        let mut activated = Vec::new();
        while self.active.len() < self.max_active && !self.pending.is_empty() {
            let mut req = self.pending.remove(0);
            req.state = RequestState::Active;
            activated.push(req.clone());
            self.active.push(req);
        }
        activated
    }

    /// Removes an active request (its decode finished or it enters a tool
    /// interval).
    pub fn release(&mut self, traj: TrajectoryId) -> Option<GenRequest> {
        let idx = self.active.iter().position(|r| r.trajectory_id == traj)?;
        Some(self.active.swap_remove(idx))
    }

    /// PPS postcondition: the least urgent active request is at least as
    /// urgent as the most urgent pending one.
    pub fn preemption_invariant_holds(&self) -> bool {
        let min_active = self
            .active
            .iter()
            .map(|r| r.priority)
            .fold(f64::INFINITY, f64::min);
        let max_pending = self
            .pending
            .iter()
            .map(|r| r.priority)
            .fold(f64::NEG_INFINITY, f64::max);
        self.active.len() < self.max_active || min_active >= max_pending
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn req(id: u64, priority: f64, at: f64) -> GenRequest {
        GenRequest {
            trajectory_id: TrajectoryId(id),
            step_index: 0,
            priority,
            predicted_total: priority,
            enqueued_at: at,
            state: RequestState::Pending,
        }
    }

    #[test]
    fn pps_preempts_lower_priority_active() {
        let mut q = WorkerQueue::new(SchedPolicy::Pps, 1);
        q.schedule(req(1, 10.0, 0.0)).unwrap();
        q.admit();
        let p = q.schedule(req(2, 50.0, 1.0)).unwrap().unwrap();
        assert_eq!(p.evicted, TrajectoryId(1));
        assert_eq!(p.promoted, TrajectoryId(2));
        assert_eq!(q.active().len(), 1);
        assert_eq!(q.active()[0].trajectory_id, TrajectoryId(2));
        assert_eq!(q.pending().len(), 1);
        assert_eq!(q.pending()[0].trajectory_id, TrajectoryId(1));
        assert_eq!(q.pending()[0].state, RequestState::Preempted);
    }

    #[test]
    fn pps_no_preemption_when_active_outranks() {
        let mut q = WorkerQueue::new(SchedPolicy::Pps, 1);
        q.schedule(req(1, 50.0, 0.0)).unwrap();
        q.admit();
        assert!(q.schedule(req(2, 10.0, 1.0)).unwrap().is_none());
        assert_eq!(q.pending().len(), 1);
        assert_eq!(q.pending()[0].trajectory_id, TrajectoryId(2));
    }

    #[test]
    fn pps_pending_sorted_descending() {
        let mut q = WorkerQueue::new(SchedPolicy::Pps, 8);
        for (id, p) in [(1, 5.0), (2, 20.0), (3, 7.0)] {
            q.schedule(req(id, p, id as f64)).unwrap();
        }
        let order: Vec<f64> = q.pending().iter().map(|r| r.priority).collect();
        assert_eq!(order, vec![20.0, 7.0, 5.0]);
    }

    #[test]
    fn duplicate_enqueue_rejected() {
        let mut q = WorkerQueue::new(SchedPolicy::Fcfs, 2);
        q.schedule(req(1, 1.0, 0.0)).unwrap();
        assert_eq!(
            q.schedule(req(1, 2.0, 1.0)).unwrap_err(),
            SchedulerError::DuplicateRequest(TrajectoryId(1))
        );
        q.admit();
        assert!(q.schedule(req(1, 2.0, 1.0)).is_err());
    }

    #[test]
    fn admit_fills_slots_by_priority() {
        let mut q = WorkerQueue::new(SchedPolicy::Pps, 4);
        for (id, p) in [(1, 5.0), (2, 9.0), (3, 1.0), (4, 7.0), (5, 3.0), (6, 8.0)] {
            q.schedule(req(id, p, 0.0)).unwrap();
        }
        let activated = q.admit();
        let prios: Vec<f64> = activated.iter().map(|r| r.priority).collect();
        assert_eq!(prios, vec![9.0, 8.0, 7.0, 5.0]);
        assert!(q.admit().is_empty(), "full set admits nothing");
    }

    #[test]
    fn admit_tie_break_by_enqueue_time() {
        let mut q = WorkerQueue::new(SchedPolicy::Pps, 2);
        q.schedule(req(2, 9.0, 2.0)).unwrap();
        q.schedule(req(1, 9.0, 1.0)).unwrap();
        let activated = q.admit();
        assert_eq!(activated[0].trajectory_id, TrajectoryId(1));
        assert_eq!(activated[1].trajectory_id, TrajectoryId(2));
    }

    #[test]
    fn sjf_orders_by_predicted_total() {
        let mut q = WorkerQueue::new(SchedPolicy::Sjf, 1);
        for (id, total) in [(1, 500.0), (2, 100.0), (3, 300.0)] {
            let mut r = req(id, 1.0, 0.0);
            r.predicted_total = total;
            q.schedule(r).unwrap();
        }
        let order: Vec<u64> = q.pending().iter().map(|r| r.trajectory_id.0).collect();
        assert_eq!(order, vec![2, 3, 1]);
    }

    #[test]
    fn equal_priorities_reduce_to_arrival_order() {
        let mut pps = WorkerQueue::new(SchedPolicy::Pps, 1);
        let mut fcfs = WorkerQueue::new(SchedPolicy::Fcfs, 1);
        for id in 0..10u64 {
            pps.schedule(req(id, 42.0, id as f64)).unwrap();
            fcfs.schedule(req(id, 42.0, id as f64)).unwrap();
        }
        let a: Vec<u64> = pps.pending().iter().map(|r| r.trajectory_id.0).collect();
        let b: Vec<u64> = fcfs.pending().iter().map(|r| r.trajectory_id.0).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn preemption_invariant_under_random_operations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let cap = rng.gen_range(1..5);
            let mut q = WorkerQueue::new(SchedPolicy::Pps, cap);
            let mut next_id = 0u64;
            for step in 0..50 {
                let now = step as f64;
                if rng.gen_bool(0.6) {
                    let r = req(next_id, rng.gen_range(0.0..100.0), now);
                    next_id += 1;
                    q.schedule(r).unwrap();
                } else if let Some(id) =
                    q.active().first().map(|r| r.trajectory_id)
                {
                    q.release(id);
                }
                q.admit();
                assert!(q.preemption_invariant_holds(), "invariant violated");
            }
        }
    }

    #[test]
    fn single_preemption_per_schedule_call() {
        let mut q = WorkerQueue::new(SchedPolicy::Pps, 2);
        q.schedule(req(1, 1.0, 0.0)).unwrap();
        q.schedule(req(2, 2.0, 0.0)).unwrap();
        q.admit();
        // Even though both actives are below the newcomer, only one eviction
        // happens per call.
        let p = q.schedule(req(3, 50.0, 1.0)).unwrap();
        assert!(p.is_some());
        assert_eq!(q.active().iter().filter(|r| r.priority == 50.0).count(), 1);
        assert_eq!(q.pending().len(), 1);
    }
}
