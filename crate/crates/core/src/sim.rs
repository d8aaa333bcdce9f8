//! Deterministic discrete-event execution of a trajectory workload on a
//! simulated worker cluster.
//!
//! Time advances event to event; decode progress is integrated exactly
//! between events under piecewise-constant batch-dependent rates. Each
//! active request on a worker with batch `b` consumes base-seconds of work
//! at rate `1/F(b)` per wall second, so base compute and interference
//! overhead are separable by construction. Tool intervals release the
//! request's slot; predictions fire at step completion and overlap with the
//! tool interval; planned placements may be corrected through cache
//! migrations that run only inside tool intervals.
//!
//! Event ordering is total: (time, kind rank, payload id, insertion
//! sequence), making runs bit-reproducible for identical inputs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::migration::{retarget, schedule_transfers, transfer_time, LinkModel, MigrationRequest};
use crate::model::{
    base_per_token_time, interference_factor, InterferenceFn, MakespanBreakdown, ModelError,
    ProfileTable, StepTiming, Trajectory, TrajectoryId, WorkerConfig,
};
use crate::placement::{
    aggregate_short, presorted_dp, PlacementError, PlacementPlan, PlacementProblem, RoutePolicy,
    RouterState,
};
use crate::predictor::Estimator;
use crate::reporting::percentile;
use crate::scheduler::{GenRequest, RequestState, SchedPolicy, SchedulerError, WorkerQueue};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulator stalled at t={time}: {unfinished} unfinished trajectories ({diagnostic})")]
    Stall {
        time: f64,
        unfinished: usize,
        diagnostic: String,
    },
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Short-trajectory aggregation applied before the placement DP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanAggregation {
    /// Items below this quantile of predicted length are bucketed.
    pub threshold_quantile: f64,
    pub bucket_size: usize,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scheduler: SchedPolicy,
    pub placement: RoutePolicy,
    pub migration_enabled: bool,
    pub link: LinkModel,
    /// Model engines without cache persistence: eviction invalidates the
    /// prefix cache, so re-admission recomputes it.
    pub recompute_on_evict: bool,
    /// Prefill per-token time = decode per-token time / this factor.
    pub prefill_speedup: f64,
    pub plan_aggregation: Option<PlanAggregation>,
    pub collect_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scheduler: SchedPolicy::Pps,
            placement: RoutePolicy::Plan,
            migration_enabled: true,
            link: LinkModel::default(),
            recompute_on_evict: false,
            prefill_speedup: 8.0,
            plan_aggregation: None,
            collect_events: false,
        }
    }
}

/// Per-request token generation rate on a worker at the given batch size:
/// `1 / (T(mp) * F(mp, batch))`.
pub fn rebatch_rate(profile: &ProfileTable, mp: u32, batch: u32) -> Result<f64, ModelError> {
    let t = base_per_token_time(profile, mp)?;
    let f = interference_factor(profile, mp, batch)?;
    Ok(1.0 / (t * f))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub id: TrajectoryId,
    pub breakdown: MakespanBreakdown,
    pub exposed_migration_s: f64,
    pub created_at: f64,
    pub completed_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub makespan: f64,
    pub throughput_tokens_per_s: f64,
    pub total_decode_tokens: u64,
    pub preemptions: u64,
    pub migrations: u64,
    pub exposed_migration_s: f64,
    pub worker_busy_fraction: Vec<f64>,
    pub per_trajectory: Vec<TrajectoryMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoggedEvent {
    pub t: f64,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
}

#[derive(Debug)]
pub struct SimOutput {
    pub metrics: RunMetrics,
    pub events: Vec<LoggedEvent>,
    pub plan: Option<PlacementPlan>,
}

// ---------------------------------------------------------------------------
// event queue

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    StepGenerationDone {
        traj: usize,
        worker: usize,
        epoch: u64,
    },
    ToolDone {
        traj: usize,
    },
    MigrationDone {
        traj: usize,
    },
    PredictionReady {
        traj: usize,
        step: usize,
    },
    AdmitTick {
        worker: usize,
    },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::StepGenerationDone { .. } => 0,
            EventKind::ToolDone { .. } => 1,
            EventKind::MigrationDone { .. } => 2,
            EventKind::PredictionReady { .. } => 3,
            EventKind::AdmitTick { .. } => 4,
        }
    }

    fn payload(&self) -> u64 {
        match *self {
            EventKind::StepGenerationDone { traj, .. }
            | EventKind::ToolDone { traj }
            | EventKind::MigrationDone { traj }
            | EventKind::PredictionReady { traj, .. } => traj as u64,
            EventKind::AdmitTick { worker } => worker as u64,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            EventKind::StepGenerationDone { .. } => "step_generation_done",
            EventKind::ToolDone { .. } => "tool_done",
            EventKind::MigrationDone { .. } => "migration_done",
            EventKind::PredictionReady { .. } => "prediction_ready",
            EventKind::AdmitTick { .. } => "admit_tick",
        }
    }
}

#[derive(Debug, Clone)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we need earliest-first
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.rank().cmp(&self.kind.rank()))
            .then(other.kind.payload().cmp(&self.kind.payload()))
            .then(other.seq.cmp(&self.seq))
    }
}

// ---------------------------------------------------------------------------
// runtime state

#[derive(Debug)]
struct StepProgress {
    step: usize,
    worker: usize,
    prefill_init: bool,
    remaining_prefill: f64,
    remaining_decode: f64,
    decode_work_total: f64,
    queue_accum: f64,
    base_accum: f64,
    interf_accum: f64,
    enqueued_at: f64,
    active: bool,
}

#[derive(Debug)]
struct Gate {
    /// None for the arrival gate of step 0.
    after_step: Option<usize>,
    gen_done_at: f64,
    tool_done_at: Option<f64>,
    pred_ready_at: Option<f64>,
    pred_needed: bool,
}

#[derive(Debug)]
struct TrajRuntime {
    steps_done: usize,
    predicted_total: f64,
    predicted_remaining: f64,
    cache_worker: Option<usize>,
    cached_tokens: u64,
    progress: Option<StepProgress>,
    gate: Option<Gate>,
    pending_migration: Option<MigrationRequest>,
    in_flight_migration: Option<MigrationRequest>,
    in_tool: bool,
    timings: Vec<StepTiming>,
    exposed_migration: f64,
    completed_at: Option<f64>,
}

struct WorkerState {
    t_base: f64,
    prefill_t: f64,
    interference: InterferenceFn,
    queue: WorkerQueue,
    last_settle: f64,
    epoch: u64,
    rates_dirty: bool,
    admit_pending: bool,
    busy_time: f64,
    decode_tokens_done: u64,
}

struct Engine<'a> {
    workload: &'a [Trajectory],
    id_index: HashMap<TrajectoryId, usize>,
    estimator: &'a dyn Estimator,
    config: &'a SimConfig,
    workers: Vec<WorkerState>,
    runtime: Vec<TrajRuntime>,
    router: RouterState,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    plan: Option<PlacementPlan>,
    /// cluster index of the worker serving plan group j
    plan_worker_of_group: Vec<usize>,
    busy_endpoints: HashSet<usize>,
    use_step_predictions: bool,
    preemptions: u64,
    migrations: u64,
    events: Vec<LoggedEvent>,
}

/// Executes `workload` on `cluster` under the configured policies and
/// returns per-trajectory breakdowns plus cluster metrics. Fully
/// deterministic for identical inputs (the estimator carries the only seed).
pub fn run(
    workload: &[Trajectory],
    cluster: &[WorkerConfig],
    profile: &ProfileTable,
    estimator: &dyn Estimator,
    config: &SimConfig,
) -> Result<SimOutput, SimError> {
    validate(workload, cluster, profile, config)?;
    let mut engine = Engine::new(workload, cluster, profile, estimator, config)?;
    engine.seed_arrivals();
    engine.drain()?;
    engine.finish()
}

fn validate(
    workload: &[Trajectory],
    cluster: &[WorkerConfig],
    profile: &ProfileTable,
    config: &SimConfig,
) -> Result<(), SimError> {
    if workload.is_empty() {
        return Err(SimError::InvalidInput("empty workload".into()));
    }
    if cluster.is_empty() {
        return Err(SimError::InvalidInput("empty cluster".into()));
    }
    let mut ids = HashSet::new();
    for t in workload {
        t.validate()?;
        if !ids.insert(t.id) {
            return Err(SimError::InvalidInput(format!(
                "duplicate trajectory id {}",
                t.id
            )));
        }
    }
    for (i, w) in cluster.iter().enumerate() {
        if w.worker_id != i {
            return Err(SimError::InvalidInput(format!(
                "worker_id {} at position {i}; ids must be positional",
                w.worker_id
            )));
        }
        w.validate(profile)?;
    }
    if config.migration_enabled && config.placement != RoutePolicy::Plan {
        return Err(SimError::InvalidInput(
            "migration requires plan placement".into(),
        ));
    }
    if !(config.prefill_speedup > 0.0) {
        return Err(SimError::InvalidInput("prefill_speedup must be > 0".into()));
    }
    Ok(())
}

impl<'a> Engine<'a> {
    fn new(
        workload: &'a [Trajectory],
        cluster: &[WorkerConfig],
        profile: &ProfileTable,
        estimator: &'a dyn Estimator,
        config: &'a SimConfig,
    ) -> Result<Self, SimError> {
        let workers = cluster
            .iter()
            .map(|w| {
                let t_base = base_per_token_time(profile, w.mp_degree)?;
                Ok(WorkerState {
                    t_base,
                    prefill_t: t_base / config.prefill_speedup,
                    interference: InterferenceFn::from_profile(
                        profile,
                        w.mp_degree,
                        w.max_active as u32,
                    )?,
                    queue: WorkerQueue::new(config.scheduler, w.max_active),
                    last_settle: 0.0,
                    epoch: 0,
                    rates_dirty: false,
                    admit_pending: false,
                    busy_time: 0.0,
                    decode_tokens_done: 0,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;

        // Prompt-only estimates for every trajectory; these seed priorities
        // and, under plan placement, the initial partition.
        let runtime: Vec<TrajRuntime> = workload
            .iter()
            .map(|t| {
                let p = estimator.predict(t, 0, t.created_at);
                TrajRuntime {
                    steps_done: 0,
                    predicted_total: p.predicted_total_tokens,
                    predicted_remaining: p.predicted_remaining_tokens,
                    cache_worker: None,
                    cached_tokens: 0,
                    progress: None,
                    gate: None,
                    pending_migration: None,
                    in_flight_migration: None,
                    in_tool: false,
                    timings: Vec::with_capacity(t.steps.len()),
                    exposed_migration: 0.0,
                    completed_at: None,
                }
            })
            .collect();

        let id_index: HashMap<TrajectoryId, usize> = workload
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id, i))
            .collect();
        let mut router = RouterState::new(config.placement, cluster.len());
        let mut plan = None;
        let mut plan_worker_of_group = Vec::new();
        if config.placement == RoutePolicy::Plan {
            // Longest groups land on the highest-degree workers.
            let mut order: Vec<usize> = (0..cluster.len()).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(cluster[i].mp_degree), i));
            let plan_workers: Vec<WorkerConfig> =
                order.iter().map(|&i| cluster[i]).collect();
            let entries: Vec<(TrajectoryId, f64)> = workload
                .iter()
                .zip(&runtime)
                .map(|(t, r)| (t.id, r.predicted_total))
                .collect();
            let mut problem = PlacementProblem::new(&entries, &plan_workers, profile)?;
            if let Some(agg) = config.plan_aggregation {
                let lengths: Vec<f64> = problem.items().iter().map(|i| i.length).collect();
                let threshold = percentile(&lengths, agg.threshold_quantile * 100.0)
                    .expect("non-empty lengths");
                let reduced = aggregate_short(&problem, threshold, agg.bucket_size);
                if reduced.n_items() >= reduced.n_workers() {
                    problem = reduced;
                }
            }
            let p = presorted_dp(&problem)?;
            let group_assignment = p.assignments(&problem);
            let mut assignment = HashMap::new();
            for (id, group) in group_assignment {
                debug_assert!(id_index.contains_key(&id));
                assignment.insert(id, order[group]);
            }
            router.set_assignment(assignment);
            plan_worker_of_group = order;
            plan = Some(p);
        }

        let use_step_predictions = matches!(config.scheduler, SchedPolicy::Pps | SchedPolicy::Sjf)
            || config.migration_enabled;

        Ok(Engine {
            workload,
            id_index,
            estimator,
            config,
            workers,
            runtime,
            router,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            plan,
            plan_worker_of_group,
            busy_endpoints: HashSet::new(),
            use_step_predictions,
            preemptions: 0,
            migrations: 0,
            events: Vec::new(),
        })
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn push_admit(&mut self, worker: usize, time: f64) {
        if !self.workers[worker].admit_pending {
            self.workers[worker].admit_pending = true;
            self.push(time, EventKind::AdmitTick { worker });
        }
    }

    fn seed_arrivals(&mut self) {
        for (idx, t) in self.workload.iter().enumerate() {
            self.runtime[idx].gate = Some(Gate {
                after_step: None,
                gen_done_at: t.created_at,
                tool_done_at: None,
                pred_ready_at: Some(t.created_at),
                pred_needed: false,
            });
            self.push(t.created_at, EventKind::ToolDone { traj: idx });
        }
    }

    /// Advances every active request on `worker` to time `t` under the
    /// piecewise-constant batch rate.
    fn settle(&mut self, worker: usize, t: f64) {
        let dt = t - self.workers[worker].last_settle;
        self.workers[worker].last_settle = t;
        if dt <= 0.0 {
            return;
        }
        let batch = self.workers[worker].queue.active().len();
        if batch == 0 {
            return;
        }
        self.workers[worker].busy_time += dt;
        let f = self.workers[worker].interference.factor(batch);
        let work = dt / f;
        let active_ids: Vec<TrajectoryId> = self.workers[worker]
            .queue
            .active()
            .iter()
            .map(|r| r.trajectory_id)
            .collect();
        for id in active_ids {
            let idx = self.index_of(id);
            let progress = self.runtime[idx].progress.as_mut().expect("active request");
            let consumed_prefill = progress.remaining_prefill.min(work);
            progress.remaining_prefill -= consumed_prefill;
            let consumed_decode = progress.remaining_decode.min(work - consumed_prefill);
            progress.remaining_decode -= consumed_decode;
            let consumed = consumed_prefill + consumed_decode;
            progress.base_accum += consumed;
            progress.interf_accum += dt - consumed;
        }
    }

    fn index_of(&self, id: TrajectoryId) -> usize {
        self.id_index[&id]
    }

    /// Recomputes completion events for a worker whose batch or membership
    /// changed.
    fn reschedule_completions(&mut self, worker: usize, t: f64) {
        self.workers[worker].epoch += 1;
        self.workers[worker].rates_dirty = false;
        let epoch = self.workers[worker].epoch;
        let batch = self.workers[worker].queue.active().len();
        if batch == 0 {
            return;
        }
        let f = self.workers[worker].interference.factor(batch);
        let active_ids: Vec<TrajectoryId> = self.workers[worker]
            .queue
            .active()
            .iter()
            .map(|r| r.trajectory_id)
            .collect();
        for id in active_ids {
            let idx = self.index_of(id);
            let progress = self.runtime[idx].progress.as_ref().expect("active request");
            let remaining = progress.remaining_prefill + progress.remaining_decode;
            self.push(
                t + remaining * f,
                EventKind::StepGenerationDone {
                    traj: idx,
                    worker,
                    epoch,
                },
            );
        }
    }

    fn activate(&mut self, idx: usize, worker: usize, t: f64) {
        let traj = &self.workload[idx];
        let runtime = &mut self.runtime[idx];
        let progress = runtime.progress.as_mut().expect("enqueued request");
        progress.queue_accum += t - progress.enqueued_at;
        progress.active = true;
        if !progress.prefill_init {
            let k = progress.step;
            let decoded_tokens = (progress.decode_work_total - progress.remaining_decode)
                / self.workers[worker].t_base;
            let uncached = if runtime.cache_worker == Some(worker) {
                traj.steps[k].prefill_tokens as f64
            } else {
                traj.context_through_prefill(k) as f64 + decoded_tokens
            };
            progress.remaining_prefill = uncached * self.workers[worker].prefill_t;
            progress.prefill_init = true;
        }
    }

    fn enqueue_step(&mut self, idx: usize, t: f64) -> Result<(), SimError> {
        let traj = &self.workload[idx];
        let k = self.runtime[idx].steps_done;
        let worker = match self.config.placement {
            RoutePolicy::Plan => self
                .router
                .assignment_of(traj.id)
                .ok_or(PlacementError::UnknownTrajectory(traj.id))?,
            _ => self.router.route_step(traj.id)?,
        };
        self.router.add_load(worker);
        let decode_work = traj.steps[k].decode_tokens as f64 * self.workers[worker].t_base;
        self.runtime[idx].progress = Some(StepProgress {
            step: k,
            worker,
            prefill_init: false,
            remaining_prefill: 0.0,
            remaining_decode: decode_work,
            decode_work_total: decode_work,
            queue_accum: 0.0,
            base_accum: 0.0,
            interf_accum: 0.0,
            enqueued_at: t,
            active: false,
        });
        let request = GenRequest {
            trajectory_id: traj.id,
            step_index: k,
            priority: self.runtime[idx].predicted_remaining,
            predicted_total: self.runtime[idx].predicted_total,
            enqueued_at: t,
            state: RequestState::Pending,
        };
        self.settle(worker, t);
        if let Some(preemption) = self.workers[worker].queue.schedule(request)? {
            self.preemptions += 1;
            let evicted_idx = self.index_of(preemption.evicted);
            {
                let evicted = &mut self.runtime[evicted_idx];
                let progress = evicted.progress.as_mut().expect("evicted request");
                progress.active = false;
                progress.enqueued_at = t;
                if self.config.recompute_on_evict {
                    progress.prefill_init = false;
                    evicted.cache_worker = None;
                    self.router.clear_cache_tag(preemption.evicted);
                }
            }
            let promoted_idx = self.index_of(preemption.promoted);
            self.activate(promoted_idx, worker, t);
            self.workers[worker].rates_dirty = true;
        }
        self.push_admit(worker, t);
        Ok(())
    }

    fn gate_check(&mut self, idx: usize, t: f64) -> Result<(), SimError> {
        let ready = {
            let runtime = &self.runtime[idx];
            match &runtime.gate {
                Some(gate) => {
                    gate.tool_done_at.is_some()
                        && (!gate.pred_needed || gate.pred_ready_at.is_some())
                        && runtime.in_flight_migration.is_none()
                }
                None => false,
            }
        };
        if !ready {
            return Ok(());
        }
        let gate = self.runtime[idx].gate.take().unwrap();
        if gate.after_step.is_some() {
            let tool_done = gate.tool_done_at.unwrap();
            let non_gpu = tool_done.max(gate.pred_ready_at.unwrap_or(tool_done)) - gate.gen_done_at;
            self.runtime[idx]
                .timings
                .last_mut()
                .expect("step timing recorded")
                .tool_time = non_gpu;
            let exposed = (t - gate.gen_done_at - non_gpu).max(0.0);
            self.runtime[idx].exposed_migration += exposed;
        }
        self.enqueue_step(idx, t)
    }

    fn active_predicted_totals(&self) -> Vec<(TrajectoryId, f64)> {
        self.workload
            .iter()
            .zip(&self.runtime)
            .filter(|(_, r)| r.completed_at.is_none())
            .map(|(t, r)| (t.id, r.predicted_total))
            .collect()
    }

    fn consider_retarget(&mut self, idx: usize, t: f64) {
        let plan = self.plan.as_ref().expect("plan placement");
        let id = self.workload[idx].id;
        let active = self.active_predicted_totals();
        let group = match retarget(id, &active, &plan.group_sizes, self.workload.len()) {
            Ok(g) => g,
            Err(_) => return,
        };
        let target = self.plan_worker_of_group[group];
        let current = self.router.assignment_of(id).expect("planned trajectory");
        let runtime = &mut self.runtime[idx];
        if runtime.in_flight_migration.is_some() {
            return;
        }
        if target == current {
            runtime.pending_migration = None;
            return;
        }
        runtime.pending_migration = Some(MigrationRequest {
            trajectory_id: id,
            src_worker: current,
            dst_worker: target,
            cache_tokens: runtime.cached_tokens,
            priority_len: runtime.predicted_total,
            issued_at: t,
        });
    }

    /// Greedily starts conflict-free transfers for trajectories currently
    /// inside a tool interval.
    fn try_start_transfers(&mut self, t: f64) {
        let eligible: Vec<MigrationRequest> = self
            .runtime
            .iter()
            .filter(|r| r.in_tool && r.in_flight_migration.is_none())
            .filter_map(|r| r.pending_migration.clone())
            .collect();
        if eligible.is_empty() {
            return;
        }
        let batch = schedule_transfers(&eligible, &self.busy_endpoints);
        for req in batch {
            let idx = self.index_of(req.trajectory_id);
            self.busy_endpoints.insert(req.src_worker);
            self.busy_endpoints.insert(req.dst_worker);
            let done = t + transfer_time(&req, &self.config.link);
            self.runtime[idx].pending_migration = None;
            self.runtime[idx].in_flight_migration = Some(req);
            self.push(done, EventKind::MigrationDone { traj: idx });
        }
    }

    fn drain(&mut self) -> Result<(), SimError> {
        while let Some(event) = self.heap.pop() {
            let t = event.time;
            self.now = t;
            // stale completion events are skipped silently
            if let EventKind::StepGenerationDone { worker, epoch, .. } = event.kind {
                if epoch != self.workers[worker].epoch {
                    continue;
                }
            }
            if self.config.collect_events {
                let (trajectory, worker) = match event.kind {
                    EventKind::StepGenerationDone { traj, worker, .. } => {
                        (Some(self.workload[traj].id.0), Some(worker))
                    }
                    EventKind::ToolDone { traj }
                    | EventKind::MigrationDone { traj }
                    | EventKind::PredictionReady { traj, .. } => {
                        (Some(self.workload[traj].id.0), None)
                    }
                    EventKind::AdmitTick { worker } => (None, Some(worker)),
                };
                self.events.push(LoggedEvent {
                    t,
                    kind: event.kind.name(),
                    trajectory,
                    worker,
                });
            }
            match event.kind {
                EventKind::StepGenerationDone { traj, worker, .. } => {
                    self.on_generation_done(traj, worker, t)?;
                }
                EventKind::ToolDone { traj } => {
                    let runtime = &mut self.runtime[traj];
                    runtime.in_tool = false;
                    // an unstarted migration missed its window
                    runtime.pending_migration = None;
                    if let Some(gate) = runtime.gate.as_mut() {
                        gate.tool_done_at = Some(t);
                    }
                    self.gate_check(traj, t)?;
                }
                EventKind::MigrationDone { traj } => {
                    let req = self.runtime[traj]
                        .in_flight_migration
                        .take()
                        .expect("in-flight migration");
                    self.busy_endpoints.remove(&req.src_worker);
                    self.busy_endpoints.remove(&req.dst_worker);
                    self.runtime[traj].cache_worker = Some(req.dst_worker);
                    self.runtime[traj].cached_tokens = req.cache_tokens;
                    let id = self.workload[traj].id;
                    self.router.reassign(id, req.dst_worker);
                    self.router.set_cache_tag(id, req.dst_worker);
                    self.migrations += 1;
                    self.gate_check(traj, t)?;
                    self.try_start_transfers(t);
                }
                EventKind::PredictionReady { traj, step } => {
                    let p = self.estimator.predict(&self.workload[traj], step, t);
                    let changed =
                        p.predicted_total_tokens != self.runtime[traj].predicted_total;
                    self.runtime[traj].predicted_total = p.predicted_total_tokens;
                    self.runtime[traj].predicted_remaining = p.predicted_remaining_tokens;
                    if self.config.migration_enabled && changed {
                        self.consider_retarget(traj, t);
                        if self.runtime[traj].in_tool {
                            self.try_start_transfers(t);
                        }
                    }
                    if let Some(gate) = self.runtime[traj].gate.as_mut() {
                        if gate.pred_needed && gate.pred_ready_at.is_none() {
                            gate.pred_ready_at = Some(t);
                        }
                    }
                    self.gate_check(traj, t)?;
                }
                EventKind::AdmitTick { worker } => {
                    self.workers[worker].admit_pending = false;
                    self.settle(worker, t);
                    let activated = self.workers[worker].queue.admit();
                    for req in &activated {
                        let idx = self.index_of(req.trajectory_id);
                        self.activate(idx, worker, t);
                    }
                    if self.workers[worker].rates_dirty || !activated.is_empty() {
                        self.reschedule_completions(worker, t);
                    }
                }
            }
        }
        Ok(())
    }

    fn on_generation_done(&mut self, idx: usize, worker: usize, t: f64) -> Result<(), SimError> {
        self.settle(worker, t);
        let traj = &self.workload[idx];
        let k;
        {
            let runtime = &mut self.runtime[idx];
            let mut progress = runtime.progress.take().expect("generating request");
            debug_assert_eq!(progress.worker, worker);
            k = progress.step;
            // float dust from (remaining * f) / f round trips
            let residual = progress.remaining_prefill + progress.remaining_decode;
            debug_assert!(
                residual <= 1e-6 * progress.decode_work_total.max(1.0),
                "completion fired early: residual {residual}"
            );
            progress.base_accum += residual;
            runtime.timings.push(StepTiming {
                queueing: progress.queue_accum,
                base_compute: progress.base_accum,
                interference_overhead: progress.interf_accum,
                tool_time: 0.0,
            });
            runtime.steps_done = k + 1;
            runtime.cache_worker = Some(worker);
            runtime.cached_tokens = traj.context_through_prefill(k) + traj.steps[k].decode_tokens;
        }
        self.workers[worker].queue.release(traj.id).expect("active");
        self.workers[worker].rates_dirty = true;
        self.workers[worker].decode_tokens_done += traj.steps[k].decode_tokens;
        self.router.remove_load(worker);
        self.router.set_cache_tag(traj.id, worker);

        if k + 1 == traj.steps.len() {
            self.runtime[idx].completed_at = Some(t);
        } else {
            let tool = traj.steps[k].tool_latency;
            self.runtime[idx].gate = Some(Gate {
                after_step: Some(k),
                gen_done_at: t,
                tool_done_at: None,
                pred_ready_at: if self.use_step_predictions {
                    None
                } else {
                    Some(t)
                },
                pred_needed: self.use_step_predictions,
            });
            self.runtime[idx].in_tool = true;
            self.push(t + tool, EventKind::ToolDone { traj: idx });
            if self.use_step_predictions {
                self.push(
                    t + self.estimator.latency(),
                    EventKind::PredictionReady {
                        traj: idx,
                        step: k + 1,
                    },
                );
            }
            self.try_start_transfers(t);
        }
        self.push_admit(worker, t);
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutput, SimError> {
        let unfinished = self
            .runtime
            .iter()
            .filter(|r| r.completed_at.is_none())
            .count();
        if unfinished > 0 {
            let queued: usize = self.workers.iter().map(|w| w.queue.pending().len()).sum();
            let active: usize = self.workers.iter().map(|w| w.queue.active().len()).sum();
            return Err(SimError::Stall {
                time: self.now,
                unfinished,
                diagnostic: format!("{queued} queued, {active} active requests stranded"),
            });
        }

        let start = self
            .workload
            .iter()
            .map(|t| t.created_at)
            .fold(f64::INFINITY, f64::min);
        let end = self
            .runtime
            .iter()
            .map(|r| r.completed_at.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let makespan = end - start;
        let total_decode_tokens: u64 = self.workload.iter().map(|t| t.true_total_tokens()).sum();
        let generated: u64 = self.workers.iter().map(|w| w.decode_tokens_done).sum();
        debug_assert_eq!(generated, total_decode_tokens, "token conservation");

        let mut per_trajectory: Vec<TrajectoryMetrics> = self
            .workload
            .iter()
            .zip(&self.runtime)
            .map(|(t, r)| {
                let completed_at = r.completed_at.unwrap();
                let mut breakdown =
                    crate::model::trajectory_makespan(t, &r.timings).expect("complete log");
                breakdown.total = completed_at - t.created_at - r.exposed_migration;
                TrajectoryMetrics {
                    id: t.id,
                    breakdown,
                    exposed_migration_s: r.exposed_migration,
                    created_at: t.created_at,
                    completed_at,
                }
            })
            .collect();
        per_trajectory.sort_by_key(|m| m.id);
        let exposed_migration_s = per_trajectory.iter().map(|m| m.exposed_migration_s).sum();

        let metrics = RunMetrics {
            makespan,
            throughput_tokens_per_s: total_decode_tokens as f64 / makespan,
            total_decode_tokens,
            preemptions: self.preemptions,
            migrations: self.migrations,
            exposed_migration_s,
            worker_busy_fraction: self
                .workers
                .iter()
                .map(|w| w.busy_time / makespan)
                .collect(),
            per_trajectory,
        };
        Ok(SimOutput {
            metrics,
            events: std::mem::take(&mut self.events),
            plan: self.plan.take(),
        })
    }
}
