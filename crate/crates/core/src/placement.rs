//! The where-decision: partition descending-sorted trajectories into
//! contiguous per-worker groups minimizing the interference-weighted
//! completion time of the slowest group.
//!
//! `presorted_dp` solves the contiguous problem exactly in O(n^2 m);
//! `brute_force_partition` is the independent oracle used to test both DP
//! optimality and the claim that an optimal unrestricted partition can
//! always be rearranged into a contiguous one. `aggregate_short` trades
//! exactness for speed by bucketing short trajectories, and `RouterState`
//! provides the per-step routing policies (plan, least-load, cache-aware,
//! hybrid).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    base_per_token_time, InterferenceFn, ModelError, ProfileTable, TrajectoryId, WorkerConfig,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PlacementError {
    #[error("cannot partition {n} items across {m} workers without empty groups")]
    InfeasiblePartition { n: usize, m: usize },
    #[error("oracle limited to 12 items, got {n}")]
    OracleTooLarge { n: usize },
    #[error("unknown trajectory {0}")]
    UnknownTrajectory(TrajectoryId),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One DP item: a trajectory, or an aggregation bucket standing in for
/// several short ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementItem {
    /// Predicted total tokens; for a bucket, the bucket maximum.
    pub length: f64,
    /// Trajectories represented; feeds the interference factor through the
    /// group size.
    pub weight: usize,
    pub members: Vec<TrajectoryId>,
}

/// Cost parameters of one worker position: the group assigned to position
/// `j` is costed with worker `j`'s base time and interference curve.
#[derive(Debug, Clone)]
pub struct WorkerCost {
    pub config: WorkerConfig,
    pub base_time: f64,
    interference: InterferenceFn,
}

impl WorkerCost {
    fn cost(&self, first_len: f64, size: usize) -> f64 {
        // association matches the DP's precomputed T*F tables bit-for-bit
        first_len * (self.base_time * self.interference.factor(size))
    }

    /// Dense `T * F(size)` table indexed by group size, for the DP hot loop.
    fn scaled_factors(&self, max_size: usize) -> Vec<f64> {
        (0..=max_size)
            .map(|s| {
                if s == 0 {
                    f64::NAN
                } else {
                    self.base_time * self.interference.factor(s)
                }
            })
            .collect()
    }
}

/// Group execution cost: `first_len * T(worker) * F(worker, size)`.
/// `size` must be >= 1.
pub fn group_cost(
    profile: &ProfileTable,
    worker: &WorkerConfig,
    first_len: f64,
    size: usize,
) -> Result<f64, ModelError> {
    assert!(size >= 1, "group_cost requires size >= 1");
    let t = base_per_token_time(profile, worker.mp_degree)?;
    let f = crate::model::interference_factor(profile, worker.mp_degree, size as u32)?;
    Ok(first_len * t * f)
}

/// A partition input: items sorted by descending length (ties by lowest
/// member id) plus the per-position worker cost models.
#[derive(Debug, Clone)]
pub struct PlacementProblem {
    items: Vec<PlacementItem>,
    workers: Vec<WorkerCost>,
}

impl PlacementProblem {
    /// Builds a problem from unsorted `(trajectory, predicted total tokens)`
    /// entries; workers keep their given order (group j -> worker j).
    pub fn new(
        entries: &[(TrajectoryId, f64)],
        workers: &[WorkerConfig],
        profile: &ProfileTable,
    ) -> Result<Self, PlacementError> {
        let mut sorted = entries.to_vec();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let items = sorted
            .into_iter()
            .map(|(id, length)| PlacementItem {
                length,
                weight: 1,
                members: vec![id],
            })
            .collect();
        Self::from_items(items, workers, profile)
    }

    /// Builds a problem from pre-sorted items (used after aggregation).
    pub fn from_items(
        items: Vec<PlacementItem>,
        workers: &[WorkerConfig],
        profile: &ProfileTable,
    ) -> Result<Self, PlacementError> {
        let total_weight: usize = items.iter().map(|i| i.weight).sum();
        let workers = workers
            .iter()
            .map(|&config| {
                Ok(WorkerCost {
                    config,
                    base_time: base_per_token_time(profile, config.mp_degree)?,
                    interference: InterferenceFn::from_profile(
                        profile,
                        config.mp_degree,
                        total_weight.max(1) as u32,
                    )?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(PlacementProblem { items, workers })
    }

    pub fn items(&self) -> &[PlacementItem] {
        &self.items
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn worker_configs(&self) -> Vec<WorkerConfig> {
        self.workers.iter().map(|w| w.config).collect()
    }
}

/// A contiguous partition: `boundaries[j-1]..boundaries[j]` (item indices)
/// is the group of worker `j-1`. `group_sizes` counts trajectories, not
/// items, so aggregated plans scale correctly at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub boundaries: Vec<usize>,
    pub group_sizes: Vec<usize>,
    #[serde(rename = "predicted_makespan_s")]
    pub predicted_makespan: f64,
}

impl PlacementPlan {
    /// Expands the plan into per-trajectory worker assignments.
    pub fn assignments(&self, problem: &PlacementProblem) -> HashMap<TrajectoryId, usize> {
        let mut out = HashMap::new();
        for j in 0..self.boundaries.len() - 1 {
            for item in &problem.items[self.boundaries[j]..self.boundaries[j + 1]] {
                for &id in &item.members {
                    out.insert(id, j);
                }
            }
        }
        out
    }
}

/// Optimal contiguous partition of the presorted items, each worker
/// receiving at least one item. O(n^2 m) worst case with an exact
/// monotone-cost pruning on the split scan.
pub fn presorted_dp(problem: &PlacementProblem) -> Result<PlacementPlan, PlacementError> {
    let n = problem.items.len();
    let m = problem.workers.len();
    if n < m || m == 0 {
        return Err(PlacementError::InfeasiblePartition { n, m });
    }

    let lengths: Vec<f64> = problem.items.iter().map(|i| i.length).collect();
    let mut prefix_weight = vec![0usize; n + 1];
    for (i, item) in problem.items.iter().enumerate() {
        prefix_weight[i + 1] = prefix_weight[i] + item.weight;
    }

    const UNSET: u32 = u32::MAX;
    let total_weight = prefix_weight[n];
    // dp over "first i items on the first j workers"; parents flattened.
    let mut prev = vec![f64::INFINITY; n + 1];
    let mut cur = vec![f64::INFINITY; n + 1];
    let mut parent = vec![UNSET; (m + 1) * (n + 1)];

    {
        let tf0 = problem.workers[0].scaled_factors(total_weight);
        for i in 1..=n {
            prev[i] = lengths[0] * tf0[prefix_weight[i]];
        }
    }

    for j in 2..=m {
        let tf = problem.workers[j - 1].scaled_factors(total_weight);
        cur[..].fill(f64::INFINITY);
        let lengths = &lengths[..];
        let pw = &prefix_weight[..];
        // leave n - i >= m - j items for the remaining workers
        for i in j..=(n - (m - j)) {
            let pwi = pw[i];
            let mut best = f64::INFINITY;
            let mut best_k = UNSET;
            // The last group is items k..i; its cost grows as k shrinks
            // (longer first item, larger size), so scanning k downward can
            // stop as soon as that cost alone reaches the incumbent.
            for k in (j - 1..=i - 1).rev() {
                let last_cost = lengths[k] * tf[pwi - pw[k]];
                if last_cost >= best {
                    break;
                }
                let candidate = if prev[k] > last_cost { prev[k] } else { last_cost };
                if candidate < best {
                    best = candidate;
                    best_k = k as u32;
                }
            }
            cur[i] = best;
            parent[j * (n + 1) + i] = best_k;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    // Reconstruct boundaries from parent pointers.
    let mut boundaries = vec![0usize; m + 1];
    boundaries[m] = n;
    let mut i = n;
    for j in (2..=m).rev() {
        let k = parent[j * (n + 1) + i];
        debug_assert_ne!(k, UNSET);
        boundaries[j - 1] = k as usize;
        i = k as usize;
    }

    let group_sizes = (0..m)
        .map(|j| prefix_weight[boundaries[j + 1]] - prefix_weight[boundaries[j]])
        .collect();
    Ok(PlacementPlan {
        boundaries,
        group_sizes,
        predicted_makespan: prev[n],
    })
}

/// Exact oracle result: per-item worker assignment and its makespan.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePartition {
    pub makespan: f64,
    pub assignment: Vec<usize>,
}

/// Exhaustive minimum over partitions into m non-empty groups: contiguous
/// splits of the sorted items when `contiguous_only`, otherwise every
/// labeled assignment of items to workers. Guarded to n <= 12.
pub fn brute_force_partition(
    problem: &PlacementProblem,
    contiguous_only: bool,
) -> Result<OraclePartition, PlacementError> {
    let n = problem.items.len();
    let m = problem.workers.len();
    if n > 12 {
        return Err(PlacementError::OracleTooLarge { n });
    }
    if n < m || m == 0 {
        return Err(PlacementError::InfeasiblePartition { n, m });
    }

    if contiguous_only {
        let mut best = f64::INFINITY;
        let mut best_bounds: Vec<usize> = Vec::new();
        let mut bounds = vec![0usize; m + 1];
        bounds[m] = n;
        fn rec(
            problem: &PlacementProblem,
            bounds: &mut Vec<usize>,
            j: usize,
            best: &mut f64,
            best_bounds: &mut Vec<usize>,
        ) {
            let m = problem.workers.len();
            let n = problem.items.len();
            if j == m {
                let mut makespan = f64::NEG_INFINITY;
                for g in 0..m {
                    let (lo, hi) = (bounds[g], bounds[g + 1]);
                    let size: usize = problem.items[lo..hi].iter().map(|i| i.weight).sum();
                    let cost = problem.workers[g].cost(problem.items[lo].length, size);
                    makespan = makespan.max(cost);
                }
                if makespan < *best {
                    *best = makespan;
                    *best_bounds = bounds.clone();
                }
                return;
            }
            // group j-1 spans bounds[j-1]..bounds[j]
            for cut in (bounds[j - 1] + 1)..=(n - (m - j)) {
                bounds[j] = cut;
                rec(problem, bounds, j + 1, best, best_bounds);
            }
        }
        rec(problem, &mut bounds, 1, &mut best, &mut best_bounds);
        let mut assignment = vec![0usize; n];
        for j in 0..m {
            for a in assignment
                .iter_mut()
                .take(best_bounds[j + 1])
                .skip(best_bounds[j])
            {
                *a = j;
            }
        }
        return Ok(OraclePartition {
            makespan: best,
            assignment,
        });
    }

    // Unrestricted: every labeled item -> worker assignment with all
    // workers non-empty, pruned on the running maximum.
    struct Search<'a> {
        problem: &'a PlacementProblem,
        assignment: Vec<usize>,
        group_weight: Vec<usize>,
        group_first: Vec<Option<usize>>, // lowest item index per group
        best: f64,
        best_assignment: Vec<usize>,
    }
    impl Search<'_> {
        fn run(&mut self, item: usize) {
            let n = self.problem.items.len();
            let m = self.problem.workers.len();
            if item == n {
                let mut makespan = f64::NEG_INFINITY;
                for g in 0..m {
                    let first = match self.group_first[g] {
                        Some(f) => f,
                        None => return, // empty group
                    };
                    let cost = self.problem.workers[g]
                        .cost(self.problem.items[first].length, self.group_weight[g]);
                    makespan = makespan.max(cost);
                }
                if makespan < self.best {
                    self.best = makespan;
                    self.best_assignment = self.assignment.clone();
                }
                return;
            }
            let empties = self.group_first.iter().filter(|f| f.is_none()).count();
            if empties > n - item {
                return; // cannot fill all workers
            }
            for g in 0..m {
                let prev_first = self.group_first[g];
                if prev_first.is_none() {
                    self.group_first[g] = Some(item);
                }
                self.group_weight[g] += self.problem.items[item].weight;
                self.assignment[item] = g;
                self.run(item + 1);
                self.group_weight[g] -= self.problem.items[item].weight;
                self.group_first[g] = prev_first;
            }
        }
    }
    let mut search = Search {
        problem,
        assignment: vec![0; n],
        group_weight: vec![0; m],
        group_first: vec![None; m],
        best: f64::INFINITY,
        best_assignment: vec![0; n],
    };
    search.run(0);
    Ok(OraclePartition {
        makespan: search.best,
        assignment: search.best_assignment,
    })
}

/// Buckets consecutive sorted items shorter than `threshold` into aggregate
/// items of at most `bucket_size` trajectories each. The bucket's length is
/// its maximum member length; its weight is its cardinality. Returns a
/// reduced problem over the same workers.
pub fn aggregate_short(
    problem: &PlacementProblem,
    threshold: f64,
    bucket_size: usize,
) -> PlacementProblem {
    assert!(threshold >= 0.0, "threshold must be >= 0");
    assert!(bucket_size >= 1, "bucket_size must be >= 1");
    let mut items: Vec<PlacementItem> = Vec::new();
    let mut bucket: Option<PlacementItem> = None;
    for item in &problem.items {
        if item.length < threshold {
            let b = bucket.get_or_insert_with(|| PlacementItem {
                length: item.length,
                weight: 0,
                members: Vec::new(),
            });
            b.weight += item.weight;
            b.members.extend_from_slice(&item.members);
            if b.weight >= bucket_size {
                items.push(bucket.take().unwrap());
            }
        } else {
            debug_assert!(bucket.is_none(), "items are sorted descending");
            items.push(item.clone());
        }
    }
    if let Some(b) = bucket {
        items.push(b);
    }
    PlacementProblem {
        items,
        workers: problem.workers.clone(),
    }
}

/// Per-step routing policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RoutePolicy {
    /// Static binding to the planned group's worker.
    Plan,
    /// Fewest active+pending requests, ties to the lowest worker id.
    LeastLoad,
    /// The worker holding the trajectory's prefix cache; least-load on the
    /// first assignment.
    CacheAware,
    /// Least-load when the load skew (max/min) exceeds the threshold,
    /// cache-aware otherwise.
    Hybrid { skew_threshold: f64 },
}

/// Mutable routing state owned by the simulator.
#[derive(Debug, Clone)]
pub struct RouterState {
    policy: RoutePolicy,
    assignment: HashMap<TrajectoryId, usize>,
    cache_tags: HashMap<TrajectoryId, usize>,
    loads: Vec<usize>,
}

impl RouterState {
    pub fn new(policy: RoutePolicy, n_workers: usize) -> Self {
        RouterState {
            policy,
            assignment: HashMap::new(),
            cache_tags: HashMap::new(),
            loads: vec![0; n_workers],
        }
    }

    /// Installs the plan assignment (required for [`RoutePolicy::Plan`]).
    pub fn set_assignment(&mut self, assignment: HashMap<TrajectoryId, usize>) {
        self.assignment = assignment;
    }

    pub fn assignment_of(&self, traj: TrajectoryId) -> Option<usize> {
        self.assignment.get(&traj).copied()
    }

    pub fn reassign(&mut self, traj: TrajectoryId, worker: usize) {
        self.assignment.insert(traj, worker);
    }

    pub fn cache_tag(&self, traj: TrajectoryId) -> Option<usize> {
        self.cache_tags.get(&traj).copied()
    }

    pub fn set_cache_tag(&mut self, traj: TrajectoryId, worker: usize) {
        self.cache_tags.insert(traj, worker);
    }

    pub fn clear_cache_tag(&mut self, traj: TrajectoryId) {
        self.cache_tags.remove(&traj);
    }

    pub fn add_load(&mut self, worker: usize) {
        self.loads[worker] += 1;
    }

    pub fn remove_load(&mut self, worker: usize) {
        self.loads[worker] -= 1;
    }

    pub fn loads(&self) -> &[usize] {
        &self.loads
    }

    fn least_loaded(&self) -> usize {
        let mut best = 0;
        for (w, &load) in self.loads.iter().enumerate() {
            if load < self.loads[best] {
                best = w;
            }
        }
        best
    }

    /// Chooses the worker for a trajectory's next generation request.
    pub fn route_step(&self, traj: TrajectoryId) -> Result<usize, PlacementError> {
        match self.policy {
            RoutePolicy::Plan => self
                .assignment
                .get(&traj)
                .copied()
                .ok_or(PlacementError::UnknownTrajectory(traj)),
            RoutePolicy::LeastLoad => Ok(self.least_loaded()),
            RoutePolicy::CacheAware => Ok(self
                .cache_tag(traj)
                .unwrap_or_else(|| self.least_loaded())),
            RoutePolicy::Hybrid { skew_threshold } => {
                let max = *self.loads.iter().max().unwrap() as f64;
                let min = *self.loads.iter().min().unwrap() as f64;
                let skew = if min == 0.0 {
                    if max == 0.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    max / min
                };
                if skew > skew_threshold {
                    Ok(self.least_loaded())
                } else {
                    Ok(self.cache_tag(traj).unwrap_or_else(|| self.least_loaded()))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn homogeneous_workers(m: usize, mp: u32) -> Vec<WorkerConfig> {
        (0..m)
            .map(|worker_id| WorkerConfig {
                worker_id,
                mp_degree: mp,
                max_active: 64,
            })
            .collect()
    }

    /// Profile with T(1) = 1.0 and F(s) = 1 + 0.1 (s - 1), dense to 64.
    fn linear_profile() -> ProfileTable {
        ProfileTable::synthetic(&[1], 64, 1.0, 0.0, 0.1)
    }

    fn entries(lengths: &[f64]) -> Vec<(TrajectoryId, f64)> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| (TrajectoryId(i as u64), l))
            .collect()
    }

    #[test]
    fn group_cost_examples() {
        let profile = ProfileTable::new([(1, 1, 0.05), (1, 8, 0.08)]).unwrap();
        let w = WorkerConfig {
            worker_id: 0,
            mp_degree: 1,
            max_active: 8,
        };
        assert!((group_cost(&profile, &w, 1000.0, 1).unwrap() - 50.0).abs() < 1e-9);
        assert!((group_cost(&profile, &w, 1000.0, 8).unwrap() - 80.0).abs() < 1e-9);
        let unknown = WorkerConfig {
            worker_id: 0,
            mp_degree: 4,
            max_active: 8,
        };
        assert!(group_cost(&profile, &unknown, 10.0, 1).is_err());
    }

    #[test]
    #[should_panic(expected = "size >= 1")]
    fn group_cost_zero_size_precondition() {
        let profile = linear_profile();
        let w = homogeneous_workers(1, 1)[0];
        let _ = group_cost(&profile, &w, 10.0, 0);
    }

    #[test]
    fn dp_single_group() {
        let profile = ProfileTable::new([(1, 1, 0.05)]).unwrap();
        let problem =
            PlacementProblem::new(&entries(&[100.0]), &homogeneous_workers(1, 1), &profile)
                .unwrap();
        let plan = presorted_dp(&problem).unwrap();
        assert_eq!(plan.boundaries, vec![0, 1]);
        assert!((plan.predicted_makespan - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_hand_enumeration() {
        // lengths [100, 90, 10, 10], m = 2, T = 1, F(s) = 1 + 0.1 (s-1):
        //   split after item 1: max(100 * 1.0, 90 * 1.2) = 108
        //   split after item 2: max(100 * 1.1, 10 * 1.1) = 110
        //   split after item 3: max(100 * 1.2, 10 * 1.0) = 120
        let profile = linear_profile();
        let problem = PlacementProblem::new(
            &entries(&[100.0, 90.0, 10.0, 10.0]),
            &homogeneous_workers(2, 1),
            &profile,
        )
        .unwrap();
        let plan = presorted_dp(&problem).unwrap();
        assert!((plan.predicted_makespan - 108.0).abs() < 1e-12);
        assert_eq!(plan.boundaries, vec![0, 1, 4]);
        assert_eq!(plan.group_sizes, vec![1, 3]);
    }

    #[test]
    fn dp_infeasible_when_fewer_items_than_workers() {
        let profile = linear_profile();
        let problem =
            PlacementProblem::new(&entries(&[5.0]), &homogeneous_workers(2, 1), &profile).unwrap();
        assert_eq!(
            presorted_dp(&problem).unwrap_err(),
            PlacementError::InfeasiblePartition { n: 1, m: 2 }
        );
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        max_n: usize,
        max_m: usize,
        profile: &ProfileTable,
    ) -> PlacementProblem {
        let m = rng.gen_range(1..=max_m);
        let n = rng.gen_range(m..=max_n);
        let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..1000.0f64)).collect();
        PlacementProblem::new(&entries(&lengths), &homogeneous_workers(m, 1), profile).unwrap()
    }

    #[test]
    fn dp_equals_contiguous_oracle_on_seeded_instances() {
        let profile = linear_profile();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let problem = random_instance(&mut rng, 10, 3, &profile);
            let plan = presorted_dp(&problem).unwrap();
            let oracle = brute_force_partition(&problem, true).unwrap();
            assert_eq!(plan.predicted_makespan, oracle.makespan);
        }
    }

    #[test]
    fn contiguous_equals_unrestricted_small_case() {
        let profile = linear_profile();
        let problem = PlacementProblem::new(
            &entries(&[80.0, 40.0, 30.0, 5.0]),
            &homogeneous_workers(2, 1),
            &profile,
        )
        .unwrap();
        let contiguous = brute_force_partition(&problem, true).unwrap();
        let unrestricted = brute_force_partition(&problem, false).unwrap();
        assert_eq!(contiguous.makespan, unrestricted.makespan);
    }

    #[test]
    fn oracle_guard() {
        let profile = linear_profile();
        let lengths: Vec<f64> = (0..13).map(|i| 100.0 - i as f64).collect();
        let problem =
            PlacementProblem::new(&entries(&lengths), &homogeneous_workers(2, 1), &profile)
                .unwrap();
        assert_eq!(
            brute_force_partition(&problem, true).unwrap_err(),
            PlacementError::OracleTooLarge { n: 13 }
        );
    }

    #[test]
    fn single_item_single_worker() {
        let profile = linear_profile();
        let problem =
            PlacementProblem::new(&entries(&[7.0]), &homogeneous_workers(1, 1), &profile).unwrap();
        let oracle = brute_force_partition(&problem, false).unwrap();
        assert_eq!(oracle.assignment, vec![0]);
        assert!((oracle.makespan - 7.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_examples() {
        let profile = linear_profile();
        let problem = PlacementProblem::new(
            &entries(&[100.0, 5.0, 5.0, 5.0, 5.0]),
            &homogeneous_workers(2, 1),
            &profile,
        )
        .unwrap();

        let identity = aggregate_short(&problem, 0.0, 2);
        assert_eq!(identity.items().len(), 5);

        let reduced = aggregate_short(&problem, 10.0, 2);
        let shape: Vec<(f64, usize)> = reduced
            .items()
            .iter()
            .map(|i| (i.length, i.weight))
            .collect();
        assert_eq!(shape, vec![(100.0, 1), (5.0, 2), (5.0, 2)]);

        // all below threshold, bucket = n -> single item of weight n
        let all_short = aggregate_short(&problem, 1000.0, 5);
        assert_eq!(all_short.items().len(), 1);
        assert_eq!(all_short.items()[0].weight, 5);
        assert_eq!(all_short.items()[0].length, 100.0);
    }

    #[test]
    fn aggregation_never_improves_makespan() {
        let profile = linear_profile();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let m = rng.gen_range(1..=3usize);
            let n = rng.gen_range((m.max(2) * 3)..=24);
            let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..500.0f64)).collect();
            let problem =
                PlacementProblem::new(&entries(&lengths), &homogeneous_workers(m, 1), &profile)
                    .unwrap();
            let exact = presorted_dp(&problem).unwrap().predicted_makespan;
            let threshold = rng.gen_range(1.0..500.0);
            let reduced = aggregate_short(&problem, threshold, 4);
            if reduced.items().len() < m {
                continue;
            }
            let aggregated = presorted_dp(&reduced).unwrap().predicted_makespan;
            assert!(
                aggregated >= exact - 1e-9,
                "aggregated {aggregated} < exact {exact}"
            );
        }
    }

    #[test]
    fn adding_a_worker_never_hurts() {
        let profile = linear_profile();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(4..=12usize);
            let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..500.0f64)).collect();
            let mut prev = f64::INFINITY;
            for m in 1..=3 {
                let problem =
                    PlacementProblem::new(&entries(&lengths), &homogeneous_workers(m, 1), &profile)
                        .unwrap();
                let makespan = presorted_dp(&problem).unwrap().predicted_makespan;
                assert!(makespan <= prev + 1e-9, "m={m}: {makespan} > {prev}");
                prev = makespan;
            }
        }
    }

    #[test]
    fn plan_expands_to_trajectory_assignments() {
        let profile = linear_profile();
        let problem = PlacementProblem::new(
            &entries(&[100.0, 5.0, 5.0, 5.0, 5.0]),
            &homogeneous_workers(2, 1),
            &profile,
        )
        .unwrap();
        let reduced = aggregate_short(&problem, 10.0, 2);
        let plan = presorted_dp(&reduced).unwrap();
        let assignment = plan.assignments(&reduced);
        assert_eq!(assignment.len(), 5);
        assert_eq!(assignment[&TrajectoryId(0)], 0);
    }

    #[test]
    fn routing_policies() {
        let mut router = RouterState::new(RoutePolicy::LeastLoad, 3);
        router.loads = vec![5, 2, 9];
        assert_eq!(router.route_step(TrajectoryId(1)).unwrap(), 1);

        // cache-aware: first assignment least-load, then sticky
        let mut router = RouterState::new(RoutePolicy::CacheAware, 3);
        router.loads = vec![5, 2, 9];
        assert_eq!(router.route_step(TrajectoryId(1)).unwrap(), 1);
        router.set_cache_tag(TrajectoryId(1), 2);
        assert_eq!(router.route_step(TrajectoryId(1)).unwrap(), 2);

        // plan: static binding; unknown trajectory is an error
        let mut router = RouterState::new(RoutePolicy::Plan, 3);
        router.set_assignment(HashMap::from([(TrajectoryId(7), 2)]));
        assert_eq!(router.route_step(TrajectoryId(7)).unwrap(), 2);
        assert_eq!(
            router.route_step(TrajectoryId(8)).unwrap_err(),
            PlacementError::UnknownTrajectory(TrajectoryId(8))
        );
    }

    #[test]
    fn hybrid_threshold_boundary() {
        let mut router = RouterState::new(
            RoutePolicy::Hybrid {
                skew_threshold: 32.0,
            },
            2,
        );
        router.set_cache_tag(TrajectoryId(1), 0);
        // skew exactly 32 is not > 32: cache-aware branch
        router.loads = vec![32, 1];
        assert_eq!(router.route_step(TrajectoryId(1)).unwrap(), 0);
        // skew 33 > 32: least-load branch
        router.loads = vec![33, 1];
        assert_eq!(router.route_step(TrajectoryId(1)).unwrap(), 1);
    }
}
