//! Shared domain types: trajectories, profile tables, worker configurations,
//! and the per-trajectory makespan decomposition
//! (queueing + base compute + interference overhead + tool time).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque trajectory identifier. Ordering is used for deterministic
/// tie-breaking throughout the crate.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TrajectoryId(pub u64);

impl std::fmt::Display for TrajectoryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("no profile entry for mp_degree={mp} batch_size={batch}")]
    MissingProfileEntry { mp: u32, batch: u32 },
    #[error("timing log covers {got} steps but trajectory {id} has {expected}")]
    IncompleteTrace {
        id: TrajectoryId,
        expected: usize,
        got: usize,
    },
    #[error("invalid profile table: {0}")]
    InvalidProfile(String),
    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: TrajectoryId, reason: String },
    #[error("profile csv parse error at line {line}: {reason}")]
    ProfileParse { line: u64, reason: String },
}

/// One agentic step: a decode burst followed by a tool invocation.
///
/// `prefill_tokens` is the incremental context consumed at step start (the
/// prompt for step 0, the tool output afterwards); the accumulated context of
/// earlier steps is covered by the prefix cache when it is resident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    #[serde(rename = "tool_latency_s")]
    pub tool_latency: f64,
}

/// A multi-step unit of work; the central scheduling entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: TrajectoryId,
    pub prompt_group: u64,
    pub steps: Vec<Step>,
    #[serde(rename = "created_at_s")]
    pub created_at: f64,
}

impl Trajectory {
    /// Validates the structural invariants and returns the trajectory.
    pub fn new(
        id: TrajectoryId,
        prompt_group: u64,
        steps: Vec<Step>,
        created_at: f64,
    ) -> Result<Self, ModelError> {
        let t = Trajectory {
            id,
            prompt_group,
            steps,
            created_at,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidTrajectory {
            id: self.id,
            reason,
        };
        if self.steps.is_empty() {
            return Err(fail("steps empty".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.decode_tokens < 1 {
                return Err(fail(format!("step {i} has zero decode tokens")));
            }
            if !(s.tool_latency >= 0.0) {
                return Err(fail(format!("step {i} has negative tool latency")));
            }
        }
        if self.steps.last().unwrap().tool_latency != 0.0 {
            return Err(fail("final step has nonzero tool latency".into()));
        }
        Ok(())
    }

    /// Sum of decode tokens over all steps.
    pub fn true_total_tokens(&self) -> u64 {
        self.steps.iter().map(|s| s.decode_tokens).sum()
    }

    /// Decode tokens generated by steps `0..k`.
    pub fn tokens_through(&self, k: usize) -> u64 {
        self.steps[..k.min(self.steps.len())]
            .iter()
            .map(|s| s.decode_tokens)
            .sum()
    }

    /// Total context tokens (prefills + decodes) processed through step `k`
    /// inclusive of step `k`'s prefill; this is what a cold prefill of step
    /// `k` must recompute when no prefix cache is resident.
    pub fn context_through_prefill(&self, k: usize) -> u64 {
        let prior: u64 = self.steps[..k]
            .iter()
            .map(|s| s.prefill_tokens + s.decode_tokens)
            .sum();
        prior + self.steps[k].prefill_tokens
    }
}

/// Measured per-token decode time as a function of model-parallelism degree
/// and batch size. Source of the base per-token time `T` and the
/// interference factor `F` used by every cost model in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    entries: BTreeMap<(u32, u32), f64>,
    degrees: Vec<u32>,
    /// Declared by profiles whose per-token time is non-increasing in
    /// mp_degree (latency-optimized regime); enables the corresponding
    /// monotonicity assertion.
    monotone_mp: bool,
}

impl ProfileTable {
    /// Builds a table from `(mp_degree, batch_size, per_token_time_s)` rows,
    /// rejecting duplicates, non-positive times, missing batch-1 anchors,
    /// non-power-of-two degrees, and per-degree non-monotone batch curves.
    pub fn new(rows: impl IntoIterator<Item = (u32, u32, f64)>) -> Result<Self, ModelError> {
        let mut entries = BTreeMap::new();
        for (mp, batch, t) in rows {
            if !mp.is_power_of_two() {
                return Err(ModelError::InvalidProfile(format!(
                    "mp_degree {mp} is not a power of two"
                )));
            }
            if batch == 0 {
                return Err(ModelError::InvalidProfile("batch_size 0".into()));
            }
            if !(t > 0.0) {
                return Err(ModelError::InvalidProfile(format!(
                    "non-positive per_token_time {t} at (mp={mp}, batch={batch})"
                )));
            }
            if entries.insert((mp, batch), t).is_some() {
                return Err(ModelError::InvalidProfile(format!(
                    "duplicate entry (mp={mp}, batch={batch})"
                )));
            }
        }
        if entries.is_empty() {
            return Err(ModelError::InvalidProfile("empty table".into()));
        }
        let degrees: Vec<u32> = {
            let mut d: Vec<u32> = entries.keys().map(|&(mp, _)| mp).collect();
            d.dedup();
            d
        };
        for &mp in &degrees {
            if !entries.contains_key(&(mp, 1)) {
                return Err(ModelError::InvalidProfile(format!(
                    "mp_degree {mp} lacks a batch_size=1 entry"
                )));
            }
            let mut prev = 0.0;
            for (&(_, _), &t) in entries.range((mp, 1)..=(mp, u32::MAX)) {
                if t < prev {
                    return Err(ModelError::InvalidProfile(format!(
                        "per_token_time decreases in batch_size for mp_degree {mp}"
                    )));
                }
                prev = t;
            }
        }
        Ok(ProfileTable {
            entries,
            degrees,
            monotone_mp: false,
        })
    }

    /// Synthetic calibration model: `per_token_time(mp, b) =
    /// c0 / mp^gamma * (1 + c1 * (b - 1))`, dense in batch `1..=max_batch`.
    pub fn synthetic(degrees: &[u32], max_batch: u32, c0: f64, gamma: f64, c1: f64) -> Self {
        let rows = degrees.iter().flat_map(|&mp| {
            (1..=max_batch).map(move |b| {
                let t = c0 / (mp as f64).powf(gamma) * (1.0 + c1 * (b as f64 - 1.0));
                (mp, b, t)
            })
        });
        let mut table = ProfileTable::new(rows).expect("synthetic model always valid");
        table.monotone_mp = gamma >= 0.0;
        table
    }

    /// Defaults matching the documented calibration model
    /// (c0 = 0.05, gamma = 0.8, c1 = 0.08) over degrees {1, 2, 4, 8},
    /// profiled densely up to batch 512.
    pub fn default_synthetic() -> Self {
        Self::synthetic(&[1, 2, 4, 8], 512, 0.05, 0.8, 0.08)
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn has_degree(&self, mp: u32) -> bool {
        self.degrees.contains(&mp)
    }

    pub fn is_monotone_mp(&self) -> bool {
        self.monotone_mp
    }

    pub fn set_monotone_mp(&mut self, v: bool) {
        self.monotone_mp = v;
    }

    /// Largest profiled batch size for `mp`.
    pub fn max_batch(&self, mp: u32) -> Option<u32> {
        self.entries
            .range((mp, 1)..=(mp, u32::MAX))
            .next_back()
            .map(|(&(_, b), _)| b)
    }

    /// Per-token time at the largest profiled batch not exceeding `batch`
    /// (stepwise lookup; clamps above the largest profiled size).
    fn lookup_floor(&self, mp: u32, batch: u32) -> Option<f64> {
        self.entries
            .range((mp, 1)..=(mp, batch))
            .next_back()
            .map(|(_, &t)| t)
    }

    /// Parses the strict profile CSV (`mp_degree,batch_size,per_token_time_s`).
    pub fn from_csv(data: &str) -> Result<Self, ModelError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(data.as_bytes());
        {
            let headers = reader
                .headers()
                .map_err(|e| ModelError::ProfileParse {
                    line: 1,
                    reason: e.to_string(),
                })?
                .clone();
            let expected = ["mp_degree", "batch_size", "per_token_time_s"];
            if headers.iter().collect::<Vec<_>>() != expected {
                return Err(ModelError::ProfileParse {
                    line: 1,
                    reason: format!("expected header {expected:?}, got {headers:?}"),
                });
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| ModelError::ProfileParse {
                line: e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or_default(),
                reason: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or_default();
            let parse_err = |reason: String| ModelError::ProfileParse { line, reason };
            if record.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", record.len())));
            }
            let mp: u32 = record[0]
                .parse()
                .map_err(|e| parse_err(format!("mp_degree: {e}")))?;
            let batch: u32 = record[1]
                .parse()
                .map_err(|e| parse_err(format!("batch_size: {e}")))?;
            let t: f64 = record[2]
                .parse()
                .map_err(|e| parse_err(format!("per_token_time_s: {e}")))?;
            rows.push((mp, batch, t));
        }
        ProfileTable::new(rows)
    }

    /// Serializes in the same strict CSV schema accepted by [`from_csv`].
    ///
    /// [`from_csv`]: ProfileTable::from_csv
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mp_degree,batch_size,per_token_time_s\n");
        for (&(mp, batch), &t) in &self.entries {
            out.push_str(&format!("{mp},{batch},{t}\n"));
        }
        out
    }
}

/// Contention-free per-token time at batch size one for `mp`.
pub fn base_per_token_time(profile: &ProfileTable, mp: u32) -> Result<f64, ModelError> {
    profile
        .entries
        .get(&(mp, 1))
        .copied()
        .ok_or(ModelError::MissingProfileEntry { mp, batch: 1 })
}

/// Interference factor `F(mp, batch)`: the per-token slowdown of a batch of
/// the given size relative to batch size one. Batches between profiled sizes
/// use the largest profiled size below them; batches beyond the largest
/// profiled size clamp to it.
pub fn interference_factor(profile: &ProfileTable, mp: u32, batch: u32) -> Result<f64, ModelError> {
    assert!(batch >= 1, "interference_factor requires batch >= 1");
    let base = base_per_token_time(profile, mp)?;
    let t = profile
        .lookup_floor(mp, batch)
        .ok_or(ModelError::MissingProfileEntry { mp, batch })?;
    Ok(t / base)
}

/// Multiplicative slowdown curve for one mp degree, materialized densely up
/// to a caller-chosen batch bound for O(1) lookups in the hot paths.
#[derive(Debug, Clone)]
pub struct InterferenceFn {
    pub mp_degree: u32,
    factors: Vec<f64>,
}

impl InterferenceFn {
    pub fn from_profile(
        profile: &ProfileTable,
        mp: u32,
        max_batch: u32,
    ) -> Result<Self, ModelError> {
        let mut factors = Vec::with_capacity(max_batch as usize + 1);
        factors.push(f64::NAN); // batch 0 unused
        for b in 1..=max_batch {
            factors.push(interference_factor(profile, mp, b)?);
        }
        Ok(InterferenceFn {
            mp_degree: mp,
            factors,
        })
    }

    /// F at `batch`, clamping beyond the materialized bound.
    pub fn factor(&self, batch: usize) -> f64 {
        debug_assert!(batch >= 1);
        let idx = batch.min(self.factors.len() - 1);
        self.factors[idx]
    }
}

/// One rollout worker: a model-parallel group of `mp_degree` GPUs able to
/// co-batch up to `max_active` generation requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: usize,
    pub mp_degree: u32,
    pub max_active: usize,
}

impl WorkerConfig {
    pub fn validate(&self, profile: &ProfileTable) -> Result<(), ModelError> {
        if !profile.has_degree(self.mp_degree) {
            return Err(ModelError::MissingProfileEntry {
                mp: self.mp_degree,
                batch: 1,
            });
        }
        if self.max_active < 1 {
            return Err(ModelError::InvalidProfile(format!(
                "worker {} has max_active 0",
                self.worker_id
            )));
        }
        Ok(())
    }
}

/// Per-step timing record produced by the simulator (or by hand in tests):
/// the seconds a step spent in each makespan component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub queueing: f64,
    pub base_compute: f64,
    pub interference_overhead: f64,
    pub tool_time: f64,
}

/// Decomposition of one trajectory's completion time into queueing, base
/// compute, contention-induced interference overhead, and tool time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MakespanBreakdown {
    pub queueing: f64,
    pub base_compute: f64,
    pub interference_overhead: f64,
    pub tool_time: f64,
    pub total: f64,
}

impl MakespanBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.queueing + self.base_compute + self.interference_overhead + self.tool_time
    }

    /// Checks `total = queueing + base + interference + tool` within
    /// `rel_tol` relative tolerance, and non-negativity of every component.
    pub fn identity_holds(&self, rel_tol: f64) -> bool {
        let parts = [
            self.queueing,
            self.base_compute,
            self.interference_overhead,
            self.tool_time,
            self.total,
        ];
        if parts.iter().any(|&p| p < 0.0) {
            return false;
        }
        let sum = self.component_sum();
        let scale = self.total.abs().max(sum.abs()).max(1e-12);
        (sum - self.total).abs() <= rel_tol * scale
    }
}

/// Sums per-step timing records into a [`MakespanBreakdown`]; the log must
/// cover every step of the trajectory.
pub fn trajectory_makespan(
    traj: &Trajectory,
    log: &[StepTiming],
) -> Result<MakespanBreakdown, ModelError> {
    if log.len() != traj.steps.len() {
        return Err(ModelError::IncompleteTrace {
            id: traj.id,
            expected: traj.steps.len(),
            got: log.len(),
        });
    }
    let mut b = MakespanBreakdown {
        queueing: 0.0,
        base_compute: 0.0,
        interference_overhead: 0.0,
        tool_time: 0.0,
        total: 0.0,
    };
    for t in log {
        b.queueing += t.queueing;
        b.base_compute += t.base_compute;
        b.interference_overhead += t.interference_overhead;
        b.tool_time += t.tool_time;
    }
    b.total = b.component_sum();
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_two_points() -> ProfileTable {
        ProfileTable::new([(1, 1, 0.05), (1, 8, 0.08)]).unwrap()
    }

    #[test]
    fn base_time_direct_lookup() {
        let p = ProfileTable::new([(1, 1, 0.05)]).unwrap();
        assert_eq!(base_per_token_time(&p, 1).unwrap(), 0.05);
    }

    #[test]
    fn base_time_from_synthetic_calibration() {
        // Read back the calibrated batch-1 value for mp=8.
        let p = ProfileTable::synthetic(&[8], 4, 0.012 * 8f64.powf(0.8), 0.8, 0.08);
        let t = base_per_token_time(&p, 8).unwrap();
        assert!((t - 0.012).abs() < 1e-12);
    }

    #[test]
    fn base_time_unknown_degree() {
        let p = profile_two_points();
        assert_eq!(
            base_per_token_time(&p, 3),
            Err(ModelError::MissingProfileEntry { mp: 3, batch: 1 })
        );
    }

    #[test]
    fn interference_batch_one_is_unity() {
        let p = profile_two_points();
        assert_eq!(interference_factor(&p, 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn interference_ratio_of_entries() {
        let p = profile_two_points();
        let f = interference_factor(&p, 1, 8).unwrap();
        assert!((f - 1.6).abs() < 1e-12);
    }

    #[test]
    fn interference_clamps_past_largest_batch() {
        let p = profile_two_points();
        assert_eq!(
            interference_factor(&p, 1, 10).unwrap(),
            interference_factor(&p, 1, 8).unwrap()
        );
    }

    #[test]
    fn interference_floor_lookup_between_points() {
        let p = profile_two_points();
        // batch 5 falls back to the batch-1 entry (largest profiled <= 5).
        assert_eq!(interference_factor(&p, 1, 5).unwrap(), 1.0);
    }

    #[test]
    fn profile_rejects_duplicates_and_nonpositive() {
        assert!(matches!(
            ProfileTable::new([(1, 1, 0.05), (1, 1, 0.06)]),
            Err(ModelError::InvalidProfile(_))
        ));
        assert!(matches!(
            ProfileTable::new([(1, 1, 0.0)]),
            Err(ModelError::InvalidProfile(_))
        ));
        assert!(matches!(
            ProfileTable::new([(1, 2, 0.05)]),
            Err(ModelError::InvalidProfile(_)) // no batch-1 anchor
        ));
        assert!(matches!(
            ProfileTable::new([(3, 1, 0.05)]),
            Err(ModelError::InvalidProfile(_)) // non power of two
        ));
        assert!(matches!(
            ProfileTable::new([(1, 1, 0.05), (1, 2, 0.04)]),
            Err(ModelError::InvalidProfile(_)) // decreasing in batch
        ));
    }

    #[test]
    fn profile_csv_round_trip_and_strictness() {
        let p = ProfileTable::synthetic(&[1, 2], 4, 0.05, 0.8, 0.08);
        let csv = p.to_csv();
        let q = ProfileTable::from_csv(&csv).unwrap();
        assert_eq!(p.entries, q.entries);

        let bad = "mp_degree,batch_size,per_token_time_s\n1,1,0.05\n1,1,0.06\n";
        assert!(matches!(
            ProfileTable::from_csv(bad),
            Err(ModelError::InvalidProfile(_))
        ));
        let bad_header = "mp,batch,t\n1,1,0.05\n";
        assert!(matches!(
            ProfileTable::from_csv(bad_header),
            Err(ModelError::ProfileParse { line: 1, .. })
        ));
        let bad_field = "mp_degree,batch_size,per_token_time_s\n1,x,0.05\n";
        assert!(matches!(
            ProfileTable::from_csv(bad_field),
            Err(ModelError::ProfileParse { line: 2, .. })
        ));
    }

    #[test]
    fn synthetic_base_time_monotone_in_mp() {
        let p = ProfileTable::default_synthetic();
        assert!(p.is_monotone_mp());
        let mut prev = f64::INFINITY;
        for &mp in p.degrees() {
            let t = base_per_token_time(&p, mp).unwrap();
            assert!(t <= prev, "base time must not increase with mp");
            prev = t;
        }
    }

    fn one_step_traj() -> Trajectory {
        Trajectory::new(
            TrajectoryId(1),
            0,
            vec![Step {
                prefill_tokens: 0,
                decode_tokens: 100,
                tool_latency: 0.0,
            }],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn makespan_single_step() {
        let traj = one_step_traj();
        let log = [StepTiming {
            queueing: 0.0,
            base_compute: 100.0 * 0.05,
            interference_overhead: 0.0,
            tool_time: 0.0,
        }];
        let b = trajectory_makespan(&traj, &log).unwrap();
        assert!((b.total - 5.0).abs() < 1e-12);
        assert!((b.base_compute - 5.0).abs() < 1e-12);
        assert!(b.identity_holds(1e-9));
    }

    #[test]
    fn makespan_two_steps_with_interference() {
        // (100 tok, tool 2 s) + (50 tok, no tool), T = 0.05, alpha = 1.2,
        // queue 1 s each step.
        let traj = Trajectory::new(
            TrajectoryId(2),
            0,
            vec![
                Step {
                    prefill_tokens: 0,
                    decode_tokens: 100,
                    tool_latency: 2.0,
                },
                Step {
                    prefill_tokens: 0,
                    decode_tokens: 50,
                    tool_latency: 0.0,
                },
            ],
            0.0,
        )
        .unwrap();
        let step = |tok: f64, tool: f64| StepTiming {
            queueing: 1.0,
            base_compute: tok * 0.05,
            interference_overhead: tok * 0.05 * 0.2,
            tool_time: tool,
        };
        let b = trajectory_makespan(&traj, &[step(100.0, 2.0), step(50.0, 0.0)]).unwrap();
        assert!((b.total - 13.0).abs() < 1e-9);
        assert!((b.interference_overhead - 1.5).abs() < 1e-9);
        assert!(b.identity_holds(1e-9));
    }

    #[test]
    fn makespan_incomplete_log() {
        let traj = Trajectory::new(
            TrajectoryId(3),
            0,
            vec![
                Step {
                    prefill_tokens: 0,
                    decode_tokens: 10,
                    tool_latency: 1.0,
                },
                Step {
                    prefill_tokens: 0,
                    decode_tokens: 10,
                    tool_latency: 0.0,
                },
            ],
            0.0,
        )
        .unwrap();
        let err = trajectory_makespan(&traj, &[StepTiming::default()]).unwrap_err();
        assert_eq!(
            err,
            ModelError::IncompleteTrace {
                id: TrajectoryId(3),
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn trajectory_invariants() {
        assert!(Trajectory::new(TrajectoryId(1), 0, vec![], 0.0).is_err());
        assert!(Trajectory::new(
            TrajectoryId(1),
            0,
            vec![Step {
                prefill_tokens: 0,
                decode_tokens: 0,
                tool_latency: 0.0
            }],
            0.0
        )
        .is_err());
        assert!(Trajectory::new(
            TrajectoryId(1),
            0,
            vec![Step {
                prefill_tokens: 0,
                decode_tokens: 5,
                tool_latency: 1.0
            }],
            0.0
        )
        .is_err());
    }

    #[test]
    fn context_accounting() {
        let t = Trajectory::new(
            TrajectoryId(9),
            0,
            vec![
                Step {
                    prefill_tokens: 40,
                    decode_tokens: 10,
                    tool_latency: 1.0,
                },
                Step {
                    prefill_tokens: 5,
                    decode_tokens: 20,
                    tool_latency: 0.0,
                },
            ],
            0.0,
        )
        .unwrap();
        assert_eq!(t.true_total_tokens(), 30);
        assert_eq!(t.tokens_through(1), 10);
        assert_eq!(t.context_through_prefill(0), 40);
        assert_eq!(t.context_through_prefill(1), 40 + 10 + 5);
    }
}
