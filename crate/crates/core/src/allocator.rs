//! The how-decision: distribute a GPU budget across workers as
//! model-parallelism degrees. Long groups land on high-degree (low
//! per-token-time) workers through the sorted mapping; the degree multiset
//! itself is searched with simulated annealing whose temperature starts at
//! the initial state's predicted makespan and whose moves redistribute,
//! split, or merge worker capacities under a fixed budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProfileTable, WorkerConfig};
use crate::placement::{presorted_dp, PlacementError, PlacementItem, PlacementPlan, PlacementProblem};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AllocatorError {
    #[error("no feasible allocation of budget {budget} across {m_min}..={m_max} workers")]
    InfeasibleBudget {
        budget: u32,
        m_min: usize,
        m_max: usize,
    },
    #[error("no applicable perturbation on the current state")]
    NoFeasibleMove,
    #[error(transparent)]
    Placement(#[from] PlacementError),
}

/// One point of the allocation search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationState {
    /// Descending-sorted model-parallelism degrees, one per worker.
    pub degrees: Vec<u32>,
    pub budget: u32,
    /// Predicted makespan of the induced optimal contiguous partition.
    pub makespan: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaConfig {
    pub cooling_rate: f64,
    /// Termination threshold as a fraction of the initial temperature.
    pub epsilon_frac: f64,
    pub allowed_degrees: Vec<u32>,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            cooling_rate: 0.95,
            epsilon_frac: 1e-3,
            allowed_degrees: vec![1, 2, 4, 8],
            max_iterations: 2000,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Redistribute,
    Split,
    Merge,
}

/// Annealing result: the best state seen, its placement plan, and the
/// accepted-makespan sequence per restart chain (useful for determinism and
/// convergence checks).
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOutcome {
    pub state: AllocationState,
    pub plan: PlacementPlan,
    pub accepted: Vec<Vec<f64>>,
}

fn sorted_desc(mut degrees: Vec<u32>) -> Vec<u32> {
    degrees.sort_unstable_by(|a, b| b.cmp(a));
    degrees
}

fn workers_for(degrees: &[u32]) -> Vec<WorkerConfig> {
    degrees
        .iter()
        .enumerate()
        .map(|(worker_id, &mp_degree)| WorkerConfig {
            worker_id,
            mp_degree,
            max_active: 1,
        })
        .collect()
}

/// `feasible[j][s]`: can `j` degrees from the allowed set sum to `s`.
fn feasibility(budget: u32, m_max: usize, allowed: &[u32]) -> Vec<Vec<bool>> {
    let mut table = vec![vec![false; budget as usize + 1]; m_max + 1];
    table[0][0] = true;
    for j in 1..=m_max {
        for s in 1..=budget as usize {
            table[j][s] = allowed
                .iter()
                .any(|&d| (d as usize) <= s && table[j - 1][s - d as usize]);
        }
    }
    table
}

fn sample_composition(
    rng: &mut ChaCha8Rng,
    budget: u32,
    m_min: usize,
    m_max: usize,
    allowed: &[u32],
    feasible: &[Vec<bool>],
) -> Option<Vec<u32>> {
    let feasible_ms: Vec<usize> = (m_min..=m_max)
        .filter(|&m| feasible[m][budget as usize])
        .collect();
    if feasible_ms.is_empty() {
        return None;
    }
    let m = feasible_ms[rng.gen_range(0..feasible_ms.len())];
    let mut degrees = Vec::with_capacity(m);
    let mut remaining = budget as usize;
    for left in (0..m).rev() {
        let options: Vec<u32> = allowed
            .iter()
            .copied()
            .filter(|&d| (d as usize) <= remaining && feasible[left][remaining - d as usize])
            .collect();
        let d = options[rng.gen_range(0..options.len())];
        degrees.push(d);
        remaining -= d as usize;
    }
    debug_assert_eq!(remaining, 0);
    Some(sorted_desc(degrees))
}

fn prev_allowed(allowed: &[u32], d: u32) -> Option<u32> {
    allowed.iter().copied().filter(|&a| a < d).max()
}

fn next_allowed(allowed: &[u32], d: u32) -> Option<u32> {
    allowed.iter().copied().filter(|&a| a > d).min()
}

/// Applies one `move_kind` perturbation, preserving the budget exactly:
/// redistribute steps one worker down and another up by the same amount;
/// split replaces a worker with two allowed degrees summing to it; merge is
/// the reverse. Returns the new degree vector (unsorted).
pub fn perturb(
    degrees: &[u32],
    move_kind: Move,
    rng: &mut ChaCha8Rng,
    allowed: &[u32],
    m_min: usize,
    m_max: usize,
) -> Result<Vec<u32>, AllocatorError> {
    let m = degrees.len();
    match move_kind {
        Move::Redistribute => {
            let mut candidates = Vec::new();
            for i in 0..m {
                let Some(lower) = prev_allowed(allowed, degrees[i]) else {
                    continue;
                };
                let released = degrees[i] - lower;
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    if let Some(higher) = next_allowed(allowed, degrees[j]) {
                        if higher - degrees[j] == released {
                            candidates.push((i, j, lower, higher));
                        }
                    }
                }
            }
            if candidates.is_empty() {
                return Err(AllocatorError::NoFeasibleMove);
            }
            let (i, j, lower, higher) = candidates[rng.gen_range(0..candidates.len())];
            let mut next = degrees.to_vec();
            next[i] = lower;
            next[j] = higher;
            Ok(next)
        }
        Move::Split => {
            if m + 1 > m_max {
                return Err(AllocatorError::NoFeasibleMove);
            }
            let mut candidates = Vec::new();
            for (i, &d) in degrees.iter().enumerate() {
                for &a in allowed {
                    if a < d && a >= d - a && allowed.contains(&(d - a)) {
                        candidates.push((i, a, d - a));
                    }
                }
            }
            if candidates.is_empty() {
                return Err(AllocatorError::NoFeasibleMove);
            }
            let (i, a, b) = candidates[rng.gen_range(0..candidates.len())];
            let mut next = degrees.to_vec();
            next[i] = a;
            next.push(b);
            Ok(next)
        }
        Move::Merge => {
            if m == 0 || m - 1 < m_min {
                return Err(AllocatorError::NoFeasibleMove);
            }
            let mut candidates = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    if allowed.contains(&(degrees[i] + degrees[j])) {
                        candidates.push((i, j));
                    }
                }
            }
            if candidates.is_empty() {
                return Err(AllocatorError::NoFeasibleMove);
            }
            let (i, j) = candidates[rng.gen_range(0..candidates.len())];
            let mut next = degrees.to_vec();
            next[i] += next[j];
            next.remove(j);
            Ok(next)
        }
    }
}

fn perturb_any(
    degrees: &[u32],
    rng: &mut ChaCha8Rng,
    allowed: &[u32],
    m_min: usize,
    m_max: usize,
) -> Result<Vec<u32>, AllocatorError> {
    let mut moves = vec![Move::Redistribute, Move::Split, Move::Merge];
    while !moves.is_empty() {
        let pick = rng.gen_range(0..moves.len());
        let move_kind = moves.swap_remove(pick);
        match perturb(degrees, move_kind, rng, allowed, m_min, m_max) {
            Ok(next) => return Ok(next),
            Err(AllocatorError::NoFeasibleMove) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(AllocatorError::NoFeasibleMove)
}

fn evaluate(
    items: &[PlacementItem],
    profile: &ProfileTable,
    degrees: Vec<u32>,
    budget: u32,
) -> Result<(AllocationState, PlacementPlan), AllocatorError> {
    debug_assert_eq!(degrees.iter().map(|&d| d as u32).sum::<u32>(), budget);
    debug_assert!(degrees.windows(2).all(|w| w[0] >= w[1]), "degrees sorted");
    let problem = PlacementProblem::from_items(items.to_vec(), &workers_for(&degrees), profile)?;
    let plan = presorted_dp(&problem)?;
    let makespan = plan.predicted_makespan;
    Ok((
        AllocationState {
            degrees,
            budget,
            makespan,
        },
        plan,
    ))
}

/// Sort-initialized simulated annealing over degree allocations.
///
/// The initial temperature is the initial state's predicted makespan; each
/// iteration perturbs, re-sorts, re-evaluates through the partition DP,
/// accepts improvements unconditionally and regressions with probability
/// `exp(-delta / T)`, then cools by the configured rate until `T` falls
/// below `epsilon_frac` of its starting value. Deterministic given the seed;
/// restart chains are independent and the best state across chains wins.
pub fn anneal(
    items: &[PlacementItem],
    profile: &ProfileTable,
    budget: u32,
    m_min: usize,
    m_max: usize,
    config: &SaConfig,
) -> Result<AllocationOutcome, AllocatorError> {
    assert!(m_min >= 1 && m_min <= m_max);
    assert!(config.cooling_rate > 0.0 && config.cooling_rate < 1.0);
    assert!(config.epsilon_frac > 0.0);
    assert!(!config.allowed_degrees.is_empty());
    let m_max = m_max.min(items.len());
    let infeasible = AllocatorError::InfeasibleBudget {
        budget,
        m_min,
        m_max,
    };
    if m_max < m_min {
        return Err(infeasible);
    }
    let allowed = {
        let mut a = config.allowed_degrees.clone();
        a.sort_unstable();
        a.dedup();
        a
    };
    let feasible = feasibility(budget, m_max, &allowed);

    let mut best: Option<(AllocationState, PlacementPlan)> = None;
    let mut accepted_chains = Vec::with_capacity(config.restarts.max(1));
    for restart in 0..config.restarts.max(1) as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart));
        let init = sample_composition(&mut rng, budget, m_min, m_max, &allowed, &feasible)
            .ok_or_else(|| infeasible.clone())?;
        let (mut current, mut current_plan) = evaluate(items, profile, init, budget)?;
        let mut temp = current.makespan;
        let epsilon = config.epsilon_frac * temp;
        let mut accepted = vec![current.makespan];
        let mut chain_best = (current.clone(), current_plan.clone());
        let mut iterations = 0;
        while temp > epsilon && iterations < config.max_iterations {
            let candidate_degrees =
                match perturb_any(&current.degrees, &mut rng, &allowed, m_min, m_max) {
                    Ok(d) => sorted_desc(d),
                    Err(AllocatorError::NoFeasibleMove) => break,
                    Err(other) => return Err(other),
                };
            let (candidate, candidate_plan) =
                evaluate(items, profile, candidate_degrees, budget)?;
            let delta = candidate.makespan - current.makespan;
            if delta < 0.0 || rng.gen::<f64>() < (-delta / temp).exp() {
                current = candidate;
                current_plan = candidate_plan;
                accepted.push(current.makespan);
            }
            if current.makespan < chain_best.0.makespan {
                chain_best = (current.clone(), current_plan.clone());
            }
            temp *= config.cooling_rate;
            iterations += 1;
        }
        accepted_chains.push(accepted);
        match &best {
            Some((b, _)) if b.makespan <= chain_best.0.makespan => {}
            _ => best = Some(chain_best),
        }
    }
    let (state, plan) = best.expect("at least one restart ran");
    Ok(AllocationOutcome {
        state,
        plan,
        accepted: accepted_chains,
    })
}

/// All descending-sorted degree multisets from the allowed set summing to
/// `budget` with worker counts in `m_min..=m_max`.
pub fn enumerate_allocations(
    budget: u32,
    m_min: usize,
    m_max: usize,
    allowed_degrees: &[u32],
) -> Vec<Vec<u32>> {
    let mut allowed = allowed_degrees.to_vec();
    allowed.sort_unstable_by(|a, b| b.cmp(a));
    allowed.dedup();
    let mut out = Vec::new();
    let mut partial: Vec<u32> = Vec::new();
    fn rec(
        remaining: u32,
        max_part_idx: usize,
        allowed: &[u32],
        partial: &mut Vec<u32>,
        m_min: usize,
        m_max: usize,
        out: &mut Vec<Vec<u32>>,
    ) {
        if remaining == 0 {
            if partial.len() >= m_min {
                out.push(partial.clone());
            }
            return;
        }
        if partial.len() == m_max {
            return;
        }
        for idx in max_part_idx..allowed.len() {
            let d = allowed[idx];
            if d <= remaining {
                partial.push(d);
                rec(remaining - d, idx, allowed, partial, m_min, m_max, out);
                partial.pop();
            }
        }
    }
    rec(budget, 0, &allowed, &mut partial, m_min, m_max, &mut out);
    out
}

/// Exhaustive oracle: evaluate every valid sorted composition through the
/// partition DP and return the global minimum.
pub fn exhaustive_best(
    items: &[PlacementItem],
    profile: &ProfileTable,
    budget: u32,
    m_min: usize,
    m_max: usize,
    allowed_degrees: &[u32],
) -> Result<AllocationOutcome, AllocatorError> {
    let m_max = m_max.min(items.len());
    let mut best: Option<(AllocationState, PlacementPlan)> = None;
    for degrees in enumerate_allocations(budget, m_min, m_max, allowed_degrees) {
        let (state, plan) = evaluate(items, profile, degrees, budget)?;
        match &best {
            Some((b, _)) if b.makespan <= state.makespan => {}
            _ => best = Some((state, plan)),
        }
    }
    let (state, plan) = best.ok_or(AllocatorError::InfeasibleBudget {
        budget,
        m_min,
        m_max,
    })?;
    Ok(AllocationOutcome {
        state,
        plan,
        accepted: Vec::new(),
    })
}
