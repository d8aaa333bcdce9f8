//! Progressive trajectory-length estimation.
//!
//! The estimator interface is invoked after each completed step; fidelity is
//! expected to improve as context accumulates. Two built-ins are provided: a
//! synthetic noisy oracle whose multiplicative lognormal error shrinks per
//! completed step, and a replay estimator that returns recorded values. The
//! real fine-tuned regression model lives behind the same interface but is
//! not part of this crate.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Trajectory, TrajectoryId};

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

/// A length estimate issued after `step_index` completed steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trajectory_id: TrajectoryId,
    pub step_index: usize,
    pub predicted_remaining_tokens: f64,
    pub predicted_total_tokens: f64,
    pub issued_at: f64,
}

pub trait Estimator: Send + Sync {
    /// Estimate for `traj` after `steps_done` completed steps
    /// (`steps_done = 0` is the prompt-only estimate).
    fn predict(&self, traj: &Trajectory, steps_done: usize, now: f64) -> Prediction;

    /// Seconds one prediction call occupies; overlapped with tool execution
    /// by the simulator, so only the excess over tool latency is exposed.
    fn latency(&self) -> f64 {
        0.0
    }
}

/// Noisy oracle: returns `true_remaining * exp(sigma_k * z)` with
/// `sigma_k = sigma0 * decay^k` and `z` drawn deterministically per
/// (seed, trajectory, k).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyOracleConfig {
    pub sigma0: f64,
    pub decay: f64,
    pub latency: f64,
    pub seed: u64,
}

impl Default for NoisyOracleConfig {
    fn default() -> Self {
        // sigma0/decay are tuning knobs for the synthetic error model, not
        // measured values.
        NoisyOracleConfig {
            sigma0: 0.5,
            decay: 0.6,
            latency: 0.1,
            seed: 0,
        }
    }
}

pub struct NoisyOracle {
    config: NoisyOracleConfig,
}

impl NoisyOracle {
    pub fn new(config: NoisyOracleConfig) -> Self {
        assert!(config.sigma0 >= 0.0, "sigma0 must be >= 0");
        assert!(
            config.decay > 0.0 && config.decay <= 1.0,
            "decay must be in (0, 1]"
        );
        NoisyOracle { config }
    }

    /// Zero-noise oracle: predictions equal the true remaining length.
    pub fn perfect(seed: u64) -> Self {
        NoisyOracle::new(NoisyOracleConfig {
            sigma0: 0.0,
            decay: 1.0,
            latency: 0.0,
            seed,
        })
    }

    pub fn sigma_at(&self, k: usize) -> f64 {
        self.config.sigma0 * self.config.decay.powi(k as i32)
    }
}

impl Estimator for NoisyOracle {
    fn predict(&self, traj: &Trajectory, steps_done: usize, now: f64) -> Prediction {
        let generated = traj.tokens_through(steps_done) as f64;
        let true_remaining = traj.true_total_tokens() as f64 - generated;
        let sigma = self.sigma_at(steps_done);
        let noisy = if sigma == 0.0 || true_remaining == 0.0 {
            true_remaining
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.config
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(traj.id.0.wrapping_mul(0xBF58_476D_1CE4_E5B9))
                    .wrapping_add(steps_done as u64),
            );
            let z: f64 = StandardNormal.sample(&mut rng);
            true_remaining * (sigma * z).exp()
        };
        Prediction {
            trajectory_id: traj.id,
            step_index: steps_done,
            predicted_remaining_tokens: noisy,
            predicted_total_tokens: generated + noisy,
            issued_at: now,
        }
    }

    fn latency(&self) -> f64 {
        self.config.latency
    }
}

/// Replays recorded `(trajectory, step) -> predicted remaining` values;
/// falls back to the true remaining length for unrecorded keys so the
/// estimator stays total.
pub struct ReplayEstimator {
    recorded: HashMap<(TrajectoryId, usize), f64>,
    latency: f64,
}

impl ReplayEstimator {
    pub fn new(recorded: HashMap<(TrajectoryId, usize), f64>, latency: f64) -> Self {
        ReplayEstimator { recorded, latency }
    }
}

impl Estimator for ReplayEstimator {
    fn predict(&self, traj: &Trajectory, steps_done: usize, now: f64) -> Prediction {
        let generated = traj.tokens_through(steps_done) as f64;
        let remaining = self
            .recorded
            .get(&(traj.id, steps_done))
            .copied()
            .unwrap_or(traj.true_total_tokens() as f64 - generated);
        Prediction {
            trajectory_id: traj.id,
            step_index: steps_done,
            predicted_remaining_tokens: remaining,
            predicted_total_tokens: generated + remaining,
            issued_at: now,
        }
    }

    fn latency(&self) -> f64 {
        self.latency
    }
}

/// Takes the top `ceil(tail_fraction * n)` trajectories of each list by
/// value (descending, ties by id ascending) and returns the fraction of the
/// true tail found in the predicted tail.
pub fn recall_of_longtails(
    predictions: &[(TrajectoryId, f64)],
    truths: &[(TrajectoryId, f64)],
    tail_fraction: f64,
) -> Result<f64, PredictorError> {
    if predictions.is_empty() || truths.is_empty() {
        return Err(PredictorError::EmptyInput);
    }
    assert_eq!(
        predictions.len(),
        truths.len(),
        "prediction/truth lists must have equal length"
    );
    assert!(
        tail_fraction > 0.0 && tail_fraction < 1.0,
        "tail_fraction must be in (0, 1)"
    );
    let k = ((tail_fraction * truths.len() as f64).ceil() as usize).max(1);
    let top = |list: &[(TrajectoryId, f64)]| -> Vec<TrajectoryId> {
        let mut sorted = list.to_vec();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sorted.into_iter().take(k).map(|(id, _)| id).collect()
    };
    let predicted_tail = top(predictions);
    let true_tail = top(truths);
    let hits = true_tail
        .iter()
        .filter(|id| predicted_tail.contains(id))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Standard sample Pearson correlation coefficient.
pub fn pearson(predictions: &[f64], truths: &[f64]) -> Result<f64, PredictorError> {
    if predictions.len() < 2 || truths.len() < 2 {
        return Err(PredictorError::EmptyInput);
    }
    assert_eq!(predictions.len(), truths.len());
    let n = predictions.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(predictions), mean(truths));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in predictions.iter().zip(truths) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PredictorError::DegenerateInput(
            "zero variance in predictions or truths".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Step;
    use crate::workload::{generate, WorkloadSpec};

    fn traj(id: u64, tokens: &[u64]) -> Trajectory {
        let n = tokens.len();
        Trajectory::new(
            TrajectoryId(id),
            0,
            tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| Step {
                    prefill_tokens: 0,
                    decode_tokens: t,
                    tool_latency: if i + 1 == n { 0.0 } else { 1.0 },
                })
                .collect(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_sigma_is_exact() {
        let est = NoisyOracle::perfect(1);
        let t = traj(1, &[100, 50, 25]);
        let p = est.predict(&t, 1, 0.0);
        assert_eq!(p.predicted_remaining_tokens, 75.0);
        assert_eq!(p.predicted_total_tokens, 175.0);
    }

    #[test]
    fn sigma_schedule_and_determinism() {
        let est = NoisyOracle::new(NoisyOracleConfig {
            sigma0: 0.5,
            decay: 0.6,
            latency: 0.0,
            seed: 9,
        });
        assert!((est.sigma_at(2) - 0.18).abs() < 1e-12);
        let t = traj(4, &[100, 50, 25]);
        let a = est.predict(&t, 2, 0.0);
        let b = est.predict(&t, 2, 0.0);
        assert_eq!(a, b);
        // Prediction invariant.
        assert_eq!(
            a.predicted_total_tokens,
            150.0 + a.predicted_remaining_tokens
        );
    }

    #[test]
    fn finished_trajectory_predicts_zero_remaining() {
        let est = NoisyOracle::new(NoisyOracleConfig::default());
        let t = traj(2, &[10, 20]);
        let p = est.predict(&t, 2, 5.0);
        assert_eq!(p.predicted_remaining_tokens, 0.0);
        assert_eq!(p.predicted_total_tokens, 30.0);
    }

    #[test]
    fn replay_returns_recorded_values() {
        let mut recorded = HashMap::new();
        recorded.insert((TrajectoryId(3), 1), 123.0);
        let est = ReplayEstimator::new(recorded, 0.0);
        let t = traj(3, &[10, 20, 30]);
        assert_eq!(est.predict(&t, 1, 0.0).predicted_remaining_tokens, 123.0);
        // unrecorded key falls back to truth
        assert_eq!(est.predict(&t, 2, 0.0).predicted_remaining_tokens, 30.0);
    }

    #[test]
    fn recall_perfect_and_adversarial() {
        let truths: Vec<(TrajectoryId, f64)> = (0..100)
            .map(|i| (TrajectoryId(i), 1000.0 + i as f64))
            .collect();
        assert_eq!(recall_of_longtails(&truths, &truths, 0.1).unwrap(), 1.0);
        // Reversed predictions: predicted tail is the true head.
        let reversed: Vec<(TrajectoryId, f64)> = truths
            .iter()
            .zip(truths.iter().rev())
            .map(|(&(id, _), &(_, v))| (id, v))
            .collect();
        assert_eq!(recall_of_longtails(&reversed, &truths, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn recall_half_hit_small_case() {
        let truths: Vec<(TrajectoryId, f64)> =
            (0..10).map(|i| (TrajectoryId(i), i as f64)).collect();
        // true top-2 = ids 9, 8. Predict id 9 high, id 8 low.
        let mut preds = truths.clone();
        preds[8].1 = 0.5;
        assert_eq!(recall_of_longtails(&preds, &truths, 0.2).unwrap(), 0.5);
    }

    #[test]
    fn recall_empty_input() {
        assert_eq!(
            recall_of_longtails(&[], &[], 0.1),
            Err(PredictorError::EmptyInput)
        );
    }

    #[test]
    fn pearson_reference_points() {
        let t = [1.0, 2.0, 3.0];
        assert!((pearson(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|x| -x + 10.0).collect();
        assert!((pearson(&neg, &t).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(PredictorError::DegenerateInput(_))
        ));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(PredictorError::EmptyInput));
    }

    #[test]
    fn refinement_shrinks_expected_log_error() {
        // Statistical check over 1000+ seeded trajectories: with decay < 1,
        // mean |log(pred / true)| is non-increasing in completed steps.
        let spec = WorkloadSpec::preset("coding", 80, 17).unwrap(); // 1280 trajectories
        let trajs = generate(&spec).unwrap();
        let est = NoisyOracle::new(NoisyOracleConfig {
            sigma0: 0.5,
            decay: 0.6,
            latency: 0.0,
            seed: 23,
        });
        let mean_abs_log_err = |k: usize| {
            let (mut sum, mut n) = (0.0, 0usize);
            for t in &trajs {
                if t.steps.len() <= k + 1 {
                    continue;
                }
                let truth = t.true_total_tokens() as f64 - t.tokens_through(k) as f64;
                let pred = est.predict(t, k, 0.0).predicted_remaining_tokens;
                sum += (pred / truth).ln().abs();
                n += 1;
            }
            assert!(n >= 200, "need enough multi-step trajectories, got {n}");
            sum / n as f64
        };
        let (e0, e1, e2) = (mean_abs_log_err(0), mean_abs_log_err(1), mean_abs_log_err(2));
        assert!(e1 <= e0, "k=1 error {e1} should not exceed k=0 error {e0}");
        assert!(e2 <= e1, "k=2 error {e2} should not exceed k=1 error {e1}");
    }
}
