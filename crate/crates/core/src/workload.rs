//! Synthetic long-tail trajectory workloads and JSONL trace ingestion.
//!
//! Generation is deterministic given the spec seed. Samples within one
//! prompt group share a per-step template (the shared base difficulty) and
//! diverge only through a per-sample multiplicative factor on step count,
//! which models rectification loops extending some samples of a prompt far
//! past their siblings.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Pareto, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Step, Trajectory, TrajectoryId};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("trace parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Distribution families used by workload specs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistSpec {
    Constant { value: f64 },
    /// Support {1, 2, ...} with success probability `p`; mean `1/p`.
    ShiftedGeometric { p: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Pareto { scale: f64, shape: f64 },
}

impl DistSpec {
    fn validate(&self, name: &str) -> Result<(), WorkloadError> {
        let bad = |reason: String| Err(WorkloadError::InvalidSpec(format!("{name}: {reason}")));
        match *self {
            DistSpec::Constant { value } => {
                if !value.is_finite() || value < 0.0 {
                    return bad(format!("constant value {value} invalid"));
                }
            }
            DistSpec::ShiftedGeometric { p } => {
                if !(p > 0.0 && p <= 1.0) {
                    return bad(format!("geometric p {p} not in (0, 1]"));
                }
            }
            DistSpec::LogNormal { mu, sigma } => {
                if !mu.is_finite() || !(sigma >= 0.0) || !sigma.is_finite() {
                    return bad(format!("lognormal(mu={mu}, sigma={sigma}) invalid"));
                }
            }
            DistSpec::Pareto { scale, shape } => {
                if !(scale > 0.0) || !(shape > 0.0) {
                    return bad(format!("pareto(scale={scale}, shape={shape}) invalid"));
                }
            }
        }
        Ok(())
    }

    fn sample_f64(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            DistSpec::Constant { value } => value,
            DistSpec::ShiftedGeometric { p } => {
                if p >= 1.0 {
                    return 1.0;
                }
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                1.0 + (u.ln() / (1.0 - p).ln()).floor()
            }
            DistSpec::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
            DistSpec::Pareto { scale, shape } => {
                Pareto::new(scale, shape).expect("validated").sample(rng)
            }
        }
    }

    fn sample_count(&self, rng: &mut ChaCha8Rng, min: u64) -> u64 {
        (self.sample_f64(rng).round() as i64).max(min as i64) as u64
    }
}

/// Parameters for one synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
    pub step_count_dist: DistSpec,
    pub decode_tokens_dist: DistSpec,
    pub prefill_tokens_dist: DistSpec,
    pub tool_latency_dist: DistSpec,
    /// Per-sample lognormal spread on step count within a prompt group.
    pub intra_group_divergence: f64,
    pub max_output_tokens: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.n_prompts < 1 {
            return Err(WorkloadError::InvalidSpec("n_prompts must be >= 1".into()));
        }
        if self.samples_per_prompt < 1 {
            return Err(WorkloadError::InvalidSpec(
                "samples_per_prompt must be >= 1".into(),
            ));
        }
        if !(self.intra_group_divergence >= 0.0) {
            return Err(WorkloadError::InvalidSpec(
                "intra_group_divergence must be >= 0".into(),
            ));
        }
        if self.max_output_tokens < 1 {
            return Err(WorkloadError::InvalidSpec(
                "max_output_tokens must be >= 1".into(),
            ));
        }
        self.step_count_dist.validate("step_count_dist")?;
        self.decode_tokens_dist.validate("decode_tokens_dist")?;
        self.prefill_tokens_dist.validate("prefill_tokens_dist")?;
        self.tool_latency_dist.validate("tool_latency_dist")?;
        Ok(())
    }

    /// Named presets whose tool-latency means follow the workload ordering
    /// search >> coding >> math.
    pub fn preset(name: &str, n_prompts: usize, seed: u64) -> Result<Self, WorkloadError> {
        let (steps_p, decode_mu, tool_mu, tool_sigma, prefill_mu) = match name {
            // ~0.45 s median tool calls, moderate steps, chunky generations.
            "coding" => (0.25, 5.5, -0.8, 0.6, 5.8),
            // long tool calls (~1.4 s), many short steps, prefill-heavy.
            "search" => (0.16, 4.6, 0.34, 0.5, 6.2),
            //
            "math" => (0.33, 5.2, -3.0, 0.5, 5.2),
            other => {
                return Err(WorkloadError::InvalidSpec(format!(
                    "unknown preset '{other}' (expected coding|search|math)"
                )))
            }
        };
        Ok(WorkloadSpec {
            n_prompts,
            samples_per_prompt: 16,
            step_count_dist: DistSpec::ShiftedGeometric { p: steps_p },
            decode_tokens_dist: DistSpec::LogNormal {
                mu: decode_mu,
                sigma: 0.9,
            },
            prefill_tokens_dist: DistSpec::LogNormal {
                mu: prefill_mu,
                sigma: 0.5,
            },
            tool_latency_dist: DistSpec::LogNormal {
                mu: tool_mu,
                sigma: tool_sigma,
            },
            intra_group_divergence: 0.35,
            max_output_tokens: 40_960,
            seed,
        })
    }
}

fn derive_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    // splitmix64 over the tuple keeps the streams independent of draw order.
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let mut next = || {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&next().to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Generates the workload described by `spec`. Deterministic given the seed.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Trajectory>, WorkloadError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_prompts * spec.samples_per_prompt);
    for group in 0..spec.n_prompts as u64 {
        let mut group_rng = derive_rng(spec.seed, group, 0);
        let base_steps = spec.step_count_dist.sample_count(&mut group_rng, 1);

        // Per-sample step counts first, so the template length is known.
        let mut counts = Vec::with_capacity(spec.samples_per_prompt);
        for sample in 0..spec.samples_per_prompt as u64 {
            let mut srng = derive_rng(spec.seed, group, 1 + sample);
            let z: f64 = StandardNormal.sample(&mut srng);
            let factor = (spec.intra_group_divergence * z).exp();
            let steps = ((base_steps as f64 * factor).round() as i64).max(1) as u64;
            counts.push(steps as usize);
        }
        let template_len = *counts.iter().max().unwrap();

        // The shared per-step template is the group's base difficulty.
        let mut template_rng = derive_rng(spec.seed, group, u64::MAX);
        let template: Vec<Step> = (0..template_len)
            .map(|_| Step {
                prefill_tokens: spec.prefill_tokens_dist.sample_count(&mut template_rng, 0),
                decode_tokens: spec.decode_tokens_dist.sample_count(&mut template_rng, 1),
                tool_latency: spec.tool_latency_dist.sample_f64(&mut template_rng).max(0.0),
            })
            .collect();

        for (sample, &n_steps) in counts.iter().enumerate() {
            let mut steps = Vec::with_capacity(n_steps);
            let mut total = 0u64;
            for step in template.iter().take(n_steps) {
                let budget = spec.max_output_tokens - total;
                if budget == 0 {
                    break;
                }
                let mut s = step.clone();
                s.decode_tokens = s.decode_tokens.min(budget);
                total += s.decode_tokens;
                steps.push(s);
            }
            steps.last_mut().unwrap().tool_latency = 0.0;
            let id = group * spec.samples_per_prompt as u64 + sample as u64;
            let traj = Trajectory::new(TrajectoryId(id), group, steps, 0.0)
                .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
            out.push(traj);
        }
    }
    Ok(out)
}

/// Serializes trajectories one JSON object per line.
pub fn to_jsonl(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajs {
        out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSONL trace, reporting the 1-based line number of the first
/// malformed or invariant-violating record.
pub fn from_jsonl(data: &str) -> Result<Vec<Trajectory>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory =
            serde_json::from_str(line).map_err(|e| WorkloadError::ParseError {
                line: i + 1,
                reason: e.to_string(),
            })?;
        traj.validate().map_err(|e| WorkloadError::ParseError {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(traj);
    }
    Ok(out)
}

pub fn save_trace(trajs: &[Trajectory], path: &Path) -> Result<(), WorkloadError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(to_jsonl(trajs).as_bytes())?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<Trajectory>, WorkloadError> {
    let mut data = String::new();
    std::io::BufReader::new(std::fs::File::open(path)?).read_to_string(&mut data)?;
    from_jsonl(&data)
}
