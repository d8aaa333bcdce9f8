//! Scratch harness for comparing policy cells on the default workload.

use heddle_core::model::{ProfileTable, WorkerConfig};
use heddle_core::placement::RoutePolicy;
use heddle_core::predictor::{NoisyOracle, NoisyOracleConfig};
use heddle_core::scheduler::SchedPolicy;
use heddle_core::sim::{run, RunMetrics, SimConfig};
use heddle_core::workload::{generate, WorkloadSpec};

fn cluster(m: usize, mp: u32, cap: usize) -> Vec<WorkerConfig> {
    (0..m)
        .map(|worker_id| WorkerConfig {
            worker_id,
            mp_degree: mp,
            max_active: cap,
        })
        .collect()
}

fn describe(name: &str, m: &RunMetrics) {
    let q: f64 = m.per_trajectory.iter().map(|t| t.breakdown.queueing).sum();
    let b: f64 = m.per_trajectory.iter().map(|t| t.breakdown.base_compute).sum();
    let i: f64 = m
        .per_trajectory
        .iter()
        .map(|t| t.breakdown.interference_overhead)
        .sum();
    let tool: f64 = m.per_trajectory.iter().map(|t| t.breakdown.tool_time).sum();
    let busy_min = m
        .worker_busy_fraction
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let busy_max = m
        .worker_busy_fraction
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    println!(
        "{name:<28} makespan {:>9.1} thru {:>7.1} | q {:>9.0} base {:>9.0} interf {:>9.0} tool {:>7.0} | preempt {:>5} migr {:>4} exposed {:>6.1} busy [{:.2},{:.2}]",
        m.makespan,
        m.throughput_tokens_per_s,
        q, b, i, tool,
        m.preemptions, m.migrations, m.exposed_migration_s,
        busy_min, busy_max,
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cap: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let profile = ProfileTable::default_synthetic();

    for seed in 0..seeds {
        let workload = generate(&WorkloadSpec::preset("coding", 64, 100 + seed).unwrap()).unwrap();
        let total_tokens: u64 = workload.iter().map(|t| t.true_total_tokens()).sum();
        let max_tokens = workload
            .iter()
            .map(|t| t.true_total_tokens())
            .max()
            .unwrap();
        let max_steps = workload.iter().map(|t| t.steps.len()).max().unwrap();
        println!(
            "== seed {seed} cap {cap}: n={} total_tokens={} max_tokens={} max_steps={}",
            workload.len(),
            total_tokens,
            max_tokens,
            max_steps
        );
        let perfect = NoisyOracle::perfect(seed);
        let noisy = NoisyOracle::new(NoisyOracleConfig {
            sigma0: 0.5,
            decay: 0.6,
            latency: 0.1,
            seed,
        });
        let cl = cluster(8, 1, cap);

        let cell = |sched: SchedPolicy, place: RoutePolicy, mig: bool, noisy_est: bool| {
            let est: &dyn heddle_core::predictor::Estimator =
                if noisy_est { &noisy } else { &perfect };
            let cfg = SimConfig {
                scheduler: sched,
                placement: place,
                migration_enabled: mig,
                ..SimConfig::default()
            };
            run(&workload, &cl, &profile, est, &cfg).unwrap().metrics
        };

        describe(
            "pps/plan perfect",
            &cell(SchedPolicy::Pps, RoutePolicy::Plan, false, false),
        );
        describe(
            "rr/plan perfect",
            &cell(SchedPolicy::RoundRobin, RoutePolicy::Plan, false, false),
        );
        describe(
            "pps/plan+mig noisy",
            &cell(SchedPolicy::Pps, RoutePolicy::Plan, true, true),
        );
        describe(
            "pps/plan-nomig noisy",
            &cell(SchedPolicy::Pps, RoutePolicy::Plan, false, true),
        );
        describe(
            "pps/least_load noisy",
            &cell(SchedPolicy::Pps, RoutePolicy::LeastLoad, false, true),
        );
        describe(
            "pps/cache_aware noisy",
            &cell(SchedPolicy::Pps, RoutePolicy::CacheAware, false, true),
        );
        describe(
            "rr/least_load perfect",
            &cell(SchedPolicy::RoundRobin, RoutePolicy::LeastLoad, false, false),
        );
    }
}
