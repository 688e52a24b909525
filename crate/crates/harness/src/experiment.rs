//! Experiment runs, metrics and the scripted scenarios.

use std::collections::BTreeMap;

use serde::Serialize;

use dedup_core::{Error, FeatureVector, Result, ServerId, Strategy};

use crate::sim::{Cluster, Event, ResponseRecord, SimConfig};
use crate::workload::{generate_workload, Workload, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Deployment {
    pub servers: usize,
    pub bits: u32,
    pub reps: usize,
    pub arrival_rate: f64,
    pub redistribution_secs: f64,
}

impl Default for Deployment {
    fn default() -> Self {
        Self {
            servers: 3,
            bits: 16,
            reps: 10,
            arrival_rate: 100.0,
            redistribution_secs: 5.0,
        }
    }
}

impl Deployment {
    pub fn sim_config(&self, strategy: Strategy, workload: &WorkloadConfig) -> SimConfig {
        let mut cfg = SimConfig::new(strategy, self.servers, workload.dim, workload.seed);
        cfg.bits = self.bits;
        cfg.arrival_rate = self.arrival_rate;
        cfg.redistribution_interval = std::time::Duration::from_secs_f64(self.redistribution_secs);
        cfg.payload_padding = workload.payload_padding;
        cfg.user_assisted = workload.user_assisted;
        cfg.threshold = workload.threshold;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub servers: usize,
    pub reps: usize,
    pub percent_reuse: f64,
    /// Share of tasks per server, in server order; sums to 100.
    pub per_server_share: Vec<f64>,
    /// `None` when nothing was reused.
    pub reuse_accuracy: Option<f64>,
    pub overhead_p50_us: f64,
    pub overhead_p99_us: f64,
    pub epochs: f64,
    pub migrated_entries: f64,
    /// False when some task could not be routed.
    pub valid: bool,
}

/// Raw outcome of a single repetition.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub report: ExperimentReport,
    pub responses: Vec<ResponseRecord>,
    pub events: Vec<Event>,
}

/// Replays the workload once through a fresh in-process deployment.
pub fn run_once(strategy: Strategy, deployment: &Deployment, workload: &Workload) -> Result<RunLog> {
    let cfg = deployment.sim_config(strategy, &workload.config);
    let mut cluster = Cluster::new(cfg, workload.services())?;
    let mut valid = true;
    for task in &workload.tasks {
        match cluster.submit(task) {
            Ok(_) => {}
            Err(Error::NoLiveServers) => valid = false,
            Err(e) => return Err(e),
        }
    }
    cluster.finish()?;
    let responses = cluster.responses().to_vec();
    let servers = cluster.server_ids();
    let latency = cluster.dedup().route_latency().summary();
    let report = ExperimentReport {
        strategy,
        servers: deployment.servers,
        reps: 1,
        percent_reuse: percent_reuse(&responses, workload.tasks.len()),
        per_server_share: shares(&responses, &servers),
        reuse_accuracy: reuse_accuracy_oracle(workload, &responses),
        overhead_p50_us: latency.p50_us,
        overhead_p99_us: latency.p99_us,
        epochs: cluster.dedup().redistributions() as f64,
        migrated_entries: cluster.migrated_entries() as f64,
        valid,
    };
    Ok(RunLog { report, responses, events: cluster.events().to_vec() })
}

/// Runs `deployment.reps` repetitions, the r-th with workload seed
/// `cfg.seed + r`, and reports the mean of each metric.
pub fn run_experiment(strategy: Strategy, deployment: &Deployment, cfg: &WorkloadConfig) -> Result<ExperimentReport> {
    let reps = deployment.reps.max(1);
    let mut runs = Vec::with_capacity(reps);
    for r in 0..reps {
        let wcfg = WorkloadConfig { seed: cfg.seed.wrapping_add(r as u64), ..cfg.clone() };
        let workload = generate_workload(&wcfg)?;
        runs.push(run_once(strategy, deployment, &workload)?.report);
    }
    Ok(mean_report(&runs))
}

fn mean_report(runs: &[ExperimentReport]) -> ExperimentReport {
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&ExperimentReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let width = runs.iter().map(|r| r.per_server_share.len()).max().unwrap_or(0);
    let per_server_share = (0..width)
        .map(|i| mean(&|r| r.per_server_share.get(i).copied().unwrap_or(0.0)))
        .collect();
    let accuracies: Vec<f64> = runs.iter().filter_map(|r| r.reuse_accuracy).collect();
    ExperimentReport {
        strategy: runs[0].strategy,
        servers: runs[0].servers,
        reps: runs.len(),
        percent_reuse: mean(&|r| r.percent_reuse),
        per_server_share,
        reuse_accuracy: (!accuracies.is_empty())
            .then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64),
        overhead_p50_us: mean(&|r| r.overhead_p50_us),
        overhead_p99_us: mean(&|r| r.overhead_p99_us),
        epochs: mean(&|r| r.epochs),
        migrated_entries: mean(&|r| r.migrated_entries),
        valid: runs.iter().all(|r| r.valid),
    }
}

pub fn percent_reuse(responses: &[ResponseRecord], tasks: usize) -> f64 {
    if tasks == 0 {
        return 0.0;
    }
    100.0 * responses.iter().filter(|r| r.reused).count() as f64 / tasks as f64
}

/// Percentage of tasks routed to each of `servers`.
pub fn shares(responses: &[ResponseRecord], servers: &[ServerId]) -> Vec<f64> {
    let mut counts: BTreeMap<ServerId, u64> = servers.iter().map(|&s| (s, 0)).collect();
    for r in responses {
        *counts.entry(r.server).or_default() += 1;
    }
    let total = responses.len().max(1) as f64;
    counts.values().map(|&c| 100.0 * c as f64 / total).collect()
}

/// Re-executes every reused task from scratch with a separate argmax and
/// compares labels. `None` if nothing was reused.
pub fn reuse_accuracy_oracle(workload: &Workload, responses: &[ResponseRecord]) -> Option<f64> {
    let mut reused = 0usize;
    let mut correct = 0usize;
    for r in responses.iter().filter(|r| r.reused) {
        let task = &workload.tasks[r.index];
        let service = workload.service(&task.service)?;
        reused += 1;
        if r.label == Some(oracle_label(service.centroids(), &task.payload)) {
            correct += 1;
        }
    }
    (reused > 0).then(|| 100.0 * correct as f64 / reused as f64)
}

fn oracle_label(centroids: &[FeatureVector], payload: &FeatureVector) -> u32 {
    let p = payload.as_slice();
    let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let c = c.as_slice();
        let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = c.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (cn * pn);
        if cos > best.1 {
            best = (i as u32, cos);
        }
    }
    best.0
}

/// One step of threshold adaptation.
///
/// Each group holds `(reused_label, from_scratch_label)` pairs for tasks
/// that were answered from the cache. The threshold goes up by `step` when
/// the estimated accuracy is below `target`, down when it exceeds
/// `target + margin`, and stays otherwise.
pub fn adapt_threshold(current: f64, groups: &[Vec<(u32, u32)>], target: f64, margin: f64, step: f64) -> f64 {
    let total: usize = groups.iter().map(Vec::len).sum();
    if total == 0 {
        return current;
    }
    let matches = groups.iter().flatten().filter(|(a, b)| a == b).count();
    let estimate = 100.0 * matches as f64 / total as f64;
    let next = if estimate < target {
        current + step
    } else if estimate > target + margin {
        current - step
    } else {
        current
    };
    next.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptationStep {
    pub iteration: usize,
    pub threshold: f64,
    pub estimated_accuracy: Option<f64>,
    pub percent_reuse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationConfig {
    pub target: f64,
    pub margin: f64,
    pub step: f64,
    pub iterations: usize,
    pub groups: usize,
    pub group_size: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self { target: 90.0, margin: 5.0, step: 0.01, iterations: 20, groups: 4, group_size: 25 }
    }
}

/// Repeatedly runs the workload, samples groups of reused tasks, re-executes
/// them and adjusts the threshold.
pub fn threshold_adaptation(
    strategy: Strategy,
    deployment: &Deployment,
    workload: &Workload,
    start: f64,
    acfg: &AdaptationConfig,
) -> Result<Vec<AdaptationStep>> {
    let mut threshold = start;
    let mut steps = Vec::with_capacity(acfg.iterations);
    for iteration in 0..acfg.iterations {
        let mut w = workload.clone();
        w.config.threshold = threshold;
        let log = run_once(strategy, deployment, &w)?;
        let reused: Vec<&ResponseRecord> = log.responses.iter().filter(|r| r.reused).collect();
        // Evenly spaced groups across the run.
        let wanted = acfg.groups * acfg.group_size;
        let stride = (reused.len() / wanted.max(1)).max(1);
        let sample: Vec<(u32, u32)> = reused
            .iter()
            .step_by(stride)
            .take(wanted)
            .map(|r| {
                let task = &w.tasks[r.index];
                let service = w.service(&task.service).expect("known service");
                let fresh = service.classify(&task.payload).expect("matching dimension");
                (r.label.unwrap_or(u32::MAX), fresh)
            })
            .collect();
        let groups: Vec<Vec<(u32, u32)>> = sample.chunks(acfg.group_size.max(1)).map(<[_]>::to_vec).collect();
        let estimate = (!sample.is_empty())
            .then(|| 100.0 * sample.iter().filter(|(a, b)| a == b).count() as f64 / sample.len() as f64);
        steps.push(AdaptationStep {
            iteration,
            threshold,
            estimated_accuracy: estimate,
            percent_reuse: log.report.percent_reuse,
        });
        threshold = adapt_threshold(threshold, &groups, acfg.target, acfg.margin, acfg.step);
    }
    Ok(steps)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub report: ExperimentReport,
    pub events: Vec<Event>,
    pub added: ServerId,
    pub failed: ServerId,
    pub added_at_task: usize,
    pub failed_at_task: usize,
    /// Index of the first task routed after the proxy dropped the failed server.
    pub detected_at_task: Option<usize>,
    #[serde(skip)]
    pub responses: Vec<ResponseRecord>,
}

/// Runs the workload on `deployment.servers` servers, registers one more a
/// third of the way in and silently fails `fail` two thirds of the way in.
pub fn failure_and_addition_scenario(
    strategy: Strategy,
    deployment: &Deployment,
    workload: &Workload,
    fail: ServerId,
) -> Result<ScenarioOutcome> {
    let cfg = deployment.sim_config(strategy, &workload.config);
    let mut cluster = Cluster::new(cfg, workload.services())?;
    let n = workload.tasks.len();
    let (add_at, fail_at) = (n / 3, 2 * n / 3);
    let mut added = None;
    let mut detected_at_task = None;
    for task in &workload.tasks {
        if task.index == add_at {
            cluster.advance_to(cluster.arrival_time(task.index))?;
            added = Some(cluster.add_server()?);
        }
        if task.index == fail_at {
            cluster.advance_to(cluster.arrival_time(task.index))?;
            cluster.fail_server(fail)?;
        }
        cluster.submit(task)?;
        if detected_at_task.is_none()
            && cluster.events().iter().any(|e| matches!(e, Event::FailureDetected { server, .. } if *server == fail))
        {
            // The task just submitted was routed after detection unless
            // detection happened while advancing to its arrival.
            detected_at_task = Some(task.index);
        }
    }
    cluster.finish()?;
    let responses = cluster.responses().to_vec();
    let latency = cluster.dedup().route_latency().summary();
    let report = ExperimentReport {
        strategy,
        servers: cluster.server_ids().len(),
        reps: 1,
        percent_reuse: percent_reuse(&responses, n),
        per_server_share: shares(&responses, &cluster.server_ids()),
        reuse_accuracy: reuse_accuracy_oracle(workload, &responses),
        overhead_p50_us: latency.p50_us,
        overhead_p99_us: latency.p99_us,
        epochs: cluster.dedup().redistributions() as f64,
        migrated_entries: cluster.migrated_entries() as f64,
        valid: true,
    };
    Ok(ScenarioOutcome {
        report,
        events: cluster.events().to_vec(),
        added: added.ok_or_else(|| Error::config("workload too short for the scenario"))?,
        failed: fail,
        added_at_task: add_at,
        failed_at_task: fail_at,
        detected_at_task,
        responses,
    })
}
