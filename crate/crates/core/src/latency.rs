use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;

/// Collects durations and reports nearest-rank quantiles.
#[derive(Debug, Default)]
pub struct LatencyRecorder {
    samples: Mutex<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyRecorder {
    pub fn record(&self, d: Duration) {
        self.samples.lock().push(d.as_nanos() as u64);
    }

    pub fn reset(&self) {
        self.samples.lock().clear();
    }

    pub fn summary(&self) -> LatencySummary {
        summarize(&self.samples.lock())
    }
}

pub fn summarize(nanos: &[u64]) -> LatencySummary {
    if nanos.is_empty() {
        return LatencySummary::default();
    }
    let mut sorted = nanos.to_vec();
    sorted.sort_unstable();
    let us = |q: f64| {
        let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[rank - 1] as f64 / 1e3
    };
    LatencySummary {
        count: sorted.len(),
        p50_us: us(0.50),
        p99_us: us(0.99),
        max_us: *sorted.last().unwrap() as f64 / 1e3,
    }
}
