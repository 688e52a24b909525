//! Per-server and per-range load statistics.
//!
//! Edge servers report CPU and memory usage either in explicit notifications
//! or piggybacked on task responses. The proxy adds its own per-window task
//! counters, which feed [`LoadSample`]s for redistribution.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slices::{GroupLoad, LoadSample, RangeGroups, ServerId, SliceTable};

pub const HEADER_CPU: &str = "x-cpu-load";
pub const HEADER_MEM: &str = "x-mem-load";
pub const HEADER_GROUPS: &str = "x-group-stats";

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Exponentially weighted mean; the first observation seeds it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ewma {
    alpha: f64,
    value: Option<f64>,
}

impl Ewma {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, value: None }
    }

    pub fn observe(&mut self, sample: f64) -> f64 {
        let next = match self.value {
            Some(prev) => self.alpha * sample + (1.0 - self.alpha) * prev,
            None => sample,
        };
        self.value = Some(next);
        next
    }

    pub fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }
}

/// Statistics for one range group as reported by a server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeGroupStats {
    pub group_id: u32,
    pub tasks: u64,
    pub cpu: Ewma,
    pub mem: Ewma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServerHealth {
    pub server: ServerId,
    #[serde(with = "secs")]
    pub last_response_at: Duration,
    #[serde(with = "secs")]
    pub last_notification_at: Duration,
    pub inflight: u64,
    pub cpu: f64,
    pub mem: f64,
}

mod secs {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
}

/// Explicit notification body: `{server, cpu, mem, per_group: [[gid, tasks, cpu, mem], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub server: ServerId,
    pub cpu: f64,
    pub mem: f64,
    #[serde(default)]
    pub per_group: Vec<(u32, u64, f64, f64)>,
}

impl StatsReport {
    fn check(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.cpu) || !unit(self.mem) {
            return Err(Error::input("cpu and mem must lie in [0, 1]"));
        }
        if self.per_group.iter().any(|g| !unit(g.2) || !unit(g.3)) {
            return Err(Error::input("group cpu and mem must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Raw piggyback header values as found on a response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PiggybackFields {
    pub cpu: Option<String>,
    pub mem: Option<String>,
    pub groups: Option<String>,
}

impl PiggybackFields {
    pub fn encode(cpu: f64, mem: f64, groups: &BTreeMap<u32, u64>) -> Self {
        let groups = groups
            .iter()
            .map(|(g, t)| format!("{g}:{t}"))
            .collect::<Vec<_>>()
            .join(",");
        Self {
            cpu: Some(format!("{cpu:.4}")),
            mem: Some(format!("{mem:.4}")),
            groups: (!groups.is_empty()).then_some(groups),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cpu.is_none() && self.mem.is_none() && self.groups.is_none()
    }

    fn parse(&self) -> Option<ParsedPiggyback> {
        let unit = |s: &Option<String>| -> Option<Option<f64>> {
            match s {
                None => Some(None),
                Some(text) => {
                    let v: f64 = text.trim().parse().ok()?;
                    (0.0..=1.0).contains(&v).then_some(Some(v))
                }
            }
        };
        let cpu = unit(&self.cpu)?;
        let mem = unit(&self.mem)?;
        let mut groups = Vec::new();
        if let Some(text) = &self.groups {
            for pair in text.split(',').filter(|p| !p.trim().is_empty()) {
                let (g, t) = pair.split_once(':')?;
                groups.push((g.trim().parse().ok()?, t.trim().parse().ok()?));
            }
        }
        Some(ParsedPiggyback { cpu, mem, groups })
    }
}

struct ParsedPiggyback {
    cpu: Option<f64>,
    mem: Option<f64>,
    groups: Vec<(u32, u64)>,
}

/// Where the hottest range group of an overloaded server sits in its slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HotSpot {
    /// Touches the lower edge of the slice.
    LowerEdge,
    /// Touches the upper edge of the slice.
    UpperEdge,
    Interior,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overload {
    pub server: ServerId,
    /// Hottest groups first.
    pub hot_groups: Vec<u32>,
    pub hotspot: Option<HotSpot>,
}

#[derive(Debug)]
struct ServerState {
    registered_at: Duration,
    last_response_at: Duration,
    last_notification_at: Duration,
    inflight: u64,
    // Requests that timed out with no response since.
    unanswered: u64,
    cpu: Ewma,
    mem: Ewma,
    reported: BTreeMap<u32, RangeGroupStats>,
    routed_total: u64,
}

#[derive(Debug, Default)]
struct WindowCounts {
    tasks: u64,
    groups: BTreeMap<u32, u64>,
}

#[derive(Debug, Default)]
struct Inner {
    servers: BTreeMap<ServerId, ServerState>,
    window: BTreeMap<ServerId, WindowCounts>,
    last_window: Vec<LoadSample>,
}

#[derive(Debug)]
pub struct StatsCollector {
    groups: RangeGroups,
    alpha: f64,
    inner: Mutex<Inner>,
    malformed: AtomicU64,
}

impl StatsCollector {
    pub fn new(bits: u32, group_count: u32) -> Self {
        Self::with_alpha(bits, group_count, DEFAULT_ALPHA)
    }

    pub fn with_alpha(bits: u32, group_count: u32, alpha: f64) -> Self {
        Self {
            groups: RangeGroups::new(bits, group_count),
            alpha,
            inner: Mutex::default(),
            malformed: AtomicU64::new(0),
        }
    }

    pub fn groups(&self) -> RangeGroups {
        self.groups
    }

    pub fn register(&self, server: ServerId, now: Duration) -> Result<()> {
        let mut inner = self.inner.lock();
        if inner.servers.contains_key(&server) {
            return Err(Error::DuplicateServer(server));
        }
        inner.servers.insert(
            server,
            ServerState {
                registered_at: now,
                last_response_at: now,
                last_notification_at: now,
                inflight: 0,
                unanswered: 0,
                cpu: Ewma::new(self.alpha),
                mem: Ewma::new(self.alpha),
                reported: BTreeMap::new(),
                routed_total: 0,
            },
        );
        Ok(())
    }

    pub fn deregister(&self, server: ServerId) {
        let mut inner = self.inner.lock();
        inner.servers.remove(&server);
        inner.window.remove(&server);
    }

    pub fn is_registered(&self, server: ServerId) -> bool {
        self.inner.lock().servers.contains_key(&server)
    }

    pub fn ingest_notification(&self, report: &StatsReport, now: Duration) -> Result<()> {
        report.check()?;
        let mut inner = self.inner.lock();
        let state = inner
            .servers
            .get_mut(&report.server)
            .ok_or(Error::UnknownServer(report.server))?;
        state.last_notification_at = now;
        state.cpu.observe(report.cpu);
        state.mem.observe(report.mem);
        for &(gid, tasks, cpu, mem) in &report.per_group {
            if gid >= self.groups.count() {
                continue;
            }
            let entry = group_entry(&mut state.reported, gid, self.alpha);
            entry.tasks += tasks;
            entry.cpu.observe(cpu);
            entry.mem.observe(mem);
        }
        Ok(())
    }

    /// Applies piggybacked usage carried on a response from `server`.
    /// Malformed fields are counted and otherwise ignored.
    pub fn ingest_piggyback(
        &self,
        server: ServerId,
        fields: &PiggybackFields,
        now: Duration,
    ) -> Result<()> {
        let mut inner = self.inner.lock();
        let state = inner
            .servers
            .get_mut(&server)
            .ok_or(Error::UnknownServer(server))?;
        state.last_response_at = now;
        state.unanswered = 0;
        let Some(parsed) = fields.parse() else {
            self.malformed.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        };
        if let Some(cpu) = parsed.cpu {
            state.cpu.observe(cpu);
        }
        if let Some(mem) = parsed.mem {
            state.mem.observe(mem);
        }
        for (gid, tasks) in parsed.groups {
            if gid < self.groups.count() {
                group_entry(&mut state.reported, gid, self.alpha).tasks += tasks;
            }
        }
        Ok(())
    }

    pub fn malformed_count(&self) -> u64 {
        self.malformed.load(Ordering::Relaxed)
    }

    pub fn record_routed(&self, server: ServerId, bucket: u64) {
        let group = self.groups.group_of(bucket);
        let mut inner = self.inner.lock();
        let counts = inner.window.entry(server).or_default();
        counts.tasks += 1;
        *counts.groups.entry(group).or_default() += 1;
        if let Some(state) = inner.servers.get_mut(&server) {
            state.routed_total += 1;
        }
    }

    pub fn begin_request(&self, server: ServerId) {
        if let Some(state) = self.inner.lock().servers.get_mut(&server) {
            state.inflight += 1;
        }
    }

    /// Closes a request opened with [`begin_request`](Self::begin_request).
    /// A request that timed out counts as unanswered until the server
    /// responds again.
    pub fn end_request(&self, server: ServerId, now: Duration, answered: bool) {
        if let Some(state) = self.inner.lock().servers.get_mut(&server) {
            state.inflight = state.inflight.saturating_sub(1);
            if answered {
                state.last_response_at = now;
                state.unanswered = 0;
            } else {
                state.unanswered += 1;
            }
        }
    }

    pub fn inflight(&self, server: ServerId) -> u64 {
        self.inner
            .lock()
            .servers
            .get(&server)
            .map_or(0, |s| s.inflight)
    }

    /// Closes the current window and opens a new one. Every registered
    /// server gets a sample, zero if it received nothing.
    pub fn snapshot_window(&self) -> Vec<LoadSample> {
        let mut inner = self.inner.lock();
        let window = std::mem::take(&mut inner.window);
        let samples: Vec<LoadSample> = inner
            .servers
            .iter()
            .map(|(&server, state)| {
                let counts = window.get(&server);
                let per_range = counts
                    .map(|c| {
                        c.groups
                            .iter()
                            .map(|(&g, &tasks)| {
                                let reported = state.reported.get(&g);
                                let load = GroupLoad {
                                    tasks,
                                    cpu: reported.map_or(0.0, |r| r.cpu.get()),
                                    mem: reported.map_or(0.0, |r| r.mem.get()),
                                };
                                (g, load)
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                LoadSample {
                    server,
                    tasks: counts.map_or(0, |c| c.tasks),
                    per_range,
                }
            })
            .collect();
        inner.last_window = samples.clone();
        samples
    }

    /// Samples of the most recently closed window.
    pub fn last_window(&self) -> Vec<LoadSample> {
        self.inner.lock().last_window.clone()
    }

    /// Servers that stopped answering tasks or stopped sending notifications.
    pub fn detect_failures(
        &self,
        now: Duration,
        response_timeout: Duration,
        notification_timeout: Duration,
        k_missed: u32,
    ) -> Vec<ServerId> {
        let notification_limit = notification_timeout * k_missed;
        self.inner
            .lock()
            .servers
            .iter()
            .filter(|(_, s)| {
                let waiting = s.inflight + s.unanswered > 0;
                let silent = now.saturating_sub(s.last_response_at) > response_timeout;
                let unreported =
                    now.saturating_sub(s.last_notification_at) > notification_limit;
                (waiting && silent) || unreported
            })
            .map(|(&id, _)| id)
            .collect()
    }

    /// Servers whose smoothed CPU or memory usage exceeds a threshold, with
    /// their hottest range groups.
    pub fn detect_overload(
        &self,
        table: &SliceTable,
        cpu_threshold: f64,
        mem_threshold: f64,
    ) -> Vec<Overload> {
        let inner = self.inner.lock();
        inner
            .servers
            .iter()
            .filter(|(_, s)| s.cpu.get() > cpu_threshold || s.mem.get() > mem_threshold)
            .map(|(&server, state)| {
                let mut ranked: Vec<(u32, u64)> = if state.reported.is_empty() {
                    inner
                        .last_window
                        .iter()
                        .find(|s| s.server == server)
                        .map(|s| s.per_range.iter().map(|(&g, l)| (g, l.tasks)).collect())
                        .unwrap_or_default()
                } else {
                    state.reported.values().map(|r| (r.group_id, r.tasks)).collect()
                };
                ranked.retain(|&(g, t)| t > 0 && self.owned_by(table, g, server));
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.truncate(3);
                let hotspot = ranked
                    .first()
                    .and_then(|&(g, _)| self.hotspot(table, g, server));
                Overload {
                    server,
                    hot_groups: ranked.into_iter().map(|(g, _)| g).collect(),
                    hotspot,
                }
            })
            .collect()
    }

    fn owned_by(&self, table: &SliceTable, group: u32, server: ServerId) -> bool {
        let (lo, hi) = self.groups.range(group);
        table
            .slices()
            .iter()
            .any(|s| s.server == server && u64::from(s.lo) <= hi && u64::from(s.hi) >= lo)
    }

    /// Classifies `group` against the server's slice it overlaps most.
    pub fn hotspot(&self, table: &SliceTable, group: u32, server: ServerId) -> Option<HotSpot> {
        let (lo, hi) = self.groups.range(group);
        let slice = table
            .slices()
            .iter()
            .filter(|s| s.server == server)
            .max_by_key(|s| (hi.min(s.hi.into()) + 1).saturating_sub(lo.max(s.lo.into())))?;
        Some(if lo <= u64::from(slice.lo) {
            HotSpot::LowerEdge
        } else if hi >= u64::from(slice.hi) {
            HotSpot::UpperEdge
        } else {
            HotSpot::Interior
        })
    }

    pub fn health(&self, server: ServerId) -> Option<ServerHealth> {
        self.inner
            .lock()
            .servers
            .get(&server)
            .map(|s| health_of(server, s))
    }

    pub fn all_health(&self) -> Vec<ServerHealth> {
        self.inner
            .lock()
            .servers
            .iter()
            .map(|(&id, s)| health_of(id, s))
            .collect()
    }

    pub fn routed_totals(&self) -> BTreeMap<ServerId, u64> {
        self.inner
            .lock()
            .servers
            .iter()
            .map(|(&id, s)| (id, s.routed_total))
            .collect()
    }

    pub fn registered_at(&self, server: ServerId) -> Option<Duration> {
        self.inner.lock().servers.get(&server).map(|s| s.registered_at)
    }

    pub fn group_stats(&self, server: ServerId) -> Vec<RangeGroupStats> {
        self.inner
            .lock()
            .servers
            .get(&server)
            .map(|s| s.reported.values().copied().collect())
            .unwrap_or_default()
    }
}

fn group_entry(map: &mut BTreeMap<u32, RangeGroupStats>, gid: u32, alpha: f64) -> &mut RangeGroupStats {
    map.entry(gid).or_insert(RangeGroupStats {
        group_id: gid,
        tasks: 0,
        cpu: Ewma::new(alpha),
        mem: Ewma::new(alpha),
    })
}

fn health_of(server: ServerId, s: &ServerState) -> ServerHealth {
    ServerHealth {
        server,
        last_response_at: s.last_response_at,
        last_notification_at: s.last_notification_at,
        inflight: s.inflight,
        cpu: s.cpu.get(),
        mem: s.mem.get(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S1: ServerId = ServerId(1);
    const S2: ServerId = ServerId(2);

    fn secs(s: f64) -> Duration {
        Duration::from_secs_f64(s)
    }

    fn collector() -> StatsCollector {
        let c = StatsCollector::new(16, 64);
        c.register(S1, Duration::ZERO).unwrap();
        c.register(S2, Duration::ZERO).unwrap();
        c
    }

    fn report(server: ServerId, cpu: f64) -> StatsReport {
        StatsReport { server, cpu, mem: 0.1, per_group: vec![] }
    }

    #[test]
    fn notification_updates_health() {
        let c = collector();
        c.ingest_notification(&report(S1, 0.0), secs(1.0)).unwrap();
        let h = c.health(S1).unwrap();
        assert_eq!(h.cpu, 0.0);
        assert_eq!(h.last_notification_at, secs(1.0));
    }

    #[test]
    fn notification_cpu_is_smoothed() {
        let c = collector();
        c.ingest_notification(&report(S1, 0.2), secs(1.0)).unwrap();
        c.ingest_notification(&report(S1, 0.6), secs(2.0)).unwrap();
        assert!((c.health(S1).unwrap().cpu - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unknown_server_is_rejected() {
        let c = collector();
        let err = c.ingest_notification(&report(ServerId(9), 0.2), secs(1.0));
        assert_eq!(err, Err(Error::UnknownServer(ServerId(9))));
        assert!(c.ingest_notification(&report(S1, 1.5), secs(1.0)).is_err());
        assert_eq!(c.register(S1, secs(0.0)), Err(Error::DuplicateServer(S1)));
    }

    #[test]
    fn piggyback_fields() {
        let c = collector();
        let fields = PiggybackFields { cpu: Some("0.8".into()), ..Default::default() };
        c.ingest_piggyback(S1, &fields, secs(3.0)).unwrap();
        let h = c.health(S1).unwrap();
        assert_eq!(h.cpu, 0.8);
        assert_eq!(h.last_response_at, secs(3.0));

        c.ingest_piggyback(S2, &PiggybackFields::default(), secs(4.0)).unwrap();
        let h2 = c.health(S2).unwrap();
        assert_eq!((h2.cpu, h2.mem), (0.0, 0.0));
        assert_eq!(h2.last_response_at, secs(4.0));

        let bad = PiggybackFields { cpu: Some("0.x".into()), mem: Some("0.5".into()), groups: None };
        c.ingest_piggyback(S1, &bad, secs(5.0)).unwrap();
        assert_eq!(c.malformed_count(), 1);
        let h = c.health(S1).unwrap();
        assert_eq!((h.cpu, h.mem), (0.8, 0.0));

        let groups = PiggybackFields { groups: Some("3:4,7:1".into()), ..Default::default() };
        c.ingest_piggyback(S1, &groups, secs(6.0)).unwrap();
        let stats = c.group_stats(S1);
        assert_eq!(stats.iter().map(|g| (g.group_id, g.tasks)).collect::<Vec<_>>(), vec![(3, 4), (7, 1)]);
        let broken = PiggybackFields { groups: Some("3-4".into()), ..Default::default() };
        c.ingest_piggyback(S1, &broken, secs(6.0)).unwrap();
        assert_eq!(c.malformed_count(), 2);
    }

    #[test]
    fn piggyback_encoding_parses_back() {
        let groups = BTreeMap::from([(1, 5), (9, 2)]);
        let fields = PiggybackFields::encode(0.25, 0.5, &groups);
        assert_eq!(fields.groups.as_deref(), Some("1:5,9:2"));
        let parsed = fields.parse().unwrap();
        assert_eq!((parsed.cpu, parsed.mem), (Some(0.25), Some(0.5)));
        assert_eq!(parsed.groups, vec![(1, 5), (9, 2)]);
    }

    #[test]
    fn windows_count_and_reset() {
        let c = collector();
        assert!(c.snapshot_window().iter().all(|s| s.tasks == 0));
        for _ in 0..5 {
            c.record_routed(S1, 100);
        }
        let snap = c.snapshot_window();
        let s1 = snap.iter().find(|s| s.server == S1).unwrap();
        assert_eq!(s1.tasks, 5);
        assert_eq!(s1.per_range[&0].tasks, 5);
        assert_eq!(c.last_window(), snap);
        assert!(c.snapshot_window().iter().all(|s| s.tasks == 0));
        assert_eq!(c.routed_totals()[&S1], 5);
    }

    #[test]
    fn failure_detection_clauses() {
        let c = collector();
        let (rt, nt) = (secs(2.0), secs(1.0));
        assert!(c.detect_failures(secs(0.5), rt, nt, 3).is_empty());
        // Silent for more than three notification intervals.
        c.ingest_notification(&report(S2, 0.1), secs(3.5)).unwrap();
        assert_eq!(c.detect_failures(secs(3.5), rt, nt, 3), vec![S1]);

        let c = collector();
        c.ingest_notification(&report(S1, 0.1), secs(2.0)).unwrap();
        c.begin_request(S1);
        c.end_request(S1, secs(2.9), true);
        c.ingest_notification(&report(S2, 0.1), secs(3.0)).unwrap();
        assert!(c.detect_failures(secs(3.0), rt, nt, 3).is_empty());

        // A pending request with no response for longer than the timeout.
        c.begin_request(S1);
        assert!(c.detect_failures(secs(4.8), rt, nt, 3).is_empty());
        assert_eq!(c.detect_failures(secs(5.0), rt, nt, 3), vec![S1]);
        // Timed-out requests keep counting until the server answers again.
        c.end_request(S1, secs(5.0), false);
        assert_eq!(c.detect_failures(secs(5.0), rt, nt, 3), vec![S1]);
    }

    #[test]
    fn overload_reports_hot_groups() {
        let c = collector();
        let table = SliceTable::initial_equal(&[S1, S2], 16).unwrap();
        assert!(c.detect_overload(&table, 0.9, 0.9).is_empty());
        let hot = StatsReport {
            server: S1,
            cpu: 0.95,
            mem: 0.2,
            per_group: vec![(10, 50, 0.5, 0.1), (11, 20, 0.2, 0.1), (40, 99, 0.2, 0.1)],
        };
        c.ingest_notification(&hot, secs(1.0)).unwrap();
        let over = c.detect_overload(&table, 0.9, 0.9);
        assert_eq!(over.len(), 1);
        assert_eq!(over[0].server, S1);
        // Group 40 lies in S2's half and is ignored.
        assert_eq!(over[0].hot_groups, vec![10, 11]);
        assert_eq!(over[0].hotspot, Some(HotSpot::Interior));
        assert_eq!(c.hotspot(&table, 0, S1), Some(HotSpot::LowerEdge));
        assert_eq!(c.hotspot(&table, 31, S1), Some(HotSpot::UpperEdge));
    }

    proptest! {
        #[test]
        fn window_conserves_routed_tasks(routes in prop::collection::vec((1u32..=2, 0u64..65536), 0..200)) {
            let c = collector();
            for &(s, b) in &routes {
                c.record_routed(ServerId(s), b);
            }
            let snap = c.snapshot_window();
            prop_assert_eq!(snap.iter().map(|s| s.tasks).sum::<u64>(), routes.len() as u64);
            let group_total: u64 = snap.iter().flat_map(|s| s.per_range.values()).map(|g| g.tasks).sum();
            prop_assert_eq!(group_total, routes.len() as u64);
        }

        #[test]
        fn recent_servers_are_never_reported(resp in 0.0f64..10.0, notif in 0.0f64..10.0, pending: bool) {
            let c = collector();
            let now = secs(10.0);
            c.ingest_notification(&report(S1, 0.1), secs(notif)).unwrap();
            c.ingest_notification(&report(S2, 0.1), now).unwrap();
            c.begin_request(S1);
            c.end_request(S1, secs(resp), true);
            if pending {
                c.begin_request(S1);
            }
            let (rt, nt) = (secs(2.0), secs(1.0));
            let failed = c.detect_failures(now, rt, nt, 3).contains(&S1);
            let fresh = 10.0 - resp <= 2.0 && 10.0 - notif <= 3.0;
            prop_assert!(!(fresh && failed));
        }
    }
}
