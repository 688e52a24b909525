//! In-process deployment driven on a virtual clock.
//!
//! Tasks arrive at a fixed rate. Each emulated server completes a task after
//! its simulated cost, which is when the proxy sees the response and its
//! piggybacked usage. Stats notifications, failure detection and slice
//! redistribution run on their own periodic ticks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use dedup_core::edge::{EdgeConfig, MigrationTarget};
use dedup_core::proxy::{Reconfiguration, WireTask};
use dedup_core::slices::SliceTable;
use dedup_core::wire::encode_payload;
use dedup_core::{
    DedupConfig, Deduplicator, EdgeServer, Error, Hasher, LshConfig, PiggybackFields,
    RegistrationMessage, Result, ServerId, ServiceDef, Strategy, TaskRequest,
};

use crate::workload::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub servers: usize,
    pub bits: u32,
    pub dim: usize,
    pub lsh_seed: u64,
    pub group_count: u32,
    pub min_slice: u64,
    pub capacity: usize,
    /// Tasks per second of virtual time.
    pub arrival_rate: f64,
    pub redistribution_interval: Duration,
    pub notification_interval: Duration,
    pub response_timeout: Duration,
    pub k_missed: u32,
    pub payload_padding: usize,
    pub user_assisted: bool,
    /// Similarity threshold attached to every task.
    pub threshold: f64,
}

impl SimConfig {
    pub fn new(strategy: Strategy, servers: usize, dim: usize, lsh_seed: u64) -> Self {
        Self {
            strategy,
            servers,
            bits: 16,
            dim,
            lsh_seed,
            group_count: 64,
            min_slice: 1,
            capacity: dedup_core::edge::DEFAULT_CAPACITY,
            arrival_rate: 100.0,
            redistribution_interval: Duration::from_secs(5),
            notification_interval: Duration::from_secs(1),
            response_timeout: Duration::from_secs(2),
            k_missed: 3,
            payload_padding: 0,
            user_assisted: false,
            threshold: 0.9,
        }
    }

    fn dedup_config(&self) -> Result<DedupConfig> {
        let mut cfg = DedupConfig::new(self.strategy, LshConfig::new(self.bits, self.dim, self.lsh_seed)?);
        cfg.slices.group_count = self.group_count;
        cfg.slices.min_slice = self.min_slice;
        cfg.redistribution_interval = self.redistribution_interval;
        cfg.notification_interval = self.notification_interval;
        cfg.response_timeout = self.response_timeout;
        cfg.k_missed = self.k_missed;
        Ok(cfg)
    }
}

/// What happened to one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseRecord {
    pub index: usize,
    pub server: ServerId,
    pub epoch: u64,
    pub bucket: u32,
    pub reused: bool,
    pub similarity: Option<f64>,
    /// `None` when the server never answered.
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Registered { at: f64, server: ServerId, moved_ranges: usize, migrated: usize },
    FailureInjected { at: f64, server: ServerId },
    FailureDetected { at: f64, server: ServerId },
    Redistributed { at: f64, epoch: u64, moved_ranges: usize, migrated: usize },
    TableActivated { at: f64, epoch: u64, valid: bool },
}

struct Pending {
    server: ServerId,
    piggyback: Option<PiggybackFields>,
}

pub struct Cluster {
    cfg: SimConfig,
    dedup: Deduplicator,
    hasher: Hasher,
    services: Arc<Vec<ServiceDef>>,
    servers: BTreeMap<ServerId, Arc<EdgeServer>>,
    now: Duration,
    pending: BinaryHeap<Reverse<(Duration, u64)>>,
    pending_info: HashMap<u64, Pending>,
    seq: u64,
    next_notify: Duration,
    next_redistribute: Duration,
    responses: Vec<ResponseRecord>,
    events: Vec<Event>,
    migrated: u64,
    last_epoch: u64,
}

impl Cluster {
    pub fn new(cfg: SimConfig, services: Arc<Vec<ServiceDef>>) -> Result<Self> {
        if cfg.servers == 0 {
            return Err(Error::config("need at least one server"));
        }
        if cfg.arrival_rate.is_nan() || cfg.arrival_rate <= 0.0 {
            return Err(Error::config("arrival rate must be positive"));
        }
        let dedup_cfg = cfg.dedup_config()?;
        let hasher = Hasher::new(dedup_cfg.lsh)?;
        let regs: Vec<RegistrationMessage> = (1..=cfg.servers as u32)
            .map(|i| RegistrationMessage { server: ServerId(i), address: format!("sim://{i}") })
            .collect();
        let dedup = Deduplicator::new(dedup_cfg, &regs)?;
        let mut cluster = Self {
            cfg,
            dedup,
            hasher,
            services,
            servers: BTreeMap::new(),
            now: Duration::ZERO,
            pending: BinaryHeap::new(),
            pending_info: HashMap::new(),
            seq: 0,
            next_notify: cfg.notification_interval,
            next_redistribute: cfg.redistribution_interval,
            responses: Vec::new(),
            events: Vec::new(),
            migrated: 0,
            last_epoch: 0,
        };
        for reg in &regs {
            let server = cluster.spawn(reg.server)?;
            cluster.servers.insert(reg.server, server);
        }
        Ok(cluster)
    }

    fn spawn(&self, id: ServerId) -> Result<Arc<EdgeServer>> {
        let config = EdgeConfig {
            capacity: self.cfg.capacity,
            group_count: self.cfg.group_count,
            ..EdgeConfig::default()
        };
        Ok(Arc::new(EdgeServer::new(id, self.hasher.clone(), (*self.services).clone(), config)?))
    }

    pub fn dedup(&self) -> &Deduplicator {
        &self.dedup
    }

    pub fn server(&self, id: ServerId) -> Option<&Arc<EdgeServer>> {
        self.servers.get(&id)
    }

    pub fn server_ids(&self) -> Vec<ServerId> {
        self.servers.keys().copied().collect()
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn responses(&self) -> &[ResponseRecord] {
        &self.responses
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn migrated_entries(&self) -> u64 {
        self.migrated
    }

    pub fn arrival_time(&self, index: usize) -> Duration {
        Duration::from_secs_f64(index as f64 / self.cfg.arrival_rate)
    }

    /// Feeds one task at its arrival time and returns its record.
    pub fn submit(&mut self, task: &Task) -> Result<ResponseRecord> {
        self.advance_to(self.arrival_time(task.index).max(self.now))?;
        self.submit_now(task, self.cfg.user_assisted)
    }

    /// Feeds a task at the current virtual time.
    pub fn submit_now(&mut self, task: &Task, user_assisted: bool) -> Result<ResponseRecord> {
        let body = encode_payload(&task.payload, self.cfg.payload_padding);
        let hex = if user_assisted {
            Some(self.hasher.hash(&task.payload)?.to_hex(self.cfg.bits))
        } else {
            None
        };
        let decision = self.dedup.route_wire(&WireTask {
            client_id: &task.client_id,
            signature_hex: hex.as_deref(),
            body: &body,
        })?;
        let request = TaskRequest {
            task_id: task.task_id.clone(),
            service: task.service.clone(),
            threshold: self.cfg.threshold,
            signature: Some(decision.signature),
            payload: task.payload.clone(),
            client_id: task.client_id.clone(),
        };
        let server = self.servers.get(&decision.server).cloned().ok_or(Error::UnknownServer(decision.server))?;
        self.dedup.forward_started(decision.server);
        let (record, done_at, piggyback) = match server.handle_task(&request, self.now) {
            Ok(resp) => {
                let cost = if resp.reused {
                    0.0
                } else {
                    self.services
                        .iter()
                        .find(|s| s.name == task.service)
                        .map_or(0.0, |s| s.cost_ms)
                };
                (
                    ResponseRecord {
                        index: task.index,
                        server: decision.server,
                        epoch: decision.epoch,
                        bucket: decision.signature.value(),
                        reused: resp.reused,
                        similarity: resp.similarity,
                        label: Some(resp.result.label),
                    },
                    self.now + Duration::from_secs_f64(cost / 1e3),
                    Some(resp.piggyback),
                )
            }
            Err(Error::Unavailable(_)) => (
                ResponseRecord {
                    index: task.index,
                    server: decision.server,
                    epoch: decision.epoch,
                    bucket: decision.signature.value(),
                    reused: false,
                    similarity: None,
                    label: None,
                },
                self.now + self.cfg.response_timeout,
                None,
            ),
            Err(e) => return Err(e),
        };
        self.seq += 1;
        self.pending.push(Reverse((done_at, self.seq)));
        self.pending_info.insert(self.seq, Pending { server: decision.server, piggyback });
        self.responses.push(record.clone());
        Ok(record)
    }

    /// Processes every completion and periodic tick up to `t`.
    pub fn advance_to(&mut self, t: Duration) -> Result<()> {
        loop {
            let completion = self.pending.peek().map(|Reverse((at, _))| *at);
            let tick = self.next_notify.min(self.next_redistribute);
            let next = completion.map_or(tick, |c| c.min(tick));
            if next > t {
                break;
            }
            self.now = self.now.max(next);
            if completion == Some(next) {
                let Reverse((_, seq)) = self.pending.pop().expect("peeked");
                let p = self.pending_info.remove(&seq).expect("pending entry");
                self.dedup.forward_finished(p.server, self.now, p.piggyback.as_ref());
            } else if self.next_notify == next {
                self.notify_tick()?;
                self.next_notify += self.cfg.notification_interval;
            } else {
                self.redistribute_tick()?;
                self.next_redistribute += self.cfg.redistribution_interval;
            }
        }
        self.now = self.now.max(t);
        Ok(())
    }

    fn notify_tick(&mut self) -> Result<()> {
        for (id, server) in &self.servers {
            if !self.dedup.stats().is_registered(*id) {
                continue;
            }
            if let Some(report) = server.report_stats(self.now) {
                self.dedup.ingest_notification(&report, self.now)?;
            }
        }
        for failed in self.dedup.detect_failures(self.now) {
            self.dedup.handle_failure(failed)?;
            self.events.push(Event::FailureDetected { at: secs(self.now), server: failed });
            self.note_table();
        }
        Ok(())
    }

    fn redistribute_tick(&mut self) -> Result<()> {
        if let Some(Reconfiguration { table, directives }) = self.dedup.redistribution_tick()? {
            let migrated = self.apply_directives(&directives);
            self.events.push(Event::Redistributed {
                at: secs(self.now),
                epoch: table.epoch(),
                moved_ranges: directives.len(),
                migrated,
            });
            self.note_table();
        }
        Ok(())
    }

    /// Warm start: moves cached entries along with their hash ranges.
    /// Entries held by a dead server are simply lost.
    fn apply_directives(&mut self, directives: &[dedup_core::MigrationDirective]) -> usize {
        let mut moved = 0;
        for d in directives {
            let (Some(from), Some(to)) = (self.servers.get(&d.from), self.servers.get(&d.to)) else {
                continue;
            };
            if from.is_failed() {
                continue;
            }
            moved += from.migrate_entries((d.lo, d.hi), to.as_ref() as &dyn MigrationTarget).unwrap_or(0);
        }
        self.migrated += moved as u64;
        moved
    }

    fn note_table(&mut self) {
        let table = self.dedup.table();
        if table.epoch() != self.last_epoch || self.events.is_empty() {
            self.last_epoch = table.epoch();
            self.events.push(Event::TableActivated {
                at: secs(self.now),
                epoch: table.epoch(),
                valid: table_valid(&table),
            });
        }
    }

    /// Starts a new server and registers it with the proxy.
    pub fn add_server(&mut self) -> Result<ServerId> {
        let id = ServerId(self.servers.keys().last().map_or(1, |s| s.0 + 1));
        let server = self.spawn(id)?;
        self.servers.insert(id, server);
        let directives = self.dedup.handle_register(
            &RegistrationMessage { server: id, address: format!("sim://{}", id.0) },
            self.now,
        )?;
        let migrated = self.apply_directives(&directives);
        self.events.push(Event::Registered {
            at: secs(self.now),
            server: id,
            moved_ranges: directives.len(),
            migrated,
        });
        self.note_table();
        Ok(id)
    }

    /// Makes a server stop answering. The proxy finds out through its own
    /// failure detection.
    pub fn fail_server(&mut self, id: ServerId) -> Result<()> {
        let server = self.servers.get(&id).ok_or(Error::UnknownServer(id))?;
        server.set_failed(true);
        self.events.push(Event::FailureInjected { at: secs(self.now), server: id });
        Ok(())
    }

    /// Drains outstanding work.
    pub fn finish(&mut self) -> Result<()> {
        while let Some(Reverse((at, _))) = self.pending.peek().copied() {
            self.advance_to(at)?;
        }
        Ok(())
    }
}

fn table_valid(table: &SliceTable) -> bool {
    table.is_empty() || table.validate().is_ok()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}
