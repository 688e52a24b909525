//! Transport-independent core of the load-balancing middlebox: routing by
//! strategy, slice-table ownership, registration, failures and periodic
//! redistribution. The HTTP front end and the in-process experiment driver
//! both sit on top of [`Deduplicator`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{LatencyRecorder, LatencySummary};
use crate::lsh::{Hasher, LshConfig, LshSignature};
use crate::ring::{HashRing, DEFAULT_VNODES};
use crate::slices::{MigrationDirective, ServerId, SliceConfig, SliceTable};
use crate::stats::{HotSpot, PiggybackFields, ServerHealth, StatsCollector, StatsReport};
use crate::wire::{decode_payload, RegistrationMessage, TaskRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Everything goes to a single server.
    ReuseIdeal,
    /// Static equal slices.
    ReuseVanilla,
    /// Static slices, each split into one sub-slice per server.
    ReuseMiniBuckets,
    /// Equal slices resized every interval from observed load.
    ReuseAdaptive,
    RoundRobin,
    Random,
    LeastConnection,
    /// Client-keyed ring with virtual nodes.
    ConsistentHash,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::ReuseIdeal,
        Strategy::ReuseVanilla,
        Strategy::ReuseMiniBuckets,
        Strategy::ReuseAdaptive,
        Strategy::RoundRobin,
        Strategy::Random,
        Strategy::LeastConnection,
        Strategy::ConsistentHash,
    ];

    pub fn is_reuse_aware(self) -> bool {
        matches!(
            self,
            Strategy::ReuseIdeal
                | Strategy::ReuseVanilla
                | Strategy::ReuseMiniBuckets
                | Strategy::ReuseAdaptive
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ReuseIdeal => "reuse-ideal",
            Strategy::ReuseVanilla => "reuse-vanilla",
            Strategy::ReuseMiniBuckets => "reuse-mini-buckets",
            Strategy::ReuseAdaptive => "reuse-adaptive",
            Strategy::RoundRobin => "round-robin",
            Strategy::Random => "random",
            Strategy::LeastConnection => "least-connection",
            Strategy::ConsistentHash => "consistent-hash",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub strategy: Strategy,
    pub lsh: LshConfig,
    pub slices: SliceConfig,
    pub cpu_threshold: f64,
    pub mem_threshold: f64,
    pub response_timeout: Duration,
    pub notification_interval: Duration,
    pub k_missed: u32,
    pub redistribution_interval: Duration,
    /// Seeds the random baseline.
    pub seed: u64,
}

impl DedupConfig {
    pub fn new(strategy: Strategy, lsh: LshConfig) -> Self {
        Self {
            strategy,
            lsh,
            slices: SliceConfig::default(),
            cpu_threshold: 0.9,
            mem_threshold: 0.9,
            response_timeout: Duration::from_secs(2),
            notification_interval: Duration::from_secs(1),
            k_missed: 3,
            redistribution_interval: Duration::from_secs(5),
            seed: lsh.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteDecision {
    pub server: ServerId,
    pub signature: LshSignature,
    pub epoch: u64,
}

/// A task as it arrives on the wire, before the body has been looked at.
#[derive(Debug, Clone, Copy)]
pub struct WireTask<'a> {
    pub client_id: &'a str,
    /// Hex signature attached by the client in user-assisted mode.
    pub signature_hex: Option<&'a str>,
    pub body: &'a [u8],
}

/// Result of a control-path change that moved bucket ownership.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconfiguration {
    pub table: Arc<SliceTable>,
    pub directives: Vec<MigrationDirective>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSnapshot {
    pub strategy: Strategy,
    pub epoch: u64,
    pub table: SliceTable,
    pub live: Vec<ServerId>,
    pub routed: BTreeMap<ServerId, u64>,
    pub health: Vec<ServerHealth>,
    pub redistributions: u64,
    pub malformed_piggyback: u64,
    pub route_latency: LatencySummary,
}

pub struct Deduplicator {
    config: DedupConfig,
    hasher: Hasher,
    table: RwLock<Arc<SliceTable>>,
    live: RwLock<Arc<Vec<ServerId>>>,
    addresses: RwLock<BTreeMap<ServerId, String>>,
    stats: StatsCollector,
    cursor: AtomicUsize,
    rng: Mutex<ChaCha8Rng>,
    ring: RwLock<Arc<HashRing>>,
    control: Mutex<()>,
    redistributions: AtomicU64,
    route_latency: LatencyRecorder,
}

impl fmt::Debug for Deduplicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deduplicator")
            .field("strategy", &self.config.strategy)
            .field("live", &self.live_servers())
            .field("epoch", &self.table().epoch())
            .finish()
    }
}

impl Deduplicator {
    /// Sets up routing state for `servers`, all registered at time zero.
    pub fn new(config: DedupConfig, servers: &[RegistrationMessage]) -> Result<Self> {
        let hasher = Hasher::new(config.lsh)?;
        let bits = config.lsh.bits;
        let ids: Vec<ServerId> = servers.iter().map(|r| r.server).collect();
        let table = if ids.is_empty() {
            SliceTable::empty(bits)?
        } else {
            match config.strategy {
                Strategy::ReuseIdeal => SliceTable::single(ids[0], bits)?,
                Strategy::ReuseMiniBuckets => SliceTable::mini_buckets(&ids, bits)?,
                Strategy::ReuseVanilla | Strategy::ReuseAdaptive => {
                    SliceTable::initial_equal(&ids, bits)?
                }
                _ => SliceTable::empty(bits)?,
            }
        };
        let stats = StatsCollector::new(bits, config.slices.group_count);
        let mut ring = HashRing::new(DEFAULT_VNODES);
        for reg in servers {
            stats.register(reg.server, Duration::ZERO)?;
            ring.add(reg.server);
        }
        Ok(Self {
            config,
            hasher,
            table: RwLock::new(Arc::new(table)),
            live: RwLock::new(Arc::new(ids)),
            addresses: RwLock::new(
                servers
                    .iter()
                    .map(|r| (r.server, r.address.clone()))
                    .collect(),
            ),
            stats,
            cursor: AtomicUsize::new(0),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            ring: RwLock::new(Arc::new(ring)),
            control: Mutex::new(()),
            redistributions: AtomicU64::new(0),
            route_latency: LatencyRecorder::default(),
        })
    }

    pub fn config(&self) -> &DedupConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn hasher(&self) -> &Hasher {
        &self.hasher
    }

    pub fn stats(&self) -> &StatsCollector {
        &self.stats
    }

    pub fn table(&self) -> Arc<SliceTable> {
        self.table.read().clone()
    }

    pub fn live_servers(&self) -> Arc<Vec<ServerId>> {
        self.live.read().clone()
    }

    pub fn address_of(&self, server: ServerId) -> Option<String> {
        self.addresses.read().get(&server).cloned()
    }

    pub fn route_latency(&self) -> &LatencyRecorder {
        &self.route_latency
    }

    /// Picks the server for a decoded task.
    pub fn route(&self, req: &TaskRequest) -> Result<RouteDecision> {
        let signature = match req.signature {
            Some(sig) => sig,
            None => self.hasher.hash(&req.payload)?,
        };
        self.route_signature(signature, &req.client_id)
    }

    /// Picks the server for a task still in wire form and records how long
    /// the decision took. In user-assisted mode the body is never read.
    pub fn route_wire(&self, task: &WireTask<'_>) -> Result<RouteDecision> {
        let started = Instant::now();
        let signature = match task.signature_hex {
            Some(hex) => LshSignature::from_hex(hex, self.config.lsh.bits)?,
            None => self.hasher.hash(&decode_payload(task.body)?)?,
        };
        let decision = self.route_signature(signature, task.client_id);
        self.route_latency.record(started.elapsed());
        decision
    }

    fn route_signature(&self, signature: LshSignature, client_id: &str) -> Result<RouteDecision> {
        let bucket = u64::from(signature.value());
        if bucket >= self.config.lsh.space() {
            return Err(Error::input(format!("signature {bucket} outside the hash space")));
        }
        let live = self.live_servers();
        if live.is_empty() {
            return Err(Error::NoLiveServers);
        }
        let table = self.table();
        let server = match self.config.strategy {
            s if s.is_reuse_aware() => table.lookup(bucket)?,
            Strategy::RoundRobin => live[self.cursor.fetch_add(1, Ordering::Relaxed) % live.len()],
            Strategy::Random => live[self.rng.lock().random_range(0..live.len())],
            Strategy::LeastConnection => {
                // Ties rotate so idle servers share the load evenly.
                let start = self.cursor.fetch_add(1, Ordering::Relaxed);
                (0..live.len())
                    .map(|i| live[(start + i) % live.len()])
                    .min_by_key(|&s| self.stats.inflight(s))
                    .expect("non-empty")
            }
            Strategy::ConsistentHash => self
                .ring
                .read()
                .lookup(client_id)
                .ok_or(Error::NoLiveServers)?,
            _ => unreachable!(),
        };
        self.stats.record_routed(server, bucket);
        Ok(RouteDecision {
            server,
            signature,
            epoch: table.epoch(),
        })
    }

    /// Marks a request as forwarded to `server`.
    pub fn forward_started(&self, server: ServerId) {
        self.stats.begin_request(server);
    }

    /// Marks a forwarded request as finished. `piggyback` is `None` when the
    /// server did not answer in time.
    pub fn forward_finished(&self, server: ServerId, now: Duration, piggyback: Option<&PiggybackFields>) {
        self.stats.end_request(server, now, piggyback.is_some());
        if let Some(fields) = piggyback {
            // The server may have been removed meanwhile; its stats no longer matter.
            let _ = self.stats.ingest_piggyback(server, fields, now);
        }
    }

    pub fn ingest_notification(&self, report: &StatsReport, now: Duration) -> Result<()> {
        self.stats.ingest_notification(report, now)
    }

    /// Closes the load window; under the adaptive strategy also resizes the
    /// slices from it. Returns the directives to send when ownership moved.
    pub fn redistribution_tick(&self) -> Result<Option<Reconfiguration>> {
        let _guard = self.control.lock();
        let samples = self.stats.snapshot_window();
        if self.config.strategy != Strategy::ReuseAdaptive {
            return Ok(None);
        }
        let current = self.table();
        let (next, directives) = current.adaptive_redistribute(&samples, &self.config.slices)?;
        if next.epoch() == current.epoch() {
            return Ok(None);
        }
        let next = Arc::new(next.merge_adjacent());
        *self.table.write() = next.clone();
        self.redistributions.fetch_add(1, Ordering::Relaxed);
        Ok(Some(Reconfiguration {
            table: next,
            directives,
        }))
    }

    /// Moves load off overloaded servers by shrinking the slice edge the
    /// hottest range group sits on, or by handing an interior hot group to
    /// the least-loaded other server.
    pub fn relieve_overload(&self) -> Result<Option<Reconfiguration>> {
        let _guard = self.control.lock();
        if self.config.strategy != Strategy::ReuseAdaptive {
            return Ok(None);
        }
        let mut table = (*self.table()).clone();
        let mut directives = Vec::new();
        let samples = self.stats.last_window();
        let groups = self.stats.groups();
        let cfg = &self.config.slices;
        for over in self
            .stats
            .detect_overload(&table, self.config.cpu_threshold, self.config.mem_threshold)
        {
            let (Some(&hot), Some(spot)) = (over.hot_groups.first(), over.hotspot) else {
                continue;
            };
            let (glo, ghi) = groups.range(hot);
            let Some(idx) = table.slices().iter().position(|s| {
                s.server == over.server && u64::from(s.lo) <= ghi && u64::from(s.hi) >= glo
            }) else {
                continue;
            };
            let slice = table.slices()[idx];
            let lo = glo.max(slice.lo.into());
            let hi = ghi.min(slice.hi.into());
            let amount = hi - lo + 1;
            let outcome = match spot {
                HotSpot::LowerEdge if idx > 0 => {
                    table.shrink_slice_edges(idx, amount, 0, cfg)
                }
                HotSpot::UpperEdge if idx + 1 < table.slices().len() => {
                    table.shrink_slice_edges(idx, 0, amount, cfg)
                }
                _ => {
                    let load = |s: ServerId| {
                        samples.iter().find(|x| x.server == s).map_or(0, |x| x.tasks)
                    };
                    let Some(target) = table
                        .servers()
                        .into_iter()
                        .filter(|&s| s != over.server)
                        .min_by_key(|&s| load(s))
                    else {
                        continue;
                    };
                    table.split_fine(over.server, (lo as u32, hi as u32), target, cfg)
                }
            };
            // An adjustment that would leave the slice too small is skipped.
            if let Ok((next, moved)) = outcome {
                table = next;
                directives.extend(moved);
            }
        }
        if directives.is_empty() {
            return Ok(None);
        }
        let next = Arc::new(table);
        *self.table.write() = next.clone();
        Ok(Some(Reconfiguration {
            table: next,
            directives,
        }))
    }

    /// Enrols a new server. Slice-based strategies carve it a slice out of
    /// the busiest server's range.
    pub fn handle_register(&self, msg: &RegistrationMessage, now: Duration) -> Result<Vec<MigrationDirective>> {
        let _guard = self.control.lock();
        if self.live.read().contains(&msg.server) {
            return Err(Error::DuplicateServer(msg.server));
        }
        let current = self.table();
        let mut directives = Vec::new();
        let next = match self.config.strategy {
            Strategy::ReuseVanilla | Strategy::ReuseMiniBuckets | Strategy::ReuseAdaptive => {
                let (next, moved) = current.add_server(
                    &self.stats.last_window(),
                    msg.server,
                    &self.config.slices,
                )?;
                directives = moved;
                Some(next)
            }
            Strategy::ReuseIdeal if current.is_empty() => {
                Some(SliceTable::single(msg.server, current.bits())?)
            }
            _ => None,
        };
        self.stats.register(msg.server, now)?;
        if let Some(next) = next {
            *self.table.write() = Arc::new(next);
        }
        let mut live = (**self.live.read()).clone();
        live.push(msg.server);
        *self.live.write() = Arc::new(live);
        self.addresses.write().insert(msg.server, msg.address.clone());
        let mut ring = (**self.ring.read()).clone();
        ring.add(msg.server);
        *self.ring.write() = Arc::new(ring);
        Ok(directives)
    }

    /// Drops a failed server from every routing structure. Its slices go to
    /// the neighbouring slices.
    pub fn handle_failure(&self, server: ServerId) -> Result<()> {
        let _guard = self.control.lock();
        let live: Vec<ServerId> = self
            .live
            .read()
            .iter()
            .copied()
            .filter(|&s| s != server)
            .collect();
        let current = self.table();
        if current.contains_server(server) {
            let next = if current.servers().len() > 1 {
                current.remove_server(server, &self.stats.last_window())?
            } else if let Some(&heir) = live.first() {
                let mut t = SliceTable::single(heir, current.bits())?;
                t = bump_to(t, current.epoch() + 1);
                t
            } else {
                bump_to(SliceTable::empty(current.bits())?, current.epoch() + 1)
            };
            *self.table.write() = Arc::new(next);
        }
        *self.live.write() = Arc::new(live);
        self.addresses.write().remove(&server);
        let mut ring = (**self.ring.read()).clone();
        ring.remove(server);
        *self.ring.write() = Arc::new(ring);
        self.stats.deregister(server);
        Ok(())
    }

    /// Servers that look dead under the configured timeouts.
    pub fn detect_failures(&self, now: Duration) -> Vec<ServerId> {
        self.stats.detect_failures(
            now,
            self.config.response_timeout,
            self.config.notification_interval,
            self.config.k_missed,
        )
    }

    pub fn redistributions(&self) -> u64 {
        self.redistributions.load(Ordering::Relaxed)
    }

    pub fn admin_metrics(&self) -> MetricsSnapshot {
        let table = self.table();
        MetricsSnapshot {
            strategy: self.config.strategy,
            epoch: table.epoch(),
            table: (*table).clone(),
            live: (*self.live_servers()).clone(),
            routed: self.stats.routed_totals(),
            health: self.stats.all_health(),
            redistributions: self.redistributions(),
            malformed_piggyback: self.stats.malformed_count(),
            route_latency: self.route_latency.summary(),
        }
    }
}

fn bump_to(table: SliceTable, epoch: u64) -> SliceTable {
    SliceTable::from_slices(table.bits(), epoch, table.slices().to_vec())
        .expect("re-validating a valid table")
}
