//! Emulated edge server with a nearest-neighbour reuse cache.
//!
//! Services are deterministic nearest-centroid classifiers, so a reused
//! result can always be checked against what a from-scratch execution would
//! have produced. Execution cost is accounted in simulated milliseconds of
//! CPU time; nothing sleeps.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{cosine_similarity, dot, FeatureVector, Hasher, LshSignature};
use crate::slices::{RangeGroups, ServerId};
use crate::stats::{Ewma, PiggybackFields, StatsReport, DEFAULT_ALPHA};
use crate::wire::{TaskRequest, TaskResponse};

pub const DEFAULT_CAPACITY: usize = 10_000;
pub const DEFAULT_COST_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProducedBy {
    FromScratch,
    Reused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultValue {
    /// Index of the nearest centroid.
    pub label: u32,
    pub produced_by: ProducedBy,
}

/// A stand-in service: classifies payloads by nearest centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceDef {
    pub name: String,
    centroids: Vec<FeatureVector>,
    pub cost_ms: f64,
}

impl ServiceDef {
    /// Centroids are scaled to unit length.
    pub fn new(name: impl Into<String>, centroids: Vec<FeatureVector>, cost_ms: f64) -> Result<Self> {
        let first_dim = centroids
            .first()
            .map(FeatureVector::dim)
            .ok_or_else(|| Error::config("a service needs at least one centroid"))?;
        let centroids = centroids
            .iter()
            .map(|c| {
                if c.dim() != first_dim {
                    return Err(Error::config("centroids differ in dimension"));
                }
                c.normalized()
                    .ok_or_else(|| Error::config("zero centroid"))
            })
            .collect::<Result<Vec<_>>>()?;
        if cost_ms.is_nan() || cost_ms < 0.0 {
            return Err(Error::config("execution cost must be non-negative"));
        }
        Ok(Self {
            name: name.into(),
            centroids,
            cost_ms,
        })
    }

    pub fn centroids(&self) -> &[FeatureVector] {
        &self.centroids
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].dim()
    }

    /// Index of the most similar centroid; the lowest index wins ties.
    pub fn classify(&self, payload: &FeatureVector) -> Result<u32> {
        let mut best = (0u32, f64::NEG_INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let sim = cosine_similarity(c, payload)?;
            if sim > best.1 {
                best = (i as u32, sim);
            }
        }
        Ok(best.0)
    }
}

/// `count` seeded unit vectors. With `orthogonal` set and `count <= dim` they
/// are made mutually orthogonal.
pub fn synthetic_centroids(dim: usize, count: usize, seed: u64, orthogonal: bool) -> Result<Vec<FeatureVector>> {
    if dim < 2 || count == 0 {
        return Err(Error::config("centroids need dim >= 2 and count >= 1"));
    }
    if orthogonal && count > dim {
        return Err(Error::config(format!(
            "cannot draw {count} orthogonal centroids in {dim} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if orthogonal {
            for prev in &out {
                let p = dot(&v, prev);
                v.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out.into_iter().map(FeatureVector::new).collect()
}

/// Stored result of an executed task.
#[derive(Debug, Clone, PartialEq)]
pub struct ReuseCacheEntry {
    pub service: String,
    pub vector: FeatureVector,
    pub signature: LshSignature,
    pub result: ResultValue,
    pub stored_at: Duration,
}

/// Wire form of a cache entry, as sent to `POST /migrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub service: String,
    pub vector: FeatureVector,
    pub signature_hex: String,
    pub label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub capacity: usize,
    pub group_count: u32,
    pub reuse_cost_ms: f64,
    /// Carry per-group task counts on responses instead of in notifications.
    pub piggyback_groups: bool,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
            group_count: 64,
            reuse_cost_ms: 0.0,
            piggyback_groups: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub capacity: usize,
    pub executions: u64,
    pub reuses: u64,
    pub evictions: u64,
    pub migrated_in: u64,
    pub migrated_out: u64,
}

/// Destination of a warm-start migration.
pub trait MigrationTarget {
    fn accept(&self, entries: Vec<ReuseCacheEntry>) -> Result<usize>;
}

#[derive(Debug)]
struct Usage {
    busy_ms: f64,
    last_report_at: Duration,
    cpu: Ewma,
    groups: BTreeMap<u32, u64>,
}

#[derive(Debug, Default)]
struct Cache {
    // Per service, oldest first. Each entry carries its global store sequence.
    by_service: BTreeMap<String, VecDeque<(u64, ReuseCacheEntry)>>,
    len: usize,
    next_seq: u64,
}

impl Cache {
    fn push(&mut self, entry: ReuseCacheEntry) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.by_service
            .entry(entry.service.clone())
            .or_default()
            .push_back((seq, entry));
        self.len += 1;
    }

    fn evict_oldest(&mut self) -> bool {
        let oldest = self
            .by_service
            .iter()
            .filter_map(|(name, q)| q.front().map(|(seq, _)| (*seq, name.clone())))
            .min();
        match oldest {
            Some((_, name)) => {
                self.by_service.get_mut(&name).and_then(VecDeque::pop_front);
                self.len -= 1;
                true
            }
            None => false,
        }
    }
}

pub struct EdgeServer {
    id: ServerId,
    hasher: Hasher,
    groups: RangeGroups,
    config: EdgeConfig,
    services: BTreeMap<String, ServiceDef>,
    cache: Mutex<Cache>,
    usage: Mutex<Usage>,
    failed: AtomicBool,
    executions: AtomicU64,
    reuses: AtomicU64,
    evictions: AtomicU64,
    migrated_in: AtomicU64,
    migrated_out: AtomicU64,
}

impl std::fmt::Debug for EdgeServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EdgeServer")
            .field("id", &self.id)
            .field("services", &self.services.keys().collect::<Vec<_>>())
            .field("entries", &self.cache.lock().len)
            .finish()
    }
}

impl EdgeServer {
    pub fn new(id: ServerId, hasher: Hasher, services: Vec<ServiceDef>, config: EdgeConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::config("cache capacity must be positive"));
        }
        let dim = hasher.config().dim;
        if let Some(bad) = services.iter().find(|s| s.dim() != dim) {
            return Err(Error::config(format!(
                "service {} has dimension {}, deployment uses {dim}",
                bad.name,
                bad.dim()
            )));
        }
        let groups = RangeGroups::new(hasher.bits(), config.group_count);
        Ok(Self {
            id,
            hasher,
            groups,
            config,
            services: services.into_iter().map(|s| (s.name.clone(), s)).collect(),
            cache: Mutex::default(),
            usage: Mutex::new(Usage {
                busy_ms: 0.0,
                last_report_at: Duration::ZERO,
                cpu: Ewma::new(DEFAULT_ALPHA),
                groups: BTreeMap::new(),
            }),
            failed: AtomicBool::new(false),
            executions: AtomicU64::new(0),
            reuses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            migrated_in: AtomicU64::new(0),
            migrated_out: AtomicU64::new(0),
        })
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn hasher(&self) -> &Hasher {
        &self.hasher
    }

    pub fn service(&self, name: &str) -> Option<&ServiceDef> {
        self.services.get(name)
    }

    pub fn set_failed(&self, failed: bool) {
        self.failed.store(failed, Ordering::SeqCst);
    }

    pub fn is_failed(&self) -> bool {
        self.failed.load(Ordering::SeqCst)
    }

    /// Serves a task from the most similar cached entry of the same service
    /// when it clears the request's threshold, otherwise executes it and
    /// caches the result. Equal similarities favour the newest entry.
    pub fn handle_task(&self, req: &TaskRequest, now: Duration) -> Result<TaskResponse> {
        if self.is_failed() {
            return Err(Error::Unavailable(self.id));
        }
        let service = self
            .services
            .get(&req.service)
            .ok_or_else(|| Error::UnknownService(req.service.clone()))?;
        TaskRequest::check_threshold(req.threshold)?;
        let signature = self.hasher.hash(&req.payload)?;
        let group = self.groups.group_of(signature.value().into());

        let mut cache = self.cache.lock();
        let best = cache
            .by_service
            .get(&req.service)
            .and_then(|entries| nearest(entries.iter().map(|(_, e)| e), &req.payload));

        let (result, reused, similarity, cost) = match best {
            Some((entry, sim)) if sim >= req.threshold => (
                ResultValue {
                    label: entry.result.label,
                    produced_by: ProducedBy::Reused,
                },
                true,
                Some(sim),
                self.config.reuse_cost_ms,
            ),
            _ => {
                let result = self.execute_from_scratch(service, &req.payload)?;
                cache.push(ReuseCacheEntry {
                    service: req.service.clone(),
                    vector: req.payload.clone(),
                    signature,
                    result,
                    stored_at: now,
                });
                self.evict_if_full(&mut cache);
                (result, false, None, service.cost_ms)
            }
        };
        let mem = cache.len as f64 / self.config.capacity as f64;
        drop(cache);

        if reused {
            self.reuses.fetch_add(1, Ordering::Relaxed);
        }
        let piggyback = {
            let mut usage = self.usage.lock();
            usage.busy_ms += cost;
            *usage.groups.entry(group).or_default() += 1;
            let groups = if self.config.piggyback_groups {
                std::mem::take(&mut usage.groups)
            } else {
                BTreeMap::new()
            };
            PiggybackFields::encode(usage.cpu.get(), mem.min(1.0), &groups)
        };
        Ok(TaskResponse {
            task_id: req.task_id.clone(),
            result,
            reused,
            similarity,
            server: self.id,
            piggyback,
        })
    }

    pub fn execute_from_scratch(&self, service: &ServiceDef, payload: &FeatureVector) -> Result<ResultValue> {
        let label = service.classify(payload)?;
        self.executions.fetch_add(1, Ordering::Relaxed);
        Ok(ResultValue {
            label,
            produced_by: ProducedBy::FromScratch,
        })
    }

    fn evict_if_full(&self, cache: &mut Cache) {
        while cache.len > self.config.capacity && cache.evict_oldest() {
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Explicit usage notification. CPU is the share of the interval since
    /// the previous report spent executing, smoothed; memory is cache fill.
    pub fn report_stats(&self, now: Duration) -> Option<StatsReport> {
        if self.is_failed() {
            return None;
        }
        let mem = (self.cache.lock().len as f64 / self.config.capacity as f64).min(1.0);
        let mut usage = self.usage.lock();
        let elapsed_ms = now.saturating_sub(usage.last_report_at).as_secs_f64() * 1e3;
        if elapsed_ms > 0.0 {
            let busy = (usage.busy_ms / elapsed_ms).clamp(0.0, 1.0);
            usage.cpu.observe(busy);
            usage.busy_ms = 0.0;
            usage.last_report_at = now;
        }
        let cpu = usage.cpu.get();
        let per_group = std::mem::take(&mut usage.groups)
            .into_iter()
            .map(|(g, t)| (g, t, cpu, mem))
            .collect();
        Some(StatsReport {
            server: self.id,
            cpu,
            mem,
            per_group,
        })
    }

    /// Current usage as piggyback fields, without touching counters.
    pub fn emit_piggyback(&self) -> PiggybackFields {
        let mem = (self.cache.lock().len as f64 / self.config.capacity as f64).min(1.0);
        let usage = self.usage.lock();
        PiggybackFields::encode(usage.cpu.get(), mem, &BTreeMap::new())
    }

    /// Removes and returns every entry whose signature lies in `[lo, hi]`.
    pub fn extract_range(&self, lo: u32, hi: u32) -> Vec<ReuseCacheEntry> {
        let mut cache = self.cache.lock();
        let mut out = Vec::new();
        for queue in cache.by_service.values_mut() {
            let (moved, kept): (VecDeque<_>, VecDeque<_>) = std::mem::take(queue)
                .into_iter()
                .partition(|(_, e)| (lo..=hi).contains(&e.signature.value()));
            *queue = kept;
            out.extend(moved.into_iter().map(|(_, e)| e));
        }
        cache.len -= out.len();
        out
    }

    /// Stores migrated entries. Entries for unknown services or whose
    /// signature does not match this deployment's hasher are dropped.
    pub fn insert_entries(&self, entries: Vec<ReuseCacheEntry>) -> usize {
        let mut cache = self.cache.lock();
        let mut accepted = 0;
        for entry in entries {
            let valid = self.services.contains_key(&entry.service)
                && self.hasher.hash(&entry.vector).ok() == Some(entry.signature);
            if valid {
                cache.push(entry);
                accepted += 1;
            }
        }
        self.evict_if_full(&mut cache);
        self.migrated_in.fetch_add(accepted as u64, Ordering::Relaxed);
        accepted
    }

    /// Puts back entries whose migration failed.
    pub fn restore_entries(&self, entries: Vec<ReuseCacheEntry>) {
        let mut cache = self.cache.lock();
        for entry in entries {
            cache.push(entry);
        }
        self.evict_if_full(&mut cache);
    }

    /// Moves entries in `[lo, hi]` to `target`. If the target refuses them,
    /// they stay here.
    pub fn migrate_entries(&self, (lo, hi): (u32, u32), target: &dyn MigrationTarget) -> Result<usize> {
        let entries = self.extract_range(lo, hi);
        if entries.is_empty() {
            return Ok(0);
        }
        let count = entries.len();
        match target.accept(entries.clone()) {
            Ok(_) => {
                self.record_migrated_out(count);
                Ok(count)
            }
            Err(e) => {
                self.restore_entries(entries);
                Err(e)
            }
        }
    }

    /// Counts entries handed to another server outside [`Self::migrate_entries`].
    pub fn record_migrated_out(&self, count: usize) {
        self.migrated_out.fetch_add(count as u64, Ordering::Relaxed);
    }

    pub fn entries(&self) -> Vec<ReuseCacheEntry> {
        self.cache
            .lock()
            .by_service
            .values()
            .flat_map(|q| q.iter().map(|(_, e)| e.clone()))
            .collect()
    }

    pub fn cache_stats(&self) -> CacheStats {
        CacheStats {
            entries: self.cache.lock().len,
            capacity: self.config.capacity,
            executions: self.executions.load(Ordering::Relaxed),
            reuses: self.reuses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            migrated_in: self.migrated_in.load(Ordering::Relaxed),
            migrated_out: self.migrated_out.load(Ordering::Relaxed),
        }
    }

    pub fn to_record(&self, entry: &ReuseCacheEntry) -> EntryRecord {
        EntryRecord {
            service: entry.service.clone(),
            vector: entry.vector.clone(),
            signature_hex: entry.signature.to_hex(self.hasher.bits()),
            label: entry.result.label,
        }
    }

    pub fn from_record(&self, record: EntryRecord, now: Duration) -> Result<ReuseCacheEntry> {
        Ok(ReuseCacheEntry {
            signature: LshSignature::from_hex(&record.signature_hex, self.hasher.bits())?,
            service: record.service,
            vector: record.vector,
            result: ResultValue {
                label: record.label,
                produced_by: ProducedBy::FromScratch,
            },
            stored_at: now,
        })
    }
}

impl MigrationTarget for EdgeServer {
    fn accept(&self, entries: Vec<ReuseCacheEntry>) -> Result<usize> {
        if self.is_failed() {
            return Err(Error::Unavailable(self.id));
        }
        Ok(self.insert_entries(entries))
    }
}

/// Most similar entry; later entries win ties.
fn nearest<'a>(
    entries: impl Iterator<Item = &'a ReuseCacheEntry>,
    query: &FeatureVector,
) -> Option<(&'a ReuseCacheEntry, f64)> {
    let qn = query.norm();
    if qn == 0.0 {
        return None;
    }
    let mut best: Option<(&ReuseCacheEntry, f64)> = None;
    for e in entries {
        let en = e.vector.norm();
        if en == 0.0 || e.vector.dim() != query.dim() {
            continue;
        }
        let sim = (dot(e.vector.as_slice(), query.as_slice()) / (en * qn)).clamp(-1.0, 1.0);
        if best.is_none_or(|(_, b)| sim >= b) {
            best = Some((e, sim));
        }
    }
    best
}
