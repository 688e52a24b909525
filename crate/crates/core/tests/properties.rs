use std::collections::BTreeMap;
use std::time::Duration;

use proptest::prelude::*;

use dedup_core::edge::MigrationTarget;
use dedup_core::slices::{ownership_diff, round_sizes};
use dedup_core::{
    DedupConfig, Deduplicator, EdgeConfig, EdgeServer, FeatureVector, Hasher, LoadSample, LshConfig,
    LshSignature, RegistrationMessage, ServerId, ServiceDef, SliceConfig, SliceTable, Strategy, TaskRequest,
};

fn owner_map(t: &SliceTable) -> Vec<ServerId> {
    (0..t.space()).map(|b| t.lookup(b).unwrap()).collect()
}

fn vector(values: &[i8]) -> Option<FeatureVector> {
    let v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
    if v.iter().all(|&x| x == 0.0) {
        return None;
    }
    FeatureVector::new(v).ok()
}

fn cosine(a: &FeatureVector, b: &FeatureVector) -> f64 {
    let (a, b) = (a.as_slice(), b.as_slice());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn edge(id: u32, dim: usize) -> EdgeServer {
    let hasher = Hasher::new(LshConfig::new(8, dim, 3).unwrap()).unwrap();
    let centroids = (0..dim)
        .map(|i| {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            FeatureVector::new(v).unwrap()
        })
        .collect();
    let svc = ServiceDef::new("s", centroids, 10.0).unwrap();
    EdgeServer::new(ServerId(id), hasher, vec![svc], EdgeConfig::default()).unwrap()
}

fn task(payload: FeatureVector, threshold: f64) -> TaskRequest {
    TaskRequest {
        task_id: "t".into(),
        service: "s".into(),
        threshold,
        signature: None,
        payload,
        client_id: "c".into(),
    }
}

proptest! {
    #[test]
    fn adaptive_resize_keeps_a_partition(
        bits in 3u32..=10,
        loads in prop::collection::vec(0u64..1000, 1..6),
        min_slice in 1u64..4,
    ) {
        let servers: Vec<ServerId> = (1..=loads.len() as u32).map(ServerId).collect();
        prop_assume!((servers.len() as u64) * min_slice <= 1 << bits);
        let table = SliceTable::initial_equal(&servers, bits).unwrap();
        let samples: Vec<LoadSample> = servers.iter().zip(&loads).map(|(&s, &t)| LoadSample::new(s, t)).collect();
        let cfg = SliceConfig { min_slice, ..SliceConfig::default() };
        let (next, moves) = table.adaptive_redistribute(&samples, &cfg).unwrap();
        prop_assert!(next.validate().is_ok());
        prop_assert_eq!(next.slices().iter().map(|s| s.size()).sum::<u64>(), 1u64 << bits);
        for s in &servers {
            prop_assert!(next.owned_size(*s) >= min_slice);
        }
        // Every moved bucket is covered by exactly one directive naming its old and new owner.
        let (old, new) = (owner_map(&table), owner_map(&next));
        let mut covered = vec![false; old.len()];
        for d in &moves {
            for b in d.lo..=d.hi {
                prop_assert_eq!((old[b as usize], new[b as usize]), (d.from, d.to));
                prop_assert!(!covered[b as usize]);
                covered[b as usize] = true;
            }
        }
        for b in 0..old.len() {
            prop_assert_eq!(covered[b], old[b] != new[b]);
        }
        prop_assert_eq!(ownership_diff(&table, &next), moves);
    }

    #[test]
    fn rounding_conserves_and_respects_minimum(
        raw in prop::collection::vec(-50.0f64..500.0, 1..8),
        min in 1u64..5,
    ) {
        let total = 1024u64;
        let sizes = round_sizes(&raw, total, min).unwrap();
        prop_assert_eq!(sizes.iter().sum::<u64>(), total);
        prop_assert!(sizes.iter().all(|&s| s >= min));
    }

    #[test]
    fn nearest_neighbour_matches_exhaustive_scan(
        stored in prop::collection::vec(prop::collection::vec(-3i8..=3, 4), 1..60),
        query in prop::collection::vec(-3i8..=3, 4),
        threshold in 0.0f64..=1.0,
    ) {
        let server = edge(1, 4);
        let mut kept: Vec<(FeatureVector, u32)> = Vec::new();
        for (i, values) in stored.iter().enumerate() {
            let Some(v) = vector(values) else { continue };
            let resp = server.handle_task(&task(v.clone(), 1.0), Duration::from_millis(i as u64)).unwrap();
            if !resp.reused {
                kept.push((v, resp.result.label));
            }
        }
        let Some(q) = vector(&query) else { return Ok(()) };
        let best = kept.iter().map(|(v, _)| cosine(v, &q)).fold(f64::NEG_INFINITY, f64::max);
        let resp = server.handle_task(&task(q.clone(), threshold), Duration::from_secs(1)).unwrap();
        if best >= threshold + 1e-12 {
            prop_assert!(resp.reused);
        }
        if best < threshold - 1e-12 {
            prop_assert!(!resp.reused);
        }
        if resp.reused {
            let sim = resp.similarity.unwrap();
            prop_assert!(sim >= threshold);
            prop_assert!((sim - best).abs() < 1e-12);
            let candidates: Vec<u32> = kept.iter().filter(|(v, _)| (cosine(v, &q) - best).abs() < 1e-12).map(|(_, l)| *l).collect();
            prop_assert!(candidates.contains(&resp.result.label));
        }
        for e in server.entries() {
            prop_assert_eq!(server.hasher().hash(&e.vector).unwrap(), e.signature);
        }
    }

    #[test]
    fn migration_neither_duplicates_nor_loses(
        stored in prop::collection::vec(prop::collection::vec(-5i8..=5, 4), 1..80),
        lo in 0u32..256,
        len in 0u32..256,
    ) {
        let (a, b) = (edge(1, 4), edge(2, 4));
        for (i, values) in stored.iter().enumerate() {
            if let Some(v) = vector(values) {
                a.handle_task(&task(v, 1.0), Duration::from_millis(i as u64)).unwrap();
            }
        }
        let hi = (lo + len).min(255);
        let before = a.entries().len();
        let in_range = a.entries().iter().filter(|e| (lo..=hi).contains(&e.signature.value())).count();
        let moved = a.migrate_entries((lo, hi), &b as &dyn MigrationTarget).unwrap();
        prop_assert_eq!(moved, in_range);
        prop_assert_eq!(a.entries().len() + b.entries().len(), before);
        prop_assert!(b.entries().iter().all(|e| (lo..=hi).contains(&e.signature.value())));
        prop_assert!(a.entries().iter().all(|e| !(lo..=hi).contains(&e.signature.value())));
    }

    #[test]
    fn every_signature_routes_to_a_live_server(
        n in 1u32..6,
        strategy_index in 0usize..8,
        signatures in prop::collection::vec(0u32..1 << 12, 1..50),
        fail in prop::option::of(1u32..6),
    ) {
        let strategy = Strategy::ALL[strategy_index];
        let regs: Vec<RegistrationMessage> = (1..=n)
            .map(|i| RegistrationMessage { server: ServerId(i), address: String::new() })
            .collect();
        let d = Deduplicator::new(DedupConfig::new(strategy, LshConfig::new(12, 4, 1).unwrap()), &regs).unwrap();
        if let Some(f) = fail.filter(|&f| f <= n && n > 1) {
            d.handle_failure(ServerId(f)).unwrap();
        }
        let live = d.live_servers();
        let payload = FeatureVector::new(vec![1.0, 0.0, 0.5, 0.25]).unwrap();
        for (i, sig) in signatures.iter().enumerate() {
            let req = TaskRequest {
                task_id: i.to_string(),
                service: "s".into(),
                threshold: 0.9,
                signature: Some(LshSignature::new(*sig, 12).unwrap()),
                payload: payload.clone(),
                client_id: format!("c{i}"),
            };
            let first = d.route(&req).unwrap();
            prop_assert!(live.contains(&first.server));
            if strategy.is_reuse_aware() {
                prop_assert_eq!(d.route(&req).unwrap().server, first.server);
            }
        }
    }

    #[test]
    fn round_robin_splits_evenly(n in 1u32..8, m in 1usize..20) {
        let regs: Vec<RegistrationMessage> = (1..=n)
            .map(|i| RegistrationMessage { server: ServerId(i), address: String::new() })
            .collect();
        let d = Deduplicator::new(DedupConfig::new(Strategy::RoundRobin, LshConfig::new(16, 2, 1).unwrap()), &regs).unwrap();
        let req = TaskRequest {
            task_id: "t".into(),
            service: "s".into(),
            threshold: 0.5,
            signature: None,
            payload: FeatureVector::new(vec![1.0, 2.0]).unwrap(),
            client_id: "c".into(),
        };
        let mut counts: BTreeMap<ServerId, usize> = BTreeMap::new();
        for _ in 0..m * n as usize {
            *counts.entry(d.route(&req).unwrap().server).or_default() += 1;
        }
        prop_assert_eq!(counts.len(), n as usize);
        prop_assert!(counts.values().all(|&c| c == m));
    }
}
