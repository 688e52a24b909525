//! Consistent-hash ring with virtual nodes, used by the session-persistent
//! baseline.

use crate::slices::ServerId;

pub const DEFAULT_VNODES: u32 = 100;

/// 64-bit FNV-1a followed by the SplitMix64 finaliser.
pub fn hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HashRing {
    vnodes: u32,
    points: Vec<(u64, ServerId)>,
}

impl HashRing {
    pub fn new(vnodes: u32) -> Self {
        Self {
            vnodes: vnodes.max(1),
            points: Vec::new(),
        }
    }

    pub fn add(&mut self, server: ServerId) {
        if self.points.iter().any(|&(_, s)| s == server) {
            return;
        }
        for i in 0..self.vnodes {
            let point = hash64(format!("{server}#{i}").as_bytes());
            self.points.push((point, server));
        }
        self.points.sort_unstable();
    }

    pub fn remove(&mut self, server: ServerId) {
        self.points.retain(|&(_, s)| s != server);
    }

    /// First virtual node clockwise from the key's hash.
    pub fn lookup(&self, key: &str) -> Option<ServerId> {
        if self.points.is_empty() {
            return None;
        }
        let h = hash64(key.as_bytes());
        let idx = self.points.partition_point(|&(p, _)| p < h);
        Some(self.points[idx % self.points.len()].1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
