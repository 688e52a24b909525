//! Partition of the hash-value space into server-owned slices.
//!
//! A [`SliceTable`] is an immutable snapshot: every operation returns a new
//! table with a bumped epoch together with the [`MigrationDirective`]s that
//! describe which bucket ranges changed owner. Directives are computed by
//! diffing the old and new ownership functions, so they always cover exactly
//! the buckets that moved.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{space_size, MAX_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServerId(pub u32);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Inclusive bucket range `[lo, hi]` owned by one server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub lo: u32,
    pub hi: u32,
    pub server: ServerId,
}

impl Slice {
    pub fn size(&self) -> u64 {
        u64::from(self.hi) - u64::from(self.lo) + 1
    }

    pub fn contains(&self, bucket: u64) -> bool {
        u64::from(self.lo) <= bucket && bucket <= u64::from(self.hi)
    }
}

/// Instruction to move cached entries for `[lo, hi]` from one server to another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationDirective {
    pub lo: u32,
    pub hi: u32,
    pub from: ServerId,
    pub to: ServerId,
}

impl MigrationDirective {
    pub fn size(&self) -> u64 {
        u64::from(self.hi) - u64::from(self.lo) + 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupLoad {
    pub tasks: u64,
    pub cpu: f64,
    pub mem: f64,
}

/// Load observed for one server over a redistribution interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    pub server: ServerId,
    pub tasks: u64,
    /// Keyed by range-group id.
    pub per_range: BTreeMap<u32, GroupLoad>,
}

impl LoadSample {
    pub fn new(server: ServerId, tasks: u64) -> Self {
        Self {
            server,
            tasks,
            per_range: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Smallest slice (in buckets) any adjustment may leave behind.
    pub min_slice: u64,
    /// Number of fixed range groups per-range statistics are kept at.
    pub group_count: u32,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            min_slice: 1,
            group_count: 64,
        }
    }
}

/// Fixed subdivision of `[0, 2^bits)` into equal range groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeGroups {
    bits: u32,
    count: u32,
}

impl RangeGroups {
    /// `count` is capped at the size of the space.
    pub fn new(bits: u32, count: u32) -> Self {
        let count = u64::from(count.max(1)).min(space_size(bits)) as u32;
        Self { bits, count }
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn group_of(&self, bucket: u64) -> u32 {
        (u128::from(bucket) * u128::from(self.count) / u128::from(space_size(self.bits))) as u32
    }

    /// Inclusive bucket range of group `g`.
    pub fn range(&self, g: u32) -> (u64, u64) {
        let space = u128::from(space_size(self.bits));
        let count = u128::from(self.count);
        let start = |g: u128| (g * space).div_ceil(count) as u64;
        (start(g.into()), start(u128::from(g) + 1) - 1)
    }

    /// Tasks attributed to `[lo, hi]`, pro-rating groups that straddle the range.
    pub fn tasks_in(&self, per_range: &BTreeMap<u32, GroupLoad>, lo: u64, hi: u64) -> f64 {
        per_range
            .iter()
            .filter(|(&g, _)| g < self.count)
            .map(|(&g, load)| {
                let (glo, ghi) = self.range(g);
                let overlap = (hi.min(ghi) + 1).saturating_sub(lo.max(glo));
                load.tasks as f64 * overlap as f64 / (ghi - glo + 1) as f64
            })
            .sum()
    }
}

/// Ordered, disjoint, exhaustive partition of `[0, 2^bits)`.
///
/// The only table that does not cover the space is the empty one, which
/// stands for a deployment without servers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct SliceTable {
    bits: u32,
    epoch: u64,
    slices: Vec<Slice>,
}

#[derive(Deserialize)]
struct RawTable {
    bits: u32,
    epoch: u64,
    slices: Vec<Slice>,
}

impl TryFrom<RawTable> for SliceTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        SliceTable::from_slices(raw.bits, raw.epoch, raw.slices)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!("invalid bit width {bits}")))
    }
}

impl SliceTable {
    pub fn empty(bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self {
            bits,
            epoch: 0,
            slices: Vec::new(),
        })
    }

    pub fn from_slices(bits: u32, epoch: u64, slices: Vec<Slice>) -> Result<Self> {
        check_bits(bits)?;
        let table = Self {
            bits,
            epoch,
            slices,
        };
        table.validate()?;
        Ok(table)
    }

    /// Contiguous slices of size `floor(2^b / n)`, the first `2^b mod n`
    /// one bucket larger, in the given server order.
    pub fn initial_equal(servers: &[ServerId], bits: u32) -> Result<Self> {
        check_bits(bits)?;
        check_distinct(servers)?;
        let space = space_size(bits);
        let sizes = equal_sizes(space, servers.len() as u64)?;
        Ok(Self {
            bits,
            epoch: 0,
            slices: layout(servers.iter().copied().zip(sizes)),
        })
    }

    /// Whole space owned by one server.
    pub fn single(server: ServerId, bits: u32) -> Result<Self> {
        Self::initial_equal(&[server], bits)
    }

    /// `n` equal major slices, each divided into `n` sub-slices; sub-slice
    /// `j` of every major slice belongs to server `j`.
    pub fn mini_buckets(servers: &[ServerId], bits: u32) -> Result<Self> {
        check_bits(bits)?;
        check_distinct(servers)?;
        let n = servers.len() as u64;
        let majors = equal_sizes(space_size(bits), n)?;
        let mut parts = Vec::new();
        for major in majors {
            let subs = equal_sizes(major, n).map_err(|_| {
                Error::config(format!("{n} servers need at least {} buckets", n * n))
            })?;
            parts.extend(servers.iter().copied().zip(subs));
        }
        Ok(Self {
            bits,
            epoch: 0,
            slices: layout(parts),
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn space(&self) -> u64 {
        space_size(self.bits)
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Distinct servers in order of their first slice.
    pub fn servers(&self) -> Vec<ServerId> {
        let mut out: Vec<ServerId> = Vec::new();
        for s in &self.slices {
            if !out.contains(&s.server) {
                out.push(s.server);
            }
        }
        out
    }

    pub fn contains_server(&self, server: ServerId) -> bool {
        self.slices.iter().any(|s| s.server == server)
    }

    pub fn owned_size(&self, server: ServerId) -> u64 {
        self.slices
            .iter()
            .filter(|s| s.server == server)
            .map(Slice::size)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.slices.first() else {
            return Ok(());
        };
        if first.lo != 0 {
            return Err(Error::input(format!("first slice starts at {}", first.lo)));
        }
        for pair in self.slices.windows(2) {
            if u64::from(pair[1].lo) != u64::from(pair[0].hi) + 1 {
                return Err(Error::input(format!(
                    "slices [{}, {}] and [{}, {}] are not contiguous",
                    pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
                )));
            }
        }
        if let Some(bad) = self.slices.iter().find(|s| s.lo > s.hi) {
            return Err(Error::input(format!("inverted slice [{}, {}]", bad.lo, bad.hi)));
        }
        let last = self.slices.last().expect("non-empty");
        if u64::from(last.hi) != self.space() - 1 {
            return Err(Error::input(format!(
                "last slice ends at {} instead of {}",
                last.hi,
                self.space() - 1
            )));
        }
        Ok(())
    }

    pub fn lookup(&self, bucket: u64) -> Result<ServerId> {
        if bucket >= self.space() {
            return Err(Error::input(format!(
                "bucket {bucket} outside [0, {})",
                self.space()
            )));
        }
        let idx = self.slices.partition_point(|s| u64::from(s.hi) < bucket);
        self.slices
            .get(idx)
            .map(|s| s.server)
            .ok_or(Error::NoLiveServers)
    }

    /// Coalesces consecutive slices of the same server. The epoch only moves
    /// when something was merged.
    pub fn merge_adjacent(&self) -> SliceTable {
        let merged = coalesce(&self.slices);
        let epoch = if merged.len() == self.slices.len() {
            self.epoch
        } else {
            self.epoch + 1
        };
        SliceTable {
            bits: self.bits,
            epoch,
            slices: merged,
        }
    }

    /// Resizes every server's share from the task counts of the last interval.
    ///
    /// Each server's new size is its current size plus
    /// `2^b * (1/n - t_i / sum(t))`, so servers that received more than an
    /// equal share of tasks give up hash space and the others absorb it.
    /// Sizes are clamped to `min_slice`, rounded by largest remainder and laid
    /// out contiguously in the table's server order.
    pub fn adaptive_redistribute(
        &self,
        samples: &[LoadSample],
        config: &SliceConfig,
    ) -> Result<(SliceTable, Vec<MigrationDirective>)> {
        if self.is_empty() {
            return Err(Error::NoLiveServers);
        }
        let servers = self.servers();
        let mut tasks = Vec::with_capacity(servers.len());
        for server in &servers {
            let sample = samples
                .iter()
                .find(|s| s.server == *server)
                .ok_or_else(|| Error::input(format!("missing load sample for {server}")))?;
            tasks.push(sample.tasks);
        }
        if tasks.iter().sum::<u64>() == 0 {
            return Ok((self.clone(), Vec::new()));
        }
        let current: Vec<u64> = servers.iter().map(|&s| self.owned_size(s)).collect();
        let raw = resize_by_load(&current, &tasks, self.space());
        let sizes = round_sizes(&raw, self.space(), config.min_slice)?;
        let next = SliceTable {
            bits: self.bits,
            epoch: self.epoch + 1,
            slices: layout(servers.into_iter().zip(sizes)),
        };
        let moves = ownership_diff(self, &next);
        Ok((next, moves))
    }

    /// Hands `left_amount` buckets at the lower edge of `overloaded`'s largest
    /// slice to its predecessor and `right_amount` at the upper edge to its
    /// successor.
    pub fn shrink_edges(
        &self,
        overloaded: ServerId,
        left_amount: u64,
        right_amount: u64,
        config: &SliceConfig,
    ) -> Result<(SliceTable, Vec<MigrationDirective>)> {
        let idx = self
            .largest_slice_of(overloaded)
            .ok_or(Error::UnknownServer(overloaded))?;
        self.shrink_slice_edges(idx, left_amount, right_amount, config)
    }

    pub fn shrink_slice_edges(
        &self,
        index: usize,
        left_amount: u64,
        right_amount: u64,
        config: &SliceConfig,
    ) -> Result<(SliceTable, Vec<MigrationDirective>)> {
        let slice = *self
            .slices
            .get(index)
            .ok_or_else(|| Error::adjustment(format!("no slice at index {index}")))?;
        if left_amount == 0 && right_amount == 0 {
            return Ok((self.clone(), Vec::new()));
        }
        let keep = slice
            .size()
            .checked_sub(left_amount + right_amount)
            .filter(|&k| k >= config.min_slice.max(1));
        if keep.is_none() {
            return Err(Error::adjustment(format!(
                "cannot take {left_amount}+{right_amount} buckets from a slice of {} (min {})",
                slice.size(),
                config.min_slice
            )));
        }
        let mut slices = self.slices.clone();
        if left_amount > 0 {
            let pred = index
                .checked_sub(1)
                .map(|i| self.slices[i].server)
                .ok_or_else(|| Error::adjustment("no slice to the left"))?;
            let hi = slice.lo + (left_amount - 1) as u32;
            slices = paint(&slices, slice.lo, hi, pred);
        }
        if right_amount > 0 {
            let succ = self
                .slices
                .get(index + 1)
                .map(|s| s.server)
                .ok_or_else(|| Error::adjustment("no slice to the right"))?;
            let lo = slice.hi - (right_amount - 1) as u32;
            slices = paint(&slices, lo, slice.hi, succ);
        }
        Ok(self.successor(slices))
    }

    /// Carves `[lo, hi]` out of a slice owned by `overloaded` and gives it to
    /// `target`. Leftover fragments smaller than `min_slice` go along with it.
    pub fn split_fine(
        &self,
        overloaded: ServerId,
        (lo, hi): (u32, u32),
        target: ServerId,
        config: &SliceConfig,
    ) -> Result<(SliceTable, Vec<MigrationDirective>)> {
        if lo > hi {
            return Err(Error::adjustment(format!("inverted range [{lo}, {hi}]")));
        }
        if target == overloaded {
            return Err(Error::adjustment("target must differ from the overloaded server"));
        }
        let idx = self.slices.partition_point(|s| s.hi < lo);
        let slice = *self
            .slices
            .get(idx)
            .ok_or_else(|| Error::adjustment(format!("bucket {lo} outside the space")))?;
        if slice.server != overloaded {
            return Err(Error::adjustment(format!(
                "[{lo}, {hi}] is not inside a slice of {overloaded}"
            )));
        }
        if hi > slice.hi {
            return Err(Error::adjustment(format!(
                "[{lo}, {hi}] spans more than one slice"
            )));
        }
        let min = config.min_slice.max(1);
        let left = u64::from(lo - slice.lo);
        let right = u64::from(slice.hi - hi);
        let lo = if left > 0 && left < min { slice.lo } else { lo };
        let hi = if right > 0 && right < min { slice.hi } else { hi };
        Ok(self.successor(paint(&self.slices, lo, hi, target)))
    }

    /// Gives a new server half of the busiest server's hottest slice.
    ///
    /// The half with more tasks (ties go to the upper half) changes owner.
    /// When that slice is too small to split, the new server takes the half
    /// of the larger adjacent slice that borders it instead.
    pub fn add_server(
        &self,
        samples: &[LoadSample],
        new_server: ServerId,
        config: &SliceConfig,
    ) -> Result<(SliceTable, Vec<MigrationDirective>)> {
        if self.contains_server(new_server) {
            return Err(Error::DuplicateServer(new_server));
        }
        if self.is_empty() {
            let mut table = SliceTable::single(new_server, self.bits)?;
            table.epoch = self.epoch + 1;
            return Ok((table, Vec::new()));
        }
        let groups = RangeGroups::new(self.bits, config.group_count);
        let sample_of = |server: ServerId| samples.iter().find(|s| s.server == server);
        let load_of = |server: ServerId| sample_of(server).map_or(0, |s| s.tasks);
        let range_load = |server: ServerId, lo: u64, hi: u64| {
            sample_of(server).map_or(0.0, |s| groups.tasks_in(&s.per_range, lo, hi))
        };

        let servers = self.servers();
        let donor = servers
            .iter()
            .copied()
            .fold(None::<ServerId>, |best, s| match best {
                Some(b) if load_of(b) >= load_of(s) => Some(b),
                _ => Some(s),
            })
            .expect("table has servers");
        let idx = self
            .slices
            .iter()
            .enumerate()
            .filter(|(_, s)| s.server == donor)
            .map(|(i, s)| (i, range_load(donor, s.lo.into(), s.hi.into()), s.size()))
            .fold(None::<(usize, f64, u64)>, |best, cur| match best {
                Some(b) if (b.1, b.2) >= (cur.1, cur.2) => Some(b),
                _ => Some(cur),
            })
            .map(|(i, _, _)| i)
            .expect("donor owns a slice");

        let min = config.min_slice.max(1);
        let slice = self.slices[idx];
        let (lo, hi) = if slice.size() >= 2 * min {
            let mid = u64::from(slice.lo) + slice.size() / 2;
            let lower = range_load(donor, slice.lo.into(), mid - 1);
            let upper = range_load(donor, mid, slice.hi.into());
            if lower > upper {
                (slice.lo, (mid - 1) as u32)
            } else {
                (mid as u32, slice.hi)
            }
        } else {
            let left = idx.checked_sub(1).map(|i| self.slices[i]);
            let right = self.slices.get(idx + 1).copied();
            let neighbour = match (left, right) {
                (Some(l), Some(r)) if l.size() > r.size() => Some((l, true)),
                (_, Some(r)) => Some((r, false)),
                (Some(l), None) => Some((l, true)),
                (None, None) => None,
            }
            .filter(|(s, _)| s.size() >= 2 * min)
            .ok_or_else(|| Error::config("hash space too small to add another server"))?;
            let (n, is_left) = neighbour;
            let half = (n.size() / 2) as u32;
            if is_left {
                (n.hi - half + 1, n.hi)
            } else {
                (n.lo, n.lo + half - 1)
            }
        };
        Ok(self.successor(paint(&self.slices, lo, hi, new_server)))
    }

    /// Splits every slice of `failed` between its neighbours, giving the
    /// less-loaded neighbour the larger part. No directives are produced: the
    /// failed server's cache is gone.
    pub fn remove_server(&self, failed: ServerId, samples: &[LoadSample]) -> Result<SliceTable> {
        if !self.contains_server(failed) {
            return Err(Error::UnknownServer(failed));
        }
        if self.servers().len() == 1 {
            return Err(Error::config("cannot remove the last server"));
        }
        let load_of = |server: ServerId| {
            samples
                .iter()
                .find(|s| s.server == server)
                .map_or(0, |s| s.tasks)
        };
        let merged = self.merge_adjacent();
        let src = &merged.slices;
        let mut out = Vec::with_capacity(src.len());
        for (i, s) in src.iter().enumerate() {
            if s.server != failed {
                out.push(*s);
                continue;
            }
            let left = i.checked_sub(1).map(|j| src[j].server);
            let right = src.get(i + 1).map(|r| r.server);
            let (l, r) = match (left, right) {
                (Some(l), Some(r)) if l != r => (l, r),
                (Some(only), _) | (None, Some(only)) => {
                    out.push(Slice { server: only, ..*s });
                    continue;
                }
                (None, None) => unreachable!("another server remains"),
            };
            let (tl, tr) = (u128::from(load_of(l)), u128::from(load_of(r)));
            let size = u128::from(s.size());
            let (mut to_left, to_right) = match (size * tr).checked_div(tl + tr) {
                Some(left) => (left, size * tl / (tl + tr)),
                None => (size / 2, size / 2),
            };
            let remainder = size - to_left - to_right;
            if tl <= tr {
                to_left += remainder;
            }
            let to_left = to_left as u64;
            if to_left > 0 {
                let hi = (u64::from(s.lo) + to_left - 1) as u32;
                out.push(Slice { lo: s.lo, hi, server: l });
            }
            if to_left < s.size() {
                let lo = (u64::from(s.lo) + to_left) as u32;
                out.push(Slice { lo, hi: s.hi, server: r });
            }
        }
        Ok(SliceTable {
            bits: self.bits,
            epoch: self.epoch + 1,
            slices: coalesce(&out),
        })
    }

    fn largest_slice_of(&self, server: ServerId) -> Option<usize> {
        self.slices
            .iter()
            .enumerate()
            .filter(|(_, s)| s.server == server)
            .fold(None::<(usize, u64)>, |best, (i, s)| match best {
                Some(b) if b.1 >= s.size() => Some(b),
                _ => Some((i, s.size())),
            })
            .map(|(i, _)| i)
    }

    fn successor(&self, slices: Vec<Slice>) -> (SliceTable, Vec<MigrationDirective>) {
        let next = SliceTable {
            bits: self.bits,
            epoch: self.epoch + 1,
            slices: coalesce(&slices),
        };
        let moves = ownership_diff(self, &next);
        (next, moves)
    }
}

fn check_distinct(servers: &[ServerId]) -> Result<()> {
    for (i, s) in servers.iter().enumerate() {
        if servers[..i].contains(s) {
            return Err(Error::DuplicateServer(*s));
        }
    }
    Ok(())
}

fn equal_sizes(total: u64, n: u64) -> Result<Vec<u64>> {
    if n == 0 || n > total {
        return Err(Error::config(format!(
            "cannot split {total} buckets between {n} servers"
        )));
    }
    let (base, extra) = (total / n, total % n);
    Ok((0..n).map(|i| base + u64::from(i < extra)).collect())
}

fn layout(parts: impl IntoIterator<Item = (ServerId, u64)>) -> Vec<Slice> {
    let mut next = 0u64;
    parts
        .into_iter()
        .filter(|(_, size)| *size > 0)
        .map(|(server, size)| {
            let slice = Slice {
                lo: next as u32,
                hi: (next + size - 1) as u32,
                server,
            };
            next += size;
            slice
        })
        .collect()
}

fn coalesce(slices: &[Slice]) -> Vec<Slice> {
    let mut merged: Vec<Slice> = Vec::with_capacity(slices.len());
    for s in slices {
        match merged.last_mut() {
            Some(prev) if prev.server == s.server => prev.hi = s.hi,
            _ => merged.push(*s),
        }
    }
    merged
}

/// Overwrites ownership of `[lo, hi]`, keeping the rest of the partition.
fn paint(slices: &[Slice], lo: u32, hi: u32, server: ServerId) -> Vec<Slice> {
    let fresh = Slice { lo, hi, server };
    let mut out = Vec::with_capacity(slices.len() + 2);
    let mut placed = false;
    for s in slices {
        if s.hi < lo {
            out.push(*s);
            continue;
        }
        if s.lo > hi {
            if !placed {
                out.push(fresh);
                placed = true;
            }
            out.push(*s);
            continue;
        }
        if s.lo < lo {
            out.push(Slice { hi: lo - 1, ..*s });
        }
        if !placed {
            out.push(fresh);
            placed = true;
        }
        if s.hi > hi {
            out.push(Slice { lo: hi + 1, ..*s });
        }
    }
    if !placed {
        out.push(fresh);
    }
    out
}

/// Maximal ranges whose owner differs between two tables of the same space.
pub fn ownership_diff(old: &SliceTable, new: &SliceTable) -> Vec<MigrationDirective> {
    let mut out: Vec<MigrationDirective> = Vec::new();
    if old.is_empty() || new.is_empty() || old.bits != new.bits {
        return out;
    }
    let (mut i, mut j) = (0, 0);
    let mut pos = 0u64;
    while pos < old.space() {
        let (a, b) = (old.slices[i], new.slices[j]);
        let end = a.hi.min(b.hi);
        if a.server != b.server {
            match out.last_mut() {
                Some(d)
                    if d.from == a.server && d.to == b.server && u64::from(d.hi) + 1 == pos =>
                {
                    d.hi = end
                }
                _ => out.push(MigrationDirective {
                    lo: pos as u32,
                    hi: end,
                    from: a.server,
                    to: b.server,
                }),
            }
        }
        pos = u64::from(end) + 1;
        if a.hi == end {
            i += 1;
        }
        if b.hi == end {
            j += 1;
        }
    }
    out
}

/// Real-valued sizes `current_i + space * (1/n - t_i / sum(t))`.
///
/// Starting from an equal split the first term is `space / n`.
pub fn resize_by_load(current: &[u64], tasks: &[u64], space: u64) -> Vec<f64> {
    let n = current.len() as f64;
    let total: u64 = tasks.iter().sum();
    let space = space as f64;
    current
        .iter()
        .zip(tasks)
        .map(|(&h, &t)| h as f64 + space * (1.0 / n - t as f64 / total as f64))
        .collect()
}

/// Integer sizes summing to `total`, each at least `min`, proportional to
/// `raw` otherwise. Remainders go to the largest fractional parts, ties to
/// the lower index.
pub fn round_sizes(raw: &[f64], total: u64, min: u64) -> Result<Vec<u64>> {
    let n = raw.len();
    let min = min.max(1);
    if n == 0 || (n as u64).saturating_mul(min) > total {
        return Err(Error::config(format!(
            "{n} slices of at least {min} do not fit in {total} buckets"
        )));
    }
    let mut pinned = vec![false; n];
    let mut scaled = vec![0.0; n];
    loop {
        let budget = (total - min * pinned.iter().filter(|&&p| p).count() as u64) as f64;
        let free: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| raw[i].max(0.0)).sum();
        let free_count = pinned.iter().filter(|&&p| !p).count() as f64;
        let mut changed = false;
        for i in 0..n {
            if pinned[i] {
                scaled[i] = min as f64;
                continue;
            }
            scaled[i] = if free > 0.0 {
                raw[i].max(0.0) * budget / free
            } else {
                budget / free_count
            };
            if scaled[i] < min as f64 {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes: Vec<u64> = scaled.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = sizes.iter().sum();
    let mut order: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take((total - assigned) as usize) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S1: ServerId = ServerId(1);
    const S2: ServerId = ServerId(2);
    const S3: ServerId = ServerId(3);
    const S4: ServerId = ServerId(4);

    fn cfg() -> SliceConfig {
        SliceConfig::default()
    }

    fn table(bits: u32, parts: &[(u32, u32, ServerId)]) -> SliceTable {
        let slices = parts
            .iter()
            .map(|&(lo, hi, server)| Slice { lo, hi, server })
            .collect();
        SliceTable::from_slices(bits, 0, slices).unwrap()
    }

    fn ranges(t: &SliceTable) -> Vec<(u32, u32, ServerId)> {
        t.slices().iter().map(|s| (s.lo, s.hi, s.server)).collect()
    }

    fn samples(loads: &[(ServerId, u64)]) -> Vec<LoadSample> {
        loads.iter().map(|&(s, t)| LoadSample::new(s, t)).collect()
    }

    #[test]
    fn equal_split_uses_largest_remainder() {
        let t = SliceTable::initial_equal(&[S1, S2, S3], 16).unwrap();
        assert_eq!(
            ranges(&t),
            vec![(0, 21845, S1), (21846, 43690, S2), (43691, 65535, S3)]
        );
        assert_eq!(ranges(&SliceTable::initial_equal(&[S1], 4).unwrap()), vec![(0, 15, S1)]);
        assert_eq!(
            ranges(&SliceTable::initial_equal(&[S1, S2], 4).unwrap()),
            vec![(0, 7, S1), (8, 15, S2)]
        );
        let too_many: Vec<ServerId> = (0..17).map(ServerId).collect();
        assert!(matches!(SliceTable::initial_equal(&too_many, 4), Err(Error::Config(_))));
        assert!(SliceTable::initial_equal(&[S1, S1], 4).is_err());
    }

    #[test]
    fn lookup_respects_boundaries() {
        let t = table(16, &[(0, 21844, S1), (21845, 43689, S2), (43690, 65535, S3)]);
        assert_eq!(t.lookup(21844).unwrap(), S1);
        assert_eq!(t.lookup(21845).unwrap(), S2);
        assert_eq!(t.lookup(0).unwrap(), S1);
        assert_eq!(t.lookup(65535).unwrap(), S3);
        assert!(matches!(t.lookup(65536), Err(Error::Input(_))));
    }

    #[test]
    fn validator_rejects_gaps_and_overlaps() {
        let s = |lo, hi| Slice { lo, hi, server: S1 };
        assert!(SliceTable::from_slices(4, 0, vec![s(0, 6), s(8, 15)]).is_err());
        assert!(SliceTable::from_slices(4, 0, vec![s(0, 8), s(8, 15)]).is_err());
        assert!(SliceTable::from_slices(4, 0, vec![s(1, 15)]).is_err());
        assert!(SliceTable::from_slices(4, 0, vec![s(0, 14)]).is_err());
        assert!(SliceTable::from_slices(4, 0, vec![s(0, 15)]).is_ok());
    }

    #[test]
    fn adaptive_matches_hand_evaluation() {
        // H_1 = 8 + 16(1/2 - 12/16) = 4, H_2 = 8 + 16(1/2 - 4/16) = 12.
        let t = SliceTable::initial_equal(&[S1, S2], 4).unwrap();
        let (next, moves) = t
            .adaptive_redistribute(&samples(&[(S1, 12), (S2, 4)]), &cfg())
            .unwrap();
        assert_eq!(ranges(&next), vec![(0, 3, S1), (4, 15, S2)]);
        assert_eq!(moves, vec![MigrationDirective { lo: 4, hi: 7, from: S1, to: S2 }]);
        assert_eq!(next.epoch(), 1);
    }

    #[test]
    fn adaptive_clamps_starved_servers() {
        // Raw H_1 = 8 + 16(1/2 - 1) = 0, clamped to one bucket.
        let t = SliceTable::initial_equal(&[S1, S2], 4).unwrap();
        let (next, _) = t
            .adaptive_redistribute(&samples(&[(S1, 16), (S2, 0)]), &cfg())
            .unwrap();
        assert_eq!(ranges(&next), vec![(0, 0, S1), (1, 15, S2)]);
    }

    #[test]
    fn adaptive_with_equal_loads_keeps_ownership() {
        let t = table(4, &[(0, 2, S1), (3, 12, S2), (13, 15, S3)]);
        let (next, moves) = t
            .adaptive_redistribute(&samples(&[(S1, 5), (S2, 5), (S3, 5)]), &cfg())
            .unwrap();
        assert_eq!(ranges(&next), ranges(&t));
        assert!(moves.is_empty());
        assert_eq!(next.epoch(), 1);
    }

    #[test]
    fn adaptive_edge_cases() {
        let t = SliceTable::initial_equal(&[S1, S2], 4).unwrap();
        let (same, moves) = t
            .adaptive_redistribute(&samples(&[(S1, 0), (S2, 0)]), &cfg())
            .unwrap();
        assert_eq!(same, t);
        assert!(moves.is_empty());
        assert!(matches!(
            t.adaptive_redistribute(&samples(&[(S1, 3)]), &cfg()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn raw_size_decreases_with_load() {
        let a = resize_by_load(&[100, 100, 100], &[10, 20, 30], 300);
        let b = resize_by_load(&[100, 100, 100], &[15, 15, 30], 300);
        assert!(b[0] < a[0]);
        assert!((a.iter().sum::<f64>() - 300.0).abs() < 1e-9);
    }

    #[test]
    fn rounding_conserves_total() {
        assert_eq!(round_sizes(&[1.5, 1.5, 1.0], 4, 1).unwrap(), vec![2, 1, 1]);
        assert_eq!(round_sizes(&[-3.0, 10.0, 9.0], 16, 2).unwrap().iter().sum::<u64>(), 16);
        assert_eq!(round_sizes(&[-3.0, 10.0, 9.0], 16, 2).unwrap()[0], 2);
        assert_eq!(round_sizes(&[0.0, 0.0], 5, 1).unwrap(), vec![3, 2]);
        assert!(round_sizes(&[1.0, 1.0, 1.0], 5, 2).is_err());
    }

    #[test]
    fn shrink_edges_moves_to_neighbours() {
        let t = table(4, &[(0, 7, S1), (8, 15, S2)]);
        let (next, moves) = t.shrink_edges(S2, 2, 0, &cfg()).unwrap();
        assert_eq!(ranges(&next), vec![(0, 9, S1), (10, 15, S2)]);
        assert_eq!(moves, vec![MigrationDirective { lo: 8, hi: 9, from: S2, to: S1 }]);

        let (same, none) = t.shrink_edges(S2, 0, 0, &cfg()).unwrap();
        assert_eq!(same, t);
        assert!(none.is_empty());
    }

    #[test]
    fn shrink_edges_rejects_bad_amounts() {
        let t = table(4, &[(0, 7, S1), (8, 15, S2)]);
        assert!(matches!(t.shrink_edges(S2, 4, 4, &cfg()), Err(Error::InvalidAdjustment(_))));
        assert!(matches!(t.shrink_edges(S2, 0, 1, &cfg()), Err(Error::InvalidAdjustment(_))));
        assert!(matches!(t.shrink_edges(S1, 1, 0, &cfg()), Err(Error::InvalidAdjustment(_))));
        assert!(matches!(t.shrink_edges(S3, 1, 0, &cfg()), Err(Error::UnknownServer(_))));
    }

    #[test]
    fn shrink_edges_on_both_sides() {
        let t = table(16, &[(0, 21844, S1), (21845, 43689, S2), (43690, 65535, S3)]);
        let (next, moves) = t.shrink_edges(S2, 1000, 2000, &cfg()).unwrap();
        assert_eq!(
            ranges(&next),
            vec![(0, 22844, S1), (22845, 41689, S2), (41690, 65535, S3)]
        );
        assert_eq!(moves.len(), 2);
        assert!(next.owned_size(S2) < t.owned_size(S2));
    }

    #[test]
    fn split_fine_carves_middle() {
        let t = SliceTable::single(S1, 4).unwrap();
        let (next, moves) = t.split_fine(S1, (6, 9), S2, &cfg()).unwrap();
        assert_eq!(ranges(&next), vec![(0, 5, S1), (6, 9, S2), (10, 15, S1)]);
        assert_eq!(moves, vec![MigrationDirective { lo: 6, hi: 9, from: S1, to: S2 }]);
        for b in 6..=9 {
            assert_eq!(next.lookup(b).unwrap(), S2);
        }
    }

    #[test]
    fn split_fine_figure_scenario() {
        let t = table(16, &[(0, 21844, S1), (21845, 43689, S2), (43690, 65535, S3)]);
        let (next, moves) = t.split_fine(S2, (30256, 35452), S1, &cfg()).unwrap();
        assert_eq!(next.lookup(30256).unwrap(), S1);
        assert_eq!(next.lookup(35452).unwrap(), S1);
        assert_eq!(next.lookup(30255).unwrap(), S2);
        assert_eq!(next.lookup(35453).unwrap(), S2);
        assert_eq!(moves, vec![MigrationDirective { lo: 30256, hi: 35452, from: S2, to: S1 }]);
    }

    #[test]
    fn split_fine_degenerate_and_errors() {
        let t = table(4, &[(0, 7, S1), (8, 15, S2)]);
        let (whole, _) = t.split_fine(S1, (0, 7), S2, &cfg()).unwrap();
        assert_eq!(ranges(&whole.merge_adjacent()), vec![(0, 15, S2)]);
        assert!(matches!(t.split_fine(S1, (6, 9), S2, &cfg()), Err(Error::InvalidAdjustment(_))));
        assert!(matches!(t.split_fine(S1, (2, 3), S1, &cfg()), Err(Error::InvalidAdjustment(_))));
        assert!(matches!(t.split_fine(S2, (2, 3), S1, &cfg()), Err(Error::InvalidAdjustment(_))));
        // Fragments below min_slice are absorbed.
        let wide = SliceConfig { min_slice: 2, ..cfg() };
        let (absorbed, _) = t.split_fine(S1, (1, 5), S2, &wide).unwrap();
        assert_eq!(ranges(&absorbed), vec![(0, 5, S2), (6, 7, S1), (8, 15, S2)]);
    }

    #[test]
    fn merge_adjacent_coalesces() {
        let t = table(4, &[(0, 5, S1), (6, 9, S1), (10, 15, S2)]);
        let merged = t.merge_adjacent();
        assert_eq!(ranges(&merged), vec![(0, 9, S1), (10, 15, S2)]);
        assert_eq!(merged.merge_adjacent(), merged);
        let plain = table(4, &[(0, 7, S1), (8, 15, S2)]);
        assert_eq!(plain.merge_adjacent(), plain);
    }

    #[test]
    fn split_then_reassign_back_round_trips() {
        let t = table(4, &[(0, 7, S1), (8, 15, S2)]);
        let (split, _) = t.split_fine(S1, (2, 4), S2, &cfg()).unwrap();
        let (back, _) = split.split_fine(S2, (2, 4), S1, &cfg()).unwrap();
        assert_eq!(ranges(&back.merge_adjacent()), ranges(&t));
    }

    #[test]
    fn add_server_splits_busiest_slice() {
        let t = SliceTable::single(S1, 4).unwrap();
        let mut sample = LoadSample::new(S1, 16);
        for g in 0..16 {
            sample.per_range.insert(g, GroupLoad { tasks: 1, ..Default::default() });
        }
        let wide = SliceConfig { min_slice: 1, group_count: 16 };
        let (next, moves) = t.add_server(&[sample], S2, &wide).unwrap();
        assert_eq!(ranges(&next), vec![(0, 7, S1), (8, 15, S2)]);
        assert_eq!(moves, vec![MigrationDirective { lo: 8, hi: 15, from: S1, to: S2 }]);
    }

    #[test]
    fn add_server_follows_hot_half() {
        let t = table(16, &[(0, 21844, S1), (21845, 43689, S2), (43690, 65535, S3)]);
        let mut hot = LoadSample::new(S2, 100);
        // Groups of 1024 buckets; group 22 sits in the lower half of S2.
        hot.per_range.insert(22, GroupLoad { tasks: 100, ..Default::default() });
        let loads = vec![LoadSample::new(S1, 10), hot, LoadSample::new(S3, 20)];
        let (next, moves) = t.add_server(&loads, S4, &cfg()).unwrap();
        assert_eq!(next.lookup(21845).unwrap(), S4);
        assert_eq!(next.lookup(43689).unwrap(), S2);
        assert!(moves.iter().all(|d| d.from == S2 && d.to == S4));
        assert!(matches!(t.add_server(&loads, S2, &cfg()), Err(Error::DuplicateServer(_))));
    }

    #[test]
    fn add_server_borrows_neighbour_when_donor_is_tiny() {
        let t = table(4, &[(0, 0, S1), (1, 15, S2)]);
        let (next, _) = t
            .add_server(&samples(&[(S1, 9), (S2, 1)]), S3, &cfg())
            .unwrap();
        assert_eq!(ranges(&next), vec![(0, 0, S1), (1, 7, S3), (8, 15, S2)]);
    }

    #[test]
    fn add_server_to_empty_table() {
        let empty = SliceTable::empty(4).unwrap();
        let (next, moves) = empty.add_server(&[], S1, &cfg()).unwrap();
        assert_eq!(ranges(&next), ranges(&SliceTable::single(S1, 4).unwrap()));
        assert!(moves.is_empty());
    }

    #[test]
    fn remove_server_splits_inverse_to_load() {
        let t = table(4, &[(0, 4, S1), (5, 10, S2), (11, 15, S3)]);
        let next = t
            .remove_server(S2, &samples(&[(S1, 1), (S3, 3)]))
            .unwrap();
        assert_eq!(ranges(&next), vec![(0, 9, S1), (10, 15, S3)]);
    }

    #[test]
    fn remove_server_edge_cases() {
        let two = table(4, &[(0, 7, S1), (8, 15, S2)]);
        assert_eq!(ranges(&two.remove_server(S1, &[]).unwrap()), vec![(0, 15, S2)]);
        let one = SliceTable::single(S1, 4).unwrap();
        assert!(matches!(one.remove_server(S1, &[]), Err(Error::Config(_))));
        assert!(matches!(two.remove_server(S3, &[]), Err(Error::UnknownServer(_))));
        let figure = table(16, &[(0, 21844, S1), (21845, 43689, S2), (43690, 65535, S3)]);
        let next = figure.remove_server(S2, &samples(&[(S1, 5), (S3, 5)])).unwrap();
        assert_eq!(next.servers(), vec![S1, S3]);
        assert_eq!(next.owned_size(S1) + next.owned_size(S3), 65536);
    }

    #[test]
    fn mini_buckets_interleave() {
        let t = SliceTable::mini_buckets(&[S1, S2], 4).unwrap();
        assert_eq!(
            ranges(&t),
            vec![(0, 3, S1), (4, 7, S2), (8, 11, S1), (12, 15, S2)]
        );
        assert!(SliceTable::mini_buckets(&[S1, S2, S3, S4, ServerId(5)], 4).is_err());
    }

    #[test]
    fn range_groups_map_buckets() {
        let g = RangeGroups::new(16, 64);
        assert_eq!(g.group_of(0), 0);
        assert_eq!(g.group_of(1023), 0);
        assert_eq!(g.group_of(1024), 1);
        assert_eq!(g.range(63), (64512, 65535));
        assert_eq!(RangeGroups::new(4, 64).count(), 16);
        let g3 = RangeGroups::new(4, 3);
        for b in 0..16 {
            let (lo, hi) = g3.range(g3.group_of(b));
            assert!(lo <= b && b <= hi);
        }
    }

    #[test]
    fn table_json_round_trip() {
        let t = SliceTable::initial_equal(&[S1, S2], 4).unwrap();
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"bits": 4, "epoch": 0, "slices": [
                {"lo": 0, "hi": 7, "server": 1}, {"lo": 8, "hi": 15, "server": 2}]})
        );
        assert_eq!(serde_json::from_value::<SliceTable>(json).unwrap(), t);
        let broken = serde_json::json!({"bits": 4, "epoch": 0, "slices": [{"lo": 0, "hi": 6, "server": 1}]});
        assert!(serde_json::from_value::<SliceTable>(broken).is_err());
    }
}
