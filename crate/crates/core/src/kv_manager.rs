//! Device KV-cache accounting with one token per page.
//!
//! Under the `offload` policy memory pressure moves the oldest request's
//! oldest pages to a host tier in fixed-size chunks. Offloaded chunks come back
//! in the order they left, as soon as device pages free up, and a request with
//! any page on the host is not runnable. No KV entry is ever recomputed.
//!
//! The `preempt` policy drops the youngest request on pressure; its KV must be
//! recomputed when it is resumed. The `oracle` policy reserves every
//! request's final footprint at admission and never runs out.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::scheduler::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvPolicy {
    Offload,
    Preempt,
    Oracle,
}

impl std::str::FromStr for KvPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offload" => Ok(Self::Offload),
            "preempt" => Ok(Self::Preempt),
            "oracle" => Ok(Self::Oracle),
            _ => Err(config_err(format!("unknown KV policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    pub capacity_pages: usize,
    #[serde(default = "default_chunk_pages")]
    pub chunk_pages: usize,
    #[serde(default = "default_pcie_gbps")]
    pub pcie_gbps: f64,
    #[serde(default = "default_page_bytes")]
    pub page_bytes: u64,
    #[serde(default = "default_policy")]
    pub policy: KvPolicy,
}

fn default_chunk_pages() -> usize {
    64
}

fn default_pcie_gbps() -> f64 {
    25.0
}

/// One token of a 36-layer model with 8 KV heads of 128 dims in 16-bit.
fn default_page_bytes() -> u64 {
    page_bytes(128, 8, 2, 36)
}

fn default_policy() -> KvPolicy {
    KvPolicy::Offload
}

impl KvConfig {
    pub fn new(capacity_pages: usize, policy: KvPolicy) -> Self {
        Self {
            capacity_pages,
            chunk_pages: default_chunk_pages(),
            pcie_gbps: default_pcie_gbps(),
            page_bytes: default_page_bytes(),
            policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_pages == 0 {
            return Err(config_err("capacity_pages must be at least 1"));
        }
        if self.chunk_pages == 0 {
            return Err(config_err("chunk_pages must be at least 1"));
        }
        if !(self.pcie_gbps > 0.0 && self.pcie_gbps.is_finite()) {
            return Err(config_err("pcie_gbps must be positive"));
        }
        if self.page_bytes == 0 {
            return Err(config_err("page_bytes must be at least 1"));
        }
        Ok(())
    }

    /// Milliseconds to move `pages` across the host link.
    pub fn transfer_ms(&self, pages: usize) -> f64 {
        pages as f64 * self.page_bytes as f64 / (self.pcie_gbps * 1e9) * 1e3
    }
}

/// Bytes of keys and values one token occupies.
pub fn page_bytes(head_dim: u64, kv_heads: u64, bytes_per_elem: u64, layers: u64) -> u64 {
    head_dim * kv_heads * bytes_per_elem * 2 * layers
}

/// Host-link bandwidth needed to offload every new KV entry as it is
/// produced: `batch` pages per iteration of `iteration_ms`.
pub fn offload_bandwidth_required(batch: usize, page_bytes: u64, iteration_ms: f64) -> Result<f64> {
    if !(iteration_ms > 0.0) {
        return Err(contract_err("iteration latency must be positive"));
    }
    Ok(batch as f64 * page_bytes as f64 / (iteration_ms / 1e3))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OffloadChunk {
    pub request_id: RequestId,
    pub pages: Range<usize>,
    pub enqueue_iteration: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allocation {
    pub offloaded: Vec<OffloadChunk>,
    /// Requests dropped to make room; their KV must be recomputed.
    pub preempted: Vec<RequestId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KvStats {
    pub offloaded_pages: u64,
    pub reloaded_pages: u64,
    pub recomputed_tokens: u64,
    pub preemptions: u64,
}

#[derive(Debug, Clone)]
struct Holding {
    arrival: u64,
    len: usize,
    /// Page ranges currently on the host, in offload order.
    host: Vec<Range<usize>>,
    /// Remaining oracle reservation beyond `len`.
    reserved: usize,
}

impl Holding {
    fn host_pages(&self) -> usize {
        self.host.iter().map(|r| r.len()).sum()
    }

    fn device_pages(&self) -> usize {
        self.len - self.host_pages()
    }

    /// Lowest run of device-resident pages, at most `max` long.
    fn lowest_device_run(&self, max: usize) -> Option<Range<usize>> {
        let mut sorted: Vec<&Range<usize>> = self.host.iter().collect();
        sorted.sort_by_key(|r| r.start);
        let mut start = 0;
        for r in sorted {
            if r.start > start {
                return Some(start..r.start.min(start + max));
            }
            start = start.max(r.end);
        }
        (start < self.len).then(|| start..self.len.min(start + max))
    }
}

#[derive(Debug, Clone)]
pub struct KvPool {
    cfg: KvConfig,
    free: usize,
    holdings: HashMap<RequestId, Holding>,
    by_arrival: BTreeMap<u64, RequestId>,
    queue: VecDeque<OffloadChunk>,
    host_pages: usize,
    next_arrival: u64,
    iteration: u64,
    stats: KvStats,
}

impl KvPool {
    pub fn new(cfg: KvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            free: cfg.capacity_pages,
            cfg,
            holdings: HashMap::new(),
            by_arrival: BTreeMap::new(),
            queue: VecDeque::new(),
            host_pages: 0,
            next_arrival: 0,
            iteration: 0,
            stats: KvStats::default(),
        })
    }

    pub fn config(&self) -> &KvConfig {
        &self.cfg
    }

    pub fn capacity_pages(&self) -> usize {
        self.cfg.capacity_pages
    }

    pub fn free_pages(&self) -> usize {
        self.free
    }

    pub fn device_pages(&self) -> usize {
        self.cfg.capacity_pages - self.free
    }

    pub fn offloaded_pages(&self) -> usize {
        self.host_pages
    }

    pub fn offloaded_bytes(&self) -> u64 {
        self.offloaded_pages() as u64 * self.cfg.page_bytes
    }

    /// Fraction of device pages holding live KV.
    pub fn utilization(&self) -> f64 {
        self.device_pages() as f64 / self.cfg.capacity_pages as f64
    }

    pub fn stats(&self) -> KvStats {
        self.stats
    }

    pub fn queue(&self) -> impl Iterator<Item = &OffloadChunk> {
        self.queue.iter()
    }

    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn holds(&self, id: RequestId) -> bool {
        self.holdings.contains_key(&id)
    }

    pub fn pages_of(&self, id: RequestId) -> usize {
        self.holdings.get(&id).map_or(0, |h| h.len)
    }

    /// Page indices of `id` currently on the device.
    pub fn device_page_set(&self, id: RequestId) -> Vec<usize> {
        let Some(h) = self.holdings.get(&id) else {
            return Vec::new();
        };
        (0..h.len)
            .filter(|p| !h.host.iter().any(|r| r.contains(p)))
            .collect()
    }

    /// True when every page of `id` is on the device.
    pub fn is_runnable(&self, id: RequestId) -> bool {
        self.holdings.get(&id).is_none_or(|h| h.host.is_empty())
    }

    /// Pages an admission may still claim: free pages minus outstanding
    /// oracle reservations.
    pub fn admissible_pages(&self) -> usize {
        let reserved: usize = self.holdings.values().map(|h| h.reserved).sum();
        self.free.saturating_sub(reserved)
    }

    /// Reserves `total` pages for `id` under the oracle policy. Returns false
    /// when the reservation does not fit.
    pub fn reserve(&mut self, id: RequestId, total: usize) -> Result<bool> {
        if self.cfg.policy != KvPolicy::Oracle {
            return Err(contract_err("reservations exist only under the oracle policy"));
        }
        if total > self.cfg.capacity_pages {
            return Err(Error::ImpossibleRequest {
                need: total,
                capacity: self.cfg.capacity_pages,
            });
        }
        if self.admissible_pages() < total {
            return Ok(false);
        }
        let h = self.holding(id);
        h.reserved = total.saturating_sub(h.len);
        Ok(true)
    }

    fn holding(&mut self, id: RequestId) -> &mut Holding {
        let arrival = self.next_arrival;
        let h = self.holdings.entry(id).or_insert_with(|| Holding {
            arrival,
            len: 0,
            host: Vec::new(),
            reserved: 0,
        });
        if h.arrival == arrival {
            self.by_arrival.insert(arrival, id);
            self.next_arrival += 1;
        }
        h
    }

    /// Grants `n` more pages to `id`, relieving pressure according to the
    /// policy. New pages always land on the device, even for a request that
    /// has pages on the host.
    pub fn allocate(&mut self, id: RequestId, n: usize) -> Result<Allocation> {
        if n == 0 {
            return Err(contract_err("allocation of zero pages"));
        }
        let cap = self.cfg.capacity_pages;
        let own = self.holdings.get(&id).map_or(0, |h| h.device_pages());
        if own + n > cap {
            return Err(Error::ImpossibleRequest { need: own + n, capacity: cap });
        }
        let mut out = Allocation::default();
        match self.cfg.policy {
            KvPolicy::Oracle => {
                let h = self.holding(id);
                if n > h.reserved {
                    return Err(Error::OutOfPages(format!(
                        "request {id} grows past its reservation"
                    )));
                }
                h.reserved -= n;
            }
            KvPolicy::Offload => {
                while self.free < n {
                    let chunk = self
                        .offload_victim(id, false)
                        .ok_or_else(|| Error::OutOfPages("no offload victim".into()))?;
                    out.offloaded.push(chunk);
                }
            }
            KvPolicy::Preempt => {
                while self.free < n {
                    let victim = self
                        .by_arrival
                        .values()
                        .rev()
                        .copied()
                        .find(|&v| v != id && self.holdings[&v].len > 0)
                        .ok_or_else(|| Error::OutOfPages("no preemption victim".into()))?;
                    self.preempt(victim);
                    out.preempted.push(victim);
                }
            }
        }
        self.free -= n;
        self.holding(id).len += n;
        Ok(out)
    }

    fn preempt(&mut self, id: RequestId) {
        let h = self.holdings.remove(&id).expect("victim exists");
        self.by_arrival.remove(&h.arrival);
        self.free += h.device_pages();
        self.stats.recomputed_tokens += h.len as u64;
        self.stats.preemptions += 1;
    }

    /// Moves one chunk of the oldest (or, with `youngest`, newest) request
    /// holding device pages, other than `except`, to the host.
    fn offload_victim(&mut self, except: RequestId, youngest: bool) -> Option<OffloadChunk> {
        let pick = |(_, id): (&u64, &RequestId)| {
            (*id != except && self.holdings[id].device_pages() > 0).then_some(*id)
        };
        let victim = if youngest {
            self.by_arrival.iter().rev().find_map(pick)
        } else {
            self.by_arrival.iter().find_map(pick)
        }?;
        let h = self.holdings.get_mut(&victim).expect("victim exists");
        let pages = h.lowest_device_run(self.cfg.chunk_pages)?;
        h.host.push(pages.clone());
        self.free += pages.len();
        self.host_pages += pages.len();
        self.stats.offloaded_pages += pages.len() as u64;
        let chunk = OffloadChunk {
            request_id: victim,
            pages,
            enqueue_iteration: self.iteration,
        };
        self.queue.push_back(chunk.clone());
        Some(chunk)
    }

    /// Brings chunks back in FIFO order while the head of the queue fits.
    pub fn reload_step(&mut self) -> Vec<OffloadChunk> {
        let mut back = Vec::new();
        while let Some(head) = self.queue.front() {
            if head.pages.len() > self.free {
                break;
            }
            let chunk = self.queue.pop_front().expect("non-empty");
            let h = self.holdings.get_mut(&chunk.request_id).expect("owner exists");
            let i = h.host.iter().position(|r| *r == chunk.pages).expect("chunk is on host");
            h.host.remove(i);
            self.free -= chunk.pages.len();
            self.host_pages -= chunk.pages.len();
            self.stats.reloaded_pages += chunk.pages.len() as u64;
            back.push(chunk);
        }
        back
    }

    /// When nothing can run and the head chunk does not fit, offloads the
    /// newest other request until it does.
    pub fn make_room_for_reload(&mut self) -> Vec<OffloadChunk> {
        let mut moved = Vec::new();
        let Some(head) = self.queue.front().cloned() else {
            return moved;
        };
        while self.free < head.pages.len() {
            match self.offload_victim(head.request_id, true) {
                Some(c) => moved.push(c),
                None => break,
            }
        }
        moved
    }

    /// Releases everything `id` holds on either tier.
    pub fn release(&mut self, id: RequestId) -> Result<usize> {
        let h = self
            .holdings
            .remove(&id)
            .ok_or_else(|| contract_err(format!("request {id} holds no pages")))?;
        self.by_arrival.remove(&h.arrival);
        self.free += h.device_pages();
        self.host_pages -= h.host_pages();
        self.queue.retain(|c| c.request_id != id);
        Ok(h.len)
    }

    /// Page conservation and tier exclusivity.
    pub fn check(&self) -> Result<()> {
        let device: usize = self.holdings.values().map(|h| h.device_pages()).sum();
        let host: usize = self.holdings.values().map(|h| h.host_pages()).sum();
        let fail = |m: String| Err(Error::Invariant(m));
        if device + self.free != self.cfg.capacity_pages {
            return fail(format!(
                "device {device} + free {} != capacity {}",
                self.free, self.cfg.capacity_pages
            ));
        }
        let queued: usize = self.queue.iter().map(|c| c.pages.len()).sum();
        if host != queued || host != self.host_pages {
            return fail(format!("host pages {host} disagree with queue {queued}"));
        }
        for (id, h) in &self.holdings {
            let mut ranges = h.host.clone();
            ranges.sort_by_key(|r| r.start);
            if ranges.windows(2).any(|w| w[0].end > w[1].start) || ranges.iter().any(|r| r.end > h.len) {
                return fail(format!("request {id} has overlapping host ranges"));
            }
        }
        Ok(())
    }
}

/// Per-iteration device state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KvSnapshot {
    pub device_pages: usize,
    pub offloaded_pages: usize,
    pub capacity_pages: usize,
}

impl KvSnapshot {
    pub fn of(pool: &KvPool) -> Self {
        Self {
            device_pages: pool.device_pages(),
            offloaded_pages: pool.offloaded_pages(),
            capacity_pages: pool.capacity_pages(),
        }
    }

    pub fn utilization(&self) -> f64 {
        self.device_pages as f64 / self.capacity_pages as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub utilization: Vec<f64>,
    pub recomputation_ratio: f64,
}

/// Utilization series and recomputed tokens over unique generated tokens.
pub fn utilization_report(history: &[KvSnapshot], recomputed_tokens: u64, generated_tokens: u64) -> UtilizationReport {
    UtilizationReport {
        utilization: history.iter().map(KvSnapshot::utilization).collect(),
        recomputation_ratio: if generated_tokens == 0 {
            0.0
        } else {
            recomputed_tokens as f64 / generated_tokens as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(cap: usize, chunk: usize, policy: KvPolicy) -> KvPool {
        let mut cfg = KvConfig::new(cap, policy);
        cfg.chunk_pages = chunk;
        KvPool::new(cfg).unwrap()
    }

    #[test]
    fn footnote_bandwidth_arithmetic() {
        let pb = page_bytes(128, 8, 2, 36);
        assert_eq!(pb * 128, 18_874_368);
        let bw = offload_bandwidth_required(128, pb, 10.0).unwrap();
        assert!((bw - 1.887_436_8e9).abs() < 1.0);
        assert_eq!(offload_bandwidth_required(0, pb, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn free_allocation_offloads_nothing() {
        let mut p = pool(100, 10, KvPolicy::Offload);
        let a = p.allocate(1, 40).unwrap();
        assert_eq!(a, Allocation::default());
        assert_eq!(p.free_pages(), 60);
        p.check().unwrap();
    }

    #[test]
    fn impossible_request() {
        let mut p = pool(100, 10, KvPolicy::Offload);
        assert!(matches!(
            p.allocate(1, 101),
            Err(Error::ImpossibleRequest { need: 101, capacity: 100 })
        ));
        assert!(matches!(p.allocate(1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn pressure_offloads_oldest_first() {
        // capacity 100, demand 120: 20 pages leave, device stays full
        let mut p = pool(100, 10, KvPolicy::Offload);
        for id in 0..4 {
            p.allocate(id, 25).unwrap();
        }
        let a = p.allocate(4, 20).unwrap();
        let moved: Vec<_> = a.offloaded.iter().map(|c| (c.request_id, c.pages.clone())).collect();
        assert_eq!(moved, vec![(0, 0..10), (0, 10..20)]);
        assert_eq!(p.offloaded_pages(), 20);
        assert_eq!(p.utilization(), 1.0);
        assert!(!p.is_runnable(0));
        assert!(p.is_runnable(1));
        assert_eq!(p.stats().recomputed_tokens, 0);
        p.check().unwrap();
    }

    #[test]
    fn offload_reload_round_trip() {
        let mut p = pool(50, 8, KvPolicy::Offload);
        p.allocate(1, 30).unwrap();
        let before = p.device_page_set(1);
        p.allocate(2, 40).unwrap();
        assert_eq!(p.offloaded_pages(), 24);
        p.release(2).unwrap();
        let back = p.reload_step();
        assert_eq!(back.len(), 3);
        assert_eq!(p.device_page_set(1), before);
        assert!(p.is_runnable(1));
        p.check().unwrap();
    }

    #[test]
    fn reload_is_fifo_across_requests() {
        let mut p = pool(40, 10, KvPolicy::Offload);
        p.allocate(1, 10).unwrap();
        p.allocate(2, 10).unwrap();
        p.allocate(3, 20).unwrap();
        p.allocate(3, 10).unwrap(); // offloads request 1
        p.allocate(3, 10).unwrap(); // offloads request 2
        p.release(3).unwrap();
        let order: Vec<_> = p.reload_step().iter().map(|c| c.request_id).collect();
        assert_eq!(order, vec![1, 2]);
    }

    #[test]
    fn blocked_head_blocks_the_queue() {
        let mut p = pool(30, 10, KvPolicy::Offload);
        p.allocate(1, 10).unwrap();
        p.allocate(2, 20).unwrap();
        p.allocate(2, 10).unwrap();
        assert_eq!(p.free_pages(), 0);
        assert!(p.reload_step().is_empty());
        assert_eq!(p.make_room_for_reload().len(), 1);
        assert_eq!(p.free_pages(), 10);
        assert_eq!(p.reload_step().len(), 1);
        assert!(p.is_runnable(1));
        p.check().unwrap();
    }

    #[test]
    fn preempt_recomputes() {
        let mut p = pool(100, 10, KvPolicy::Preempt);
        p.allocate(1, 50).unwrap();
        p.allocate(2, 40).unwrap();
        let a = p.allocate(1, 20).unwrap();
        assert_eq!(a.preempted, vec![2]);
        assert_eq!(p.stats().recomputed_tokens, 40);
        assert!(!p.holds(2));
        p.check().unwrap();
    }

    #[test]
    fn oracle_reservations() {
        let mut p = pool(100, 10, KvPolicy::Oracle);
        assert!(p.reserve(1, 60).unwrap());
        assert!(!p.reserve(2, 60).unwrap());
        p.allocate(1, 30).unwrap();
        assert_eq!(p.admissible_pages(), 40);
        assert!(matches!(p.allocate(1, 31), Err(Error::OutOfPages(_))));
        assert_eq!(p.utilization(), 0.3);
    }

    #[test]
    fn release_returns_every_page() {
        let mut p = pool(64, 16, KvPolicy::Offload);
        for id in 0..10 {
            p.allocate(id, 7).unwrap();
        }
        p.allocate(10, 30).unwrap();
        for id in 0..11 {
            p.release(id).unwrap();
        }
        assert_eq!(p.free_pages(), 64);
        assert_eq!(p.offloaded_pages(), 0);
        p.check().unwrap();
    }

    #[test]
    fn empty_pool_report() {
        let p = pool(10, 2, KvPolicy::Offload);
        let r = utilization_report(&[KvSnapshot::of(&p)], 0, 0);
        assert_eq!(r.utilization, vec![0.0]);
        assert_eq!(r.recomputation_ratio, 0.0);
    }

    #[test]
    fn lowest_run_skips_host_ranges() {
        let h = Holding {
            arrival: 0,
            len: 20,
            host: vec![5..8, 0..3],
            reserved: 0,
        };
        assert_eq!(h.lowest_device_run(10), Some(3..5));
        let h = Holding { host: vec![0..20], ..h };
        assert_eq!(h.lowest_device_run(10), None);
    }
}
