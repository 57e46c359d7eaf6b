//! The two-level priority queue: per-thread worker heaps under a shared
//! leader list, with combining delete-min.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};

use crossbeam_epoch::{self as epoch, Guard};
use crossbeam_utils::{Backoff, CachePadded};
use serde::Serialize;

use crate::config::{ConfigError, HelpingMode, InsertPath, Key, PathCounters, PipqConfig, ThreadId, Value};
use crate::heap::{HeapEntry, LockToken, SeqLock, WorkerHeap};
use crate::leader::{LargestHandle, LeaderList, NodeView};
use crate::topology::{self, PinError, TopologyMap};

struct Worker {
    lock: SeqLock,
    heap: UnsafeCell<WorkerHeap>,
    /// This thread's elements currently in the leader list.
    count: AtomicI64,
    largest: LargestHandle,
    registered: AtomicBool,
    fast: AtomicU64,
    slower: AtomicU64,
    slowest: AtomicU64,
}

#[derive(Default)]
struct AnnounceSlot {
    status: AtomicBool,
    key: AtomicU64,
    val: AtomicU64,
    empty: AtomicBool,
}

struct NumaNode {
    compete: CachePadded<SeqLock>,
    slots: Box<[CachePadded<AnnounceSlot>]>,
    /// Thread id owning each slot.
    owners: Box<[ThreadId]>,
}

/// Coordinator batch statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchStats {
    /// Coordination sessions that served at least one request.
    pub sessions: u64,
    /// Requests served across all sessions.
    pub served: u64,
    /// `histogram[k]` counts sessions that served exactly `k` requests.
    pub histogram: Vec<u64>,
}

impl BatchStats {
    pub fn mean(&self) -> f64 {
        if self.sessions == 0 {
            0.0
        } else {
            self.served as f64 / self.sessions as f64
        }
    }

    pub fn max(&self) -> usize {
        self.histogram.iter().rposition(|&c| c > 0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QueueStats {
    pub paths: PathCounters,
    pub per_thread: Vec<PathCounters>,
    pub batches: BatchStats,
}

/// Everything an auditor needs, captured while no operation is in flight.
#[derive(Debug, Clone)]
pub struct QuiescentView {
    pub list: Vec<NodeView>,
    pub heaps: Vec<Vec<HeapEntry>>,
    pub heap_order_violations: Vec<Option<usize>>,
    pub counts: Vec<i64>,
    /// Address designated by each thread's largest handle (`None` if unset or stale).
    pub largest: Vec<Option<usize>>,
    pub claim_conflicts: u64,
    pub cntr_min: usize,
    pub cntr_max: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegisterError {
    #[error("all {0} thread ids are taken")]
    Full(usize),
    #[error("thread id {0} is out of range")]
    OutOfRange(ThreadId),
    #[error("thread id {0} is already registered")]
    Taken(ThreadId),
    #[error("numa node {0} does not exist or has no free thread id")]
    NoSlotOnNode(usize),
}

/// Concurrent priority queue over `(Key, Value)` pairs with a fixed number of
/// participating threads.
///
/// Threads obtain a [`PipqHandle`] through [`Pipq::register`]; all operations
/// go through the handle.
pub struct Pipq {
    cfg: PipqConfig,
    topo: TopologyMap,
    workers: Box<[CachePadded<Worker>]>,
    list: LeaderList,
    nodes: Box<[NumaNode]>,
    coord: CachePadded<SeqLock>,
    sessions: AtomicU64,
    served: AtomicU64,
    histogram: Box<[AtomicU64]>,
}

// SAFETY: a worker heap is only touched by the holder of its lock, or by its
// owner while it is the sole coordinator (see `execute`).
unsafe impl Sync for Pipq {}
unsafe impl Send for Pipq {}

impl Pipq {
    /// Uses an emulated topology of `cfg.numa_nodes` nodes (a single node when 1).
    pub fn new(cfg: PipqConfig) -> Result<Self, ConfigError> {
        let topo = if cfg.numa_nodes <= 1 {
            TopologyMap::single(cfg.threads)
        } else {
            TopologyMap::synthetic(cfg.numa_nodes, cfg.threads)
        };
        Self::with_topology(cfg, topo)
    }

    /// `topo` must map exactly `cfg.threads` threads; its node count overrides
    /// `cfg.numa_nodes`.
    pub fn with_topology(mut cfg: PipqConfig, topo: TopologyMap) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if topo.threads() != cfg.threads {
            return Err(ConfigError::BadValue {
                key: "threads".into(),
                value: format!("{} (topology maps {})", cfg.threads, topo.threads()),
            });
        }
        cfg.numa_nodes = topo.numa_nodes;
        let workers = (0..cfg.threads)
            .map(|_| {
                CachePadded::new(Worker {
                    lock: SeqLock::new(),
                    heap: UnsafeCell::new(WorkerHeap::new(cfg.heap_segment_capacity)),
                    count: AtomicI64::new(0),
                    largest: LargestHandle::new(),
                    registered: AtomicBool::new(false),
                    fast: AtomicU64::new(0),
                    slower: AtomicU64::new(0),
                    slowest: AtomicU64::new(0),
                })
            })
            .collect();
        let nodes = (0..topo.numa_nodes)
            .map(|n| {
                let owners = topo.members(n);
                NumaNode {
                    compete: CachePadded::new(SeqLock::new()),
                    slots: owners.iter().map(|_| CachePadded::default()).collect(),
                    owners: owners.into_boxed_slice(),
                }
            })
            .collect();
        let widest = topo.threads_per_node.iter().copied().max().unwrap_or(0);
        Ok(Pipq {
            list: LeaderList::new(cfg.max_offset),
            histogram: (0..=widest).map(|_| AtomicU64::new(0)).collect(),
            cfg,
            topo,
            workers,
            nodes,
            coord: CachePadded::new(SeqLock::new()),
            sessions: AtomicU64::new(0),
            served: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &PipqConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &TopologyMap {
        &self.topo
    }

    pub fn threads(&self) -> usize {
        self.cfg.threads
    }

    /// Claims the lowest free thread id.
    pub fn register(&self) -> Result<PipqHandle<'_>, RegisterError> {
        (0..self.threads())
            .find_map(|t| self.register_tid(t).ok())
            .ok_or(RegisterError::Full(self.threads()))
    }

    /// Claims the lowest free thread id mapped to `node`.
    pub fn register_on(&self, node: usize) -> Result<PipqHandle<'_>, RegisterError> {
        if node >= self.topo.numa_nodes {
            return Err(RegisterError::NoSlotOnNode(node));
        }
        self.topo
            .members(node)
            .into_iter()
            .find_map(|t| self.register_tid(t).ok())
            .ok_or(RegisterError::NoSlotOnNode(node))
    }

    pub fn register_tid(&self, tid: ThreadId) -> Result<PipqHandle<'_>, RegisterError> {
        let w = self.workers.get(tid).ok_or(RegisterError::OutOfRange(tid))?;
        w.registered
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
            .map_err(|_| RegisterError::Taken(tid))?;
        Ok(PipqHandle {
            q: self,
            tid,
            node: self.topo.node_of(tid),
            slot: self.topo.slot_of(tid),
        })
    }

    #[allow(clippy::mut_from_ref)]
    unsafe fn heap_mut(&self, tid: ThreadId) -> &mut WorkerHeap {
        &mut *self.workers[tid].heap.get()
    }

    fn insert(&self, tid: ThreadId, key: Key, val: Value) -> InsertPath {
        let w = &self.workers[tid];
        let token = w.lock.lock();
        // SAFETY: lock held.
        let heap = unsafe { self.heap_mut(tid) };
        let g = epoch::pin();
        let path = if heap.peek_min().is_some_and(|m| key >= m) {
            heap.insert(key, val);
            InsertPath::Fast
        } else if w.count.load(Ordering::Acquire) >= self.cfg.cntr_max as i64 {
            match w.largest.key() {
                Some(lk) if key >= lk => {
                    heap.insert(key, val);
                    InsertPath::Fast
                }
                _ => {
                    self.list.insert(&w.largest, key, val, tid, &g);
                    let (k, v) = self
                        .list
                        .delete_max_of(&w.largest, tid, &g)
                        .expect("own node was just inserted");
                    heap.insert(k, v);
                    InsertPath::Slowest
                }
            }
        } else {
            self.list.insert(&w.largest, key, val, tid, &g);
            w.count.fetch_add(1, Ordering::AcqRel);
            InsertPath::Slower
        };
        if self.cfg.mode == HelpingMode::OnInsert {
            self.upsert_locked(tid, heap, &g);
        }
        w.lock.unlock(token);

        if self.cfg.instrumentation {
            let c = match path {
                InsertPath::Fast => &w.fast,
                InsertPath::Slower => &w.slower,
                InsertPath::Slowest => &w.slowest,
            };
            c.store(c.load(Ordering::Relaxed) + 1, Ordering::Relaxed);
        }
        path
    }

    /// Promotes the heap minimum while the thread is short of leader elements.
    /// Caller holds `tid`'s heap lock.
    fn upsert_locked(&self, tid: ThreadId, heap: &mut WorkerHeap, g: &Guard) {
        let w = &self.workers[tid];
        if w.count.load(Ordering::Acquire) < self.cfg.cntr_min as i64 {
            if let Some((k, v)) = heap.delete_min() {
                self.list.insert(&w.largest, k, v, tid, g);
                w.count.fetch_add(1, Ordering::AcqRel);
            }
        }
    }

    fn help_upsert(&self, tid: ThreadId) {
        let w = &self.workers[tid];
        if w.count.load(Ordering::Acquire) >= self.cfg.cntr_min as i64 {
            return;
        }
        if let Some(token) = w.lock.try_lock() {
            let g = epoch::pin();
            // SAFETY: lock held.
            let heap = unsafe { self.heap_mut(tid) };
            if let Some((k, v)) = heap.delete_min() {
                self.list.insert(&w.largest, k, v, tid, &g);
                w.count.fetch_add(1, Ordering::AcqRel);
            }
            w.lock.unlock(token);
        }
    }

    fn delete_min(&self, tid: ThreadId, node: usize, slot: usize) -> Option<(Key, Value)> {
        let numa = &self.nodes[node];
        let me = &numa.slots[slot];
        let helping = self.cfg.mode == HelpingMode::OnDeleteMinWait;
        me.status.store(true, Ordering::SeqCst);

        let backoff = Backoff::new();
        let compete_token = loop {
            if !me.status.load(Ordering::Acquire) {
                return Self::read_slot(me);
            }
            let v = numa.compete.load();
            if v.is_multiple_of(2) {
                if let Some(t) = numa.compete.try_lock_from(v) {
                    break t;
                }
            }
            if helping {
                self.help_upsert(tid);
            }
            backoff.snooze();
        };
        if !me.status.load(Ordering::Acquire) {
            // served by the previous leader between our check and the CAS
            numa.compete.unlock(compete_token);
            return Self::read_slot(me);
        }

        let backoff = Backoff::new();
        let coord_token = loop {
            if let Some(t) = self.coord.try_lock() {
                break t;
            }
            if helping {
                self.help_upsert(tid);
            }
            backoff.snooze();
        };

        self.coordinate(tid, numa);

        self.coord.unlock(coord_token);
        numa.compete.unlock(compete_token);
        debug_assert!(!me.status.load(Ordering::Relaxed));
        Self::read_slot(me)
    }

    fn read_slot(slot: &AnnounceSlot) -> Option<(Key, Value)> {
        if slot.empty.load(Ordering::Relaxed) {
            None
        } else {
            Some((slot.key.load(Ordering::Relaxed), slot.val.load(Ordering::Relaxed)))
        }
    }

    fn coordinate(&self, me: ThreadId, numa: &NumaNode) {
        let g = epoch::pin();
        let mut served = 0usize;
        for (idx, slot) in numa.slots.iter().enumerate() {
            if slot.status.load(Ordering::Acquire) {
                self.execute(me, numa.owners[idx], slot, &g);
                slot.status.store(false, Ordering::Release);
                served += 1;
            }
        }
        if self.cfg.instrumentation && served > 0 {
            // only the coordinator writes these
            self.sessions.fetch_add(1, Ordering::Relaxed);
            self.served.fetch_add(served as u64, Ordering::Relaxed);
            self.histogram[served].fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Serves one announced delete-min on behalf of the slot's owner.
    fn execute(&self, me: ThreadId, _owner: ThreadId, slot: &AnnounceSlot, g: &Guard) {
        let Some(d) = self.list.delete_min(g) else {
            slot.empty.store(true, Ordering::Relaxed);
            return;
        };
        slot.key.store(d.key, Ordering::Relaxed);
        slot.val.store(d.val, Ordering::Relaxed);
        slot.empty.store(false, Ordering::Relaxed);

        let w = &self.workers[d.tid];
        w.largest.invalidate(d.addr);
        let remaining = w.count.fetch_sub(1, Ordering::AcqRel) - 1;
        if remaining >= 2 {
            return;
        }

        // Keep at least two of the thread's elements in the list. The
        // coordinator is the only other party that touches its own heap, so
        // it skips the lock there.
        let token: Option<LockToken> = if d.tid == me {
            None
        } else {
            let backoff = Backoff::new();
            loop {
                if w.count.load(Ordering::Acquire) >= 2 {
                    return;
                }
                if let Some(t) = w.lock.try_lock() {
                    break Some(t);
                }
                backoff.snooze();
            }
        };
        let count = w.count.load(Ordering::Acquire);
        if count < 2 {
            if count == 0 {
                w.largest.clear();
            }
            // SAFETY: lock held, or we are the owner and sole coordinator.
            let heap = unsafe { self.heap_mut(d.tid) };
            if let Some((k, v)) = heap.delete_min() {
                self.list.insert(&w.largest, k, v, d.tid, g);
                w.count.fetch_add(1, Ordering::AcqRel);
            }
        }
        if let Some(t) = token {
            w.lock.unlock(t);
        }
    }

    /// Path counters summed and per thread, plus coordinator batch sizes.
    pub fn stats(&self) -> QueueStats {
        let per_thread: Vec<PathCounters> = self
            .workers
            .iter()
            .map(|w| PathCounters {
                fast: w.fast.load(Ordering::Relaxed),
                slower: w.slower.load(Ordering::Relaxed),
                slowest: w.slowest.load(Ordering::Relaxed),
            })
            .collect();
        let mut paths = PathCounters::default();
        for p in &per_thread {
            paths += *p;
        }
        QueueStats {
            paths,
            per_thread,
            batches: BatchStats {
                sessions: self.sessions.load(Ordering::Relaxed),
                served: self.served.load(Ordering::Relaxed),
                histogram: self.histogram.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
            },
        }
    }

    /// Returns the statistics and resets them. Counts from operations racing
    /// with the reset may land on either side.
    pub fn drain_stats(&self) -> QueueStats {
        let s = self.stats();
        for w in self.workers.iter() {
            w.fast.store(0, Ordering::Relaxed);
            w.slower.store(0, Ordering::Relaxed);
            w.slowest.store(0, Ordering::Relaxed);
        }
        self.sessions.store(0, Ordering::Relaxed);
        self.served.store(0, Ordering::Relaxed);
        for c in self.histogram.iter() {
            c.store(0, Ordering::Relaxed);
        }
        s
    }

    /// Snapshot of both levels. `&mut self` guarantees no handle is live.
    pub fn quiescent_view(&mut self) -> QuiescentView {
        let heaps: Vec<&WorkerHeap> = self.workers.iter().map(|w| unsafe { &*w.heap.get() }).collect();
        QuiescentView {
            list: self.list.snapshot(),
            heaps: heaps.iter().map(|h| h.iter().collect()).collect(),
            heap_order_violations: heaps.iter().map(|h| h.heap_order_violation()).collect(),
            counts: self.workers.iter().map(|w| w.count.load(Ordering::Relaxed)).collect(),
            largest: self.workers.iter().map(|w| w.largest.addr()).collect(),
            claim_conflicts: self.list.claim_conflicts(),
            cntr_min: self.cfg.cntr_min,
            cntr_max: self.cfg.cntr_max,
        }
    }

    /// Renders the leader list as `key(tid)` entries with deletion and moving marks.
    pub fn dump_leader(&self) -> String {
        self.list.dump()
    }

    /// Number of elements held, counting both levels. Quiescent use only.
    pub fn len(&mut self) -> usize {
        let v = self.quiescent_view();
        v.list.iter().filter(|n| !n.deleted && !n.moving).count() + v.heaps.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&mut self) -> bool {
        self.len() == 0
    }

    /// Overwrites a thread's leader counter. Exists so audits can be shown to
    /// catch a corrupted counter.
    #[doc(hidden)]
    pub fn debug_set_count(&mut self, tid: ThreadId, count: i64) {
        self.workers[tid].count.store(count, Ordering::Relaxed);
    }

    /// Pushes straight into a worker heap, bypassing the level choice.
    #[doc(hidden)]
    pub fn debug_heap_insert(&mut self, tid: ThreadId, key: Key, val: Value) {
        self.workers[tid].heap.get_mut().insert(key, val);
    }
}

/// A registered thread's access to a [`Pipq`]. Dropping it frees the id.
pub struct PipqHandle<'q> {
    q: &'q Pipq,
    tid: ThreadId,
    node: usize,
    slot: usize,
}

impl<'q> PipqHandle<'q> {
    pub fn tid(&self) -> ThreadId {
        self.tid
    }

    pub fn numa_node(&self) -> usize {
        self.node
    }

    pub fn queue(&self) -> &'q Pipq {
        self.q
    }

    pub fn insert(&mut self, key: Key, val: Value) -> InsertPath {
        self.q.insert(self.tid, key, val)
    }

    /// Removes a pair with the minimum key, or returns `None` when the queue
    /// held nothing at the linearization point.
    pub fn delete_min(&mut self) -> Option<(Key, Value)> {
        self.q.delete_min(self.tid, self.node, self.slot)
    }

    /// Promotes this thread's heap minimum if it is short of leader elements
    /// and its heap lock is free.
    pub fn help_upsert(&mut self) {
        self.q.help_upsert(self.tid)
    }

    /// Applies the topology's CPU affinity to the calling thread.
    pub fn pin(&self) -> Result<(), PinError> {
        topology::pin_current_thread(&self.q.topo, self.tid)
    }
}

impl Drop for PipqHandle<'_> {
    fn drop(&mut self) {
        self.q.workers[self.tid].registered.store(false, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::time::Duration;

    fn cfg(threads: usize) -> PipqConfig {
        PipqConfig {
            heap_segment_capacity: 8,
            threads,
            cntr_min: 2,
            cntr_max: 4,
            max_offset: 2,
            ..PipqConfig::default()
        }
    }

    fn wait_until(mut f: impl FnMut() -> bool) {
        let start = std::time::Instant::now();
        while !f() {
            assert!(start.elapsed() < Duration::from_secs(20), "condition never became true");
            std::thread::yield_now();
        }
    }

    #[test]
    fn first_insert_takes_slower_path() {
        let mut q = Pipq::new(cfg(1)).unwrap();
        {
            let mut h = q.register().unwrap();
            assert_eq!(h.insert(42, 1), InsertPath::Slower);
        }
        let v = q.quiescent_view();
        assert_eq!(v.counts, vec![1]);
        assert_eq!(v.list.len(), 1);
        assert!(v.heaps[0].is_empty());
    }

    #[test]
    fn key_above_heap_min_is_fast() {
        let mut q = Pipq::new(cfg(1)).unwrap();
        q.debug_heap_insert(0, 10, 0);
        q.debug_set_count(0, 2);
        {
            let mut h = q.register().unwrap();
            assert_eq!(h.insert(50, 0), InsertPath::Fast);
        }
        let v = q.quiescent_view();
        assert!(v.list.is_empty());
        assert_eq!(v.heaps[0].len(), 2);
    }

    #[test]
    fn full_counter_demotes_largest() {
        let mut q = Pipq::new(cfg(1)).unwrap();
        {
            let mut h = q.register().unwrap();
            for k in [5, 10, 15, 30] {
                assert_eq!(h.insert(k, k), InsertPath::Slower);
            }
            // counter is full and 20 < 30
            assert_eq!(h.insert(20, 20), InsertPath::Slowest);
            // 40 >= largest (20 now), heap empty
            assert_eq!(h.insert(40, 40), InsertPath::Fast);
        }
        let v = q.quiescent_view();
        let keys: Vec<_> = v.list.iter().map(|n| n.key).collect();
        assert_eq!(keys, vec![5, 10, 15, 20]);
        let mut heap: Vec<_> = v.heaps[0].iter().map(|e| e.key).collect();
        heap.sort();
        assert_eq!(heap, vec![30, 40]);
        assert_eq!(v.counts, vec![4]);
        assert_eq!(v.largest[0], Some(v.list[3].addr));
    }

    #[test]
    fn single_thread_delete_order() {
        let q = Pipq::new(cfg(1)).unwrap();
        let mut h = q.register().unwrap();
        assert_eq!(h.delete_min(), None);
        h.insert(9, 90);
        h.insert(5, 50);
        assert_eq!(h.delete_min(), Some((5, 50)));
        assert_eq!(h.delete_min(), Some((9, 90)));
        assert_eq!(h.delete_min(), None);
    }

    #[test]
    fn matches_sorted_oracle_single_thread() {
        let q = Pipq::new(cfg(1)).unwrap();
        let mut h = q.register().unwrap();
        let mut oracle: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        let mut x = 12345u64;
        for i in 0..20_000u64 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            if !(x >> 33).is_multiple_of(3) {
                let k = (x >> 40) % 500;
                h.insert(k, i);
                *oracle.entry((k, i)).or_default() += 1;
            } else {
                let got = h.delete_min();
                let min = oracle.keys().next().copied();
                match (got, min) {
                    (None, None) => {}
                    (Some((k, v)), Some((mk, _))) => {
                        assert_eq!(k, mk);
                        let e = oracle.get_mut(&(k, v)).expect("returned pair was inserted");
                        *e -= 1;
                        if *e == 0 {
                            oracle.remove(&(k, v));
                        }
                    }
                    other => panic!("mismatch {other:?}"),
                }
            }
        }
    }

    #[test]
    fn coordinator_upserts_from_other_heap() {
        let q = Pipq::new(cfg(2)).unwrap();
        let mut a = q.register_tid(0).unwrap();
        let mut b = q.register_tid(1).unwrap();
        for k in [1, 2, 17, 20] {
            b.insert(k, 0);
        }
        // counter is full and both keys are >= largest (20): heap only
        b.insert(25, 0);
        b.insert(30, 0);
        assert_eq!(a.delete_min(), Some((1, 0)));
        assert_eq!(a.delete_min(), Some((2, 0)));
        // counter dropped to 2, now to 1 -> upsert of the heap minimum
        assert_eq!(a.delete_min(), Some((17, 0)));
        drop((a, b));
        let mut q = q;
        let v = q.quiescent_view();
        assert_eq!(v.counts[1], 2);
        let keys: Vec<_> = v.list.iter().filter(|n| !n.deleted).map(|n| n.key).collect();
        assert_eq!(keys, vec![20, 25]);
    }

    #[test]
    fn coordinator_leaves_count_low_when_heap_empty() {
        let mut q = Pipq::new(cfg(2)).unwrap();
        {
            let mut a = q.register_tid(0).unwrap();
            let mut b = q.register_tid(1).unwrap();
            b.insert(3, 0);
            b.insert(4, 0);
            assert_eq!(a.delete_min(), Some((3, 0)));
        }
        assert_eq!(q.quiescent_view().counts[1], 1);
    }

    #[test]
    fn help_upsert_rules() {
        let mut q = Pipq::new(PipqConfig { cntr_min: 3, ..cfg(1) }).unwrap();
        q.debug_heap_insert(0, 12, 0);
        q.debug_heap_insert(0, 14, 0);
        q.debug_set_count(0, 2);
        {
            let mut h = q.register().unwrap();
            h.help_upsert();
        }
        let v = q.quiescent_view();
        assert_eq!(v.counts, vec![3]);
        assert_eq!(v.list.iter().map(|n| n.key).collect::<Vec<_>>(), vec![12]);
        {
            let mut h = q.register().unwrap();
            h.help_upsert(); // count == cntr_min
        }
        assert_eq!(q.quiescent_view().heaps[0].len(), 1);

        let mut q = Pipq::new(cfg(1)).unwrap();
        q.register().unwrap().help_upsert(); // empty heap
        assert_eq!(q.quiescent_view().counts, vec![0]);
    }

    #[test]
    fn designated_mode_promotes_on_insert() {
        let mut q = Pipq::new(PipqConfig {
            mode: HelpingMode::OnInsert,
            cntr_min: 3,
            ..cfg(1)
        })
        .unwrap();
        q.debug_heap_insert(0, 8, 0);
        q.debug_set_count(0, 1);
        {
            let mut h = q.register().unwrap();
            assert_eq!(h.insert(9, 0), InsertPath::Fast);
        }
        let v = q.quiescent_view();
        assert_eq!(v.counts, vec![2]);
        assert_eq!(v.list.iter().map(|n| n.key).collect::<Vec<_>>(), vec![8]);
    }

    #[test]
    fn registration() {
        let q = Pipq::new(cfg(2)).unwrap();
        let a = q.register().unwrap();
        assert_eq!(a.tid(), 0);
        assert_eq!(q.register_tid(0).err(), Some(RegisterError::Taken(0)));
        let b = q.register().unwrap();
        assert_eq!(q.register().err(), Some(RegisterError::Full(2)));
        assert_eq!(q.register_tid(5).err(), Some(RegisterError::OutOfRange(5)));
        drop(b);
        assert_eq!(q.register().unwrap().tid(), 1);
        drop(a);
    }

    #[test]
    fn register_on_node() {
        let q = Pipq::new(PipqConfig { numa_nodes: 2, ..cfg(4) }).unwrap();
        let h = q.register_on(1).unwrap();
        assert_eq!(h.tid(), 2);
        assert_eq!(h.numa_node(), 1);
        assert!(q.register_on(2).is_err());
    }

    #[test]
    fn one_coordinator_serves_node_in_slot_order() {
        let q = Pipq::new(cfg(4)).unwrap();
        {
            let mut h = q.register_tid(0).unwrap();
            for k in 1..=4 {
                h.insert(k, k * 10);
            }
        }
        let hold = q.coord.try_lock().unwrap();
        std::thread::scope(|s| {
            let joins: Vec<_> = (0..4)
                .map(|t| {
                    let q = &q;
                    s.spawn(move || {
                        let mut h = q.register_tid(t).unwrap();
                        h.delete_min()
                    })
                })
                .collect();
            wait_until(|| q.nodes[0].slots.iter().all(|s| s.status.load(Ordering::SeqCst)));
            wait_until(|| q.nodes[0].compete.is_locked());
            q.coord.unlock(hold);
            let got: Vec<_> = joins.into_iter().map(|j| j.join().unwrap()).collect();
            // slot index order is tid order here
            assert_eq!(got, vec![Some((1, 10)), Some((2, 20)), Some((3, 30)), Some((4, 40))]);
        });
        let s = q.stats().batches;
        assert_eq!(s.sessions, 1);
        assert_eq!(s.histogram[4], 1);
        assert_eq!(s.mean(), 4.0);
    }

    #[test]
    fn leaders_of_two_nodes_both_coordinate() {
        let q = Pipq::new(PipqConfig { numa_nodes: 2, ..cfg(2) }).unwrap();
        {
            let mut h = q.register_tid(0).unwrap();
            h.insert(1, 0);
            h.insert(2, 0);
        }
        let hold = q.coord.try_lock().unwrap();
        std::thread::scope(|s| {
            let joins: Vec<_> = (0..2)
                .map(|t| {
                    let q = &q;
                    s.spawn(move || q.register_tid(t).unwrap().delete_min())
                })
                .collect();
            wait_until(|| q.nodes.iter().all(|n| n.compete.is_locked()));
            q.coord.unlock(hold);
            let mut got: Vec<_> = joins.into_iter().map(|j| j.join().unwrap().unwrap().0).collect();
            got.sort();
            assert_eq!(got, vec![1, 2]);
        });
        let s = q.stats().batches;
        assert_eq!(s.sessions, 2);
        assert_eq!(s.histogram[1], 2);
    }

    #[test]
    fn coordinator_returns_early_when_owner_restores_count() {
        let q = Pipq::new(PipqConfig { cntr_min: 3, ..cfg(2) }).unwrap();
        let mut b = q.register_tid(1).unwrap();
        b.insert(1, 0);
        b.insert(2, 0);
        b.insert(50, 0);
        b.insert(60, 0);
        b.insert(55, 0); // slowest: 55 in, 60 demoted
        assert_eq!(q.workers[1].count.load(Ordering::SeqCst), 4);
        b.insert(70, 0); // fast
        // hold b's heap lock so the coordinator has to wait on it
        let token = q.workers[1].lock.try_lock().unwrap();
        std::thread::scope(|s| {
            let j = s.spawn(|| {
                let mut a = q.register_tid(0).unwrap();
                (a.delete_min(), a.delete_min(), a.delete_min())
            });
            wait_until(|| q.workers[1].count.load(Ordering::SeqCst) == 1);
            // play the owner's help-upsert while holding the lock
            let g = epoch::pin();
            let heap = unsafe { q.heap_mut(1) };
            let (k, v) = heap.delete_min().unwrap();
            q.list.insert(&q.workers[1].largest, k, v, 1, &g);
            q.workers[1].count.fetch_add(1, Ordering::AcqRel);
            drop(g);
            let got = j.join().unwrap();
            q.workers[1].lock.unlock(token);
            assert_eq!(got, (Some((1, 0)), Some((2, 0)), Some((50, 0))));
        });
        drop(b);
        // count restored to 2, the coordinator did not upsert a second element
        assert_eq!(q.workers[1].count.load(Ordering::SeqCst), 2);
        let mut q = q;
        let heap: Vec<_> = q.quiescent_view().heaps[1].iter().map(|e| e.key).collect();
        assert_eq!(heap, vec![70]);
    }

    #[test]
    fn concurrent_mixed_conserves_multiset() {
        let mut q = Pipq::new(PipqConfig { numa_nodes: 2, ..cfg(4) }).unwrap();
        type Pairs = Vec<(u64, u64)>;
        let results: Vec<(Pairs, Pairs)> = std::thread::scope(|s| {
            let joins: Vec<_> = (0..4u64)
                .map(|t| {
                    let q = &q;
                    s.spawn(move || {
                        let mut h = q.register_tid(t as usize).unwrap();
                        let mut ins = Vec::new();
                        let mut del = Vec::new();
                        let mut x = t + 1;
                        for i in 0..5000u64 {
                            x ^= x << 13;
                            x ^= x >> 7;
                            x ^= x << 17;
                            if x % 2 == 0 {
                                let k = x % 1000;
                                h.insert(k, t << 32 | i);
                                ins.push((k, t << 32 | i));
                            } else if let Some(p) = h.delete_min() {
                                del.push(p);
                            }
                        }
                        (ins, del)
                    })
                })
                .collect();
            joins.into_iter().map(|j| j.join().unwrap()).collect()
        });
        let v = q.quiescent_view();
        assert_eq!(v.claim_conflicts, 0);
        for (t, h) in v.heaps.iter().enumerate() {
            if !h.is_empty() {
                assert!(v.counts[t] >= 2, "thread {t} has heap elements but count {}", v.counts[t]);
            }
        }
        let mut ins: BTreeMap<(u64, u64), i64> = BTreeMap::new();
        for (i, d) in &results {
            for p in i {
                *ins.entry(*p).or_default() += 1;
            }
            for p in d {
                *ins.entry(*p).or_default() -= 1;
            }
        }
        let h = q.register().unwrap();
        let mut h = h;
        let mut last = 0;
        while let Some(p) = h.delete_min() {
            assert!(p.0 >= last);
            last = p.0;
            *ins.entry(p).or_default() -= 1;
        }
        assert!(ins.values().all(|&c| c == 0));
    }
}
