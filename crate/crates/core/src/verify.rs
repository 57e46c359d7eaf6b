//! Reference priority queue, operation histories with a linearizability
//! checker, and audits of a quiescent [`Pipq`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Barrier, Mutex};

use crossbeam_utils::CachePadded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Key, ThreadId, Value};
use crate::queue::{Pipq, QuiescentView};

/// Sequential priority queue over a multiset of pairs. Equal keys are
/// interchangeable: any pair with the minimal key is a legal delete-min.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqPq {
    items: BTreeMap<(Key, Value), usize>,
    len: usize,
}

impl SeqPq {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, key: Key, val: Value) {
        *self.items.entry((key, val)).or_default() += 1;
        self.len += 1;
    }

    pub fn min_key(&self) -> Option<Key> {
        self.items.keys().next().map(|&(k, _)| k)
    }

    /// Removes the smallest pair.
    pub fn delete_min(&mut self) -> Option<(Key, Value)> {
        let p = *self.items.keys().next()?;
        self.remove(p);
        Some(p)
    }

    /// Removes one copy of `pair` if present.
    pub fn remove(&mut self, pair: (Key, Value)) -> bool {
        match self.items.get_mut(&pair) {
            Some(c) => {
                *c -= 1;
                if *c == 0 {
                    self.items.remove(&pair);
                }
                self.len -= 1;
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, pair: (Key, Value)) -> bool {
        self.items.contains_key(&pair)
    }

    /// Applies a concurrent queue's delete-min result: legal iff it is `None`
    /// on an empty queue, or a present pair with the minimal key.
    pub fn accept_delete_min(&mut self, got: Option<(Key, Value)>) -> bool {
        match got {
            None => self.is_empty(),
            Some(p) => self.min_key() == Some(p.0) && self.remove(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Invoke,
    Respond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Insert,
    DeleteMin,
}

/// One invoke or respond step. `pair` is the inserted pair for inserts, the
/// returned pair for delete-min responses (`None` meaning EMPTY), and `None`
/// for delete-min invocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryEvent {
    pub ts: u64,
    pub tid: ThreadId,
    pub phase: Phase,
    pub op: OpKind,
    pub pair: Option<(Key, Value)>,
}

impl fmt::Display for HistoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phase = match self.phase {
            Phase::Invoke => "invoke",
            Phase::Respond => "respond",
        };
        let op = match self.op {
            OpKind::Insert => "insert",
            OpKind::DeleteMin => "delmin",
        };
        write!(f, "{} {} {} {} ", self.ts, self.tid, phase, op)?;
        match (self.pair, self.op, self.phase) {
            (Some((k, v)), _, _) => write!(f, "{k} {v}"),
            (None, OpKind::DeleteMin, Phase::Respond) => f.write_str("EMPTY -"),
            (None, _, _) => f.write_str("- -"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HistoryError {
    #[error("history shard of thread {tid} is full ({capacity} events)")]
    ShardFull { tid: ThreadId, capacity: usize },
    #[error("thread {0} has no history shard")]
    UnknownThread(ThreadId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("thread {tid}: {msg}")]
    Malformed { tid: ThreadId, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Concurrent event recorder with one bounded shard per thread. Timestamps
/// come from one shared counter, so they respect real-time order.
pub struct HistoryRecorder {
    clock: AtomicU64,
    capacity: usize,
    shards: Vec<CachePadded<Mutex<Vec<HistoryEvent>>>>,
}

impl HistoryRecorder {
    pub fn new(threads: usize, capacity_per_thread: usize) -> Self {
        HistoryRecorder {
            clock: AtomicU64::new(0),
            capacity: capacity_per_thread,
            shards: (0..threads)
                .map(|_| CachePadded::new(Mutex::new(Vec::with_capacity(capacity_per_thread))))
                .collect(),
        }
    }

    pub fn record(
        &self,
        tid: ThreadId,
        phase: Phase,
        op: OpKind,
        pair: Option<(Key, Value)>,
    ) -> Result<u64, HistoryError> {
        let shard = self.shards.get(tid).ok_or(HistoryError::UnknownThread(tid))?;
        let mut shard = shard.lock().unwrap();
        if shard.len() >= self.capacity {
            return Err(HistoryError::ShardFull {
                tid,
                capacity: self.capacity,
            });
        }
        let ts = self.clock.fetch_add(1, Ordering::SeqCst);
        shard.push(HistoryEvent { ts, tid, phase, op, pair });
        Ok(ts)
    }

    /// Merges the shards in timestamp order.
    pub fn finish(self) -> History {
        let mut events: Vec<HistoryEvent> = self
            .shards
            .into_iter()
            .flat_map(|s| CachePadded::into_inner(s).into_inner().unwrap())
            .collect();
        events.sort_by_key(|e| e.ts);
        History { events }
    }
}

/// A completed operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operation {
    pub tid: ThreadId,
    pub invoke: u64,
    pub respond: u64,
    pub kind: OperationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperationKind {
    Insert(Key, Value),
    DeleteMin(Option<(Key, Value)>),
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OperationKind::Insert(k, v) => write!(f, "t{} insert({k},{v}) [{},{}]", self.tid, self.invoke, self.respond),
            OperationKind::DeleteMin(Some((k, v))) => {
                write!(f, "t{} delmin->({k},{v}) [{},{}]", self.tid, self.invoke, self.respond)
            }
            OperationKind::DeleteMin(None) => write!(f, "t{} delmin->EMPTY [{},{}]", self.tid, self.invoke, self.respond),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    /// Pairs invocations with responses per thread. Every invocation must be
    /// answered before the same thread invokes again.
    pub fn operations(&self) -> Result<Vec<Operation>, HistoryError> {
        let mut open: HashMap<ThreadId, HistoryEvent> = HashMap::new();
        let mut ops = Vec::new();
        let mut events = self.events.clone();
        events.sort_by_key(|e| e.ts);
        for e in events {
            match e.phase {
                Phase::Invoke => {
                    if open.insert(e.tid, e).is_some() {
                        return Err(HistoryError::Malformed {
                            tid: e.tid,
                            msg: format!("invoke at {} while an operation is open", e.ts),
                        });
                    }
                }
                Phase::Respond => {
                    let inv = open.remove(&e.tid).ok_or_else(|| HistoryError::Malformed {
                        tid: e.tid,
                        msg: format!("response at {} without invocation", e.ts),
                    })?;
                    if inv.op != e.op {
                        return Err(HistoryError::Malformed {
                            tid: e.tid,
                            msg: format!("response at {} does not match invocation at {}", e.ts, inv.ts),
                        });
                    }
                    let kind = match e.op {
                        OpKind::Insert => {
                            let p = inv.pair.ok_or_else(|| HistoryError::Malformed {
                                tid: e.tid,
                                msg: format!("insert at {} lacks a pair", inv.ts),
                            })?;
                            OperationKind::Insert(p.0, p.1)
                        }
                        OpKind::DeleteMin => OperationKind::DeleteMin(e.pair),
                    };
                    ops.push(Operation {
                        tid: e.tid,
                        invoke: inv.ts,
                        respond: e.ts,
                        kind,
                    });
                }
            }
        }
        if let Some((&tid, e)) = open.iter().next() {
            return Err(HistoryError::Malformed {
                tid,
                msg: format!("invocation at {} never answered", e.ts),
            });
        }
        ops.sort_by_key(|o| o.invoke);
        Ok(ops)
    }

    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            writeln!(w, "{e}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.dump(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, HistoryError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| HistoryError::Io(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            events.push(parse_event(line).map_err(|msg| HistoryError::Parse { line: i + 1, msg })?);
        }
        Ok(History { events })
    }

    pub fn from_text(s: &str) -> Result<Self, HistoryError> {
        Self::load(s.as_bytes())
    }
}

fn parse_event(line: &str) -> Result<HistoryEvent, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 6 {
        return Err(format!("expected 6 fields, got {}", f.len()));
    }
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| format!("bad {what} {s:?}"));
    let ts = num(f[0], "timestamp")?;
    let tid = num(f[1], "thread id")? as ThreadId;
    let phase = match f[2] {
        "invoke" => Phase::Invoke,
        "respond" => Phase::Respond,
        p => return Err(format!("bad phase {p:?}")),
    };
    let op = match f[3] {
        "insert" => OpKind::Insert,
        "delmin" => OpKind::DeleteMin,
        o => return Err(format!("bad op {o:?}")),
    };
    let pair = match (f[4], f[5]) {
        ("-", "-") | ("EMPTY", "-") => None,
        (k, v) => Some((num(k, "key")?, num(v, "value")?)),
    };
    if op == OpKind::Insert && pair.is_none() {
        return Err("insert without a pair".into());
    }
    Ok(HistoryEvent { ts, tid, phase, op, pair })
}

/// Outcome of [`check_linearizable`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Operation indices in a legal sequential order.
    Linearizable(Vec<usize>),
    /// No legal order exists. `longest` is the longest legal prefix found and
    /// `blocked` the operations none of which could extend it.
    NotLinearizable { longest: Vec<usize>, blocked: Vec<usize> },
    /// The search gave up after exploring `explored` states.
    BudgetExceeded { explored: u64 },
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, Verdict::Linearizable(_))
    }
}

pub const MAX_CHECK_OPS: usize = 128;

/// Searches for a sequential order of `ops` that respects real time and the
/// semantics of [`SeqPq`]. Depth-first over the frontier of minimal pending
/// operations, memoizing visited sets of linearized operations (the queue
/// state is a function of that set).
pub fn check_linearizable(ops: &[Operation], budget: u64) -> Verdict {
    assert!(ops.len() <= MAX_CHECK_OPS, "checker supports at most {MAX_CHECK_OPS} operations");
    let n = ops.len();
    let full: u128 = if n == 128 { u128::MAX } else { (1u128 << n) - 1 };
    let mut seen: HashSet<u128> = HashSet::new();
    let mut explored = 0u64;
    let mut order = Vec::with_capacity(n);
    let mut longest = Vec::new();
    let mut blocked_at_longest = Vec::new();
    let mut state = SeqPq::new();

    // (done set, candidate list, next candidate index)
    struct Frame {
        done: u128,
        cands: Vec<usize>,
        next: usize,
    }

    let candidates = |done: u128| -> Vec<usize> {
        let horizon = (0..n)
            .filter(|&i| done & (1 << i) == 0)
            .map(|i| ops[i].respond)
            .min()
            .unwrap_or(u64::MAX);
        (0..n)
            .filter(|&i| done & (1 << i) == 0 && ops[i].invoke < horizon)
            .collect()
    };

    let apply = |state: &mut SeqPq, op: &Operation| -> bool {
        match op.kind {
            OperationKind::Insert(k, v) => {
                state.insert(k, v);
                true
            }
            OperationKind::DeleteMin(r) => state.accept_delete_min(r),
        }
    };
    let undo = |state: &mut SeqPq, op: &Operation| match op.kind {
        OperationKind::Insert(k, v) => {
            state.remove((k, v));
        }
        OperationKind::DeleteMin(Some((k, v))) => state.insert(k, v),
        OperationKind::DeleteMin(None) => {}
    };

    if n == 0 {
        return Verdict::Linearizable(vec![]);
    }
    let mut stack = vec![Frame {
        done: 0,
        cands: candidates(0),
        next: 0,
    }];
    seen.insert(0);
    while let Some(top) = stack.last_mut() {
        if top.next >= top.cands.len() {
            if order.len() > longest.len() || longest.is_empty() {
                longest = order.clone();
                blocked_at_longest = top.cands.clone();
            }
            stack.pop();
            if let Some(i) = order.pop() {
                undo(&mut state, &ops[i]);
            }
            continue;
        }
        let i = top.cands[top.next];
        top.next += 1;
        let done = top.done | (1 << i);
        if seen.contains(&done) {
            continue;
        }
        explored += 1;
        if explored > budget {
            return Verdict::BudgetExceeded { explored };
        }
        if !apply(&mut state, &ops[i]) {
            continue;
        }
        order.push(i);
        if done == full {
            return Verdict::Linearizable(order);
        }
        seen.insert(done);
        stack.push(Frame {
            done,
            cands: candidates(done),
            next: 0,
        });
    }
    Verdict::NotLinearizable {
        longest,
        blocked: blocked_at_longest,
    }
}

/// Net multiset of inserted minus deleted pairs, for conservation checks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConservationLedger {
    net: HashMap<(Key, Value), i64>,
    inserted: u64,
    deleted: u64,
}

impl ConservationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inserted(&mut self, key: Key, val: Value) {
        *self.net.entry((key, val)).or_default() += 1;
        self.inserted += 1;
    }

    pub fn deleted(&mut self, key: Key, val: Value) {
        *self.net.entry((key, val)).or_default() -= 1;
        self.deleted += 1;
    }

    pub fn merge(&mut self, other: ConservationLedger) {
        for (p, c) in other.net {
            *self.net.entry(p).or_default() += c;
        }
        self.inserted += other.inserted;
        self.deleted += other.deleted;
    }

    pub fn insert_count(&self) -> u64 {
        self.inserted
    }

    pub fn delete_count(&self) -> u64 {
        self.deleted
    }

    /// Compares the expected residual with `residual`. Returns
    /// `(missing, unexpected)` pair counts.
    pub fn compare(&self, residual: impl IntoIterator<Item = (Key, Value)>) -> (u64, u64) {
        let mut net = self.net.clone();
        for p in residual {
            *net.entry(p).or_default() -= 1;
        }
        let mut missing = 0u64;
        let mut extra = 0u64;
        for c in net.values() {
            if *c > 0 {
                missing += *c as u64;
            } else {
                extra += (-*c) as u64;
            }
        }
        (missing, extra)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// A thread's leader element has a larger key than its heap minimum.
    LevelOrder { tid: ThreadId, leader_key: Key, heap_min: Key },
    /// Non-empty heap with fewer than two leader elements.
    LowCounter { tid: ThreadId, count: i64, heap_len: usize },
    DeletedAfterActive { index: usize },
    UnsortedSuffix { index: usize, prev: Key, key: Key },
    BothMarks { index: usize },
    LeftoverMoving { index: usize },
    ClaimConflicts(u64),
    CounterMismatch { tid: ThreadId, counter: i64, actual: usize },
    CounterOutOfRange { tid: ThreadId, counter: i64 },
    LargestHandle { tid: ThreadId, expected: Option<usize>, actual: Option<usize> },
    HeapOrder { tid: ThreadId, index: usize },
    UnknownOwner { index: usize, tid: ThreadId },
    Conservation { missing: u64, unexpected: u64 },
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::LevelOrder { .. } => "level_order",
            Violation::LowCounter { .. } => "low_counter",
            Violation::DeletedAfterActive { .. } => "deleted_after_active",
            Violation::UnsortedSuffix { .. } => "unsorted_suffix",
            Violation::BothMarks { .. } => "both_marks",
            Violation::LeftoverMoving { .. } => "leftover_moving",
            Violation::ClaimConflicts(_) => "claim_conflicts",
            Violation::CounterMismatch { .. } => "counter_mismatch",
            Violation::CounterOutOfRange { .. } => "counter_out_of_range",
            Violation::LargestHandle { .. } => "largest_handle",
            Violation::HeapOrder { .. } => "heap_order",
            Violation::UnknownOwner { .. } => "unknown_owner",
            Violation::Conservation { .. } => "conservation",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.name())?;
        match self {
            Violation::LevelOrder { tid, leader_key, heap_min } => {
                write!(f, "thread {tid} has {leader_key} in the list above heap minimum {heap_min}")
            }
            Violation::LowCounter { tid, count, heap_len } => {
                write!(f, "thread {tid} has {heap_len} heap elements but only {count} in the list")
            }
            Violation::DeletedAfterActive { index } => write!(f, "deleted node at position {index} follows an active one"),
            Violation::UnsortedSuffix { index, prev, key } => write!(f, "key {key} at position {index} follows {prev}"),
            Violation::BothMarks { index } => write!(f, "node at position {index} is deleted and moving"),
            Violation::LeftoverMoving { index } => write!(f, "moving node still linked at position {index}"),
            Violation::ClaimConflicts(n) => write!(f, "{n} nodes claimed by both delete paths"),
            Violation::CounterMismatch { tid, counter, actual } => {
                write!(f, "thread {tid} counter {counter} but {actual} active nodes")
            }
            Violation::CounterOutOfRange { tid, counter } => write!(f, "thread {tid} counter {counter} out of range"),
            Violation::LargestHandle { tid, expected, actual } => {
                write!(f, "thread {tid} largest handle {actual:?}, expected {expected:?}")
            }
            Violation::HeapOrder { tid, index } => write!(f, "thread {tid} heap order broken at {index}"),
            Violation::UnknownOwner { index, tid } => write!(f, "node at position {index} owned by unknown thread {tid}"),
            Violation::Conservation { missing, unexpected } => {
                write!(f, "{missing} pairs missing, {unexpected} unexpected")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub active_nodes: usize,
    pub deleted_nodes: usize,
    pub heap_elements: usize,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn residual(&self) -> usize {
        self.active_nodes + self.heap_elements
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "audit: {} active, {} deleted, {} in heaps, {} violation(s)",
            self.active_nodes,
            self.deleted_nodes,
            self.heap_elements,
            self.violations.len()
        )?;
        for v in &self.violations {
            write!(f, "\n  {v}")?;
        }
        Ok(())
    }
}

/// Checks a quiescent queue's structure. Pass a ledger to also check that the
/// residual contents equal inserts minus deletes.
pub fn audit_quiescent(q: &mut Pipq, ledger: Option<&ConservationLedger>) -> AuditReport {
    audit_view(&q.quiescent_view(), ledger)
}

pub fn audit_view(v: &QuiescentView, ledger: Option<&ConservationLedger>) -> AuditReport {
    let threads = v.heaps.len();
    let mut out = Vec::new();
    let mut seen_active = false;
    let mut prev_key: Option<Key> = None;
    let mut active_per_thread = vec![0usize; threads];
    let mut max_leader: Vec<Option<Key>> = vec![None; threads];
    let mut last_node: Vec<Option<usize>> = vec![None; threads];
    let mut deleted = 0;

    if v.claim_conflicts > 0 {
        out.push(Violation::ClaimConflicts(v.claim_conflicts));
    }
    for (i, n) in v.list.iter().enumerate() {
        if n.deleted && n.moving {
            out.push(Violation::BothMarks { index: i });
        }
        if n.deleted {
            deleted += 1;
            if seen_active {
                out.push(Violation::DeletedAfterActive { index: i });
            }
            continue;
        }
        if n.moving {
            out.push(Violation::LeftoverMoving { index: i });
            continue;
        }
        seen_active = true;
        if let Some(p) = prev_key {
            if n.key < p {
                out.push(Violation::UnsortedSuffix { index: i, prev: p, key: n.key });
            }
        }
        prev_key = Some(n.key);
        if n.tid >= threads {
            out.push(Violation::UnknownOwner { index: i, tid: n.tid });
            continue;
        }
        active_per_thread[n.tid] += 1;
        max_leader[n.tid] = Some(max_leader[n.tid].map_or(n.key, |m: Key| m.max(n.key)));
        last_node[n.tid] = Some(n.addr);
    }

    for t in 0..threads {
        let heap = &v.heaps[t];
        let heap_min = heap.iter().map(|e| e.key).min();
        if let (Some(lk), Some(hm)) = (max_leader[t], heap_min) {
            if lk > hm {
                out.push(Violation::LevelOrder { tid: t, leader_key: lk, heap_min: hm });
            }
        }
        let c = v.counts[t];
        if !heap.is_empty() && c < 2 {
            out.push(Violation::LowCounter { tid: t, count: c, heap_len: heap.len() });
        }
        if c < 0 || c as usize > v.cntr_max {
            out.push(Violation::CounterOutOfRange { tid: t, counter: c });
        }
        if c != active_per_thread[t] as i64 {
            out.push(Violation::CounterMismatch {
                tid: t,
                counter: c,
                actual: active_per_thread[t],
            });
        }
        if v.largest[t] != last_node[t] {
            out.push(Violation::LargestHandle {
                tid: t,
                expected: last_node[t],
                actual: v.largest[t],
            });
        }
        if let Some(i) = v.heap_order_violations[t] {
            out.push(Violation::HeapOrder { tid: t, index: i });
        }
    }

    let active_nodes = active_per_thread.iter().sum();
    let heap_elements = v.heaps.iter().map(Vec::len).sum();
    if let Some(ledger) = ledger {
        let residual = v
            .list
            .iter()
            .filter(|n| !n.deleted && !n.moving)
            .map(|n| (n.key, n.val))
            .chain(v.heaps.iter().flatten().map(|e| (e.key, e.val)));
        let (missing, unexpected) = ledger.compare(residual);
        if missing > 0 || unexpected > 0 {
            out.push(Violation::Conservation { missing, unexpected });
        }
    }

    AuditReport {
        violations: out,
        active_nodes,
        deleted_nodes: deleted,
        heap_elements,
    }
}

/// Parameters of one randomized concurrent history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistorySpec {
    pub ops_per_thread: usize,
    /// Probability that an operation is an insert.
    pub insert_prob: f64,
    /// Keys are uniform in `[0, key_range)`; small ranges force duplicates.
    pub key_range: Key,
    /// Probability of yielding just after invoke and just before respond, so
    /// intervals overlap even on one CPU.
    pub yield_prob: f64,
    pub seed: u64,
}

impl HistorySpec {
    pub fn new(ops_per_thread: usize, seed: u64) -> Self {
        HistorySpec {
            ops_per_thread,
            insert_prob: 0.55,
            key_range: 12,
            yield_prob: 0.5,
            seed,
        }
    }
}

/// Runs a random workload on `q` with one thread per queue slot and records
/// every operation. Values are `tid << 32 | op index`, so pairs are unique.
pub fn record_history(q: &Pipq, spec: &HistorySpec) -> History {
    let threads = q.threads();
    let rec = HistoryRecorder::new(threads, 2 * spec.ops_per_thread);
    let barrier = Barrier::new(threads);
    std::thread::scope(|s| {
        for t in 0..threads {
            let (rec, barrier) = (&rec, &barrier);
            s.spawn(move || {
                let mut h = q.register_tid(t).expect("free slot");
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(t as u64);
                let jitter = |rng: &mut ChaCha8Rng| {
                    if rng.gen_bool(spec.yield_prob) {
                        std::thread::yield_now();
                    }
                };
                barrier.wait();
                for i in 0..spec.ops_per_thread {
                    if rng.gen_bool(spec.insert_prob) {
                        let p = (rng.gen_range(0..spec.key_range.max(1)), (t as u64) << 32 | i as u64);
                        rec.record(t, Phase::Invoke, OpKind::Insert, Some(p)).unwrap();
                        jitter(&mut rng);
                        h.insert(p.0, p.1);
                        jitter(&mut rng);
                        rec.record(t, Phase::Respond, OpKind::Insert, Some(p)).unwrap();
                    } else {
                        rec.record(t, Phase::Invoke, OpKind::DeleteMin, None).unwrap();
                        jitter(&mut rng);
                        let got = h.delete_min();
                        jitter(&mut rng);
                        rec.record(t, Phase::Respond, OpKind::DeleteMin, got).unwrap();
                    }
                }
            });
        }
    });
    rec.finish()
}

/// True if operations of two different threads overlap in time.
pub fn has_overlap(ops: &[Operation]) -> bool {
    ops.iter()
        .any(|a| ops.iter().any(|b| a.tid != b.tid && a.invoke < b.respond && b.invoke < a.respond))
}

/// Runs `total_ops` operations split over all queue slots, inserting with
/// probability `insert_pct`% and keys in `[1, key_max]`, and returns the
/// merged ledger of everything inserted and deleted.
pub fn stress_campaign(q: &Pipq, total_ops: u64, insert_pct: u32, key_max: Key, seed: u64) -> ConservationLedger {
    let threads = q.threads();
    let share = |t: usize| total_ops / threads as u64 + u64::from((t as u64) < total_ops % threads as u64);
    let barrier = Barrier::new(threads);
    let ledgers: Vec<ConservationLedger> = std::thread::scope(|s| {
        let joins: Vec<_> = (0..threads)
            .map(|t| {
                let barrier = &barrier;
                s.spawn(move || {
                    let mut h = q.register_tid(t).expect("free slot");
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(t as u64);
                    let mut l = ConservationLedger::new();
                    barrier.wait();
                    for i in 0..share(t) {
                        if rng.gen_range(0..100) < insert_pct {
                            let k = rng.gen_range(1..=key_max.max(1));
                            let v = (t as u64) << 40 | i;
                            h.insert(k, v);
                            l.inserted(k, v);
                        } else if let Some((k, v)) = h.delete_min() {
                            l.deleted(k, v);
                        }
                    }
                    l
                })
            })
            .collect();
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    });
    let mut out = ConservationLedger::new();
    for l in ledgers {
        out.merge(l);
    }
    out
}
