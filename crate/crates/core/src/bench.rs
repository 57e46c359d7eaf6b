//! Workload drivers and metrics: timed mixed runs, designated inserter and
//! deleter threads, and two-phase fill/drain runs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{InsertPath, Key, PathCounters, ThreadId, Value};
use crate::queue::{Pipq, PipqHandle, QueueStats};
use crate::topology::{self, TopologyMap};
use crate::verify::ConservationLedger;

/// A queue the harness can drive.
pub trait ConcurrentPq: Sync {
    type Handle<'a>: PqHandle
    where
        Self: 'a;

    fn name(&self) -> &'static str;

    /// Per-thread access for thread id `tid`.
    fn handle(&self, tid: ThreadId) -> Self::Handle<'_>;

    /// Statistics gathered since the last drain, reset afterwards.
    fn drain_stats(&self) -> Option<QueueStats> {
        None
    }

    fn topology(&self) -> Option<&TopologyMap> {
        None
    }
}

pub trait PqHandle: Send {
    fn insert(&mut self, key: Key, val: Value);
    fn delete_min(&mut self) -> Option<(Key, Value)>;
}

impl ConcurrentPq for Pipq {
    type Handle<'a> = PipqHandle<'a>;

    fn name(&self) -> &'static str {
        "pipq"
    }

    fn handle(&self, tid: ThreadId) -> PipqHandle<'_> {
        self.register_tid(tid)
            .unwrap_or_else(|e| panic!("cannot register thread {tid}: {e}"))
    }

    fn drain_stats(&self) -> Option<QueueStats> {
        Some(Pipq::drain_stats(self))
    }

    fn topology(&self) -> Option<&TopologyMap> {
        Some(Pipq::topology(self))
    }
}

impl PqHandle for PipqHandle<'_> {
    fn insert(&mut self, key: Key, val: Value) {
        let _: InsertPath = PipqHandle::insert(self, key, val);
    }

    fn delete_min(&mut self) -> Option<(Key, Value)> {
        PipqHandle::delete_min(self)
    }
}

/// Binary heap behind one global mutex; the comparison baseline.
#[derive(Debug, Default)]
pub struct CoarseLockPq {
    heap: Mutex<BinaryHeap<Reverse<(Key, Value)>>>,
}

impl CoarseLockPq {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.heap.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct CoarseHandle<'a>(&'a CoarseLockPq);

impl ConcurrentPq for CoarseLockPq {
    type Handle<'a> = CoarseHandle<'a>;

    fn name(&self) -> &'static str {
        "coarse_lock"
    }

    fn handle(&self, _tid: ThreadId) -> CoarseHandle<'_> {
        CoarseHandle(self)
    }
}

impl PqHandle for CoarseHandle<'_> {
    fn insert(&mut self, key: Key, val: Value) {
        self.0.heap.lock().unwrap().push(Reverse((key, val)));
    }

    fn delete_min(&mut self) -> Option<(Key, Value)> {
        self.0.heap.lock().unwrap().pop().map(|Reverse(p)| p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Each operation is an insert with probability `insert_pct`%.
    Mixed { insert_pct: u32 },
    /// A fraction `delete_fraction` of the threads only delete, the rest only insert.
    Designated { delete_fraction: f64 },
    /// Insert `inserts` elements, then delete `deletes`.
    Phased { inserts: u64, deletes: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Timed length of one trial (mixed and designated).
    pub duration: Duration,
    /// Untimed run before each trial.
    pub warmup: Duration,
    pub trials: u32,
    /// Keys are uniform in `[1, key_max]`.
    pub key_max: Key,
    pub seed: u64,
    /// Elements inserted before warmup.
    pub prefill: u64,
    /// Time every k-th operation.
    pub latency_every: u32,
}

/// Key range for large-machine runs.
pub const FULL_KEY_MAX: Key = 100_000_000;
/// Default key range; keeps heaps cache-friendly on small machines.
pub const DESK_KEY_MAX: Key = 1_000_000;

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind) -> Self {
        WorkloadSpec {
            kind,
            duration: Duration::from_secs(5),
            warmup: Duration::from_secs(1),
            trials: 3,
            key_max: DESK_KEY_MAX,
            seed: 1,
            prefill: 0,
            latency_every: 64,
        }
    }

    pub fn mixed(insert_pct: u32) -> Self {
        Self::new(WorkloadKind::Mixed { insert_pct })
    }

    pub fn designated(delete_fraction: f64) -> Self {
        Self::new(WorkloadKind::Designated { delete_fraction })
    }

    pub fn phased(inserts: u64, deletes: u64) -> Self {
        Self::new(WorkloadKind::Phased { inserts, deletes })
    }

    pub fn label(&self) -> String {
        match self.kind {
            WorkloadKind::Mixed { insert_pct } => format!("mixed-{insert_pct}"),
            WorkloadKind::Designated { delete_fraction } => format!("designated-{delete_fraction:.4}"),
            WorkloadKind::Phased { inserts, deletes } => format!("phased-{inserts}-{deletes}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BenchError {
    #[error("need at least {need} threads, got {got}")]
    TooFewThreads { need: usize, got: usize },
    #[error("insert percentage {0} is above 100")]
    BadInsertPct(u32),
    #[error("delete fraction {0} must lie in (0, 1)")]
    BadFraction(String),
    #[error("phased run deletes {deletes} but inserts only {inserts}")]
    DeletesExceedInserts { inserts: u64, deletes: u64 },
    #[error("phased run needs a positive insert count")]
    NoInserts,
    #[error("workload kind does not match the runner")]
    WrongKind,
    #[error("{0}")]
    Output(String),
}

/// Deleter count for a designated run: `round(d * n)` clamped so at least one
/// thread of each role exists.
pub fn designated_split(delete_fraction: f64, threads: usize) -> Result<(usize, usize), BenchError> {
    if threads < 2 {
        return Err(BenchError::TooFewThreads { need: 2, got: threads });
    }
    if !(delete_fraction > 0.0 && delete_fraction < 1.0) {
        return Err(BenchError::BadFraction(delete_fraction.to_string()));
    }
    let deleters = ((delete_fraction * threads as f64).round() as usize).clamp(1, threads - 1);
    Ok((threads - deleters, deleters))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencySummary {
    pub fn from_samples(mut s: Vec<f64>) -> Self {
        if s.is_empty() {
            return Self::default();
        }
        s.sort_by(|a, b| a.total_cmp(b));
        let pick = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
        LatencySummary {
            samples: s.len(),
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            p50_us: pick(0.5),
            p90_us: pick(0.9),
            p99_us: pick(0.99),
            max_us: *s.last().unwrap(),
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub queue: String,
    pub workload: String,
    pub threads: usize,
    pub trial: u32,
    pub seconds: f64,
    pub inserts: u64,
    pub deletes: u64,
    pub empty_deletes: u64,
    pub mops: f64,
    pub insert_mops: f64,
    pub delete_mops: f64,
    pub fast: u64,
    pub slower: u64,
    pub slowest: u64,
    pub batch_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PathFractions {
    pub fast: f64,
    pub slower: f64,
    pub slowest: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub queue: String,
    pub workload: String,
    pub threads: usize,
    /// Million operations per second, averaged over trials.
    pub throughput_mops: f64,
    pub insert_mops: f64,
    pub delete_mops: f64,
    pub insert_latency: LatencySummary,
    pub delete_latency: LatencySummary,
    pub path_counts: PathCounters,
    pub paths: PathFractions,
    pub coordinator_batch_mean: f64,
    pub batch_histogram: Vec<u64>,
    /// Phased runs: per-phase throughput.
    pub phase1_mops: Option<f64>,
    pub phase2_mops: Option<f64>,
    pub trials: Vec<TrialMetrics>,
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, w: W, header: bool) -> Result<(), BenchError> {
        write_csv(std::slice::from_ref(self), w, header)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Writes the per-trial rows of several reports as one CSV table.
pub fn write_csv<W: Write>(reports: &[MetricsReport], w: W, header: bool) -> Result<(), BenchError> {
    let mut wr = csv::WriterBuilder::new().has_headers(header).from_writer(w);
    for r in reports {
        for t in &r.trials {
            wr.serialize(t).map_err(|e| BenchError::Output(e.to_string()))?;
        }
    }
    wr.flush().map_err(|e| BenchError::Output(e.to_string()))
}

#[derive(Default)]
struct ThreadTally {
    inserts: u64,
    deletes: u64,
    empty: u64,
    ins_lat: Vec<f64>,
    del_lat: Vec<f64>,
    busy: Duration,
}

fn rng_for(seed: u64, trial: u32, tid: ThreadId) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((trial as u64) << 32) | tid as u64);
    r
}

/// Deterministic operation stream of one thread in a mixed run: `Some(key)`
/// is an insert, `None` a delete-min.
pub fn mixed_stream(seed: u64, trial: u32, tid: ThreadId, insert_pct: u32, key_max: Key) -> impl Iterator<Item = Option<Key>> {
    let mut rng = rng_for(seed, trial, tid);
    std::iter::repeat_with(move || {
        if rng.gen_range(0..100u32) < insert_pct {
            Some(rng.gen_range(1..=key_max))
        } else {
            None
        }
    })
}

fn value_of(tid: ThreadId, i: u64) -> Value {
    ((tid as u64) << 40) | i
}

fn maybe_pin<Q: ConcurrentPq>(q: &Q, tid: ThreadId) {
    if let Some(map) = q.topology() {
        if tid < map.threads() {
            let _ = topology::pin_current_thread(map, tid);
        }
    }
}

fn prefill<Q: ConcurrentPq>(q: &Q, count: u64, threads: usize, seed: u64, key_max: Key) {
    if count == 0 {
        return;
    }
    std::thread::scope(|s| {
        for t in 0..threads {
            s.spawn(move || {
                let mut h = q.handle(t);
                let mut rng = rng_for(seed ^ 0x5eed, u32::MAX, t);
                let share = count / threads as u64 + u64::from((t as u64) < count % threads as u64);
                for i in 0..share {
                    h.insert(rng.gen_range(1..=key_max), value_of(t, (1 << 39) | i));
                }
            });
        }
    });
}

struct TrialResult {
    tallies: Vec<ThreadTally>,
    seconds: f64,
    stats: Option<QueueStats>,
}

/// Runs one timed trial. `role(tid)` gives the thread's insert percentage.
fn timed_trial<Q: ConcurrentPq>(q: &Q, threads: usize, spec: &WorkloadSpec, trial: u32, role: &(dyn Fn(ThreadId) -> u32 + Sync)) -> TrialResult {
    let warm = AtomicBool::new(spec.warmup.is_zero());
    let stop = AtomicBool::new(false);
    let barrier = Barrier::new(threads + 1);
    let every = spec.latency_every.max(1) as u64;

    let (tallies, seconds, stats) = std::thread::scope(|s| {
        let joins: Vec<_> = (0..threads)
            .map(|t| {
                let (warm, stop, barrier) = (&warm, &stop, &barrier);
                s.spawn(move || {
                    maybe_pin(q, t);
                    let mut h = q.handle(t);
                    let pct = role(t);
                    let mut ops = mixed_stream(spec.seed, trial, t, pct, spec.key_max);
                    let mut i = 0u64;
                    barrier.wait();
                    while !warm.load(Ordering::Relaxed) {
                        match ops.next().unwrap() {
                            Some(k) => h.insert(k, value_of(t, i)),
                            None => {
                                h.delete_min();
                            }
                        }
                        i += 1;
                    }
                    barrier.wait();
                    barrier.wait();
                    let mut tally = ThreadTally::default();
                    let start = Instant::now();
                    let mut n = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        let op = ops.next().unwrap();
                        let timed = n.is_multiple_of(every);
                        let t0 = timed.then(Instant::now);
                        match op {
                            Some(k) => {
                                h.insert(k, value_of(t, i));
                                tally.inserts += 1;
                                if let Some(t0) = t0 {
                                    tally.ins_lat.push(t0.elapsed().as_secs_f64() * 1e6);
                                }
                            }
                            None => {
                                if h.delete_min().is_none() {
                                    tally.empty += 1;
                                }
                                tally.deletes += 1;
                                if let Some(t0) = t0 {
                                    tally.del_lat.push(t0.elapsed().as_secs_f64() * 1e6);
                                }
                            }
                        }
                        i += 1;
                        n += 1;
                    }
                    tally.busy = start.elapsed();
                    tally
                })
            })
            .collect();
        barrier.wait();
        if !spec.warmup.is_zero() {
            std::thread::sleep(spec.warmup);
            warm.store(true, Ordering::Relaxed);
        }
        barrier.wait();
        q.drain_stats();
        let start = Instant::now();
        barrier.wait();
        std::thread::sleep(spec.duration);
        stop.store(true, Ordering::Relaxed);
        let tallies: Vec<ThreadTally> = joins.into_iter().map(|j| j.join().unwrap()).collect();
        let seconds = start.elapsed().as_secs_f64();
        (tallies, seconds, q.drain_stats())
    });
    TrialResult { tallies, seconds, stats }
}

fn summarize(q_name: &str, spec: &WorkloadSpec, threads: usize, trials: Vec<TrialResult>) -> MetricsReport {
    let mut rows = Vec::new();
    let mut ins_lat = Vec::new();
    let mut del_lat = Vec::new();
    let mut paths = PathCounters::default();
    let mut hist: Vec<u64> = Vec::new();
    let (mut sessions, mut served) = (0u64, 0u64);
    for (i, r) in trials.into_iter().enumerate() {
        let inserts: u64 = r.tallies.iter().map(|t| t.inserts).sum();
        let deletes: u64 = r.tallies.iter().map(|t| t.deletes).sum();
        let empty: u64 = r.tallies.iter().map(|t| t.empty).sum();
        let secs = r.seconds.max(1e-9);
        let (p, bm) = match &r.stats {
            Some(s) => {
                sessions += s.batches.sessions;
                served += s.batches.served;
                if hist.len() < s.batches.histogram.len() {
                    hist.resize(s.batches.histogram.len(), 0);
                }
                for (a, b) in hist.iter_mut().zip(&s.batches.histogram) {
                    *a += b;
                }
                (s.paths, s.batches.mean())
            }
            None => (PathCounters::default(), 0.0),
        };
        paths += p;
        for t in r.tallies {
            ins_lat.extend(t.ins_lat);
            del_lat.extend(t.del_lat);
        }
        rows.push(TrialMetrics {
            queue: q_name.to_string(),
            workload: spec.label(),
            threads,
            trial: i as u32,
            seconds: secs,
            inserts,
            deletes,
            empty_deletes: empty,
            mops: (inserts + deletes) as f64 / secs / 1e6,
            insert_mops: inserts as f64 / secs / 1e6,
            delete_mops: deletes as f64 / secs / 1e6,
            fast: p.fast,
            slower: p.slower,
            slowest: p.slowest,
            batch_mean: bm,
        });
    }
    let n = rows.len().max(1) as f64;
    let (f, sl, st) = paths.fractions();
    MetricsReport {
        queue: q_name.to_string(),
        workload: spec.label(),
        threads,
        throughput_mops: rows.iter().map(|r| r.mops).sum::<f64>() / n,
        insert_mops: rows.iter().map(|r| r.insert_mops).sum::<f64>() / n,
        delete_mops: rows.iter().map(|r| r.delete_mops).sum::<f64>() / n,
        insert_latency: LatencySummary::from_samples(ins_lat),
        delete_latency: LatencySummary::from_samples(del_lat),
        path_counts: paths,
        paths: PathFractions { fast: f, slower: sl, slowest: st },
        coordinator_batch_mean: if sessions == 0 { 0.0 } else { served as f64 / sessions as f64 },
        batch_histogram: hist,
        phase1_mops: None,
        phase2_mops: None,
        trials: rows,
    }
}

/// Timed mixed workload. `make` builds a fresh queue for every trial.
pub fn run_mixed<Q: ConcurrentPq>(make: impl Fn() -> Q, spec: &WorkloadSpec, threads: usize) -> Result<MetricsReport, BenchError> {
    let WorkloadKind::Mixed { insert_pct } = spec.kind else {
        return Err(BenchError::WrongKind);
    };
    if insert_pct > 100 {
        return Err(BenchError::BadInsertPct(insert_pct));
    }
    if threads == 0 {
        return Err(BenchError::TooFewThreads { need: 1, got: 0 });
    }
    let mut name = "";
    let mut results = Vec::new();
    for trial in 0..spec.trials.max(1) {
        let q = make();
        name = q.name();
        prefill(&q, spec.prefill, threads, spec.seed, spec.key_max);
        results.push(timed_trial(&q, threads, spec, trial, &|_| insert_pct));
    }
    Ok(summarize(name, spec, threads, results))
}

/// Timed run where deleter threads only delete and the rest only insert.
/// Build PIPQ instances in insert-side helping mode for this workload.
pub fn run_designated<Q: ConcurrentPq>(make: impl Fn() -> Q, spec: &WorkloadSpec, threads: usize) -> Result<MetricsReport, BenchError> {
    let WorkloadKind::Designated { delete_fraction } = spec.kind else {
        return Err(BenchError::WrongKind);
    };
    let (inserters, _) = designated_split(delete_fraction, threads)?;
    let mut name = "";
    let mut results = Vec::new();
    for trial in 0..spec.trials.max(1) {
        let q = make();
        name = q.name();
        prefill(&q, spec.prefill, threads, spec.seed, spec.key_max);
        results.push(timed_trial(&q, threads, spec, trial, &|t| if t < inserters { 100 } else { 0 }));
    }
    Ok(summarize(name, spec, threads, results))
}

/// Result of [`run_phased`].
pub struct PhasedOutcome {
    pub report: MetricsReport,
    /// Inserted minus deleted pairs, when tracking was requested.
    pub ledger: Option<ConservationLedger>,
    /// Delete-min calls that returned EMPTY in phase 2.
    pub empty_deletes: u64,
}

/// Inserts `inserts` keys split among the threads, then (after a barrier)
/// deletes `deletes`. Runs once on `q`, which is left holding the residue.
pub fn run_phased<Q: ConcurrentPq>(q: &Q, spec: &WorkloadSpec, threads: usize, track: bool) -> Result<PhasedOutcome, BenchError> {
    let WorkloadKind::Phased { inserts, deletes } = spec.kind else {
        return Err(BenchError::WrongKind);
    };
    if inserts == 0 {
        return Err(BenchError::NoInserts);
    }
    if deletes > inserts {
        return Err(BenchError::DeletesExceedInserts { inserts, deletes });
    }
    if threads == 0 {
        return Err(BenchError::TooFewThreads { need: 1, got: 0 });
    }
    let share = |total: u64, t: usize| total / threads as u64 + u64::from((t as u64) < total % threads as u64);
    let barrier = Barrier::new(threads + 1);
    let every = spec.latency_every.max(1) as u64;
    q.drain_stats();

    struct Out {
        ledger: Option<ConservationLedger>,
        tally: ThreadTally,
    }

    let (outs, p1, p2) = std::thread::scope(|s| {
        let joins: Vec<_> = (0..threads)
            .map(|t| {
                let barrier = &barrier;
                s.spawn(move || {
                    maybe_pin(q, t);
                    let mut h = q.handle(t);
                    let mut rng = rng_for(spec.seed, 0, t);
                    let mut ledger = track.then(ConservationLedger::new);
                    let mut tally = ThreadTally::default();
                    barrier.wait();
                    for i in 0..share(inserts, t) {
                        let k = rng.gen_range(1..=spec.key_max);
                        let v = value_of(t, i);
                        let t0 = (i % every == 0).then(Instant::now);
                        h.insert(k, v);
                        if let Some(t0) = t0 {
                            tally.ins_lat.push(t0.elapsed().as_secs_f64() * 1e6);
                        }
                        if let Some(l) = ledger.as_mut() {
                            l.inserted(k, v);
                        }
                        tally.inserts += 1;
                    }
                    barrier.wait();
                    barrier.wait();
                    for i in 0..share(deletes, t) {
                        let t0 = (i % every == 0).then(Instant::now);
                        let got = h.delete_min();
                        if let Some(t0) = t0 {
                            tally.del_lat.push(t0.elapsed().as_secs_f64() * 1e6);
                        }
                        match got {
                            Some((k, v)) => {
                                if let Some(l) = ledger.as_mut() {
                                    l.deleted(k, v);
                                }
                            }
                            None => tally.empty += 1,
                        }
                        tally.deletes += 1;
                    }
                    barrier.wait();
                    Out { ledger, tally }
                })
            })
            .collect();
        barrier.wait();
        let t1 = Instant::now();
        barrier.wait();
        let p1 = t1.elapsed().as_secs_f64();
        barrier.wait();
        let t2 = Instant::now();
        barrier.wait();
        let p2 = t2.elapsed().as_secs_f64();
        let outs: Vec<Out> = joins.into_iter().map(|j| j.join().unwrap()).collect();
        (outs, p1, p2)
    });

    let stats = q.drain_stats();
    let mut ledger = track.then(ConservationLedger::new);
    let mut tallies = Vec::new();
    for o in outs {
        if let (Some(all), Some(l)) = (ledger.as_mut(), o.ledger) {
            all.merge(l);
        }
        tallies.push(o.tally);
    }
    let empty_deletes = tallies.iter().map(|t| t.empty).sum();
    let mut report = summarize(
        q.name(),
        spec,
        threads,
        vec![TrialResult {
            tallies,
            seconds: p1 + p2,
            stats,
        }],
    );
    report.phase1_mops = Some(inserts as f64 / p1.max(1e-9) / 1e6);
    report.phase2_mops = Some(deletes as f64 / p2.max(1e-9) / 1e6);
    Ok(PhasedOutcome {
        report,
        ledger,
        empty_deletes,
    })
}

/// Sequential, untimed replay of a single thread's mixed stream against `q`,
/// returning each delete-min result in order.
pub fn replay_mixed<H: PqHandle>(h: &mut H, seed: u64, insert_pct: u32, key_max: Key, ops: usize) -> Vec<Option<(Key, Value)>> {
    let mut out = Vec::new();
    for (i, op) in mixed_stream(seed, 0, 0, insert_pct, key_max).take(ops).enumerate() {
        match op {
            Some(k) => h.insert(k, value_of(0, i as u64)),
            None => out.push(h.delete_min()),
        }
    }
    out
}
