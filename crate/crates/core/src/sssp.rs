//! Single-source shortest paths driven by a concurrent priority queue.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crossbeam_utils::Backoff;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{ConcurrentPq, PqHandle};

pub const INF: u64 = u64::MAX;

/// Directed graph in compressed adjacency form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<u32>,
    /// Original id of each dense node index.
    ids: Vec<u64>,
}

impl Graph {
    /// Builds from dense `(u, v, w)` edges over nodes `0..n`.
    pub fn from_edges(n: usize, edges: &[(u32, u32, u32)]) -> Self {
        let mut offsets = vec![0usize; n + 1];
        for &(u, _, _) in edges {
            offsets[u as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0u32; edges.len()];
        let mut weights = vec![0u32; edges.len()];
        for &(u, v, w) in edges {
            let slot = &mut fill[u as usize];
            targets[*slot] = v;
            weights[*slot] = w;
            *slot += 1;
        }
        Graph {
            offsets,
            targets,
            weights,
            ids: (0..n as u64).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let r = self.offsets[u]..self.offsets[u + 1];
        self.targets[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&v, &w)| (v as usize, w as u64))
    }

    /// Original id of dense node `u`.
    pub fn original_id(&self, u: usize) -> u64 {
        self.ids[u]
    }

    /// Dense index of an original id.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Writes `u v w` lines using original ids.
    pub fn write_edge_list<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "# nodes: {} edges: {}", self.node_count(), self.edge_count())?;
        for u in 0..self.node_count() {
            for (v, wt) in self.neighbors(u) {
                writeln!(w, "{} {} {}", self.ids[u], self.ids[v], wt)?;
            }
        }
        w.flush()
    }
}

/// How edges without an explicit weight are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum WeightMode {
    #[default]
    Unit,
    /// Uniform in `[1, 255]` from a seeded stream, in file order.
    Random(u64),
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unit" {
            return Ok(WeightMode::Unit);
        }
        s.strip_prefix("random:")
            .and_then(|seed| seed.parse().ok())
            .map(WeightMode::Random)
            .ok_or_else(|| format!("expected unit or random:<seed>, got {s:?}"))
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightMode::Unit => f.write_str("unit"),
            WeightMode::Random(s) => write!(f, "random:{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Add the reverse of every edge.
    pub undirected: bool,
    pub weights: WeightMode,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: cannot parse {text:?}")]
    Malformed { line: usize, text: String },
    #[error("graph has no edges")]
    Empty,
    #[error("too many nodes for 32-bit indices")]
    TooLarge,
}

pub fn load_edge_list(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Graph, GraphError> {
    parse_edge_list(BufReader::new(File::open(path)?), opts)
}

/// Parses whitespace-separated `u v [w]` lines; `#` starts a comment line.
/// Node ids are remapped densely in order of first appearance.
pub fn parse_edge_list<R: BufRead>(r: R, opts: LoadOptions) -> Result<Graph, GraphError> {
    let mut remap: HashMap<u64, u32> = HashMap::new();
    let mut ids: Vec<u64> = Vec::new();
    let mut edges: Vec<(u32, u32, u32)> = Vec::new();
    let mut rng = match opts.weights {
        WeightMode::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        WeightMode::Unit => None,
    };
    let mut dense = |id: u64, ids: &mut Vec<u64>| -> Result<u32, GraphError> {
        if let Some(&d) = remap.get(&id) {
            return Ok(d);
        }
        let d = u32::try_from(ids.len()).map_err(|_| GraphError::TooLarge)?;
        remap.insert(id, d);
        ids.push(id);
        Ok(d)
    };
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('%') {
            continue;
        }
        let bad = || GraphError::Malformed {
            line: i + 1,
            text: line.clone(),
        };
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() < 2 || f.len() > 3 {
            return Err(bad());
        }
        let u: u64 = f[0].parse().map_err(|_| bad())?;
        let v: u64 = f[1].parse().map_err(|_| bad())?;
        let w: u32 = match f.get(2) {
            Some(s) => s.parse().map_err(|_| bad())?,
            None => match rng.as_mut() {
                Some(r) => r.gen_range(1..=255),
                None => 1,
            },
        };
        let du = dense(u, &mut ids)?;
        let dv = dense(v, &mut ids)?;
        edges.push((du, dv, w));
        if opts.undirected {
            edges.push((dv, du, w));
        }
    }
    if edges.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut g = Graph::from_edges(ids.len(), &edges);
    g.ids = ids;
    Ok(g)
}

/// `m` directed edges between uniform random endpoints, weights in `[1, max_w]`.
pub fn random_graph(n: usize, m: usize, max_w: u32, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<_> = (0..m)
        .map(|_| {
            (
                rng.gen_range(0..n as u32),
                rng.gen_range(0..n as u32),
                rng.gen_range(1..=max_w.max(1)),
            )
        })
        .collect();
    Graph::from_edges(n, &edges)
}

/// Writes a road-network-like edge list: a `width x height` grid with about
/// 10% of the street segments missing, listed in both directions, unweighted.
pub fn write_road_grid<W: Write>(w: W, width: u64, height: u64, seed: u64) -> std::io::Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BufWriter::new(w);
    writeln!(w, "# Synthetic road grid {width}x{height}")?;
    writeln!(w, "# FromNodeId\tToNodeId")?;
    let id = |x: u64, y: u64| y * width + x;
    let mut count = 0;
    for y in 0..height {
        for x in 0..width {
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < width && ny < height && rng.gen_bool(0.9) {
                    writeln!(w, "{}\t{}", id(x, y), id(nx, ny))?;
                    writeln!(w, "{}\t{}", id(nx, ny), id(x, y))?;
                    count += 2;
                }
            }
        }
    }
    w.flush()?;
    Ok(count)
}

/// Sequential Dijkstra with a binary heap; unreachable nodes get [`INF`].
pub fn dijkstra(g: &Graph, source: usize) -> Vec<u64> {
    let mut dist = vec![INF; g.node_count()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0;
    heap.push(Reverse((0u64, source)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for (v, w) in g.neighbors(u) {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    dist
}

/// Sum of finite distances, wrapping.
pub fn checksum(dist: &[u64]) -> u64 {
    dist.iter().filter(|&&d| d != INF).fold(0u64, |a, &d| a.wrapping_add(d))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SsspResult {
    #[serde(skip)]
    pub dist: Vec<u64>,
    pub threads: usize,
    pub seconds: f64,
    /// Entries taken from the queue.
    pub processed: u64,
    /// Entries skipped because a shorter distance was already known.
    pub stale: u64,
    pub reached: usize,
    pub checksum: u64,
}

impl SsspResult {
    /// Processed entries per reached node.
    pub fn work_inflation(&self) -> f64 {
        self.processed as f64 / self.reached.max(1) as f64
    }
}

/// Parallel label-correcting Dijkstra. Threads repeatedly take the closest
/// pending `(distance, node)`, skip it if stale, and relax its edges with an
/// atomic minimum. `q` must accept thread ids `0..threads` and start empty.
pub fn sssp_parallel<Q: ConcurrentPq>(g: &Graph, source: usize, threads: usize, q: &Q) -> SsspResult {
    assert!(source < g.node_count(), "source {source} out of range");
    assert!(threads > 0);
    let dist: Vec<AtomicU64> = (0..g.node_count()).map(|_| AtomicU64::new(INF)).collect();
    // inserted but not yet fully processed
    let in_flight = AtomicU64::new(1);
    dist[source].store(0, Ordering::Relaxed);
    q.handle(0).insert(0, source as u64);

    let start = Instant::now();
    let per_thread: Vec<(u64, u64)> = std::thread::scope(|s| {
        let joins: Vec<_> = (0..threads)
            .map(|t| {
                let (dist, in_flight) = (&dist, &in_flight);
                s.spawn(move || {
                    let mut h = q.handle(t);
                    let (mut processed, mut stale) = (0u64, 0u64);
                    let backoff = Backoff::new();
                    loop {
                        match h.delete_min() {
                            Some((d, u)) => {
                                backoff.reset();
                                let u = u as usize;
                                processed += 1;
                                if d > dist[u].load(Ordering::Acquire) {
                                    stale += 1;
                                } else {
                                    for (v, w) in g.neighbors(u) {
                                        let nd = d + w;
                                        if dist[v].fetch_min(nd, Ordering::AcqRel) > nd {
                                            in_flight.fetch_add(1, Ordering::AcqRel);
                                            h.insert(nd, v as u64);
                                        }
                                    }
                                }
                                in_flight.fetch_sub(1, Ordering::AcqRel);
                            }
                            None => {
                                if in_flight.load(Ordering::Acquire) == 0 {
                                    break;
                                }
                                backoff.snooze();
                            }
                        }
                    }
                    (processed, stale)
                })
            })
            .collect();
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    });
    let seconds = start.elapsed().as_secs_f64();
    let dist: Vec<u64> = dist.into_iter().map(AtomicU64::into_inner).collect();
    SsspResult {
        threads,
        seconds,
        processed: per_thread.iter().map(|p| p.0).sum(),
        stale: per_thread.iter().map(|p| p.1).sum(),
        reached: dist.iter().filter(|&&d| d != INF).count(),
        checksum: checksum(&dist),
        dist,
    }
}
