//! NUMA node discovery and the thread-to-node map.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::ThreadId;

/// How threads are placed on nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pinning {
    /// Pin each thread to one CPU, filling node 0's CPUs first.
    NodeByNode,
    /// No affinity; every thread is on node 0.
    None,
    /// Emulated nodes of contiguous thread blocks; never touches OS affinity.
    Synthetic(usize),
}

/// Value of the `--numa` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumaSpec {
    Auto,
    Off,
    Synthetic(usize),
}

impl FromStr for NumaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "auto" => Ok(NumaSpec::Auto),
            "off" | "none" => Ok(NumaSpec::Off),
            _ => {
                let n = s
                    .strip_prefix("synthetic:")
                    .ok_or_else(|| format!("expected auto, off or synthetic:<n>, got {s:?}"))?;
                match n.parse::<usize>() {
                    Ok(n) if n > 0 => Ok(NumaSpec::Synthetic(n)),
                    _ => Err(format!("bad synthetic node count {n:?}")),
                }
            }
        }
    }
}

impl fmt::Display for NumaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumaSpec::Auto => f.write_str("auto"),
            NumaSpec::Off => f.write_str("off"),
            NumaSpec::Synthetic(n) => write!(f, "synthetic:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TopologyMap {
    pub numa_nodes: usize,
    pub node_of_thread: Vec<usize>,
    /// Index of the thread inside its node's announce array.
    pub slot_of_thread: Vec<usize>,
    pub threads_per_node: Vec<usize>,
    pub pinning: Pinning,
    /// CPU assigned to each thread under `NodeByNode`.
    pub cpu_of_thread: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PinError {
    #[error("thread affinity is not supported here")]
    Unsupported,
    #[error("thread id {0} is not in the topology map")]
    UnknownThread(ThreadId),
}

impl TopologyMap {
    fn from_assignment(node_of_thread: Vec<usize>, numa_nodes: usize, pinning: Pinning, cpus: Vec<Option<usize>>) -> Self {
        let mut threads_per_node = vec![0; numa_nodes];
        let mut slot_of_thread = Vec::with_capacity(node_of_thread.len());
        for &n in &node_of_thread {
            slot_of_thread.push(threads_per_node[n]);
            threads_per_node[n] += 1;
        }
        TopologyMap {
            numa_nodes,
            node_of_thread,
            slot_of_thread,
            threads_per_node,
            pinning,
            cpu_of_thread: cpus,
        }
    }

    /// Every thread on node 0, no pinning.
    pub fn single(threads: usize) -> Self {
        Self::from_assignment(vec![0; threads], 1, Pinning::None, vec![None; threads])
    }

    /// `nodes` emulated nodes, each holding a contiguous block of threads.
    pub fn synthetic(nodes: usize, threads: usize) -> Self {
        let nodes = nodes.max(1);
        let assign = (0..threads).map(|t| t * nodes / threads.max(1)).collect();
        Self::from_assignment(assign, nodes, Pinning::Synthetic(nodes), vec![None; threads])
    }

    /// Pins threads to CPUs in node order. `node_cpus[i]` lists node i's CPUs.
    /// Threads beyond the CPU count wrap around.
    pub fn node_by_node(node_cpus: &[Vec<usize>], threads: usize) -> Self {
        let order: Vec<(usize, usize)> = node_cpus
            .iter()
            .enumerate()
            .flat_map(|(n, cpus)| cpus.iter().map(move |&c| (n, c)))
            .collect();
        if order.is_empty() {
            return Self::single(threads);
        }
        let (nodes, cpus) = (0..threads).map(|t| order[t % order.len()]).unzip::<_, _, Vec<_>, Vec<_>>();
        // keep node indices dense over the nodes actually used
        let mut used: Vec<usize> = nodes.clone();
        used.sort_unstable();
        used.dedup();
        let dense = nodes
            .iter()
            .map(|n| used.binary_search(n).unwrap())
            .collect();
        Self::from_assignment(
            dense,
            used.len().max(1),
            Pinning::NodeByNode,
            cpus.into_iter().map(Some).collect(),
        )
    }

    pub fn from_spec(spec: NumaSpec, threads: usize) -> Self {
        match spec {
            NumaSpec::Auto => detect_topology(threads),
            NumaSpec::Off => Self::single(threads),
            NumaSpec::Synthetic(n) => Self::synthetic(n, threads),
        }
    }

    pub fn threads(&self) -> usize {
        self.node_of_thread.len()
    }

    pub fn node_of(&self, tid: ThreadId) -> usize {
        self.node_of_thread[tid]
    }

    pub fn slot_of(&self, tid: ThreadId) -> usize {
        self.slot_of_thread[tid]
    }

    /// Threads mapped to `node`, in slot order.
    pub fn members(&self, node: usize) -> Vec<ThreadId> {
        (0..self.threads()).filter(|&t| self.node_of_thread[t] == node).collect()
    }
}

impl fmt::Display for TopologyMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.pinning {
            Pinning::NodeByNode => "node_by_node".to_string(),
            Pinning::None => "none".to_string(),
            Pinning::Synthetic(n) => format!("synthetic({n})"),
        };
        write!(f, "{} node(s) {:?} pinning={}", self.numa_nodes, self.threads_per_node, mode)
    }
}

/// Parses a sysfs cpulist such as `0-3,8,10-11`.
pub fn parse_cpulist(s: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (a.parse::<usize>().ok()?, b.parse::<usize>().ok()?);
                if a > b {
                    return None;
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().ok()?),
        }
    }
    Some(out)
}

fn read_node_cpus(root: &Path) -> Option<Vec<Vec<usize>>> {
    let mut nodes: Vec<(usize, Vec<usize>)> = Vec::new();
    for entry in fs::read_dir(root).ok()? {
        let entry = entry.ok()?;
        let name = entry.file_name();
        let Some(idx) = name.to_str().and_then(|n| n.strip_prefix("node")).and_then(|n| n.parse().ok()) else {
            continue;
        };
        let list = fs::read_to_string(entry.path().join("cpulist")).ok()?;
        let cpus = parse_cpulist(&list)?;
        if !cpus.is_empty() {
            nodes.push((idx, cpus));
        }
    }
    nodes.sort();
    (!nodes.is_empty()).then(|| nodes.into_iter().map(|(_, c)| c).collect())
}

/// Reads the machine's nodes from sysfs. Falls back to one node holding every
/// CPU the process may use.
pub fn detect_topology(threads: usize) -> TopologyMap {
    let allowed: Option<Vec<usize>> =
        core_affinity::get_core_ids().map(|ids| ids.into_iter().map(|c| c.id).collect());
    let mut nodes = read_node_cpus(Path::new("/sys/devices/system/node")).unwrap_or_default();
    if let Some(allowed) = &allowed {
        for cpus in &mut nodes {
            cpus.retain(|c| allowed.contains(c));
        }
        nodes.retain(|c| !c.is_empty());
    }
    if nodes.is_empty() {
        match allowed {
            Some(cpus) if !cpus.is_empty() => nodes.push(cpus),
            _ => return TopologyMap::single(threads),
        }
    }
    TopologyMap::node_by_node(&nodes, threads)
}

/// Applies the map's affinity for `tid` to the calling thread.
pub fn pin_current_thread(map: &TopologyMap, tid: ThreadId) -> Result<(), PinError> {
    if tid >= map.threads() {
        return Err(PinError::UnknownThread(tid));
    }
    match map.pinning {
        Pinning::None | Pinning::Synthetic(_) => Ok(()),
        Pinning::NodeByNode => {
            let Some(cpu) = map.cpu_of_thread[tid] else {
                return Ok(());
            };
            if core_affinity::set_for_current(core_affinity::CoreId { id: cpu }) {
                Ok(())
            } else {
                log::warn!("could not pin thread {tid} to cpu {cpu}; continuing unpinned");
                Err(PinError::Unsupported)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consistent(m: &TopologyMap) {
        assert_eq!(m.threads_per_node.len(), m.numa_nodes);
        assert_eq!(m.threads_per_node.iter().sum::<usize>(), m.threads());
        for n in 0..m.numa_nodes {
            let members = m.members(n);
            assert_eq!(members.len(), m.threads_per_node[n]);
            for (slot, t) in members.into_iter().enumerate() {
                assert_eq!(m.slot_of(t), slot);
            }
        }
        assert!(m.node_of_thread.iter().all(|&n| n < m.numa_nodes));
    }

    #[test]
    fn single_node() {
        let m = TopologyMap::single(5);
        assert_eq!(m.numa_nodes, 1);
        assert_eq!(m.threads_per_node, vec![5]);
        consistent(&m);
    }

    #[test]
    fn synthetic_four_by_eight() {
        let m = TopologyMap::synthetic(4, 8);
        assert_eq!(m.node_of_thread, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(m.threads_per_node, vec![2; 4]);
        assert_eq!(m.pinning, Pinning::Synthetic(4));
        consistent(&m);
    }

    #[test]
    fn synthetic_uneven() {
        for t in 1..20 {
            for n in 1..6 {
                consistent(&TopologyMap::synthetic(n, t));
            }
        }
    }

    #[test]
    fn node_by_node_fills_first_node() {
        let m = TopologyMap::node_by_node(&[vec![0, 1, 2], vec![3, 4, 5]], 4);
        assert_eq!(m.node_of_thread, vec![0, 0, 0, 1]);
        assert_eq!(m.cpu_of_thread, vec![Some(0), Some(1), Some(2), Some(3)]);
        consistent(&m);
        let m = TopologyMap::node_by_node(&[vec![0, 1, 2], vec![3, 4, 5]], 2);
        assert_eq!(m.numa_nodes, 1);
        consistent(&m);
    }

    #[test]
    fn detection_is_consistent() {
        let m = detect_topology(6);
        assert!(m.numa_nodes >= 1);
        consistent(&m);
    }

    #[test]
    fn pinning_none_and_synthetic_are_noops() {
        assert_eq!(pin_current_thread(&TopologyMap::single(2), 1), Ok(()));
        assert_eq!(pin_current_thread(&TopologyMap::synthetic(2, 2), 1), Ok(()));
        assert_eq!(
            pin_current_thread(&TopologyMap::single(2), 2),
            Err(PinError::UnknownThread(2))
        );
    }

    #[test]
    fn cpulist_parsing() {
        assert_eq!(parse_cpulist("0-3,8,10-11\n"), Some(vec![0, 1, 2, 3, 8, 10, 11]));
        assert_eq!(parse_cpulist(""), Some(vec![]));
        assert_eq!(parse_cpulist("3-1"), None);
        assert_eq!(parse_cpulist("x"), None);
    }

    #[test]
    fn numa_flag() {
        assert_eq!("auto".parse(), Ok(NumaSpec::Auto));
        assert_eq!("off".parse(), Ok(NumaSpec::Off));
        assert_eq!("synthetic:4".parse(), Ok(NumaSpec::Synthetic(4)));
        assert!("synthetic:0".parse::<NumaSpec>().is_err());
        assert!("four".parse::<NumaSpec>().is_err());
        assert_eq!(NumaSpec::Synthetic(3).to_string(), "synthetic:3");
    }
}
