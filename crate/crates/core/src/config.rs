//! Queue configuration, key/value domain types and insert-path counters.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

/// Priority of an element. Smaller keys are served first.
///
/// Every `u64` is a valid user key. The leader list identifies its head and
/// tail sentinels by address, so no key value is reserved for them; they
/// behave as `-inf` and `+inf` respectively.
pub type Key = u64;

/// Opaque payload carried unchanged from insert to delete-min.
pub type Value = u64;

/// Index of a registered thread, in `[0, threads)`.
pub type ThreadId = usize;

/// Which operation carries the promotion work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HelpingMode {
    /// Threads blocked in delete-min promote their own heap minimum while waiting.
    #[default]
    OnDeleteMinWait,
    /// Inserts run the promotion step before releasing their heap lock. Used
    /// when threads are designated to only insert or only delete.
    OnInsert,
}

impl FromStr for HelpingMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on_delete_min_wait" | "delete-min" | "default" => Ok(HelpingMode::OnDeleteMinWait),
            "on_insert" | "insert" | "designated" => Ok(HelpingMode::OnInsert),
            other => Err(ConfigError::BadValue {
                key: "mode".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cntr_min_below_two: cntr_min must be at least 2 (got {0})")]
    CntrMinBelowTwo(usize),
    #[error("cntr_min_exceeds_cntr_max: cntr_min {min} is larger than cntr_max {max}")]
    CntrMinExceedsCntrMax { min: usize, max: usize },
    #[error("heap_segment_capacity_zero: worker heap segments need a positive capacity")]
    ZeroHeapCapacity,
    #[error("threads_zero: at least one thread is required")]
    ZeroThreads,
    #[error("max_offset_zero: max_offset must be positive")]
    ZeroMaxOffset,
    #[error("numa_nodes_zero: at least one NUMA node is required")]
    ZeroNumaNodes,
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
}

impl ConfigError {
    /// Short machine-readable name of the violated constraint.
    pub fn name(&self) -> &'static str {
        match self {
            ConfigError::CntrMinBelowTwo(_) => "cntr_min_below_two",
            ConfigError::CntrMinExceedsCntrMax { .. } => "cntr_min_exceeds_cntr_max",
            ConfigError::ZeroHeapCapacity => "heap_segment_capacity_zero",
            ConfigError::ZeroThreads => "threads_zero",
            ConfigError::ZeroMaxOffset => "max_offset_zero",
            ConfigError::ZeroNumaNodes => "numa_nodes_zero",
            ConfigError::UnknownKey(_) => "unknown_key",
            ConfigError::BadValue { .. } => "bad_value",
            ConfigError::Syntax { .. } => "syntax",
        }
    }
}

/// Construction-time parameters of a [`Pipq`](crate::Pipq).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipqConfig {
    /// Capacity of the first worker-heap segment.
    pub heap_segment_capacity: usize,
    /// Number of threads that may register with the queue.
    pub threads: usize,
    /// Below this many leader-list elements a waiting thread promotes from its heap.
    pub cntr_min: usize,
    /// A thread never keeps more than this many elements in the leader list.
    pub cntr_max: usize,
    /// Length of the logically deleted prefix that triggers a batch unlink.
    pub max_offset: usize,
    /// NUMA nodes used for the two-level coordinator election.
    pub numa_nodes: usize,
    pub mode: HelpingMode,
    /// Collect insert-path and coordinator batch statistics.
    pub instrumentation: bool,
}

impl Default for PipqConfig {
    fn default() -> Self {
        PipqConfig {
            heap_segment_capacity: 1024,
            threads: 4,
            cntr_min: 10,
            cntr_max: 100,
            max_offset: 32,
            numa_nodes: 1,
            mode: HelpingMode::OnDeleteMinWait,
            instrumentation: true,
        }
    }
}

impl PipqConfig {
    pub fn with_threads(threads: usize) -> Self {
        PipqConfig {
            threads,
            ..Default::default()
        }
    }

    /// Checks every constraint, reporting the first one violated.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.heap_segment_capacity == 0 {
            return Err(ConfigError::ZeroHeapCapacity);
        }
        if self.threads == 0 {
            return Err(ConfigError::ZeroThreads);
        }
        if self.cntr_min < 2 {
            return Err(ConfigError::CntrMinBelowTwo(self.cntr_min));
        }
        if self.cntr_min > self.cntr_max {
            return Err(ConfigError::CntrMinExceedsCntrMax {
                min: self.cntr_min,
                max: self.cntr_max,
            });
        }
        if self.max_offset == 0 {
            return Err(ConfigError::ZeroMaxOffset);
        }
        if self.numa_nodes == 0 {
            return Err(ConfigError::ZeroNumaNodes);
        }
        Ok(())
    }

    /// Applies one `key = value` override. Accepts the long field names and
    /// the short upper-case aliases (`HLS`, `CNTR_MIN`, ...).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let num = || value.parse::<usize>().map_err(|_| bad());
        match key.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "heap_segment_capacity" | "hls" => self.heap_segment_capacity = num()?,
            "threads" => self.threads = num()?,
            "cntr_min" => self.cntr_min = num()?,
            "cntr_max" => self.cntr_max = num()?,
            "max_offset" => self.max_offset = num()?,
            "numa_nodes" | "numa" => self.numa_nodes = num()?,
            "mode" | "helping" => self.mode = value.parse()?,
            "instrumentation" => {
                self.instrumentation = match value {
                    "1" | "true" | "on" | "yes" => true,
                    "0" | "false" | "off" | "no" => false,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.trim().to_string())),
        }
        Ok(())
    }

    /// Applies a small `key = value` text file on top of `self`. Blank lines
    /// and `#` comments are ignored. The result is not validated.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipqConfig::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PipqConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hls={} threads={} cntr_min={} cntr_max={} max_offset={} numa_nodes={} mode={:?} instrumentation={}",
            self.heap_segment_capacity,
            self.threads,
            self.cntr_min,
            self.cntr_max,
            self.max_offset,
            self.numa_nodes,
            self.mode,
            self.instrumentation
        )
    }
}

/// Which branch of the insert algorithm ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertPath {
    /// Worker heap only.
    Fast,
    /// Leader list, counter incremented.
    Slower,
    /// Leader list, then the thread's largest leader element demoted to its heap.
    Slowest,
}

/// Tallies of insert paths, per thread or summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PathCounters {
    pub fast: u64,
    pub slower: u64,
    pub slowest: u64,
}

impl PathCounters {
    pub fn total(&self) -> u64 {
        self.fast + self.slower + self.slowest
    }

    pub fn record(&mut self, path: InsertPath) {
        match path {
            InsertPath::Fast => self.fast += 1,
            InsertPath::Slower => self.slower += 1,
            InsertPath::Slowest => self.slowest += 1,
        }
    }

    /// `(fast, slower, slowest)` as fractions of all inserts; zeros when empty.
    pub fn fractions(&self) -> (f64, f64, f64) {
        let t = self.total();
        if t == 0 {
            return (0.0, 0.0, 0.0);
        }
        let t = t as f64;
        (
            self.fast as f64 / t,
            self.slower as f64 / t,
            self.slowest as f64 / t,
        )
    }
}

impl std::ops::AddAssign for PathCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.fast += rhs.fast;
        self.slower += rhs.slower;
        self.slowest += rhs.slowest;
    }
}
