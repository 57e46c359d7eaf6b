//! A two-level concurrent priority queue.
//!
//! Each thread owns a worker heap; the smallest few elements of every heap
//! are kept in a shared lock-free sorted list, and delete-min requests are
//! combined and served by one coordinator at a time.

pub mod bench;
pub mod config;
pub mod heap;
pub mod leader;
pub mod queue;
pub mod sssp;
pub mod topology;
pub mod verify;

pub use config::{ConfigError, HelpingMode, InsertPath, Key, PathCounters, PipqConfig, ThreadId, Value};
pub use queue::{BatchStats, Pipq, PipqHandle, QueueStats, QuiescentView, RegisterError};
pub use topology::{NumaSpec, Pinning, TopologyMap};
