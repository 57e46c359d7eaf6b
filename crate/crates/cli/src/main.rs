//! `pipq` command-line entry point: benchmarks, SSSP, linearizability and
//! stress campaigns, and structural audits.

mod output;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pipq::bench::{self, CoarseLockPq, MetricsReport, WorkloadSpec, DESK_KEY_MAX};
use pipq::sssp::{self, LoadOptions, WeightMode};
use pipq::verify::{self, HistorySpec, Verdict};
use pipq::{HelpingMode, NumaSpec, Pipq, PipqConfig, TopologyMap};

use output::{Format, Record, Sink};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "pipq", version, about = "NUMA-aware concurrent priority queue toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Worker threads (defaults to the config's `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// key=value config file, applied after $PIPQ_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set cntr_max=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// NUMA layout: auto, off, or synthetic:<n>.
    #[arg(long, global = true, value_name = "SPEC")]
    numa: Option<NumaSpec>,
    /// Write results here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format (table on a terminal, csv otherwise).
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Timed mixed insert/delete-min workload.
    BenchMixed {
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(0..=100))]
        insert_pct: u32,
        #[command(flatten)]
        timing: Timing,
    },
    /// Timed run with dedicated inserter and deleter threads.
    BenchDesignated {
        /// Fraction of threads that only delete.
        #[arg(long, default_value_t = 0.5)]
        delete_fraction: f64,
        #[command(flatten)]
        timing: Timing,
    },
    /// Insert N keys, then delete M.
    BenchPhased {
        #[arg(long, default_value_t = 5_000_000)]
        inserts: u64,
        #[arg(long, default_value_t = 500_000)]
        deletes: u64,
        #[arg(long, default_value_t = DESK_KEY_MAX)]
        key_max: u64,
        #[arg(long, value_enum, default_value_t = QueueKind::Pipq)]
        queue: QueueKind,
        /// Track every pair and audit conservation afterwards.
        #[arg(long)]
        audit: bool,
    },
    /// Parallel single-source shortest paths over an edge list.
    Sssp {
        /// Whitespace-separated edge list; `#` lines are comments.
        #[arg(long)]
        graph: PathBuf,
        /// Source node id as written in the file.
        #[arg(long, default_value_t = 0)]
        source: u64,
        /// Add the reverse of every edge.
        #[arg(long)]
        undirected: bool,
        /// Weights for edges without one: unit or random:<seed>.
        #[arg(long, default_value = "unit")]
        weights: WeightMode,
        #[arg(long, value_enum, default_value_t = QueueKind::Pipq)]
        queue: QueueKind,
        /// Compare distances with sequential Dijkstra.
        #[arg(long)]
        verify: bool,
    },
    /// Record random concurrent histories and check them for linearizability.
    Lincheck {
        /// Operations per thread in each history.
        #[arg(long, default_value_t = 24)]
        ops: usize,
        #[arg(long, default_value_t = 500)]
        iters: u64,
        /// Keys are drawn from [0, key-range).
        #[arg(long, default_value_t = 12)]
        key_range: u64,
        /// Search states explored per history before giving up.
        #[arg(long, default_value_t = 20_000_000)]
        budget: u64,
    },
    /// Mixed campaigns followed by quiescent audits with conservation ledgers.
    Stress {
        /// Operations per campaign, split over the threads.
        #[arg(long, default_value_t = 1_000_000)]
        ops: u64,
        #[arg(long, default_value_t = 20)]
        campaigns: u64,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(0..=100))]
        insert_pct: u32,
        #[arg(long, default_value_t = DESK_KEY_MAX)]
        key_max: u64,
    },
    /// Run one mixed workload and report the quiescent structure audit.
    Audit {
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u32).range(0..=100))]
        insert_pct: u32,
        #[arg(long, default_value_t = 1000)]
        key_max: u64,
        /// Also print the leader list.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct Timing {
    /// Timed seconds per trial.
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    /// Untimed warmup seconds before each trial.
    #[arg(long, default_value_t = 1.0)]
    warmup: f64,
    #[arg(long, default_value_t = 3)]
    trials: u32,
    /// Keys are uniform in [1, key-max].
    #[arg(long, default_value_t = DESK_KEY_MAX)]
    key_max: u64,
    /// Elements inserted before the warmup.
    #[arg(long, default_value_t = 0)]
    prefill: u64,
    /// Time every k-th operation.
    #[arg(long, default_value_t = 64)]
    latency_every: u32,
    #[arg(long, value_enum, default_value_t = QueueKind::Pipq)]
    queue: QueueKind,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum QueueKind {
    Pipq,
    /// Binary heap behind one mutex.
    Coarse,
}

/// An error that maps to an exit code.
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.to_string(),
    }
}

/// Resolved settings shared by all subcommands.
struct Env {
    cfg: PipqConfig,
    topo: TopologyMap,
    seed: u64,
    sink: Sink,
}

impl Env {
    fn queue(&self) -> Pipq {
        Pipq::with_topology(self.cfg.clone(), self.topo.clone()).expect("validated config")
    }

    fn threads(&self) -> usize {
        self.cfg.threads
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pipq: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn resolve(common: &Common, cmd: &Command) -> Result<Env, Failure> {
    let mut cfg = PipqConfig::default();
    if matches!(cmd, Command::BenchDesignated { .. }) {
        cfg.mode = HelpingMode::OnInsert;
    }
    let mut files = Vec::new();
    if let Some(p) = std::env::var_os("PIPQ_CONFIG").filter(|p| !p.is_empty()) {
        files.push(PathBuf::from(p));
    }
    files.extend(common.config.clone());
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| usage(format!("cannot read config {}: {e}", f.display())))?;
        cfg.apply_kv_text(&text).map_err(|e| usage(format!("{}: {e}", f.display())))?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(usage)?;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    let topo = match common.numa {
        Some(spec) => TopologyMap::from_spec(spec, cfg.threads),
        None if cfg.numa_nodes > 1 => TopologyMap::synthetic(cfg.numa_nodes, cfg.threads),
        None => TopologyMap::single(cfg.threads),
    };
    cfg.numa_nodes = topo.numa_nodes;
    cfg.validate().map_err(usage)?;

    let format = common.format.unwrap_or_else(|| {
        if common.out.is_none() && std::io::stdout().is_terminal() {
            Format::Table
        } else {
            Format::Csv
        }
    });
    let sink = Sink::open(common.out.as_deref(), format).map_err(usage)?;
    eprintln!("# pipq {} seed={} topology: {}", command_name(cmd), common.seed, topo);
    eprintln!("# config: {cfg}");
    Ok(Env {
        cfg,
        topo,
        seed: common.seed,
        sink,
    })
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::BenchMixed { .. } => "bench-mixed",
        Command::BenchDesignated { .. } => "bench-designated",
        Command::BenchPhased { .. } => "bench-phased",
        Command::Sssp { .. } => "sssp",
        Command::Lincheck { .. } => "lincheck",
        Command::Stress { .. } => "stress",
        Command::Audit { .. } => "audit",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut env = resolve(&cli.common, &cli.cmd)?;
    match cli.cmd {
        Command::BenchMixed { insert_pct, timing } => {
            let spec = timed_spec(WorkloadSpec::mixed(insert_pct), &timing, env.seed)?;
            let report = match timing.queue {
                QueueKind::Pipq => bench::run_mixed(|| env.queue(), &spec, env.threads()),
                QueueKind::Coarse => bench::run_mixed(CoarseLockPq::new, &spec, env.threads()),
            }
            .map_err(usage)?;
            emit_report(&mut env, &report)
        }
        Command::BenchDesignated { delete_fraction, timing } => {
            let spec = timed_spec(WorkloadSpec::designated(delete_fraction), &timing, env.seed)?;
            let report = match timing.queue {
                QueueKind::Pipq => bench::run_designated(|| env.queue(), &spec, env.threads()),
                QueueKind::Coarse => bench::run_designated(CoarseLockPq::new, &spec, env.threads()),
            }
            .map_err(usage)?;
            emit_report(&mut env, &report)
        }
        Command::BenchPhased {
            inserts,
            deletes,
            key_max,
            queue,
            audit,
        } => bench_phased(&mut env, inserts, deletes, key_max, queue, audit),
        Command::Sssp {
            graph,
            source,
            undirected,
            weights,
            queue,
            verify,
        } => run_sssp(&mut env, &graph, source, LoadOptions { undirected, weights }, queue, verify),
        Command::Lincheck {
            ops,
            iters,
            key_range,
            budget,
        } => lincheck(&mut env, ops, iters, key_range, budget),
        Command::Stress {
            ops,
            campaigns,
            insert_pct,
            key_max,
        } => stress(&mut env, ops, campaigns, insert_pct, key_max),
        Command::Audit {
            ops,
            insert_pct,
            key_max,
            dump,
        } => audit(&mut env, ops, insert_pct, key_max, dump),
    }
}

fn timed_spec(base: WorkloadSpec, t: &Timing, seed: u64) -> Result<WorkloadSpec, Failure> {
    let secs = |v: f64, name: &str| {
        if v.is_finite() && v >= 0.0 {
            Ok(Duration::from_secs_f64(v))
        } else {
            Err(usage(format!("--{name} must be a non-negative number of seconds")))
        }
    };
    Ok(WorkloadSpec {
        duration: secs(t.seconds, "seconds")?,
        warmup: secs(t.warmup, "warmup")?,
        trials: t.trials,
        key_max: t.key_max.max(1),
        seed,
        prefill: t.prefill,
        latency_every: t.latency_every,
        ..base
    })
}

fn emit_report(env: &mut Env, r: &MetricsReport) -> Result<(), Failure> {
    env.sink.report(r).map_err(usage)
}

fn bench_phased(env: &mut Env, inserts: u64, deletes: u64, key_max: u64, queue: QueueKind, audit: bool) -> Result<(), Failure> {
    let spec = WorkloadSpec {
        key_max: key_max.max(1),
        seed: env.seed,
        ..WorkloadSpec::phased(inserts, deletes)
    };
    let threads = env.threads();
    match queue {
        QueueKind::Coarse => {
            let q = CoarseLockPq::new();
            let out = bench::run_phased(&q, &spec, threads, false).map_err(usage)?;
            emit_report(env, &out.report)
        }
        QueueKind::Pipq => {
            let mut q = env.queue();
            let out = bench::run_phased(&q, &spec, threads, audit).map_err(usage)?;
            emit_report(env, &out.report)?;
            if let Some(ledger) = out.ledger {
                let report = verify::audit_quiescent(&mut q, Some(&ledger));
                eprintln!("{report}");
                if !report.is_ok() {
                    return Err(Failure {
                        code: EXIT_VERIFY,
                        msg: "phased run failed its audit".into(),
                    });
                }
            }
            Ok(())
        }
    }
}

fn run_sssp(env: &mut Env, path: &std::path::Path, source: u64, opts: LoadOptions, queue: QueueKind, check: bool) -> Result<(), Failure> {
    let t0 = Instant::now();
    let g = sssp::load_edge_list(path, opts).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let load_secs = t0.elapsed().as_secs_f64();
    let src = g
        .index_of(source)
        .ok_or_else(|| usage(format!("source {source} does not appear in {}", path.display())))?;
    let threads = env.threads();
    let r = match queue {
        QueueKind::Pipq => sssp::sssp_parallel(&g, src, threads, &env.queue()),
        QueueKind::Coarse => sssp::sssp_parallel(&g, src, threads, &CoarseLockPq::new()),
    };
    let matches = check.then(|| r.dist == sssp::dijkstra(&g, src));
    let mut rec = Record::new();
    rec.push("graph", path.display().to_string());
    rec.push("nodes", g.node_count());
    rec.push("edges", g.edge_count());
    rec.push("queue", format!("{queue:?}").to_lowercase());
    rec.push("threads", threads);
    rec.push("source", source);
    rec.push("load_seconds", load_secs);
    rec.push("seconds", r.seconds);
    rec.push("reached", r.reached);
    rec.push("processed", r.processed);
    rec.push("stale", r.stale);
    rec.push("work_inflation", r.work_inflation());
    rec.push("checksum", r.checksum);
    if let Some(m) = matches {
        rec.push("dijkstra_match", m);
    }
    env.sink.record(&rec).map_err(usage)?;
    if matches == Some(false) {
        return Err(Failure {
            code: EXIT_VERIFY,
            msg: "distances differ from sequential Dijkstra".into(),
        });
    }
    Ok(())
}

fn lincheck(env: &mut Env, ops: usize, iters: u64, key_range: u64, budget: u64) -> Result<(), Failure> {
    let threads = env.threads();
    if threads * ops > verify::MAX_CHECK_OPS {
        return Err(usage(format!(
            "{threads} threads x {ops} ops exceeds the checker limit of {} operations",
            verify::MAX_CHECK_OPS
        )));
    }
    let t0 = Instant::now();
    let (mut bad, mut over, mut overlapping) = (0u64, 0u64, 0u64);
    for i in 0..iters {
        let seed = env.seed.wrapping_mul(1_000_003).wrapping_add(i);
        let q = env.queue();
        let spec = HistorySpec {
            key_range,
            ..HistorySpec::new(ops, seed)
        };
        let history = verify::record_history(&q, &spec);
        let list = history.operations().map_err(|e| Failure {
            code: EXIT_VERIFY,
            msg: format!("malformed history: {e}"),
        })?;
        overlapping += verify::has_overlap(&list) as u64;
        match verify::check_linearizable(&list, budget) {
            Verdict::Linearizable(_) => {}
            Verdict::BudgetExceeded { explored } => {
                over += 1;
                log::warn!("history {i} (seed {seed}) undecided after {explored} states");
            }
            v => {
                bad += 1;
                if bad == 1 {
                    eprintln!("history {i} (seed {seed}) is not linearizable: {v:?}");
                    eprint!("{}", history.to_text());
                }
            }
        }
    }
    let mut rec = Record::new();
    rec.push("threads", threads);
    rec.push("ops_per_thread", ops);
    rec.push("histories", iters);
    rec.push("overlapping", overlapping);
    rec.push("not_linearizable", bad);
    rec.push("over_budget", over);
    rec.push("seconds", t0.elapsed().as_secs_f64());
    env.sink.record(&rec).map_err(usage)?;
    if bad + over > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("{bad} non-linearizable and {over} undecided histories"),
        });
    }
    Ok(())
}

fn stress(env: &mut Env, ops: u64, campaigns: u64, insert_pct: u32, key_max: u64) -> Result<(), Failure> {
    let mut failed = 0;
    let mut rows = Vec::new();
    for c in 0..campaigns {
        let mut q = env.queue();
        let t0 = Instant::now();
        let ledger = verify::stress_campaign(&q, ops, insert_pct, key_max, env.seed.wrapping_add(c));
        let secs = t0.elapsed().as_secs_f64();
        let report = verify::audit_quiescent(&mut q, Some(&ledger));
        if !report.is_ok() {
            failed += 1;
            eprintln!("campaign {c}: {report}");
        }
        let mut rec = Record::new();
        rec.push("campaign", c);
        rec.push("threads", env.threads());
        rec.push("ops", ops);
        rec.push("inserted", ledger.insert_count());
        rec.push("deleted", ledger.delete_count());
        rec.push("residual", report.residual());
        rec.push("violations", report.violations.len());
        rec.push("seconds", secs);
        rows.push(rec);
    }
    env.sink.records(&rows).map_err(usage)?;
    if failed > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("{failed} of {campaigns} campaigns failed their audit"),
        });
    }
    Ok(())
}

fn audit(env: &mut Env, ops: u64, insert_pct: u32, key_max: u64, dump: bool) -> Result<(), Failure> {
    let mut q = env.queue();
    let ledger = verify::stress_campaign(&q, ops, insert_pct, key_max, env.seed);
    if dump {
        eprintln!("leader list: {}", q.dump_leader());
    }
    let report = verify::audit_quiescent(&mut q, Some(&ledger));
    let mut rec = Record::new();
    rec.push("threads", env.threads());
    rec.push("ops", ops);
    rec.push("active_nodes", report.active_nodes);
    rec.push("deleted_nodes", report.deleted_nodes);
    rec.push("heap_elements", report.heap_elements);
    rec.push("violations", report.violations.len());
    env.sink.record(&rec).map_err(usage)?;
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    if !report.is_ok() {
        return Err(Failure {
            code: EXIT_VERIFY,
            msg: "audit found violations".into(),
        });
    }
    Ok(())
}
