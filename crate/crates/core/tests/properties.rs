use pipq::bench::mixed_stream;
use pipq::sssp::{dijkstra, random_graph, sssp_parallel};
use pipq::verify::{audit_quiescent, stress_campaign, ConservationLedger, SeqPq};
use pipq::{HelpingMode, InsertPath, PathCounters, Pipq, PipqConfig, TopologyMap};
use proptest::prelude::*;

fn small_config(threads: usize) -> impl Strategy<Value = PipqConfig> {
    (2usize..6, 0usize..6, 1usize..5, 1usize..8, 1usize..3, any::<bool>()).prop_map(move |(min, extra, off, hls, nodes, ins)| PipqConfig {
        heap_segment_capacity: hls,
        threads,
        cntr_min: min,
        cntr_max: min + extra,
        max_offset: off,
        numa_nodes: nodes.min(threads),
        mode: if ins { HelpingMode::OnInsert } else { HelpingMode::OnDeleteMinWait },
        instrumentation: true,
    })
}

#[derive(Debug, Clone)]
enum Op {
    Insert(usize, u64),
    DeleteMin(usize),
}

fn ops(threads: usize, len: usize) -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(
        prop_oneof![
            3 => (0..threads, 0u64..40).prop_map(|(t, k)| Op::Insert(t, k)),
            2 => (0..threads).prop_map(Op::DeleteMin),
        ],
        0..len,
    )
}

proptest! {
    #[test]
    fn construction_succeeds_exactly_for_valid_configs(
        hls in 0usize..4, threads in 0usize..4, min in 0usize..6, max in 0usize..6, off in 0usize..3, nodes in 0usize..3,
    ) {
        let cfg = PipqConfig {
            heap_segment_capacity: hls,
            threads,
            cntr_min: min,
            cntr_max: max,
            max_offset: off,
            numa_nodes: nodes,
            ..PipqConfig::default()
        };
        let built = Pipq::new(cfg.clone());
        prop_assert_eq!(built.is_ok(), cfg.validate().is_ok());
        if let Ok(q) = built {
            prop_assert!(q.config().validate().is_ok());
        }
    }

    /// Operations issued one at a time through several handles behave like a
    /// sorted multiset, path counters are exact, and the quiescent state
    /// passes every structural audit.
    #[test]
    fn interleaved_handles_match_oracle(cfg in small_config(3), ops in ops(3, 200)) {
        let mut q = Pipq::new(cfg).unwrap();
        let mut oracle = SeqPq::new();
        let mut ledger = ConservationLedger::new();
        let mut tally = PathCounters::default();
        {
            let mut hs: Vec<_> = (0..3).map(|t| q.register_tid(t).unwrap()).collect();
            let mut prev = PathCounters::default();
            for (i, op) in ops.into_iter().enumerate() {
                match op {
                    Op::Insert(t, k) => {
                        let path: InsertPath = hs[t].insert(k, i as u64);
                        tally.record(path);
                        oracle.insert(k, i as u64);
                        ledger.inserted(k, i as u64);
                    }
                    Op::DeleteMin(t) => {
                        let got = hs[t].delete_min();
                        prop_assert_eq!(got.map(|p| p.0), oracle.min_key());
                        prop_assert!(oracle.accept_delete_min(got));
                        if let Some((k, v)) = got {
                            ledger.deleted(k, v);
                        }
                    }
                }
                let now = hs[0].queue().stats().paths;
                prop_assert!(now.fast >= prev.fast && now.slower >= prev.slower && now.slowest >= prev.slowest);
                prev = now;
            }
            prop_assert_eq!(hs[0].queue().stats().paths, tally);
        }
        let report = audit_quiescent(&mut q, Some(&ledger));
        prop_assert!(report.is_ok(), "{}", report);

        // monotone drain equal to the oracle's
        let mut h = q.register_tid(1).unwrap();
        while let Some(want) = oracle.min_key() {
            let got = h.delete_min();
            prop_assert_eq!(got.map(|p| p.0), Some(want));
            prop_assert!(oracle.accept_delete_min(got));
        }
        prop_assert_eq!(h.delete_min(), None);
    }

    #[test]
    fn threads_belong_to_exactly_their_own_node(nodes in 1usize..5, threads in 1usize..12) {
        let topo = TopologyMap::synthetic(nodes, threads);
        let mut seen = vec![0; threads];
        for n in 0..topo.numa_nodes {
            let members = topo.members(n);
            for (slot, &t) in members.iter().enumerate() {
                prop_assert_eq!(topo.node_of(t), n);
                prop_assert_eq!(topo.slot_of(t), slot);
                seen[t] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = (0..topo.numa_nodes).map(|n| topo.members(n).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        let q = Pipq::with_topology(PipqConfig::with_threads(threads), topo.clone()).unwrap();
        for t in 0..threads {
            prop_assert_eq!(q.register_tid(t).unwrap().numa_node(), topo.node_of(t));
        }
    }

    #[test]
    fn mixed_streams_are_reproducible(seed in any::<u64>(), tid in 0usize..8, pct in 0u32..=100) {
        let a: Vec<_> = mixed_stream(seed, 0, tid, pct, 1000).take(200).collect();
        let b: Vec<_> = mixed_stream(seed, 0, tid, pct, 1000).take(200).collect();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().flatten().all(|&k| (1..=1000).contains(&k)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sssp_distances_do_not_depend_on_thread_count(n in 2usize..200, density in 1usize..6, seed in any::<u64>()) {
        let g = random_graph(n, n * density, 50, seed);
        let want = dijkstra(&g, 0);
        for t in 1..=4 {
            let q = Pipq::new(PipqConfig::with_threads(t)).unwrap();
            let r = sssp_parallel(&g, 0, t, &q);
            prop_assert_eq!(&r.dist, &want);
            prop_assert!(r.processed >= r.reached as u64);
        }
    }

    /// Concurrent campaigns conserve the multiset, leave an audit-clean
    /// structure, and drain in order afterwards.
    #[test]
    fn concurrent_campaigns_conserve(
        threads in 2usize..6,
        cfg_seed in small_config(1),
        pct in 30u32..90,
        seed in any::<u64>(),
    ) {
        let cfg = PipqConfig { threads, numa_nodes: cfg_seed.numa_nodes.min(threads), ..cfg_seed };
        let mut q = Pipq::new(cfg).unwrap();
        let mut ledger = stress_campaign(&q, 20_000, pct, 500, seed);
        let report = audit_quiescent(&mut q, Some(&ledger));
        prop_assert!(report.is_ok(), "{}", report);

        let mut h = q.register_tid(0).unwrap();
        let mut last = 0;
        while let Some((k, v)) = h.delete_min() {
            prop_assert!(k >= last);
            last = k;
            ledger.deleted(k, v);
        }
        prop_assert_eq!(ledger.compare(std::iter::empty()), (0, 0));
    }
}
